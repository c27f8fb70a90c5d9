use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::model::LossReport;

use super::transport::MessageRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(alias = "split")]
    SplitLora,
    #[serde(alias = "centralized")]
    CenLora,
    #[serde(alias = "federated")]
    FedLora,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SplitLora => "splitlora",
            Mode::CenLora => "cenlora",
            Mode::FedLora => "fedlora",
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub round: u64,
    pub mean_ce: f64,
    pub ppl: f64,
    pub per_client_ce: Vec<f64>,
    /// Cumulative bytes per link.
    pub cum_bytes: BTreeMap<String, u64>,
    /// Cumulative FLOPs per entity.
    pub cum_flops: BTreeMap<String, u64>,
    pub sim_time_s: f64,
}

impl RoundRecord {
    pub fn total_bytes(&self) -> u64 {
        self.cum_bytes.values().sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.cum_flops.values().sum()
    }
}

/// Writes one JSON object per line.
pub fn write_records<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL log. Errors name the 1-based line that failed.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<RoundRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Adapter snapshot taken during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    /// `client{i}`, `server`, or `model`.
    pub label: String,
    pub set: AdapterSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCounts {
    pub client_side: usize,
    pub server_side: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalAdapters {
    /// Per-client sets (client-side sites for split learning, the full
    /// model otherwise). Empty for the centralized baseline.
    pub clients: Vec<AdapterSet>,
    pub server: Option<AdapterSet>,
    /// Adapters of the global model used for evaluation.
    pub global: AdapterSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub mode: Mode,
    pub records: Vec<RoundRecord>,
    pub aggregation_rounds: Vec<u64>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_adapters: FinalAdapters,
    pub initial_adapters: AdapterSet,
    /// Loss of the global model on the held-out set after training.
    pub eval: LossReport,
    pub trainable: TrainableCounts,
    pub messages: Vec<MessageRecord>,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        write_records(&self.records, out)
    }
}
