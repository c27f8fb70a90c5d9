//! Training configuration. Deserialized strictly: unknown keys are errors.
//!
//! | key | default |
//! |---|---|
//! | `clients` | 3 |
//! | `rounds` | 100 |
//! | `aggregation_interval` | 10 |
//! | `batch_size` | 8 |
//! | `lr_client`, `lr_server` | 0.0002 |
//! | `epochs` | unset (accepted and ignored) |
//! | `cut_layer` | 3 |
//! | `rank` | 4 |
//! | `alpha` | `rank` (scale 1) |
//! | `adapter_sigma` | 0.02 |
//! | `seed` | 0 |
//! | `checkpoint_every` | 0 (off) |
//! | `model` | vocab 64, seq_len 8, 12 transformer blocks of width 16, hidden 32 |
//! | `data` | `copy_next_token`, 1200 train / 200 eval samples, IID |
//! | `costs` | 35.6/284.8 TFLOP/s, 300/600 Mbit/s, 4-byte elements, 64-byte headers |

use serde::{Deserialize, Serialize};

use crate::costs::{validate_specs, ComputeSpec, LinkSpec, WireFormat};
use crate::data::{PartitionSpec, SyntheticTask};
use crate::error::{Error, Result};
use crate::lora::SiteId;
use crate::model::LayerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "d_clients")]
    pub clients: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_interval")]
    pub aggregation_interval: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr_client: f64,
    #[serde(default = "d_lr")]
    pub lr_server: f64,
    /// Accepted for compatibility with the algorithm's inputs; the round
    /// loop never uses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "d_cut")]
    pub cut_layer: usize,
    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "d_adapter_sigma")]
    pub adapter_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub costs: CostConfig,
}

fn d_clients() -> usize {
    3
}
fn d_rounds() -> usize {
    100
}
fn d_interval() -> usize {
    10
}
fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    0.0002
}
fn d_cut() -> usize {
    3
}
fn d_rank() -> usize {
    4
}
fn d_adapter_sigma() -> f64 {
    0.02
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    /// Standard deviation of the frozen weights.
    #[serde(default = "d_init_sigma")]
    pub init_sigma: f64,
    #[serde(default)]
    pub architecture: Architecture,
    /// Explicit adapter sites; default is every dense weight in every block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_sites: Option<Vec<SiteId>>,
}

fn d_vocab() -> usize {
    64
}
fn d_seq_len() -> usize {
    8
}
fn d_init_sigma() -> f64 {
    0.25
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Either an explicit layer list or a uniform stack shorthand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Architecture {
    Layers(Vec<LayerSpec>),
    Stack(StackSpec),
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Stack(StackSpec { width: 16, hidden: 32, blocks: 12, block: BlockKind::SimplifiedTransformerBlock })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[serde(alias = "transformer")]
    SimplifiedTransformerBlock,
    DenseTanh,
}

/// `embedding(width)`, `blocks` identical blocks, `output_head(width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    pub width: usize,
    #[serde(default)]
    pub hidden: usize,
    pub blocks: usize,
    #[serde(default = "d_block")]
    pub block: BlockKind,
}

fn d_block() -> BlockKind {
    BlockKind::SimplifiedTransformerBlock
}

impl Architecture {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Architecture::Layers(l) => l.clone(),
            Architecture::Stack(s) => stack(s.width, s.hidden, s.blocks, s.block),
        }
    }
}

/// Uniform stack of `blocks` blocks between an embedding and a head.
pub fn stack(width: usize, hidden: usize, blocks: usize, kind: BlockKind) -> Vec<LayerSpec> {
    let block = match kind {
        BlockKind::SimplifiedTransformerBlock => LayerSpec::SimplifiedTransformerBlock { dim: width, hidden },
        BlockKind::DenseTanh => LayerSpec::DenseTanh { input_dim: width, output_dim: width },
    };
    std::iter::once(LayerSpec::Embedding { dim: width })
        .chain(std::iter::repeat(block).take(blocks))
        .chain(std::iter::once(LayerSpec::OutputHead { dim: width }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_task")]
    pub task: SyntheticTask,
    #[serde(default = "d_train")]
    pub train_samples: usize,
    #[serde(default = "d_eval")]
    pub eval_samples: usize,
    #[serde(default = "d_partition")]
    pub partition: PartitionSpec,
    /// Every client replays client 0's batch schedule.
    #[serde(default)]
    pub shared_batch_schedule: bool,
}

fn d_task() -> SyntheticTask {
    SyntheticTask::CopyNextToken { topics: 4, stickiness: 0.9 }
}
fn d_train() -> usize {
    1200
}
fn d_eval() -> usize {
    200
}
fn d_partition() -> PartitionSpec {
    PartitionSpec::Iid
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub compute: ComputeSpec,
    #[serde(default)]
    pub links: LinkSpec,
    #[serde(default)]
    pub wire: WireFormat,
}

impl TrainingConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    /// Checks everything that can be checked without building the model.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if self.aggregation_interval == 0 {
            return bad("aggregation_interval must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, lr) in [("lr_client", self.lr_client), ("lr_server", self.lr_server)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0) || !a.is_finite() {
                return bad(format!("alpha must be finite and >= 0, got {a}"));
            }
        }
        if !(self.adapter_sigma >= 0.0) || !(self.model.init_sigma >= 0.0) {
            return bad("adapter_sigma and init_sigma must be >= 0".into());
        }
        let blocks = self.model.architecture.layers().len().saturating_sub(2);
        if self.cut_layer == 0 || self.cut_layer >= blocks {
            return bad(format!("cut_layer {} outside [1, {}]", self.cut_layer, blocks.saturating_sub(1)));
        }
        if self.data.eval_samples == 0 {
            return bad("eval_samples must be >= 1".into());
        }
        let needed = match self.data.partition {
            PartitionSpec::Replicate => self.batch_size,
            _ => self.batch_size * self.clients,
        };
        if self.data.train_samples < needed {
            return bad(format!(
                "train_samples {} cannot give {} clients a batch of {} each",
                self.data.train_samples, self.clients, self.batch_size
            ));
        }
        if let PartitionSpec::LabelSkew { concentration } = self.data.partition {
            if !(concentration > 0.0) {
                return bad(format!("concentration must be positive, got {concentration}"));
            }
        }
        validate_specs(&self.costs.compute, &self.costs.links)?;
        if self.costs.wire.bytes_per_element == 0 {
            return bad("bytes_per_element must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reference_setup() {
        let c = TrainingConfig::default();
        assert_eq!((c.clients, c.cut_layer, c.batch_size, c.rank), (3, 3, 8, 4));
        assert_eq!(c.lr_client, 0.0002);
        assert_eq!(c.model.architecture.layers().len(), 14);
        assert_eq!(c.costs.compute.client_flops_per_sec, 35.6e12);
        assert_eq!(c.costs.links.client_server_bps, 600e6);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"clinets": 3}"#).is_err());
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"model": {"vocabulary": 3}}"#).is_err());
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"data": {"partition": {"mode": "label_skew", "concentration": 1.0, "x": 1}}}"#)
            .is_err());
    }

    #[test]
    fn architecture_forms() {
        let c: TrainingConfig = serde_json::from_str(
            r#"{"cut_layer": 1, "model": {"architecture": [
                {"kind": "embedding", "dim": 8},
                {"kind": "dense_tanh", "input_dim": 8, "output_dim": 8},
                {"kind": "simplified_transformer_block", "dim": 8, "hidden": 4},
                {"kind": "output_head", "dim": 8}]}}"#,
        )
        .unwrap();
        assert_eq!(c.model.architecture.layers().len(), 4);
        c.validate().unwrap();
        let s: TrainingConfig = serde_json::from_str(r#"{"model": {"architecture": {"width": 8, "hidden": 8, "blocks": 24}}}"#).unwrap();
        assert_eq!(s.model.architecture.layers().len(), 26);
    }

    #[test]
    fn validation_errors() {
        let mut c = TrainingConfig::default();
        c.cut_layer = 12;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainingConfig::default();
        c.aggregation_interval = 0;
        assert!(c.validate().is_err());
        let mut c = TrainingConfig::default();
        c.lr_client = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainingConfig::default();
        c.data.train_samples = 10;
        assert!(c.validate().is_err());
    }
}
