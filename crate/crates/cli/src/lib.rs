//! Commands behind the `splitlora` binary: run an experiment from a JSON
//! config, tabulate a finished run, and compare runs against a loss
//! threshold.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use splitlora::lora::write_checkpoint;
use splitlora::protocol::{read_records, run, Mode, RoundRecord, TrainableCounts, TrainingConfig, TrainingLog};

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const LOG_FILE: &str = "log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CSV_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: EXIT_INVALID, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// A training config plus the two keys that only matter to the runner.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub output_dir: Option<PathBuf>,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Parses a config document. `mode` defaults to `splitlora`; every other
    /// key must belong to the training config.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::invalid(format!("malformed config: {e}")))?;
        let obj = value.as_object_mut().ok_or_else(|| CliError::invalid("config must be a JSON object"))?;
        let mode = match obj.remove("mode") {
            Some(v) => serde_json::from_value(v).map_err(|e| CliError::invalid(format!("mode: {e}")))?,
            None => Mode::SplitLora,
        };
        let output_dir = match obj.remove("output_dir") {
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => return Err(CliError::invalid(format!("output_dir must be a string, got {other}"))),
            None => None,
        };
        let training: TrainingConfig = serde_json::from_value(value).map_err(|e| CliError::invalid(format!("invalid config: {e}")))?;
        Ok(Self { mode, output_dir, training })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The resolved document, defaults filled in.
    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(&self.training).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.insert("mode".into(), Value::String(self.mode.name().into()));
        if let Some(dir) = &self.output_dir {
            obj.insert("output_dir".into(), Value::String(dir.display().to_string()));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub rounds: u64,
    /// Training objective of the last round; absent when no round ran.
    pub final_mean_ce: Option<f64>,
    pub final_ppl: Option<f64>,
    /// Global model on the held-out set.
    pub eval_mean_ce: f64,
    pub eval_ppl: f64,
    pub bytes_per_link: BTreeMap<String, u64>,
    pub flops_per_entity: BTreeMap<String, u64>,
    pub total_bytes: u64,
    pub total_flops: u64,
    pub sim_time_s: f64,
    pub trainable: TrainableCounts,
}

impl RunSummary {
    pub fn from_log(log: &TrainingLog) -> Self {
        let last = log.last();
        let bytes_per_link = last.map(|r| r.cum_bytes.clone()).unwrap_or_default();
        let flops_per_entity = last.map(|r| r.cum_flops.clone()).unwrap_or_default();
        Self {
            mode: log.mode,
            rounds: log.records.len() as u64,
            final_mean_ce: last.map(|r| r.mean_ce),
            final_ppl: last.map(|r| r.ppl),
            eval_mean_ce: log.eval.mean_ce,
            eval_ppl: log.eval.ppl,
            total_bytes: bytes_per_link.values().sum(),
            total_flops: flops_per_entity.values().sum(),
            bytes_per_link,
            flops_per_entity,
            sim_time_s: last.map(|r| r.sim_time_s).unwrap_or(0.0),
            trainable: log.trainable,
        }
    }

    /// Whether the summary agrees with the last log record.
    pub fn matches(&self, records: &[RoundRecord]) -> bool {
        match records.last() {
            None => self.rounds == 0 && self.total_bytes == 0 && self.total_flops == 0,
            Some(r) => {
                self.rounds == records.len() as u64
                    && self.final_mean_ce == Some(r.mean_ce)
                    && self.bytes_per_link == r.cum_bytes
                    && self.flops_per_entity == r.cum_flops
                    && self.sim_time_s == r.sim_time_s
            }
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| io_err(path, e))?;
    f.write_all(b"\n").map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

fn write_set(path: &Path, set: &splitlora::lora::AdapterSet) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write_checkpoint(&mut f, set).map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, log: &TrainingLog) -> CliResult<RunSummary> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt).map_err(|e| io_err(&ckpt, e))?;
    write_json(&dir.join(CONFIG_FILE), &config.to_json())?;
    let path = dir.join(LOG_FILE);
    let mut f = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    log.write_jsonl(&mut f).map_err(|e| io_err(&path, e))?;
    f.flush().map_err(|e| io_err(&path, e))?;
    let summary = RunSummary::from_log(log);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    for c in &log.checkpoints {
        write_set(&ckpt.join(format!("round{:05}_{}.slra", c.round, c.label)), &c.set)?;
    }
    write_set(&ckpt.join("final_global.slra"), &log.final_adapters.global)?;
    if let Some(server) = &log.final_adapters.server {
        write_set(&ckpt.join("final_server.slra"), server)?;
    }
    for (i, set) in log.final_adapters.clients.iter().enumerate() {
        write_set(&ckpt.join(format!("final_client{i}.slra")), set)?;
    }
    Ok(summary)
}

/// `run`: trains per the config and writes the run directory. Nothing is
/// written unless the config is valid and training succeeds.
pub fn cmd_run(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<PathBuf> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        config.training.seed = s;
    }
    config.training.validate().map_err(|e| CliError::invalid(e.to_string()))?;
    let dir = match (out, &config.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => PathBuf::from(format!("runs/{}-seed{}", config.mode.name(), config.training.seed)),
    };
    let log = run(&config.training, config.mode).map_err(|e| match e {
        splitlora::Error::Config(m) => CliError::invalid(m),
        other => CliError::runtime(other.to_string()),
    })?;
    let summary = write_run(&dir, &config, &log)?;
    log::info!(
        "{} rounds, eval mean_ce {:.6}, {} bytes, {:.6} s simulated -> {}",
        summary.rounds,
        summary.eval_mean_ce,
        summary.total_bytes,
        summary.sim_time_s,
        dir.display()
    );
    Ok(dir)
}

/// A finished run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
}

pub fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    if !dir.is_dir() {
        return Err(CliError::invalid(format!("{} is not a directory", dir.display())));
    }
    let log_path = dir.join(LOG_FILE);
    let f = File::open(&log_path).map_err(|e| CliError::invalid(format!("{}: {e}", log_path.display())))?;
    let records = read_records(BufReader::new(f)).map_err(|e| CliError::invalid(format!("{}: {e}", log_path.display())))?;
    let sum_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&sum_path).map_err(|e| CliError::invalid(format!("{}: {e}", sum_path.display())))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", sum_path.display())))?;
    if !summary.matches(&records) {
        return Err(CliError::invalid(format!("{} disagrees with {}", sum_path.display(), log_path.display())));
    }
    Ok(LoadedRun { dir: dir.to_path_buf(), records, summary })
}

/// `report`: prints the per-round table and writes `summary.csv`.
pub fn cmd_report(dir: &Path, out: &mut impl Write) -> CliResult<()> {
    let loaded = load_run(dir)?;
    let csv_path = dir.join(CSV_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    w.write_record(["round", "mean_ce", "ppl", "cum_bytes", "sim_time_s"]).map_err(|e| io_err(&csv_path, e))?;
    let print = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(|e| CliError::runtime(e.to_string()));
    print(out, format!("{:>6} {:>12} {:>12} {:>14} {:>14}", "round", "mean_ce", "ppl", "cum_bytes", "sim_time_s"))?;
    for r in &loaded.records {
        let bytes = r.total_bytes();
        w.write_record([r.round.to_string(), r.mean_ce.to_string(), r.ppl.to_string(), bytes.to_string(), r.sim_time_s.to_string()])
            .map_err(|e| io_err(&csv_path, e))?;
        print(out, format!("{:>6} {:>12.6} {:>12.4} {:>14} {:>14.6e}", r.round, r.mean_ce, r.ppl, bytes, r.sim_time_s))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;
    let s = &loaded.summary;
    print(
        out,
        format!(
            "{}: eval mean_ce {:.6} (ppl {:.4}), trainable {} client / {} server / {} total",
            s.mode.name(),
            s.eval_mean_ce,
            s.eval_ppl,
            s.trainable.client_side,
            s.trainable.server_side,
            s.trainable.total
        ),
    )
}

/// First record whose training loss is at or below `threshold`.
pub fn first_below(records: &[RoundRecord], threshold: f64) -> Option<&RoundRecord> {
    records.iter().find(|r| r.mean_ce <= threshold)
}

/// `compare`: final losses and time/bytes to reach `threshold`, one row per
/// run.
pub fn cmd_compare(dirs: &[PathBuf], threshold: f64, out: &mut impl Write) -> CliResult<()> {
    if dirs.len() < 2 {
        return Err(CliError::invalid("compare needs at least two run directories"));
    }
    if !threshold.is_finite() {
        return Err(CliError::invalid(format!("threshold must be finite, got {threshold}")));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    let mut lines = vec![format!(
        "{:<32} {:>10} {:>12} {:>12} {:>12} {:>16} {:>16}",
        "run", "mode", "final_ce", "final_ppl", "eval_ce", "time_to_thr_s", "bytes_to_thr"
    )];
    for r in &runs {
        let s = &r.summary;
        let hit = first_below(&r.records, threshold);
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        lines.push(format!(
            "{:<32} {:>10} {:>12} {:>12} {:>12.6} {:>16} {:>16}",
            r.dir.display(),
            s.mode.name(),
            opt(s.final_mean_ce),
            opt(s.final_ppl),
            s.eval_mean_ce,
            hit.map(|h| format!("{:.6e}", h.sim_time_s)).unwrap_or_else(|| "not reached".into()),
            hit.map(|h| h.total_bytes().to_string()).unwrap_or_else(|| "not reached".into()),
        ));
    }
    for l in lines {
        writeln!(out, "{l}").map_err(|e| CliError::runtime(e.to_string()))?;
    }
    Ok(())
}
