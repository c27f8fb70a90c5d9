use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splitlora"));
    c.env("RUST_LOG", "warn");
    c
}

fn tiny(mode: &str, rounds: usize) -> Value {
    json!({
        "mode": mode,
        "clients": 2,
        "rounds": rounds,
        "aggregation_interval": 2,
        "batch_size": 2,
        "lr_client": 0.05,
        "lr_server": 0.05,
        "cut_layer": 1,
        "rank": 2,
        "checkpoint_every": 2,
        "model": {"vocab": 16, "seq_len": 4, "architecture": {"width": 8, "hidden": 8, "blocks": 2}},
        "data": {"train_samples": 20, "eval_samples": 6}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg("--config").arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_log_summary_and_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny("splitlora", 4));
    let out = tmp.path().join("run");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let last = &lines[3];
    assert_eq!(summary["bytes_per_link"], last["cum_bytes"]);
    assert_eq!(summary["flops_per_entity"], last["cum_flops"]);
    assert_eq!(summary["sim_time_s"], last["sim_time_s"]);
    assert_eq!(summary["final_mean_ce"], last["mean_ce"]);
    for name in ["final_global.slra", "final_server.slra", "final_client0.slra", "round00002_server.slra", "round00004_client1.slra"] {
        assert!(out.join("checkpoints").join(name).is_file(), "{name}");
    }
    let f = fs::File::open(out.join("checkpoints/final_global.slra")).unwrap();
    let set = splitlora::lora::read_checkpoint(std::io::BufReader::new(f)).unwrap();
    assert_eq!(splitlora::lora::count_trainable(&set), summary["trainable"]["total"].as_u64().unwrap() as usize);
}

#[test]
fn every_mode_runs() {
    let tmp = TempDir::new().unwrap();
    for mode in ["splitlora", "cenlora", "fedlora"] {
        let cfg = write_config(tmp.path(), &format!("{mode}.json"), &tiny(mode, 3));
        let o = run(&cfg, &tmp.path().join(mode), &[]);
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny("splitlora", 5));
    assert!(run(&cfg, &tmp.path().join("a"), &[]).status.success());
    assert!(run(&cfg, &tmp.path().join("b"), &[]).status.success());
    assert!(run(&cfg, &tmp.path().join("c"), &["--seed", "9"]).status.success());
    let a = fs::read(tmp.path().join("a/log.jsonl")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/log.jsonl")).unwrap());
    assert_ne!(a, fs::read(tmp.path().join("c/log.jsonl")).unwrap());
}

#[test]
fn invalid_config_exits_2_without_output() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"clients\": 2,").unwrap();
    let o = run(&bad, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let mut v = tiny("splitlora", 2);
    v["learning_rate"] = json!(0.1);
    let o = run(&write_config(tmp.path(), "unknown.json", &v), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let mut v = tiny("splitlora", 2);
    v["cut_layer"] = json!(2);
    assert_eq!(run(&write_config(tmp.path(), "cut.json", &v), &out, &[]).status.code(), Some(2));
    assert_eq!(run(&tmp.path().join("missing.json"), &out, &[]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn diverging_run_exits_3() {
    let tmp = TempDir::new().unwrap();
    let mut v = tiny("cenlora", 50);
    v["lr_client"] = json!(1e6);
    v["lr_server"] = json!(1e6);
    v["model"]["init_sigma"] = json!(3.0);
    let o = run(&write_config(tmp.path(), "c.json", &v), &tmp.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn report_tabulates_and_writes_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny("splitlora", 4));
    let out = tmp.path().join("run");
    assert!(run(&cfg, &out, &[]).status.success());
    let o = bin().args(["report", "--in"]).arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("round,mean_ce,ppl,cum_bytes,sim_time_s"));
}

#[test]
fn report_of_empty_run_is_header_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny("splitlora", 0));
    let out = tmp.path().join("run");
    assert!(run(&cfg, &out, &[]).status.success());
    assert!(bin().args(["report", "--in"]).arg(&out).status().unwrap().success());
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 1);
}

#[test]
fn corrupt_log_line_is_named() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny("splitlora", 3));
    let out = tmp.path().join("run");
    assert!(run(&cfg, &out, &[]).status.success());
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let mut lines: Vec<&str> = log.lines().collect();
    lines[1] = "{\"round\": 2, \"mean_ce\": oops";
    fs::write(out.join("log.jsonl"), lines.join("\n")).unwrap();
    let o = bin().args(["report", "--in"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    fs::remove_file(out.join("summary.json")).unwrap();
    assert_eq!(bin().args(["report", "--in"]).arg(&out).output().unwrap().status.code(), Some(2));
}

#[test]
fn compare_reports_thresholds() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny("splitlora", 4));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &[]).status.success());

    let o = bin().args(["compare", "--threshold", "100", "--in"]).arg(&a).arg(&b).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().skip(1).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);

    let o = bin().args(["compare", "--threshold", "0.0", "--in"]).arg(&a).arg(&b).output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("not reached"));

    let o = bin().args(["compare", "--threshold", "1", "--in"]).arg(&a).arg(tmp.path().join("nope")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dominating_run_reaches_threshold_first() {
    use splitlora::protocol::RoundRecord;
    use splitlora_cli::first_below;
    let mk = |ce: &[f64]| -> Vec<RoundRecord> {
        ce.iter()
            .enumerate()
            .map(|(i, &c)| RoundRecord {
                round: i as u64 + 1,
                mean_ce: c,
                ppl: c.exp(),
                per_client_ce: vec![c],
                cum_bytes: Default::default(),
                cum_flops: Default::default(),
                sim_time_s: (i + 1) as f64,
            })
            .collect()
    };
    let a = mk(&[3.0, 2.0, 1.0]);
    let b = mk(&[3.5, 2.5, 1.5]);
    for thr in [0.5, 1.2, 2.2, 3.2, 4.0] {
        let ta = first_below(&a, thr).map(|r| r.sim_time_s).unwrap_or(f64::INFINITY);
        let tb = first_below(&b, thr).map(|r| r.sim_time_s).unwrap_or(f64::INFINITY);
        assert!(ta <= tb, "threshold {thr}");
    }
}

#[test]
fn presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let c = splitlora_cli::RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        c.training.validate().unwrap();
        n += 1;
    }
    assert!(n >= 5);
}
