use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exitpipe::model::{ExitSpec, HeadKind};
use exitpipe::train::RunConfig;
use serde_json::Value;
use tempfile::TempDir;

fn exitpipe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitpipe")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn records(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.num_layers = 4;
    c.model.hidden_dim = 16;
    c.model.exits[0].layer = 1;
    c.model.exits[1].layer = 2;
    c.parallelism.global_batch = 8;
    c.training.seq_len = 8;
    c.training.steps = 4;
    c.inference.prompts = 4;
    c.inference.max_new_tokens = 6;
    c
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn help_lists_subcommands() {
    let dir = TempDir::new().unwrap();
    let text = ok(&exitpipe(&["--help"], dir.path()));
    for sub in ["train", "analyze-schedule", "generate", "verify"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn shipped_configs_are_the_default() {
    let shipped = RunConfig::load(&repo_file("configs/default.toml")).unwrap();
    assert_eq!(shipped, RunConfig::default());
    let doc = fs::read_to_string(repo_file("docs/config.md")).unwrap();
    let block = doc.split("```toml\n").nth(1).and_then(|s| s.split("```").next()).unwrap();
    assert_eq!(RunConfig::parse(block).unwrap(), RunConfig::default());
    let again = RunConfig::parse(&shipped.to_toml().unwrap()).unwrap();
    assert_eq!(again, shipped);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = RunConfig::default().to_toml().unwrap().replace("num_heads = 4", "num_heads = 4\nnum_experts = 2");
    assert!(RunConfig::parse(&text).is_err());
}

#[test]
fn zero_steps_write_header_only() {
    let dir = TempDir::new().unwrap();
    let mut c = small();
    c.training.steps = 0;
    write_config(dir.path(), "c.toml", &c);
    ok(&exitpipe(&["train", "--config", "c.toml", "--metrics", "out/m.jsonl", "--checkpoint", "out/m.ckpt"], dir.path()));
    let recs = records(&fs::read_to_string(dir.path().join("out/m.jsonl")).unwrap());
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["record"], "header");
    assert!(dir.path().join("out/m.ckpt").exists());
}

#[test]
fn training_is_reproducible_and_feeds_generate() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "c.toml", &small());
    for name in ["a", "b"] {
        let (m, k) = (format!("{name}.jsonl"), format!("{name}.ckpt"));
        ok(&exitpipe(&["train", "--config", "c.toml", "--metrics", &m, "--checkpoint", &k], dir.path()));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(fs::read(dir.path().join("a.ckpt")).unwrap(), fs::read(dir.path().join("b.ckpt")).unwrap());
    let steps = records(&String::from_utf8(a).unwrap());
    assert_eq!(steps.len(), 5);
    assert_eq!(steps[1]["loss"].as_array().unwrap().len(), 3);

    let gen = |threshold: &str| {
        ok(&exitpipe(&["generate", "--checkpoint", "a.ckpt", "--config", "c.toml", "--prompt", "1,2 3", "--threshold", threshold], dir.path()))
    };
    let low = gen("0.2");
    assert_eq!(low, gen("0.2"), "generation is deterministic");
    let summaries: Vec<Value> = records(&low).into_iter().filter(|r| r["record"] == "summary").collect();
    assert_eq!(summaries.len(), 2);
    assert_eq!(summaries[0]["tokens"], summaries[1]["tokens"]);
    assert!(summaries.iter().all(|s| s["kv_complete"] == true));
    let full = records(&gen("1"));
    assert!(full.iter().filter(|r| r["record"] == "summary").all(|s| s["early_exits"] == 0));

    let cmp = records(&ok(&exitpipe(&["generate", "--checkpoint", "a.ckpt", "--config", "c.toml", "--compare"], dir.path())));
    assert_eq!(cmp.len(), 4);
    assert!(cmp.iter().all(|r| r["record"] == "threshold" && r["max_token_speedup"].as_f64().unwrap() <= 4.0));

    let bad = exitpipe(&["generate", "--checkpoint", "a.ckpt", "--prompt", "1 x"], dir.path());
    assert!(!bad.status.success());
    let missing = exitpipe(&["generate", "--checkpoint", "nope.ckpt", "--prompt", "1"], dir.path());
    assert!(!missing.status.success());
}

fn analyze(dir: &Path, cfg: &RunConfig, extra: &[&str]) -> Vec<Value> {
    write_config(dir, "c.toml", cfg);
    let mut args = vec!["analyze-schedule", "--config", "c.toml", "--out-dir", "sched"];
    args.extend_from_slice(extra);
    ok(&exitpipe(&args, dir));
    records(&fs::read_to_string(dir.join("sched/summary.jsonl")).unwrap())
}

fn max(v: &Value) -> f64 {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).fold(0.0, f64::max)
}

#[test]
fn analyze_reports_table_deltas() {
    let dir = TempDir::new().unwrap();
    let rows = analyze(dir.path(), &RunConfig::default(), &[]);
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["standard", "eager-exit", "deferred-exit", "deferred-reordered", "fill"]);
    for n in &names {
        assert!(dir.path().join(format!("sched/{n}.svg")).exists());
        assert!(dir.path().join(format!("sched/{n}.events.jsonl")).exists());
    }
    // exits on stages 2 and 3, DEFAULT_TIMES: k (f_ee + b_ee) = 2 * 3
    assert_eq!(rows[2]["span_delta"], 6.0);
    assert_eq!(max(&rows[2]["peak_memory"]), max(&rows[0]["peak_memory"]));

    let mut first = RunConfig::default();
    first.model.exits.insert(0, ExitSpec::new(0, HeadKind::Minimalistic, 0.1));
    let with_first = analyze(dir.path(), &first, &["--variant", "deferred-exit"]);
    assert!(with_first[0]["peak_memory_delta"][0].as_f64().unwrap() > 0.0);

    let mut none = RunConfig::default();
    none.model.exits.clear();
    for row in analyze(dir.path(), &none, &["--variant", "standard", "--variant", "eager-exit", "--variant", "deferred-exit"]) {
        assert_eq!(row["span_delta"], 0.0);
        assert!(row["peak_memory_delta"].as_array().unwrap().iter().all(|d| d == 0.0));
    }
}

#[test]
fn analyze_rejects_bad_variants() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "c.toml", &RunConfig::default());
    let out = exitpipe(&["analyze-schedule", "--config", "c.toml", "--variant", "sideways"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid variant"));
    let missing = exitpipe(&["analyze-schedule", "--config", "absent.toml"], dir.path());
    assert!(!missing.status.success());
}

#[test]
fn verify_selected_criteria() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "c.toml", &RunConfig::default());
    let recs = records(&ok(&exitpipe(&["verify", "--config", "c.toml", "--only", "2,3,5"], dir.path())));
    assert_eq!(recs.len(), 4);
    assert!(recs[..3].iter().all(|r| r["record"] == "criterion" && r["passed"] == true));
    assert_eq!(recs[3]["passed"], true);
    let out = exitpipe(&["verify", "--only", "9"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_catches_wrong_rescale() {
    let dir = TempDir::new().unwrap();
    let mut c = RunConfig::default();
    c.training.rescale_fill = false;
    write_config(dir.path(), "c.toml", &c);
    let out = exitpipe(&["verify", "--config", "c.toml", "--only", "6"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let recs = records(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(recs[0]["passed"], false);
    assert_eq!(recs[1]["failed"], serde_json::json!([6]));
}

#[test]
fn single_stage_pipeline_checks_pass_trivially() {
    let dir = TempDir::new().unwrap();
    let mut c = small();
    c.parallelism.stages = 1;
    c.training.steps = 2;
    write_config(dir.path(), "c.toml", &c);
    let recs = records(&ok(&exitpipe(&["verify", "--config", "c.toml", "--only", "4,7"], dir.path())));
    assert!(recs.iter().all(|r| r["passed"] == true), "{recs:?}");
    assert!(recs[1]["detail"].as_str().unwrap().contains("speedup 1.0000 of 1"));
}
