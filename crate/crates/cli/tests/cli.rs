use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn memoe(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memoe"));
    if let Some((sub, rest)) = args.split_first() {
        cmd.arg(sub).arg("--out").arg(out).args(rest);
    }
    cmd
        .env_remove("MEMOE_OUT")
        .output()
        .expect("spawn memoe")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = memoe(out, args);
    assert!(
        o.status.success(),
        "memoe {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(out: &Path, args: &[&str]) -> i32 {
    memoe(out, args).status.code().expect("exit code")
}

fn hash(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

const SMALL_MODEL: [&str; 10] = [
    "--d-model", "32", "--d-ff", "64", "--heads", "2", "--steps", "300", "--batch-size", "0",
];

fn exp(dir: &Path) -> PathBuf {
    dir.join("memoe")
}

/// Corpus and trained base shared by the read-only tests.
fn shared() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = TempDir::new().unwrap();
        ok(d.path(), &["gen-data", "--facts", "10"]);
        let mut args = vec!["train-base"];
        args.extend(SMALL_MODEL);
        ok(d.path(), &args);
        d
    })
    .path()
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dest = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_tree(&e.path(), &dest);
        } else {
            fs::copy(e.path(), dest).unwrap();
        }
    }
}

/// Fresh directory holding only the shared corpus and base.
fn private() -> TempDir {
    let d = TempDir::new().unwrap();
    for sub in ["corpus", "base"] {
        copy_tree(&exp(shared()).join(sub), &exp(d.path()).join(sub));
    }
    d
}

fn manifest(dir: &Path, run: &str) -> serde_json::Value {
    let run_dir = exp(dir).join("runs").join(run);
    let file = fs::read_dir(&run_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("run-"))
        .expect("run manifest");
    serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap()
}

#[test]
fn no_subcommand_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(d.path(), &[]), 2);
    assert_eq!(code(d.path(), &["gen-data"]), 2);
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    ok(a.path(), &["gen-data", "--facts", "12"]);
    ok(b.path(), &["gen-data", "--facts", "12"]);
    ok(c.path(), &["gen-data", "--facts", "12", "--seed", "7"]);
    let files = ["records.jsonl", "pretrain.txt", "gazetteer.tsv", "vocab.txt", "manifest.json"];
    for f in files {
        let p = |d: &TempDir| exp(d.path()).join("corpus").join(f);
        assert_eq!(hash(&p(&a)), hash(&p(&b)), "{f}");
    }
    let rec = |d: &TempDir| hash(&exp(d.path()).join("corpus/records.jsonl"));
    assert_ne!(rec(&a), rec(&c));
}

#[test]
fn gen_data_rejects_impossible_spec() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(d.path(), &["gen-data", "--facts", "0"]), 2);
}

#[test]
fn train_base_without_corpus_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(d.path(), &["train-base"]), 2);
}

#[test]
fn train_base_with_zero_steps_keeps_the_initialization() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen-data", "--facts", "6"]);
    ok(d.path(), &["train-base", "--steps", "0", "--d-model", "16", "--d-ff", "32", "--heads", "2"]);
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp(d.path()).join("base/train_log.json")).unwrap()).unwrap();
    assert_eq!(log["initial_loss"], log["final_loss"]);
    assert_eq!(log["losses"].as_array().unwrap().len(), 0);
}

#[test]
fn train_base_is_deterministic_and_learns() {
    let d = TempDir::new().unwrap();
    copy_tree(&exp(shared()).join("corpus"), &exp(d.path()).join("corpus"));
    let mut args = vec!["train-base"];
    args.extend(SMALL_MODEL);
    ok(d.path(), &args);
    let ckpt = |p: &Path| hash(&exp(p).join("base/base.ckpt"));
    assert_eq!(ckpt(d.path()), ckpt(shared()));
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp(shared()).join("base/train_log.json")).unwrap()).unwrap();
    let means: Vec<f64> = log["window_means"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
    assert!(log["final_loss"].as_f64().unwrap() < log["initial_loss"].as_f64().unwrap());
}

#[test]
fn edit_writes_every_artifact_and_is_deterministic() {
    let d = private();
    for name in ["one", "two"] {
        ok(d.path(), &["edit", "--batch-size", "5", "--steps", "60", "--run-name", name]);
    }
    let runs = exp(d.path()).join("runs");
    for f in ["adapter-batch-42.ckpt", "memoe.cfg", "metrics.csv", "experiment.json", "run-batch-42.json"] {
        assert!(runs.join("one").join(f).exists(), "{f}");
    }
    for f in ["adapter-batch-42.ckpt", "metrics.csv", "run-batch-42.json"] {
        assert_eq!(hash(&runs.join("one").join(f)), hash(&runs.join("two").join(f)), "{f}");
    }
    let m = manifest(d.path(), "one");
    assert_eq!(m["metrics"]["num_records"], 5);
    let base = hash(&exp(d.path()).join("base/base.ckpt"));
    assert_eq!(base, hash(&exp(shared()).join("base/base.ckpt")));
}

#[test]
fn edit_replays_a_saved_experiment() {
    let d = private();
    ok(d.path(), &["edit", "--batch-size", "4", "--steps", "30", "--experts", "3", "--run-name", "orig"]);
    let saved = exp(d.path()).join("runs/orig/experiment.json");
    ok(d.path(), &["edit", "--experiment", saved.to_str().unwrap(), "--run-name", "replay"]);
    let runs = exp(d.path()).join("runs");
    assert_eq!(
        hash(&runs.join("orig/adapter-batch-42.ckpt")),
        hash(&runs.join("replay/adapter-batch-42.ckpt"))
    );
}

#[test]
fn edit_flags_override_the_config_file() {
    let d = private();
    let cfg = d.path().join("adapter.cfg");
    fs::write(
        &cfg,
        "num_experts = 2\ntop_k = 1\ntarget_layer = 1\nlambda = 1\nnoise_scale = 0.01\naux_weight = 0.01\nrouting = token\nlr = 0.0002\nseed = 42\n",
    )
    .unwrap();
    ok(
        d.path(),
        &["edit", "--config", cfg.to_str().unwrap(), "--experts", "3", "--batch-size", "2", "--steps", "5", "--run-name", "x"],
    );
    let m = manifest(d.path(), "x");
    assert_eq!(m["memoe"]["num_experts"], 3);
    assert_eq!(m["memoe"]["routing"], "token");
}

#[test]
fn edit_rejects_invalid_configurations() {
    let d = private();
    let p = d.path();
    assert_eq!(code(p, &["edit", "--topk", "5", "--experts", "4"]), 2);
    assert_eq!(code(p, &["edit", "--layer", "0"]), 2);
    assert_eq!(code(p, &["edit", "--layer", "7"]), 2);
    assert_eq!(code(p, &["edit", "--routing", "telepathy"]), 2);
    assert_eq!(code(p, &["edit", "--mode", "parallel"]), 2);
    assert_eq!(code(p, &["edit", "--update-rule", "lbfgs"]), 2);
    assert_eq!(code(p, &["edit", "--batch-size", "0"]), 2);
    assert_eq!(code(p, &["edit", "--config", "/nonexistent/memoe.cfg"]), 2);
    assert!(!exp(p).join("runs").exists());
}

#[test]
fn edit_without_base_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen-data", "--facts", "4"]);
    assert_eq!(code(d.path(), &["edit"]), 2);
}

#[test]
fn zero_lambda_leaves_behavior_untouched() {
    let d = private();
    ok(d.path(), &["edit", "--lambda", "0", "--batch-size", "5", "--steps", "40", "--run-name", "off"]);
    let m = manifest(d.path(), "off");
    assert_eq!(m["metrics"]["locality"], 1.0);
}

#[test]
fn sequential_batch_mode_runs_every_batch() {
    let d = private();
    ok(
        d.path(),
        &["edit", "--mode", "sequential-batch", "--batch-size", "3", "--total-edits", "9", "--steps", "20", "--run-name", "sb"],
    );
    let m = manifest(d.path(), "sb");
    assert_eq!(m["batches"].as_array().unwrap().len(), 3);
    assert_eq!(m["metrics"]["num_records"], 9);
    assert_eq!(m["mode"], "sequential_batch");
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn ablate_writes_one_row_per_point_and_resumes() {
    let d = private();
    let p = d.path();
    let grid = ["ablate", "--experts", "2,4", "--routing", "token,anchor", "--batch-size", "4", "--steps", "10"];
    ok(p, &grid);
    let csv = exp(p).join("ablate/ablation.csv");
    let first = csv_rows(&csv);
    assert_eq!(first.len(), 4);
    let out = ok(p, &grid);
    assert!(out.contains("ran=0"), "{out}");
    assert_eq!(csv_rows(&csv), first);

    let wider = ["ablate", "--experts", "2,4,6", "--routing", "token,anchor", "--batch-size", "4", "--steps", "10"];
    let out = ok(p, &wider);
    assert!(out.contains("ran=2"), "{out}");
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 6);
    assert_eq!(&rows[..4], &first[..]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.matches("mode,seed").count(), 1);
}

#[test]
fn ablate_validates_the_whole_grid_first() {
    let d = private();
    let p = d.path();
    assert_eq!(code(p, &["ablate", "--experts", "2,4", "--topk", "3", "--steps", "1"]), 2);
    assert_eq!(code(p, &["ablate", "--routing", ""]), 2);
    assert_eq!(code(p, &["ablate", "--layers", "0,1"]), 2);
    assert!(!exp(p).join("ablate/ablation.csv").exists());
}

#[test]
fn report_sorts_by_average() {
    let d = private();
    let p = d.path();
    assert_eq!(code(p, &["report"]), 2);
    ok(p, &["edit", "--batch-size", "5", "--steps", "200", "--run-name", "trained"]);
    ok(p, &["edit", "--batch-size", "5", "--steps", "0", "--run-name", "untrained"]);
    ok(p, &["ablate", "--lambda", "0,1", "--batch-size", "5", "--steps", "100"]);
    let out = ok(p, &["report"]);
    let averages: Vec<f64> = out
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("series="))
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(averages.len(), 4, "{out}");
    assert!(averages.windows(2).all(|w| w[0] >= w[1]), "{out}");
    assert!(exp(p).join("report/series-lambda.csv").exists());
    assert!(!exp(p).join("report/series-E.csv").exists());
}
