use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vlseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlseg")).args(args).output().expect("spawn vlseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small model so that a full train/eval round trip takes well under a second.
const TINY: &[&str] = &[
    "--image-size",
    "32",
    "--vision-channels",
    "8,8,16,16",
    "--vision-heads",
    "1,1,2,2",
    "--lang-depths",
    "1,1,1,1",
    "--lang-dim",
    "8",
    "--lang-heads",
    "1",
    "--align-dim",
    "4",
    "--decoder-channels",
    "8,8,8",
    "--ffn-ratio",
    "2",
];

fn gen_data(dir: &Path, count: &str, seed: &str, size: &str) {
    let o = vlseg(&["gen-data", "--count", count, "--seed", seed, "--image-size", size, "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn train_tiny(tmp: &TempDir, extra: &[&str]) -> PathBuf {
    let data = tmp.path().join("data");
    if !data.exists() {
        gen_data(&data, "12", "3", "32");
    }
    let out = tmp.path().join(format!("run{}", extra.len()));
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--epochs", "1", "--batch-size", "4", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let o = vlseg(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn help_exits_zero() {
    let o = vlseg(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["gen-data", "train", "eval", "ablate", "export-embeddings", "render-masks", "pr-curve"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = vlseg(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    gen_data(&data, "4", "0", "32");
    let o = vlseg(&["train", "--data", data.to_str().unwrap(), "--image-size", "60", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("resolution chain"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let o = vlseg(&["train", "--data", tmp.path().join("absent").to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn zero_count_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = vlseg(&["gen-data", "--count", "0", "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a, "64", "7", "64");
    gen_data(&b, "64", "7", "64");
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 64 * 2 + 2);
    assert!(ta == tb, "directory contents differ");
    let c = tmp.path().join("c");
    gen_data(&c, "64", "8", "64");
    assert!(tree(&c) != ta);
}

#[test]
fn train_eval_and_exports_round_trip() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(&tmp, &[]);
    for f in ["config.kv", "epoch_log.csv", "model.ckpt", "val_report.txt", "val_report.kv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("epoch_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,step,lr,L_task,L_align,L_total,train_mIoU"));
    assert_eq!(lines.count(), 1);

    let data = tmp.path().join("data");
    let ckpt = run.join("model.ckpt");
    let (data_s, ckpt_s) = (data.to_str().unwrap(), ckpt.to_str().unwrap());
    let report_dir = tmp.path().join("report");
    let o = vlseg(&["eval", "--checkpoint", ckpt_s, "--data", data_s, "--out", report_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mIoU"));
    // Evaluating the same split reproduces the report written at the end of training.
    assert_eq!(fs::read_to_string(report_dir.join("report.kv")).unwrap(), fs::read_to_string(run.join("val_report.kv")).unwrap());
    let pr = fs::read_to_string(report_dir.join("pr_curve.csv")).unwrap();
    assert_eq!(pr.lines().next(), Some("threshold,precision,recall"));
    assert_eq!(pr.lines().count(), 102);

    let emb = tmp.path().join("emb.tsv");
    let o = vlseg(&["export-embeddings", "--checkpoint", ckpt_s, "--data", data_s, "--limit", "2", "--out", emb.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(&emb).unwrap().lines().count() > 2);

    let masks = tmp.path().join("masks");
    let o = vlseg(&["render-masks", "--checkpoint", ckpt_s, "--data", data_s, "--split", "all", "--out", masks.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(&masks).unwrap().count(), 12);

    let curve = tmp.path().join("pr.csv");
    let o = vlseg(&["pr-curve", "--checkpoint", ckpt_s, "--data", data_s, "--thresholds", "11", "--out", curve.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 12);

    let o = vlseg(&["eval", "--checkpoint", ckpt_s, "--data", data_s, "--typo-seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn repeated_training_gives_identical_logs_and_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let a = train_tiny(&tmp, &[]);
    let b = train_tiny(&tmp, &["--seed", "0"]);
    assert_eq!(fs::read(a.join("epoch_log.csv")).unwrap(), fs::read(b.join("epoch_log.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn no_alignment_topology() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(&tmp, &["--lambda-align", "0", "--align-stages", ""]);
    let cfg = fs::read_to_string(run.join("config.kv")).unwrap();
    assert!(cfg.lines().any(|l| l == "lambda_align = 0.0"), "{cfg}");
    assert!(cfg.lines().any(|l| l.trim_end() == "align_stages ="), "{cfg}");
    assert!(cfg.lines().any(|l| l == "fusion_stages = 1,2,3,4"), "{cfg}");
    // No alignment parameters, and the export command refuses politely.
    let ckpt = fs::read(run.join("model.ckpt")).unwrap();
    assert!(!ckpt.windows(6).any(|w| w == b"align."));
    let o = vlseg(&[
        "export-embeddings",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--out",
        tmp.path().join("e.tsv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn config_file_is_loaded_and_flags_override_it() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "8", "1", "32");
    let cfg = tmp.path().join("c.kv");
    let mut text = String::from("# tiny run\nepochs = 1\nbatch_size = 4\nlambda_align = 0.5\n");
    for pair in TINY.chunks(2) {
        text.push_str(&format!("{} = {}\n", pair[0].trim_start_matches("--").replace('-', "_"), pair[1]));
    }
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("o");
    let o = vlseg(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--lambda-align",
        "0.25",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = fs::read_to_string(out.join("config.kv")).unwrap();
    assert!(written.contains("lambda_align = 0.25"), "{written}");
    assert!(written.contains("image_size = 32"), "{written}");
    assert!(written.contains("epochs = 1"), "{written}");

    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = vlseg(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn checkpoint_with_wrong_manifest_is_refused() {
    let tmp = TempDir::new().unwrap();
    let run = train_tiny(&tmp, &[]);
    let ckpt = run.join("model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let o = vlseg(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", tmp.path().join("data").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_table() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "10", "2", "32");
    let out = tmp.path().join("abl");
    let mut args = vec![
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--grid",
        "direction",
        "--seeds",
        "0",
        "--epochs",
        "1",
        "--batch-size",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let o = vlseg(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    // Header plus baseline and the four direction cells.
    assert_eq!(csv.lines().count(), 6, "{csv}");
    assert!(csv.contains("Bi (w/)"));
    assert!(fs::read_to_string(out.join("ablation.txt")).unwrap().contains("Uni (w/o)"));

    let o = vlseg(&["ablate", "--data", data.to_str().unwrap(), "--grid", "bogus", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
