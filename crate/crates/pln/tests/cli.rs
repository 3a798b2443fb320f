use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pln::checkpoint::Checkpoint;
use pln::config::RunConfig;
use pln::records::read_log;
use pln_core::branch::Pln;

const TINY: &str = r#"
seed = 7
[model]
stages = [4, 8]
d = 4
[train]
epochs = 2
batch_size = 8
val_queries = 5
[data]
n_val = 10
[data.generator]
n_samples = 40
l_v = 16
d_raw = 4
n_activities = 3
distractor_max = 4
"#;

fn pln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pln")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(code(&pln(&[])), 1);
    assert_eq!(code(&pln(&["train", "--bogus"])), 1);
    assert_eq!(code(&pln(&["gen-data", "--out", s(&dir.path().join("d.jsonl"))])), 1, "missing seed");
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--stages", "4,12"])), 1);
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--strategy", "3"])), 1);
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--preset", "nope"])), 1);
    assert_eq!(code(&pln(&["--help"])), 0);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = pln(&["eval", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("none.bin"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_lists_each_op_once() {
    let out = pln(&["gradcheck", "--scope", "ops"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for op in pln_core::autodiff::gradcheck::OP_NAMES {
        let n = text.lines().filter(|l| l.split_whitespace().next() == Some(op)).count();
        assert_eq!(n, 1, "{op} in\n{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn gen_data_writes_file_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert_eq!(code(&pln(&["gen-data", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&pln(&["gen-data", "--config", s(&cfg), "--out", s(&b)])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let header = pln::dataset::read_header(&a).unwrap();
    assert_eq!(header.n_samples, 40);
    assert_eq!(header.l_v, 16);
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out_dir = dir.path().join("run");
    let out = pln(&["train", "--config", s(&cfg), "--epochs", "0", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rc = RunConfig::load(&cfg, None).unwrap();
    let init = Pln::new(rc.model_config().unwrap()).unwrap();
    let ck = Checkpoint::load(&out_dir.join("checkpoint.bin")).unwrap();
    assert_eq!(&ck.params, init.params());
    assert_eq!(ck.epochs_done, 0);
    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.trim(), "epoch,stage_1_loss,stage_2_loss,val_miou");
    for f in ["eval_report.json", "eval_report.txt", "predictions.jsonl", "config.resolved.toml"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--out", s(&whole)])), 0);
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&split)])), 0);
    let ck = split.join("checkpoint.bin");
    let out = pln(&["train", "--config", s(&cfg), "--out", s(&split), "--resume", s(&ck)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_log(&whole.join("train_log.csv")).unwrap(), read_log(&split.join("train_log.csv")).unwrap());
    for f in ["checkpoint.bin", "eval_report.json", "predictions.jsonl"] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_is_deterministic_and_checks_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&run)])), 0);
    let ck = run.join("checkpoint.bin");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        let out = pln(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(e), "--strategy", "2"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["eval_report.json", "eval_report.txt", "predictions.jsonl"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let out = pln(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--no-uc", "--out", s(&e1)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn strategies_agree_on_a_single_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    let args = ["--config", s(&cfg), "--stages", "8"];
    let mut train = vec!["train", "--epochs", "1", "--out", s(&run)];
    train.extend(args);
    assert_eq!(code(&pln(&train)), 0);
    let ck = run.join("checkpoint.bin");
    let mut reports = Vec::new();
    for strategy in ["1", "2"] {
        let out_dir = dir.path().join(format!("s{strategy}"));
        let mut eval = vec!["eval", "--strategy", strategy, "--checkpoint", s(&ck), "--out", s(&out_dir)];
        eval.extend(args);
        let out = pln(&eval);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(fs::read(out_dir.join("eval_report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_on_an_external_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let data = dir.path().join("d.jsonl");
    assert_eq!(code(&pln(&["gen-data", "--config", s(&cfg), "--seed", "11", "--out", s(&data)])), 0);
    let run = dir.path().join("run");
    assert_eq!(code(&pln(&["train", "--config", s(&cfg), "--epochs", "0", "--out", s(&run)])), 0);
    let out_dir = dir.path().join("ext");
    let out = pln(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&run.join("checkpoint.bin")),
        "--dataset", s(&data), "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("eval_report.txt")).unwrap();
    assert!(text.starts_with("queries: 40"), "{text}");
}

#[test]
fn ablate_writes_a_table_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out_dir = dir.path().join("abl");
    let out = pln(&["ablate", "--config", s(&cfg), "--epochs", "1", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("ablation.txt")).unwrap();
    for name in ["full", "no-cfm", "no-uc"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} in\n{text}");
        assert!(out_dir.join(name).join("eval_report.json").exists());
    }
}

#[test]
fn uneven_videos_are_padded_to_the_clip_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("uneven.toml");
    fs::write(&cfg, TINY.replace("l_v = 16", "l_v = 14")).unwrap();
    let run = dir.path().join("run");
    let out = pln(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let preds = pln::records::read_predictions(&run.join("predictions.jsonl")).unwrap();
    assert!(preds.iter().all(|p| p.end_sec <= 16.0 + 1e-9));
}
