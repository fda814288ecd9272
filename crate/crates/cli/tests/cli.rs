use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctm")).args(args).output().expect("spawn ctm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_NET: &str = r#"{
  "stage_channels": [8, 16],
  "stage_depths": [1, 1],
  "input_spatial": [8, 8],
  "num_classes": 4,
  "ctm_plan": [[1, 1]],
  "ctm_reduction": 4
}"#;

const TINY_DATA: &str = r#"{
  "num_classes": 4,
  "train_clips_per_class": 4,
  "val_clips_per_class": 2,
  "clip_len": 4,
  "spatial": [8, 8],
  "motif_library_seed": 7,
  "noise_sigma": 0.5
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_single_module_passes() {
    let o = ctm(&["gradcheck", "--module", "tcc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("module,tensor,checked,kinks,max_rel_err,tolerance,status"));
    assert!(out.lines().skip(1).all(|l| l.starts_with("tcc,") && l.ends_with(",PASS")));
}

#[test]
fn unknown_gradcheck_module_is_rejected() {
    let o = ctm(&["gradcheck", "--module", "resnet"]);
    assert!(!o.status.success());
}

#[test]
fn identity_check_passes() {
    let o = ctm(&["identity-check", "--blocks", "10"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).matches("PASS").count(), 3);
}

#[test]
fn params_total_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "net.json", TINY_NET);
    let o = ctm(&["params", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let block: Vec<&str> = out.lines().find(|l| l.contains(".ctm")).unwrap().split(',').collect();
    assert_eq!(block[1], block[2]);
    let total: Vec<&str> = out.lines().last().unwrap().split(',').collect();
    assert_eq!(total[0], "total");
    assert_eq!(total[1], total[2]);
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "net.json", &TINY_NET.replace("[[1, 1]]", "[[1, 3]]"));
    let o = ctm(&["params", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(1, 3)"), "{}", stderr(&o));
}

#[test]
fn bench_prints_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = write(dir.path(), "shapes.txt", "# T,C,H,W\n2,4,3,3\n");
    let o = ctm(&["bench", "--shapes", &shapes, "--runs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1x2x4x3x3,naive,"));
    assert!(out.contains("1x2x4x3x3,fast,"));
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "data.json", TINY_DATA);
    let net = write(dir.path(), "net.json", TINY_NET);
    let tc = write(dir.path(), "train.json", r#"{"epochs": 2, "batch_size": 4}"#);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());

    let o = ctm(&["gen-data", "--spec", &spec, "--out", data_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("train.ctmdata").exists() && data.join("val.ctmdata").exists());

    let o = ctm(&["train", "--config", &net, "--data", data_s, "--out", run_s, "--train-config", &tc]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stdout(&o);
    // Header, the untrained row, then one row per epoch.
    assert_eq!(log.lines().count(), 4);
    for f in ["best.ckpt", "final.ckpt", "train_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let final_val: f64 = log.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();

    let ckpt = run.join("final.ckpt");
    let o = ctm(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc: f64 = stdout(&o).lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((acc - final_val).abs() < 1e-3, "{acc} vs {final_val}");
}

#[test]
fn eval_rejects_missing_checkpoint() {
    let o = ctm(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}
