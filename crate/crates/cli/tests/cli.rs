use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
steps = 4
batch = 2
seed = 5
lr_nets = 0.05
lr_disc = 0.005
alpha = 0.1
beta = 0.1
lambda = 0.1
eval_every = 2
eval_samples = 2
image_size = 32
widths = 4,4;4,4,4;4,4;4,4,4,4;4,4,4;4
";

fn edgeuda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeuda"))
        .args(args)
        .env("EDGEUDA_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&edgeuda(&[])), 1);
    assert_eq!(code(&edgeuda(&["frobnicate"])), 1);
    assert_eq!(code(&edgeuda(&["gen", "--n", "2"])), 1);
    assert_eq!(code(&edgeuda(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "steps = 4\nbatch = 2\n").unwrap();
    let o = edgeuda(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    fs::write(&cfg, TINY).unwrap();
    let o = edgeuda(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--arm", "nope"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.euda");
    let img = dir.path().join("x.pgm");
    fs::write(&img, b"P5\n2 2\n255\n\x00").unwrap();
    assert_eq!(code(&edgeuda(&["infer", "--checkpoint", s(&missing), "--image", s(&img), "--out-prefix", "p"])), 2);
    let bogus = dir.path().join("bogus.euda");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = edgeuda(&["eval", "--checkpoint", s(&bogus), "--data", s(dir.path()), "--out", s(&dir.path().join("m.csv"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&edgeuda(&["gen", "--out", s(dir.path()), "--n", "1", "--size", "30"])), 1);
}

#[test]
fn numerical_abort_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.cfg");
    fs::write(&cfg, TINY.replace("lr_nets = 0.05", "lr_nets = 1e200")).unwrap();
    let o = edgeuda(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn gen_train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let o = edgeuda(&["gen", "--out", s(&data), "--n", "3", "--size", "32", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("source/sample_00000.pgm").exists());
    assert!(data.join("target/sample_00002_label.pgm").exists());
    assert!(fs::read_to_string(data.join("manifest.run")).unwrap().contains("command = gen"));

    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = root.join("run");
    let o = edgeuda(&["train", "--config", s(&cfg), "--out", s(&run), "--arm", "full"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);
    let metrics = fs::read_to_string(run.join("metrics_target.csv")).unwrap();
    assert!(metrics.starts_with("epoch,dice_c1,dice_c2,dice_c3,dice_whole,hd_c1,hd_c2,hd_c3,hd_whole,mean_entropy,n_undefined_hd\n"));
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("model.euda");
    let csv = root.join("eval/m.csv");
    let o = edgeuda(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("target")), "--out", s(&csv), "--hausdorff", "p95"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("4,"));

    let prefix = root.join("pred/a");
    let o = edgeuda(&["infer", "--checkpoint", s(&ckpt), "--image", s(&data.join("target/sample_00000.pgm")), "--out-prefix", s(&prefix)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for suffix in ["_seg.pgm", "_edge.pgm", "_entropy.pgm"] {
        let bytes = fs::read(root.join(format!("pred/a{suffix}"))).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let full_cfg = root.join("full.cfg");
    fs::write(&full_cfg, TINY).unwrap();
    let half_cfg = root.join("half.cfg");
    fs::write(&half_cfg, TINY.replace("steps = 4", "steps = 2")).unwrap();

    let a = root.join("a");
    assert_eq!(code(&edgeuda(&["train", "--config", s(&full_cfg), "--out", s(&a), "--arm", "full"])), 0);
    let b1 = root.join("b1");
    assert_eq!(code(&edgeuda(&["train", "--config", s(&half_cfg), "--out", s(&b1), "--arm", "full"])), 0);
    // The manifest written by the first run is itself a valid config.
    let b2 = root.join("b2");
    let o = edgeuda(&[
        "train",
        "--config",
        s(&a.join("manifest.run")),
        "--out",
        s(&b2),
        "--from",
        s(&b1.join("model.euda")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("model.euda")).unwrap(), fs::read(b2.join("model.euda")).unwrap());
}

#[test]
fn bench_writes_documented_csv() {
    let help = String::from_utf8(edgeuda(&["bench", "--help"]).stdout).unwrap();
    for col in ["arm", "seed", "class", "source_dice", "target_dice", "source_hd", "target_hd", "source_entropy", "target_entropy"] {
        assert!(help.contains(&format!("  {col} ")), "{col} undocumented");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("bench");
    let o = edgeuda(&["bench", "--seeds", "1", "--out", s(&out), "--config", s(&cfg), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "arm,seed,class,source_dice,target_dice,source_hd,target_hd,source_entropy,target_entropy"
    );
    assert_eq!(lines.count(), 4 * 4);
    assert!(out.join("full_seed0/model.euda").exists());
}

#[test]
fn train_help_lists_every_config_key() {
    let help = String::from_utf8(edgeuda(&["train", "--help"]).stdout).unwrap();
    for (key, _) in edgeuda::trainer::CONFIG_KEYS {
        assert!(help.contains(&format!("  {key} ")), "{key} undocumented");
    }
}
