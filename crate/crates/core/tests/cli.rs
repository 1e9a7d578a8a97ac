use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCM: &str = "\
image_size=16
n_train=40
n_test=24
blob_radius=2
blob_jitter=1
marker_size=3
vocab_size=16
tokens_per_sample=2
seed=3
";

const TRAIN: &str = "\
seed=1
model.d=6
model.d_r=6
model.causal_hidden=8
model.vocab_size=16
model.backbone.widths=[3, 4]
model.backbone.downsample=4
model.fusion.d_t=4
model.fusion.ffn_hidden=8
model.fusion.max_len=8
train.batch_size=8
train.max_steps=3
train.eval_every=2
data.train_manifest=data/train.txt
data.eval_manifest=data/test.txt
data.resize_to=16
data.crop_to=16
";

fn ivnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains a tiny model under `dir`.
fn setup(dir: &Path) {
    fs::write(dir.join("scm.cfg"), SCM).unwrap();
    fs::write(dir.join("train.cfg"), TRAIN).unwrap();
    let gen = ivnet(&["gen", "--config", s(&dir.join("scm.cfg")), "--out", s(&dir.join("data"))]);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    let train = ivnet(&["train", "--config", s(&dir.join("train.cfg")), "--out", s(&dir.join("run"))]);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
}

#[test]
fn usage_errors_exit_one() {
    let o = ivnet(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    let o = ivnet(&["gen", "--bogus"]);
    assert_eq!(code(&o), 1);
    let o = ivnet(&["train", "--policy", "u-maybe", "--config", "x"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&ivnet(&["--help"])), 0);
}

#[test]
fn missing_config_is_an_io_error() {
    let o = ivnet(&["train", "--config", "/nonexistent/train.cfg", "--out", "/tmp"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.depth=3\n").unwrap();
    let o = ivnet(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn gen_train_eval_viz_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for f in ["data/train.txt", "data/test.txt", "data/summary.txt", "data/images/train_00000.ivr"] {
        assert!(d.join(f).exists(), "{f}");
    }
    for f in ["run/checkpoint.json", "run/metrics.csv", "run/eval.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ck = d.join("run/checkpoint.json");
    let test = d.join("data/test.txt");
    let a = ivnet(&["eval", s(&ck), s(&test)]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = ivnet(&["eval", s(&ck), s(&test)]);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("mean\t"));

    let v = ivnet(&["viz", s(&ck), s(&test), "--index", "2", "--class", "1", "--out", s(&d.join("viz"))]);
    assert_eq!(code(&v), 0, "{}", stderr(&v));
    let img = ivnet::ingest::load_raster(&d.join("viz/attention_2_class1.ivr")).unwrap();
    assert_eq!((img.height, img.width), (16, 16));

    let bad = ivnet(&["viz", s(&ck), s(&test), "--class", "9", "--out", s(&d.join("viz"))]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn eval_on_a_single_class_manifest_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let text = fs::read_to_string(d.join("data/test.txt")).unwrap();
    let mut lines = text.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for l in lines {
        let cols: Vec<&str> = l.split('|').collect();
        out.push_str(&format!("{}|1,1,1,1|{}\n", cols[0], cols[2]));
    }
    let m = d.join("data/ones.txt");
    fs::write(&m, out).unwrap();
    let o = ivnet(&["eval", s(&d.join("run/checkpoint.json")), s(&m)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("undefined metric"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_decode_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    fs::write(&ck, "{\"config_digest\": 12").unwrap();
    let o = ivnet(&["eval", s(&ck), "whatever.txt"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn ablate_writes_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let o = ivnet(&[
        "ablate",
        "--config",
        s(&d.join("train.cfg")),
        "--out",
        s(&d.join("abl")),
        "--seeds",
        "1",
        "--class",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("model,iv_learning,semantic_fusion,constraints,mean_ood_auc,std\n"));
}

#[test]
fn check_suite_passes() {
    let o = ivnet(&["check"]);
    assert_eq!(code(&o), 0, "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
