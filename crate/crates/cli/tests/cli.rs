use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfda_core::datagen::read_png;

const TINY: &str = r#"
[data]
height = 16
width = 32
train_count = 4
val_count = 2
test_count = 2

[net]
encoder_channels = [4, 8]
encoder_strides = [1, 2]
style_channels = [4, 8]
decoder_channels = [8, 4]
generator_channels = [8, 4]
disc_channels = [4]

[perceptual]
channels = [4, 4, 4, 4, 4]

[train]
batch_size = 2
total_steps = 3
"#;

fn lfda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfda")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lfda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flags_and_bad_settings_exit_2() {
    let (dir, config) = setup();
    assert_eq!(lfda(&["complexity", "--bogus"]).status.code(), Some(2));
    assert_eq!(lfda(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lfda(&["complexity", "--set", "data.nope=1"]).status.code(), Some(2));
    assert_eq!(lfda(&["complexity", "--set", "train.batch_size=1"]).status.code(), Some(2));
    assert_eq!(lfda(&["complexity", "--variant", "mystery"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nwhatever = 1\n").unwrap();
    assert_eq!(lfda(&["complexity", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(lfda(&["gen-data", "--config", s(&config)]).status.code(), Some(2), "missing --out");
}

#[test]
fn runtime_failures_exit_3() {
    let (dir, _) = setup();
    let missing = dir.path().join("missing.ckpt");
    let out = dir.path().join("out");
    let r = lfda(&["eval", "--checkpoint", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    let corrupt = dir.path().join("corrupt.ckpt");
    fs::write(&corrupt, b"LFDACKPT garbage").unwrap();
    let r = lfda(&["eval", "--checkpoint", s(&corrupt), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("corrupt.ckpt"));
}

#[test]
fn complexity_report() {
    let (dir, config) = setup();
    let out = dir.path().join("cx");
    let r = ok(&["complexity", "--config", s(&config), "--out", s(&out)]);
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("inference params"));
    assert!(text.contains("inference MACs"));
    assert!(!text.contains("generator") && !text.contains("disc_"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("complexity.json")).unwrap()).unwrap();
    assert!(json["total_params"].as_u64().unwrap() > json["inference_params"].as_u64().unwrap());
    assert!(out.join("run_manifest.json").exists());
    assert_eq!(lfda(&["complexity", "--config", s(&config), "--height", "15"]).status.code(), Some(2));
}

#[test]
fn gen_train_eval_pipeline() {
    let (dir, config) = setup();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("run_manifest.json").exists());

    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run), "--variant", "lfda_full", "--seed", "4"]);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("val_metrics.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["train"], 4);
    assert_eq!(manifest["variant"], "lfda_full");

    // The recorded config reproduces the logged losses exactly.
    let rerun = dir.path().join("rerun");
    ok(&["train", "--config", s(&run.join("config.toml")), "--data", s(&data), "--out", s(&rerun)]);
    assert_eq!(log, fs::read_to_string(rerun.join("train_log.jsonl")).unwrap());

    // Evaluating one checkpoint twice gives byte-identical reports.
    let ckpt = run.join("final.ckpt");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&e1)]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&e2)]);
    for f in ["metrics.json", "metrics.txt", "metrics_per_image.csv", "run_manifest.json"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(e1.join("metrics_per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let src = dir.path().join("src_eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--domain", "source", "--split", "val", "--out", s(&src), "--cap", "50"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(src.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["meta"]["route"], "source");
    assert_eq!(m["summary"]["cap"], 50.0);

    let trans = dir.path().join("trans");
    ok(&["translate", "--checkpoint", s(&ckpt), "--samples", "1", "--out", s(&trans)]);
    assert_eq!(read_png(&trans.join("000_grid.png")).unwrap().shape(), &[3, 32, 96]);
}

#[test]
fn untrained_translate_writes_pngs() {
    let (dir, config) = setup();
    let out = dir.path().join("t");
    ok(&["translate", "--config", s(&config), "--samples", "2", "--out", s(&out)]);
    for i in 0..2 {
        for name in ["source", "target", "recon_s", "recon_t", "s2t", "t2s"] {
            let img = read_png(&out.join(format!("{i:03}_{name}.png"))).unwrap();
            assert_eq!(img.shape(), &[3, 16, 32]);
            assert!(img.min() >= 0.0 && img.max() <= 1.0);
        }
    }
}

#[test]
fn ablate_has_five_rows() {
    let (dir, config) = setup();
    let out = dir.path().join("ab");
    ok(&["ablate", "--config", s(&config), "--set", "train.total_steps=1", "--out", s(&out)]);
    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(labels, ["Src-Only", "+Tgt+AL", "+Tgt+Con+2BN", "+Tgt+Con+2BN+Sty", "LFDA (full)"]);
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 6);
}
