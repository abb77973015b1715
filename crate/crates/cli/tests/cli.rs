use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[scenario]
duration_seconds = 120.0
event_rate = 360.0

[bcpc]
conv_channels = [4]
d_local = 4
d_context = 4
d_repr = 4
heads = 1
ffn_dim = 4

[pretrain]
steps = 4
batch_size = 4
log_every = 2

[model]
discriminator_hidden = 4

[train]
epochs = 1

[sweep]
theta_inner = [0.1, 0.4]
theta_cross = [0.05, 0.2]
"#;

fn seegdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seegdiff"))
        .args(args)
        .env("SEEGDIFF_OUT", dir.join("run"))
        .current_dir(dir)
        .output()
        .expect("spawn seegdiff")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = seegdiff(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = workspace();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    for cmd in [
        &["generate"][..],
        &["pretrain"],
        &["train"],
        &["evaluate"],
        &["export-graphs", "--span", "0..2"],
        &["sweep-thresholds", "--epochs", "1"],
    ] {
        ok(d, &[&c[..], cmd].concat());
    }
    let report = ok(d, &["--config", "tiny.toml", "report"]);
    assert!(report.contains("## Threshold sweep"));
    let run = d.join("run");
    for f in [
        "recording.seeg",
        "truth.json",
        "config.toml",
        "encoder.ckpt",
        "pretrain_curve.csv",
        "detector.ckpt",
        "train_curve.csv",
        "metrics.json",
        "sweep.csv",
        "report.md",
        "graphs/edges.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let edges = fs::read_to_string(run.join("graphs/edges.csv")).unwrap();
    assert!(edges.lines().count() > 1);
}

#[test]
fn default_ratios_and_ratio_override() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "generate"]);
    ok(d, &["--config", "tiny.toml", "pretrain"]);
    ok(d, &["--config", "tiny.toml", "train"]);
    let all = ok(d, &["--config", "tiny.toml", "evaluate"]);
    for r in ["1:5", "1:50", "1:500"] {
        assert!(all.contains(r), "{all}");
    }
    let one = ok(d, &["--config", "tiny.toml", "--ratios", "1:5", "evaluate"]);
    assert!(one.contains("1:5") && !one.contains("1:50"), "{one}");
}

#[test]
fn same_seed_same_recording() {
    let a = workspace();
    let b = workspace();
    ok(a.path(), &["--config", "tiny.toml", "--seed", "7", "generate"]);
    ok(b.path(), &["--config", "tiny.toml", "--seed", "7", "generate"]);
    let read = |d: &Path| fs::read(d.join("run/recording.seeg")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let cfg = fs::read_to_string(a.path().join("run/config.toml")).unwrap();
    assert!(cfg.contains("seed = 7"));
}

#[test]
fn ablation_tag_reaches_the_report() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "generate"]);
    ok(d, &["--config", "tiny.toml", "pretrain", "--steps", "0"]);
    ok(d, &["--config", "tiny.toml", "--ablate", "no_graph", "--freeze-encoder", "train"]);
    ok(d, &["--config", "tiny.toml", "--ablate", "no_graph", "evaluate"]);
    let report = ok(d, &["--config", "tiny.toml", "report"]);
    assert!(report.contains("ablation: no_graph"), "{report}");
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("sat.toml"), "[scenario]\nevent_rate = 100000.0\nduration_seconds = 60.0\n").unwrap();
    fs::write(d.join("bad.toml"), "[scenario]\nbogus = 1\n").unwrap();
    let code = |args: &[&str]| seegdiff(d, args).status.code();
    assert_eq!(code(&["--config", "sat.toml", "generate"]), Some(2));
    assert_eq!(code(&["--config", "bad.toml", "generate"]), Some(2));
    assert_eq!(code(&["--ablate", "bogus", "generate"]), Some(2));
    assert_eq!(code(&["--config", "tiny.toml", "train"]), Some(5));
    fs::create_dir_all(d.join("run")).unwrap();
    fs::write(d.join("run/recording.seeg"), "garbage").unwrap();
    assert_eq!(code(&["--config", "tiny.toml", "pretrain"]), Some(3));
}
