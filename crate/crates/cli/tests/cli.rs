use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5

[data]
test_samples = 40

[data.generate]
n_samples = 80

[model]
encoder_widths = [16, 8]

[objective]
critic_widths = [8, 8]

[optimizer]
batch_size = 16
warmup_steps = 2
total_steps = 6

[train]
log_every = 2
checkpoint_every = 3

[eval.probe]
epochs = 10
"#;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relic-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> (TempDir, String, String) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let (c, o) = (cfg.display().to_string(), out.display().to_string());
    (dir, c, o)
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn pretrain_eval_inspect_round_trip() {
    let (_dir, cfg, out) = setup();
    let o = lab(&["pretrain", "--config", &cfg, "--out", &out, "--single-thread"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("step           6"));

    let ckpt = s(&Path::new(&out).join("ckpt-00000006.rlck"));
    let o = lab(&["eval", "--kind", "linear", "--checkpoint", &ckpt, "--single-thread"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("accuracy"));

    let log = fs::read_to_string(Path::new(&out).join("metrics.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"kind\":\"linear\""));

    let o = lab(&["inspect-checkpoint", &ckpt]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("step         6"));
    assert!(text.contains("online.encoder.0.weight"));
}

#[test]
fn stop_and_resume_match_a_single_run() {
    let (dir, cfg, out) = setup();
    assert!(lab(&["pretrain", "--config", &cfg, "--out", &out, "--single-thread"]).status.success());
    let other = s(&dir.path().join("split"));
    assert!(lab(&["pretrain", "--config", &cfg, "--out", &other, "--single-thread", "--stop-at", "3"])
        .status
        .success());
    let mid = s(&Path::new(&other).join("ckpt-00000003.rlck"));
    assert!(lab(&["pretrain", "--config", &cfg, "--out", &other, "--single-thread", "--resume", &mid])
        .status
        .success());
    for f in ["metrics.jsonl", "ckpt-00000006.rlck"] {
        assert_eq!(
            fs::read(Path::new(&out).join(f)).unwrap(),
            fs::read(Path::new(&other).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gen_data_writes_a_dataset() {
    let (dir, cfg, _) = setup();
    let file = s(&dir.path().join("test.bin"));
    let o = lab(&["gen-data", "--config", &cfg, "--split", "test", "--out", &file]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 40 images"));
    assert!(fs::metadata(&file).unwrap().len() > 0);
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[objective]\ntau = -1.0\nbogus = 3\n").unwrap();
    let o = lab(&["pretrain", "--config", &s(&cfg), "--out", &s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));

    let (_d, cfg, out) = setup();
    let o = lab(&["pretrain", "--config", &cfg, "--out", &out, "--tau", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn damaged_checkpoint_exits_with_code_three() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("x.rlck");
    fs::write(&bad, b"RLCK\x01\x00garbage").unwrap();
    assert_eq!(lab(&["inspect-checkpoint", &s(&bad)]).status.code(), Some(3));
    let missing = dir.path().join("missing.rlck");
    assert_eq!(lab(&["inspect-checkpoint", &s(&missing)]).status.code(), Some(3));
}

#[test]
fn verify_fuzz_reports_the_headline() {
    let o = lab(&["verify", "--mode", "theorem1-fuzz", "--count", "200", "--single-thread"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0 violations / 200 models checked"));
}

#[test]
fn unknown_eval_kind_is_a_usage_error() {
    let o = lab(&["eval", "--kind", "nope", "--checkpoint", "x"]);
    assert!(!o.status.success());
}
