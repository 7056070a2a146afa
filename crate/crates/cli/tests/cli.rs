use std::path::Path;
use std::process::{Command, Output};

fn sepkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepkit")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let text = ok(&sepkit(&["selftest", "--out", s(&a)]));
    assert!(!text.contains("FAIL"), "{text}");
    ok(&sepkit(&["selftest", "--out", s(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn failures_print_a_category_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = sepkit(&["train", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"stage":"ASR_FT","steps":3,"warmup":1,"peak_lr":1e-3,"seed":0,"data":{"manifest":"m.jsonl"}}"#).unwrap();
    let out = sepkit(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]:"));

    let out = sepkit(&["evaluate", "--mode", "sideways"]);
    assert!(!out.status.success());
}

#[test]
fn simulate_train_separate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sepkit(&["simulate", "--count", "2", "--seed", "3", "--out", s(&d.join("data"))]));
    let cfg = d.join("fa.json");
    std::fs::write(
        &cfg,
        r#"{"stage":"FA","steps":2,"warmup":1,"peak_lr":1e-3,"seed":0,"model":"toy1",
            "data":{"manifest":"data/manifest.jsonl"},"out_dir":"fa","log_every":1}"#,
    )
    .unwrap();
    ok(&sepkit(&["train", "--config", s(&cfg)]));
    let metrics = std::fs::read_to_string(d.join("fa/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let mix = d.join("data/wav/s3-000000_mix.wav");
    let prefix = d.join("out");
    ok(&sepkit(&["separate", "--model", s(&d.join("fa/final.ckpt")), "--in", s(&mix), "--out-prefix", s(&prefix), "--chunk-seconds", "1.0", "--hop-seconds", "0.5"]));
    let len = |p: &Path| hound::WavReader::open(p).unwrap().duration();
    for c in 0..2 {
        assert_eq!(len(&d.join(format!("out.{c}.wav"))), len(&mix));
    }
}
