//! End-to-end checks of the `dmsa` binary: output contracts, determinism,
//! and the exit-code map (0 ok, 1 failed check, 2 config, 3 shape, 4 io).

use std::path::Path;
use std::process::{Command, Output};

use dmsa_core::serialize::save_weights;
use dmsa_core::tensor::Tensor;

fn dmsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsa"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn describe_plain_50_totals_mention_the_headline_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "plain.json", r#"{"depth": 50, "block_kind": "plain"}"#);
    let out = dmsa(&["--config", &cfg, "describe"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("25.5"), "{text}");
    assert!(text.contains("head.fc"), "{text}");
    assert!(text.contains("params gap:"), "{text}");
}

#[test]
fn describe_default_dmsa_prints_the_signed_gap() {
    let out = dmsa(&["describe"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("params gap: -7.2020% vs 26.25M"), "{text}");
    assert!(text.contains("flops gap: +12.4396% vs 3.44G"), "{text}");
    assert!(text.contains("\"kernel_schedule\""), "{text}");
}

#[test]
fn describe_against_overrides_the_target() {
    let out = dmsa(&["describe", "--against", "30e6"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("vs 30.00M"), "{text}");
}

#[test]
fn a_misspelled_config_key_is_named_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"depht": 50}"#);
    let out = dmsa(&["--config", &cfg, "describe"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("depht"), "{}", stderr(&out));
}

#[test]
fn forward_is_byte_identical_and_walks_the_expected_grid() {
    let first = dmsa(&["forward", "--seed", "7", "--stats"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let text = stdout(&first);
    for dims in [
        "1x64x112x112",
        "1x64x56x56",
        "1x256x56x56",
        "1x512x28x28",
        "1x1024x14x14",
        "1x2048x7x7",
        "1x2048x1x1",
    ] {
        assert!(text.contains(dims), "missing {dims} in {text}");
    }
    assert!(text.contains("logits 1x1000"), "{text}");

    let second = dmsa(&["forward", "--seed", "7", "--stats"]);
    assert_eq!(first.stdout, second.stdout, "same seed must print the same bytes");
}

#[test]
fn gradcheck_block_scope_passes() {
    let out = dmsa(&["gradcheck", "--scope", "block"]);
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("scope block: PASS"), "{}", stdout(&out));
}

#[test]
fn a_corrupted_gradient_fails_and_names_the_parameter() {
    let out = dmsa(&["gradcheck", "--scope", "block", "--corrupt", "spatial.wb"]);
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("spatial.wb") && text.contains("FAIL"), "{text}");
}

#[test]
fn an_unknown_corrupt_target_exits_2() {
    let out = dmsa(&["gradcheck", "--scope", "block", "--corrupt", "no.such.param"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no.such.param"), "{}", stderr(&out));
}

#[test]
fn train_toy_converges_and_writes_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("curve.csv");
    let out = dmsa(&["train-toy", "--seed", "11", "--out", csv_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("finished:"))
        .and_then(|l| l.rsplit(' ').next())
        .and_then(|v| v.parse().ok())
        .expect("summary line with final accuracy");
    assert!(acc >= 0.9, "{text}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("epoch,train_loss,test_loss,test_accuracy\n"), "{csv}");
    assert!(csv.lines().count() >= 2, "{csv}");
}

#[test]
fn train_toy_to_an_unwritable_path_exits_4() {
    let out = dmsa(&["train-toy", "--seed", "11", "--out", "/nonexistent-dir/x.csv"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn bench_with_one_iteration_emits_one_record() {
    let out = dmsa(&["bench", "--iters", "1", "--resolution", "32"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("iter")).count(), 1, "{text}");
    assert!(text.contains("median") && text.contains("p95"), "{text}");
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.weights");
    let b = dir.path().join("b.weights");
    let entries = vec![
        ("alpha".to_owned(), Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)),
        ("beta".to_owned(), Tensor::<f32>::filled(&[4], 0.25)),
    ];
    save_weights(&a, &entries).unwrap();
    let out = dmsa(&["save-weights", "--from", a.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn weights_that_do_not_fit_the_network_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.weights");
    let entries = vec![("stem.conv.weight".to_owned(), Tensor::<f32>::filled(&[2, 2], 1.0))];
    save_weights(&path, &entries).unwrap();
    let out = dmsa(&[
        "forward",
        "--seed",
        "7",
        "--resolution",
        "32",
        "--weights",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("stem.conv.weight"), "{}", stderr(&out));
}

#[test]
fn an_unknown_gradcheck_scope_exits_2() {
    let out = dmsa(&["gradcheck", "--scope", "everything"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("everything"), "{}", stderr(&out));
}
