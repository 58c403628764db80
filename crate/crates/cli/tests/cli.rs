use std::path::Path;
use std::process::{Command, Output};

use eebnn::net::{ArchSpec, Family, Model, Param};

const SYNTH: &[&str] = &["--synth", "--classes", "3", "--per-class", "5", "--data-seed", "4"];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eebnn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(dir: &Path, epochs: &str) -> String {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out, "--widths", "8,16", "--blocks", "3,2"];
    args.extend_from_slice(&["--epochs", epochs, "--seed", "11", "--batch-size", "4", "--quiet"]);
    args.extend_from_slice(SYNTH);
    ok(&args);
    dir.join("model.eebn").to_str().unwrap().to_string()
}

fn field(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("{key} missing in {stdout}"))
        .trim()
        .to_string()
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = train(dir.path(), "0");
    let (saved, meta) = eebnn::io::load_model(Path::new(&path)).unwrap();
    assert_eq!(meta.epochs, 0);
    let spec = ArchSpec::new(Family::QuickNet, vec![8, 16], vec![3, 2], 3).unwrap();
    let fresh = Model::build(&spec, 11).unwrap();
    assert_eq!(saved.spec(), fresh.spec());
    for (a, b) in fresh.params().iter().zip(saved.params()) {
        match (a, b) {
            (Param::Binary { bits: x, .. }, Param::Binary { bits: y, .. }) => assert_eq!(x, y),
            _ => assert_eq!(a, b),
        }
    }
    assert!(dir.path().join("config.toml").exists());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
}

#[test]
fn sweep_eval_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(&dir.path().join("run"), "1");

    let sweep_dir = dir.path().join("sweep");
    let mut args = vec!["sweep", "--model", &model, "--out", sweep_dir.to_str().unwrap(), "--no-timing"];
    args.extend_from_slice(SYNTH);
    let first = ok(&args);
    let csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("delta,accuracy,mean_exit,"));
    let records = std::fs::read(sweep_dir.join("records.jsonl")).unwrap();
    assert!(sweep_dir.join("curve.csv").exists());
    // Timing off: repeated sweeps are byte-identical.
    assert_eq!(ok(&args), first);
    assert_eq!(std::fs::read(sweep_dir.join("records.jsonl")).unwrap(), records);

    let mut e0 = vec!["eval", "--model", &model, "--delta", "0", "--no-timing"];
    e0.extend_from_slice(SYNTH);
    let mut fixed = vec!["eval", "--model", &model, "--fixed-exit", "5"];
    fixed.extend_from_slice(SYNTH);
    let (a, b) = (ok(&e0), ok(&fixed));
    assert_eq!(field(&a, "accuracy:"), field(&b, "accuracy:"));
    assert_eq!(field(&a, "mean_exit:").parse::<f64>().unwrap(), 5.0);
    assert_eq!(
        field(&a, "mean_macs:").parse::<f64>().unwrap(),
        field(&b, "mean_macs:").parse::<f64>().unwrap()
    );

    // Usage error, bad rule, runtime failure.
    assert_eq!(run(&["eval", "--model", &model]).status.code(), Some(1));
    let mut neg = vec!["eval", "--model", &model, "--delta=-1"];
    neg.extend_from_slice(SYNTH);
    assert_eq!(run(&neg).status.code(), Some(1));
    let mut missing = vec!["eval", "--model", "/nonexistent/model.eebn", "--delta", "0.5"];
    missing.extend_from_slice(SYNTH);
    assert_eq!(run(&missing).status.code(), Some(2));
    let mut classes = vec!["eval", "--model", &model, "--delta", "0.5", "--synth", "--classes", "4"];
    classes.extend_from_slice(&["--per-class", "5"]);
    assert_eq!(run(&classes).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_data_round_trips_through_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut args = vec!["synth-data", "--out", data.to_str().unwrap()];
    args.extend_from_slice(&SYNTH[1..]);
    ok(&args);
    let manifest = data.join("manifest.csv");
    let ds = eebnn::train::Dataset::from_manifest(&manifest).unwrap();
    assert_eq!(ds.len(), 15);
    assert_eq!(ds.n_classes(), 3);

    let wav = match &ds.samples()[0].source {
        eebnn::train::Source::Wav(p) => p.clone(),
        _ => unreachable!(),
    };
    let out = ok(&["features", "--wav", wav.to_str().unwrap()]);
    let first = out.lines().next().unwrap();
    assert_eq!(first.split(',').count(), 64);
    assert_eq!(out.lines().count(), 98);
}
