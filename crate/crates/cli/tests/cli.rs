use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vemse_core::benchmark::benchmark_mixture;
use vemse_core::dsp::{write_wav, WavEncoding};
use vemse_core::model_store;

fn vemse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vemse"))
        .args(args)
        .output()
        .expect("spawn vemse")
}

fn ok(args: &[&str]) -> Output {
    let out = vemse(args);
    assert!(
        out.status.success(),
        "vemse {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_small(dir: &Path, name: &str) -> PathBuf {
    let model = dir.join(name);
    ok(&[
        "train",
        "--seed",
        "5",
        "--n-utterances",
        "2",
        "--max-epochs",
        "3",
        "--latent-dim",
        "4",
        "--model",
        s(&model),
    ]);
    model
}

fn write_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let (speech, noise, _) = benchmark_mixture(3, 0, 5.0).unwrap();
    let sp = dir.join("speech.wav");
    let np = dir.join("noise.wav");
    write_wav(&sp, &speech, WavEncoding::Float32).unwrap();
    write_wav(&np, &noise, WavEncoding::Float32).unwrap();
    (sp, np)
}

#[test]
fn train_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = train_small(dir.path(), "a.vaew");
    let b = train_small(dir.path(), "b.vaew");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = model_store::load(&a).unwrap();
    assert_eq!((m.n_freqs(), m.latent_dim()), (513, 4));
    let log = fs::read_to_string(dir.path().join("a.vaew.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn enhance_is_deterministic_and_eval_agrees() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let model = train_small(d, "m.vaew");
    let (sp, np) = write_pair(d);
    let run = |out: &Path| {
        let o = ok(&[
            "enhance", "--model", s(&model), "--speech", s(&sp), "--noise", s(&np), "--snr", "5",
            "--max-iters", "5", "--mh-iters", "8", "--mh-keep", "2", "--seed", "9", "--out", s(out),
        ]);
        String::from_utf8(o.stdout).unwrap().trim().parse::<f64>().unwrap()
    };
    let e1 = d.join("e1.wav");
    let e2 = d.join("e2.wav");
    let sdr = run(&e1);
    run(&e2);
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    let report = fs::read_to_string(d.join("e1.wav.report.jsonl")).unwrap();
    assert!(!report.trim().is_empty());

    let o = ok(&["eval", "--reference", s(&sp), "--estimate", s(&e1)]);
    let evaluated: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    // The written file is f32, the reported value is from the f64 estimate.
    assert!((evaluated - sdr).abs() < 1e-2, "{evaluated} vs {sdr}");
}

#[test]
fn benchmark_writes_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let model = train_small(d, "m.vaew");
    let cfg = d.join("bench.conf");
    fs::write(
        &cfg,
        "# small run\nn-utterances = 2\nmethods = vem, mcem\nd-values = 1\nr-values = 2\n\
         modes = mh\nmax-iters = 3\nmh-iters = 8\nmh-keep = 2\n",
    )
    .unwrap();
    let out_dir = d.join("bench");
    let o = ok(&["benchmark", "--config", s(&cfg), "--model", s(&model), "--out", s(&out_dir)]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("cost ratio"), "{stdout}");

    let csv = fs::read_to_string(out_dir.join("benchmark.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in ["method", "si_sdr", "ms_per_iter", "iters_to_tol"] {
        assert!(header.contains(&col), "missing {col} in {header:?}");
    }
    assert_eq!(lines.count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["groups"].as_array().is_some_and(|g| g.len() == 2));
}

#[test]
fn invalid_configuration_fails() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.conf");
    fs::write(&cfg, "n-utterances = 2\nbogus = 1\n").unwrap();
    let o = vemse(&["train", "--config", s(&cfg), "--model", s(&d.join("m.vaew"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key \"bogus\""));

    fs::write(&cfg, "K = ten\n").unwrap();
    assert!(!vemse(&["enhance", "--config", s(&cfg)]).status.success());
    assert!(!vemse(&["enhance", "--K", "0", "--model", "x", "--out", "y"]).status.success());
    assert!(!vemse(&["eval", "--reference", s(&d.join("missing.wav"))]).status.success());
    assert!(!vemse(&["train"]).status.success());
}
