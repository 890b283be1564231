use std::path::Path;
use std::process::Command;

use maskts::cli::run;
use maskts::io::checkpoint::load_checkpoint;

fn maskts(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("maskts").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn synth(dir: &Path, seed: &str) {
    let d = dir.to_str().unwrap();
    let (code, _, err) = maskts(&["synth", "--seed", seed, "--out", d, "--n-train", "3", "--n-val", "1", "--n-test", "2"]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn synth_manifests_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), "7");
    synth(b.path(), "7");
    let read = |p: &Path| std::fs::read(p.join("manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1");
    let d = data.to_str().unwrap();

    let (code, out, _) = maskts(&["fit-ts", "--data", d]);
    assert_eq!(code, 0);
    let fit: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(fit["t0"].as_f64().unwrap() > 0.0);

    let ckpt = dir.path().join("model.mts");
    let c = ckpt.to_str().unwrap();
    let report = dir.path().join("report.json");
    let (code, _, err) = maskts(&[
        "train", "--data", d, "--out", c, "--epochs", "1", "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let (model, cfg) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(cfg.epochs, 1);
    assert_eq!(model.branches().len(), 4);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(report["history"].as_array().unwrap().len(), 1);

    let out_dir = dir.path().join("cal");
    let (code, _, err) = maskts(&["calibrate", "--data", d, "--model", c, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for f in ["test-0000.mts", "test-0000_prob.pgm", "test-0000_uncert.pgm", "test-0001.mts"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }

    for (method, mode) in [("none", "full"), ("ts", "lesion"), ("net", "patches")] {
        let (code, out, err) = maskts(&["eval", "--data", d, "--model", c, "--method", method, "--mode", mode]);
        assert_eq!(code, 0, "{err}");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        for key in ["ece", "mce", "sce", "ace", "n_pixels", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["mode"], mode);
        assert!(v["ece"].as_f64().unwrap() <= v["mce"].as_f64().unwrap() + 1e-12);
    }

    let (code, out, _) = maskts(&["reliability", "--data", d, "--method", "ts"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().next(), Some("bin_lower,bin_upper,count,accuracy,mean_confidence,gap"));
    assert_eq!(out.lines().count(), 11);
}

#[test]
fn exit_codes() {
    assert_eq!(maskts(&["train", "--bogus"]).0, 1);
    assert_eq!(maskts(&["--help"]).0, 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let m = missing.to_str().unwrap();
    let (code, _, err) = maskts(&["fit-ts", "--data", m]);
    assert_eq!(code, 2, "{err}");

    let data = dir.path().join("d");
    synth(&data, "2");
    let d = data.to_str().unwrap();
    let (code, _, _) = maskts(&["train", "--data", d, "--out", m, "--epochs", "0"]);
    assert_eq!(code, 1);
    let (code, _, _) = maskts(&["eval", "--data", d, "--method", "net"]);
    assert_eq!(code, 1);
    std::fs::write(dir.path().join("bad.mts"), b"MTS1\xff\xff\xff\xff").unwrap();
    let bad = dir.path().join("bad.mts");
    let (code, _, _) = maskts(&["eval", "--data", d, "--model", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn binary_reports_exit_status() {
    let exe = env!("CARGO_BIN_EXE_maskts");
    let status = Command::new(exe).arg("--no-such-flag").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = Command::new(exe).args(["fit-ts", "--data", "/nonexistent/dir"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("error"));
}
