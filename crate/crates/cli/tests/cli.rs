use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn esure(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esure")).args(args).output().unwrap()
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_train_job() -> serde_json::Value {
    json!({
        "loss": "esure",
        "epochs": 2,
        "batch_size": 4,
        "patches": {"patch_size": 16, "stride": 16, "augment": true},
        "global_seed": 5
    })
}

#[test]
fn synth_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = write_json(
        d,
        "synth.json",
        json!({
            "regime": "uncorrelated_pair",
            "noise": {"sigma_255": 25.0},
            "seed": 3,
            "generate": {"source": "synthetic", "train_count": 2, "test_count": 1, "size": 32}
        }),
    );
    let data = d.join("data");
    let o = esure(&["synth", s(&synth), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let job = write_json(d, "train.json", tiny_train_job());
    let ckpt = d.join("model.ckpt");
    let o = esure(&["train", s(&job), "--manifest", s(&manifest), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("model.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("#schema=training_log/1"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);

    // identical job and seed: identical bytes
    let again = d.join("again.ckpt");
    esure(&["train", s(&job), "--manifest", s(&manifest), "--out", s(&again)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
    let other = d.join("other.ckpt");
    esure(&["train", s(&job), "--manifest", s(&manifest), "--out", s(&other), "--seed", "6"]);
    assert_ne!(std::fs::read(&ckpt).unwrap(), std::fs::read(&other).unwrap());

    let eval = write_json(
        d,
        "eval.json",
        json!({
            "checkpoint": "model.ckpt",
            "corpus": {"source": "synthetic", "train_count": 0, "test_count": 2, "size": 32},
            "denoised_dir": "denoised"
        }),
    );
    let report = d.join("eval.csv");
    let o = esure(&["eval", s(&eval), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("#schema=eval/1"));
    assert!(d.join("denoised/denoised_0001.pgm").exists());
}

#[test]
fn identity_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let job = write_json(dir.path(), "identity.json", json!({"samples": 20, "image": {"size": 16}}));
    let out = dir.path().join("identity.csv");
    let o = esure(&["verify", "identity", s(&job), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().last().unwrap().ends_with(",true"));
}

#[test]
fn unbiasedness_outcomes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("verify.csv");
    let nested = json!({"setup": "nested", "sigma_gt_255": 10.0, "sigma_noisy_255": 25.0});
    let esure_job = write_json(
        dir.path(),
        "esure.json",
        json!({
            "estimator": "esure",
            "denoiser": {"kind": "scaling", "params": [0.5]},
            "image": {"size": 16, "energy": 0.01},
            "noise": nested,
            "draws": 4000
        }),
    );
    assert_eq!(code(&esure(&["verify", "unbiasedness", s(&esure_job), "--out", s(&out)])), 0);

    // N2N on nested pairs is biased by sigma_gt^2 (1 - 2a); expecting unbiasedness fails with 1
    let n2n = |expect: &str| {
        write_json(
            dir.path(),
            &format!("n2n_{expect}.json"),
            json!({
                "estimator": "n2n",
                "denoiser": {"kind": "scaling", "params": [0.8]},
                "image": {"size": 16, "energy": 0.01},
                "noise": nested,
                "draws": 4000,
                "expect": expect
            }),
        )
    };
    assert_eq!(code(&esure(&["verify", "unbiasedness", s(&n2n("unbiased")), "--out", s(&out)])), 1);
    assert_eq!(code(&esure(&["verify", "unbiasedness", s(&n2n("biased")), "--out", s(&out)])), 0);
    let rows = std::fs::read_to_string(&out).unwrap();
    assert_eq!(rows.lines().count(), 2 + 3);
}

#[test]
fn gradient_check_passes_for_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let job = write_json(
        dir.path(),
        "gradient.json",
        json!({
            "loss": "sure",
            "noise": {"setup": "single", "sigma_255": 25.0},
            "max_coords": 40
        }),
    );
    let out = dir.path().join("gradient.csv");
    let o = esure(&["verify", "gradient", s(&job), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = dir.path().join("x");
    assert_eq!(code(&esure(&["experiment", s(&missing), "--out", s(&out)])), 2);

    let bad = write_json(dir.path(), "bad.json", json!({"campaign": "uncorrelated_pairs", "train": {"batch_size": 0}}));
    let o = esure(&["experiment", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    // mse needs clean targets, so an uncorrelated-pair manifest is rejected before training
    let synth = write_json(
        dir.path(),
        "synth.json",
        json!({
            "regime": "uncorrelated_pair",
            "noise": {"sigma_255": 25.0},
            "seed": 1,
            "generate": {"source": "synthetic", "train_count": 1, "test_count": 1, "size": 16}
        }),
    );
    let data = dir.path().join("data");
    assert_eq!(code(&esure(&["synth", s(&synth), "--out", s(&data)])), 0);
    let mut job = tiny_train_job();
    job["loss"] = json!("mse");
    let job = write_json(dir.path(), "mse.json", job);
    let o = esure(&[
        "train",
        s(&job),
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn experiment_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "campaign.json",
        json!({
            "campaign": "imperfect_gt_sweep",
            "sigma_gt_255": [1.0, 10.0],
            "corpus": {"source": "synthetic", "train_count": 2, "test_count": 1, "size": 32},
            "seed": 2,
            "train": {"epochs": 1, "batch_size": 4, "patches": {"patch_size": 16, "stride": 16, "augment": true}}
        }),
    );
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = esure(&["experiment", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read_to_string(out.join("metrics.csv")).unwrap(),
            std::fs::read_to_string(out.join("plot_data.csv")).unwrap(),
        )
    };
    let (metrics, plot) = run("a");
    assert_eq!((metrics.clone(), plot.clone()), run("b"));
    assert_eq!(metrics.lines().count(), 2 + 4);
    assert!(plot.starts_with("#schema=plot_data/1\nsigma_gt_255,N2N,eSURE\n"));
}
