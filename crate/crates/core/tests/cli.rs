//! Runs the `marionette` binary end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use marionette::cli::{
    CHECKPOINT_FILE, DEVICE_ENV, EXIT_CONFIG, EXIT_INVALID_ARGUMENT, EXIT_IO, EXIT_OK, EXIT_PRECONDITION, EXIT_USAGE,
    MANIFEST_FILE,
};
use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"{
  "schema_version": 1,
  "data": {"clips": 2, "frames": 4, "resolution": 32, "seed": 3},
  "autoencoder_training": {"steps": 2, "batch_size": 2},
  "stage1": {"steps": 2, "batch_size": 2, "resolution": 32},
  "stage2": {"steps": 2, "batch_size": 1, "clip_length": 2, "resolution": 32},
  "sampler": {"num_steps": 2},
  "window": {"window": 3, "overlap": 1}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marionette"))
        .args(args)
        .env_remove(DEVICE_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn check_manifest_hashes(m: &Value) {
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let bytes = fs::read(o["path"].as_str().unwrap()).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
}

fn tree_hashes(root: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.clone(), hex::encode(Sha256::digest(fs::read(&path).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_runs_and_records_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, vae, s1, s2, anim, report) = (
        root.join("data"),
        root.join("vae"),
        root.join("s1"),
        root.join("s2"),
        root.join("anim"),
        root.join("report"),
    );

    let o = run(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    assert_eq!(fs::read_dir(data.join("clips")).unwrap().count(), 2);
    check_manifest_hashes(&manifest(&data));
    let data_before = tree_hashes(&data);

    let o = run(&["train-vae", "--config", p(&cfg), "--data", p(&data), "--out", p(&vae)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    assert!(vae.join(CHECKPOINT_FILE).is_file());
    check_manifest_hashes(&manifest(&vae));

    let o = run(&[
        "train-stage1",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--vae",
        p(&vae),
        "--out",
        p(&s1),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let m1 = manifest(&s1);
    check_manifest_hashes(&m1);
    assert_eq!(m1["config"]["stage1"]["steps"], 2);

    let o = run(&[
        "train-stage2",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--ckpt",
        p(&s1),
        "--out",
        p(&s2),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    check_manifest_hashes(&manifest(&s2));

    let clip = data.join("clips/00000");
    let o = run(&[
        "animate",
        "--config",
        p(&cfg),
        "--ckpt",
        p(&s2),
        "--ref",
        p(&clip.join("ref.png")),
        "--poses",
        p(&clip),
        "--out",
        p(&anim),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    assert_eq!(fs::read_dir(anim.join("frames")).unwrap().count(), 4);
    let result: Value = serde_json::from_str(&fs::read_to_string(anim.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["num_frames"], 4);
    check_manifest_hashes(&manifest(&anim));

    // Same manifest inputs reproduce the same artifacts.
    let again = root.join("anim2");
    let o = run(&[
        "animate",
        "--config",
        p(&cfg),
        "--ckpt",
        p(&s2.join(CHECKPOINT_FILE)),
        "--ref",
        p(&clip.join("ref.png")),
        "--poses",
        p(&clip.join("clip.json")),
        "--out",
        p(&again),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    for i in 0..4 {
        let f = format!("frames/{i:05}.png");
        assert_eq!(fs::read(anim.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap());
    }

    let o = run(&[
        "eval",
        "--pred",
        p(&anim),
        "--gt",
        p(&clip),
        "--ckpt",
        p(&s2),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(r["ssim"].as_f64().unwrap() <= 1.0);
    assert!(r["perceptual_dist"].as_f64().unwrap() >= 0.0);
    check_manifest_hashes(&manifest(&report));

    assert_eq!(tree_hashes(&data), data_before, "inputs were modified");
}

#[test]
fn eval_of_identical_corpora_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = run(&[
        "gen-data",
        "--clips",
        "2",
        "--frames",
        "3",
        "--resolution",
        "32",
        "--seed",
        "1",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let out = tmp.path().join("r");
    let o = run(&["eval", "--pred", p(&data), "--gt", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["ssim"].as_f64().unwrap(), 1.0);
    assert_eq!(r["psnr"].as_f64().unwrap(), 100.0);
    assert!(r["perceptual_dist"].is_null());
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&[
            "gen-data",
            "--clips",
            "5",
            "--frames",
            "24",
            "--seed",
            "1",
            "--resolution",
            "32",
            "--out",
            p(d),
        ]);
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    }
    assert_eq!(fs::read_dir(a.join("clips")).unwrap().count(), 5);
    let strip = |v: Vec<(PathBuf, String)>, root: &Path| -> Vec<(PathBuf, String)> {
        v.into_iter()
            .filter(|(p, _)| !p.ends_with(MANIFEST_FILE))
            .map(|(p, h)| (p.strip_prefix(root).unwrap().to_path_buf(), h))
            .collect()
    };
    assert_eq!(strip(tree_hashes(&a), &a), strip(tree_hashes(&b), &b));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["no-such-command"])), EXIT_USAGE);
    assert_eq!(code(&run(&["gen-data", "--bogus-flag", "1"])), EXIT_USAGE);
    assert_eq!(code(&run(&["animate"])), EXIT_USAGE);
    assert_eq!(code(&run(&[])), EXIT_USAGE);
    assert_eq!(code(&run(&["--help"])), EXIT_OK);
}

#[test]
fn missing_checkpoint_is_an_io_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.bin");
    let o = run(&[
        "animate",
        "--ckpt",
        p(&missing),
        "--ref",
        "r.png",
        "--poses",
        "c",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), EXIT_IO);
    assert!(stderr(&o).contains("missing.bin"), "{}", stderr(&o));
}

#[test]
fn config_errors_list_every_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"stage1": {"stage": 3}, "sampler": {"num_steps": 0}}"#).unwrap();
    let o = run(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&o), EXIT_CONFIG);
    let err = stderr(&o);
    assert!(
        err.contains("stage1.stage") && err.contains("sampler.num_steps"),
        "{err}"
    );
    assert!(!tmp.path().join("d").exists(), "no work may start on a bad config");
}

#[test]
fn unsupported_device_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_marionette"))
        .args([
            "gen-data",
            "--clips",
            "1",
            "--frames",
            "1",
            "--out",
            p(&tmp.path().join("d")),
        ])
        .env(DEVICE_ENV, "cuda")
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(stderr(&o).contains(DEVICE_ENV));
}

#[test]
fn invalid_arguments_and_preconditions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = run(&[
        "gen-data",
        "--clips",
        "1",
        "--frames",
        "2",
        "--resolution",
        "32",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));

    // Stage 1 without a stage-0 checkpoint.
    let o = run(&[
        "train-stage1",
        "--data",
        p(&data),
        "--vae",
        p(&tmp.path().join("nope.safetensors")),
        "--out",
        p(&tmp.path().join("s1")),
    ]);
    assert_eq!(code(&o), EXIT_PRECONDITION, "{}", stderr(&o));

    // Stage 2 from a stage-0 checkpoint.
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let vae = tmp.path().join("vae");
    let o = run(&["train-vae", "--config", p(&cfg), "--data", p(&data), "--out", p(&vae)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let o = run(&[
        "train-stage2",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--ckpt",
        p(&vae),
        "--out",
        p(&tmp.path().join("s2")),
    ]);
    assert_eq!(code(&o), EXIT_PRECONDITION, "{}", stderr(&o));

    // Empty dataset directory.
    let empty = tmp.path().join("empty");
    fs::create_dir_all(empty.join("clips")).unwrap();
    let o = run(&[
        "train-vae",
        "--config",
        p(&cfg),
        "--data",
        p(&empty),
        "--out",
        p(&tmp.path().join("v2")),
    ]);
    assert_eq!(code(&o), EXIT_INVALID_ARGUMENT, "{}", stderr(&o));
}
