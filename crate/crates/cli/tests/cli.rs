use std::path::Path;
use std::process::{Command, Output};

use garment_edit_cli::{GeneratorSpec, Manifest, MANIFEST_FILE};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_garment-edit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn garment-edit")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn replay_matches(dir: &Path, run: &str) {
    let manifest = format!("{run}/{MANIFEST_FILE}");
    let again = format!("{run}-replay");
    ok(dir, &["replay", "--manifest", &manifest, "--out", &again]);
    let a = Manifest::load(&dir.join(&manifest)).unwrap();
    let b = Manifest::load(&dir.join(&again).join(MANIFEST_FILE)).unwrap();
    assert!(!a.outputs.is_empty());
    assert_eq!(a.outputs, b.outputs);
}

#[test]
fn every_subcommand_replays_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "2", "sample-latents", "--count", "5", "--out", "lat"]);
    replay_matches(d, "lat");

    ok(d, &["optimize", "--latent", "lat/0000.bin", "--text", "blue", "--steps", "15", "--out", "opt"]);
    replay_matches(d, "opt");

    ok(d, &["train-mapper", "--dataset", "lat", "--text", "blue", "--steps", "12", "--split", "0.6", "--out", "tm"]);
    replay_matches(d, "tm");

    ok(d, &["edit", "--mapper", "tm/mapper.safetensors", "--latent", "lat/0002.bin", "--blend", "--out", "ed"]);
    replay_matches(d, "ed");

    ok(d, &["invert", "--image", "ed/edited.png", "--steps", "8", "--encoder-steps", "15", "--out", "inv"]);
    replay_matches(d, "inv");

    ok(
        d,
        &[
            "--generator",
            "checkpoint:inv/generator.safetensors",
            "edit",
            "--mapper",
            "tm/mapper.safetensors",
            "--image",
            "ed/original.png",
            "--encoder-steps",
            "10",
            "--pti-steps",
            "3",
            "--out",
            "ed2",
        ],
    );
    replay_matches(d, "ed2");

    for (dir, src) in [("orig", "original.png"), ("edit", "edited.png")] {
        std::fs::create_dir(d.join(dir)).unwrap();
        std::fs::copy(d.join("ed").join(src), d.join(dir).join("a.png")).unwrap();
        std::fs::copy(d.join("ed2").join(src), d.join(dir).join("b.png")).unwrap();
    }
    ok(d, &["--jobs", "2", "evaluate", "--original", "orig", "--edited", "edit", "--region", "full", "--out", "ev"]);
    replay_matches(d, "ev");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_images"], 2);
}

#[test]
fn manifest_records_run_identity() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--seed", "7", "sample-latents", "--count", "2", "--out", "lat"]);
    let m = Manifest::load(&tmp.path().join("lat").join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, "sample-latents");
    assert_eq!(m.seed, 7);
    assert_eq!(m.generator, "toy");
    assert_eq!(m.argv[0], "--seed");
    assert_eq!(m.outputs.len(), 4);
    assert!(m.backends.contains_key("generator"));
    let text = std::fs::read_to_string(tmp.path().join("lat").join(MANIFEST_FILE)).unwrap();
    assert!(!text.contains("time"));
}

#[test]
fn seeds_change_samples() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--seed", "1", "sample-latents", "--count", "1", "--out", "a"]);
    ok(tmp.path(), &["--seed", "2", "sample-latents", "--count", "1", "--out", "b"]);
    let a = std::fs::read(tmp.path().join("a/0000.bin")).unwrap();
    let b = std::fs::read(tmp.path().join("b/0000.bin")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn replay_reports_tampered_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["sample-latents", "--count", "1", "--out", "lat"]);
    let path = tmp.path().join("lat").join(MANIFEST_FILE);
    let mut m = Manifest::load(&path).unwrap();
    m.outputs.insert("0000.bin".into(), "0".repeat(64));
    m.save(&path).unwrap();
    let out = bin(tmp.path(), &["replay", "--manifest", "lat/manifest.json", "--out", "again"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0000.bin"));
}

#[test]
fn replay_refuses_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["sample-latents", "--count", "2", "--out", "lat"]);
    ok(d, &["optimize", "--latent", "lat/0000.bin", "--text", "red", "--steps", "2", "--out", "opt"]);
    std::fs::copy(d.join("lat/0001.bin"), d.join("lat/0000.bin")).unwrap();
    let out = bin(d, &["replay", "--manifest", "opt/manifest.json", "--out", "again"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inputs"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(bin(tmp.path(), &["sample-latents", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(tmp.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(bin(tmp.path(), &["--generator", "gan", "sample-latents", "--count", "1", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(tmp.path(), &["optimize", "--latent", "absent.bin", "--text", "blue", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.bin"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["sample-latents", "--count", "3", "--out", "lat"]);
    let before: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    let out = bin(d, &["--dry-run", "train-mapper", "--dataset", "lat", "--text", "blue", "--out", "tm"]);
    assert!(out.status.success());
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["settings"]["dataset_size"], 3);
    ok(d, &["--dry-run", "sample-latents", "--count", "2", "--out", "more"]);
    let after: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(before, after);
}

#[test]
fn non_empty_output_folder_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["sample-latents", "--count", "1", "--out", "lat"]);
    let out = bin(tmp.path(), &["sample-latents", "--count", "1", "--out", "lat"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_drives_training() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["sample-latents", "--count", "4", "--out", "lat"]);
    let mut cfg = garment_edit::EditConfig::default();
    cfg.max_steps = 3;
    cfg.optimizer = garment_edit::OptimizerKind::Adam;
    cfg.save(&d.join("edit.toml")).unwrap();
    ok(d, &["--config", "edit.toml", "train-mapper", "--dataset", "lat", "--text", "blue", "--kind", "plain", "--split", "0.5", "--out", "tm"]);
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("tm/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["steps"], 3);
    let stored = garment_edit::EditConfig::load(&d.join("tm/config.toml")).unwrap();
    assert_eq!(stored.optimizer, garment_edit::OptimizerKind::Adam);
}

#[test]
fn generator_spec_parsing() {
    assert_eq!("toy".parse::<GeneratorSpec>(), Ok(GeneratorSpec::Toy));
    assert_eq!(
        "checkpoint:a/b.safetensors".parse::<GeneratorSpec>(),
        Ok(GeneratorSpec::Checkpoint("a/b.safetensors".into()))
    );
    assert!("checkpoint:".parse::<GeneratorSpec>().is_err());
    assert!("stylegan".parse::<GeneratorSpec>().is_err());
    assert_eq!(GeneratorSpec::Checkpoint("x".into()).to_string(), "checkpoint:x");
}

#[test]
fn png_roundtrip_is_exact_on_byte_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let vals: Vec<f64> = (0..4 * 5 * 3).map(|i| ((i * 17) % 256) as f64 / 255.0).collect();
    let img = garment_edit::ImageBuffer::from_vec(4, 5, vals.clone(), garment_edit::PixelRange::Unit).unwrap();
    let p = tmp.path().join("x.png");
    garment_edit_cli::write_png(&p, &img).unwrap();
    let back = garment_edit_cli::read_png(&p).unwrap();
    assert_eq!((back.height(), back.width()), (4, 5));
    assert_eq!(back.to_vec().unwrap(), vals);
}
