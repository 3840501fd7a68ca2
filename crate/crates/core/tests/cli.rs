//! End-to-end runs of the `capdet` binary on tiny 32-pixel data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capdet::cli::{CONFIG_ECHO, EXIT_RUNTIME, VOCAB_FILE};
use capdet::model::ModelConfig;
use capdet::scenegen::dataset::{IMAGE_DIR, MANIFEST_NAME};
use capdet::scenegen::Vocabulary;
use capdet::trainer::CHECKPOINT;
use serde_json::{json, Value};

fn capdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capdet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = capdet(args);
    assert!(
        out.status.success(),
        "capdet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(out: &Path, seed: u64) -> String {
    ok(&["gen-data", "--out", s(out), "--seed", &seed.to_string(), "--image-size", "32"])
}

/// A training config using the micro architecture sized for `data`.
fn micro_config(dir: &Path, data: &Path) -> PathBuf {
    let vocab = Vocabulary::read(&data.join(VOCAB_FILE)).unwrap();
    let mut model = ModelConfig::micro(4, vocab.len());
    model.decoder.max_len = 20;
    let path = dir.join("micro.json");
    let cfg = json!({
        "data": data,
        "model": model,
        "train": { "steps": 4, "batch_size": 2, "checkpoint_every": 0 },
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = gen_data(&a, 3);
    gen_data(&b, 3);
    assert!(stdout.contains("train: 8 records") && stdout.contains("val: 4 records"), "{stdout}");
    for split in ["train", "val"] {
        let ma = fs::read_to_string(a.join(split).join(MANIFEST_NAME)).unwrap();
        let mb = fs::read_to_string(b.join(split).join(MANIFEST_NAME)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.lines().count(), if split == "train" { 8 } else { 4 });
        let images = a.join(split).join(IMAGE_DIR);
        for entry in fs::read_dir(&images).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(images.join(&name)).unwrap(),
                fs::read(b.join(split).join(IMAGE_DIR).join(&name)).unwrap()
            );
        }
    }
    let other = dir.path().join("c");
    gen_data(&other, 4);
    assert_ne!(
        fs::read_to_string(a.join("train").join(MANIFEST_NAME)).unwrap(),
        fs::read_to_string(other.join("train").join(MANIFEST_NAME)).unwrap()
    );
}

#[test]
fn train_eval_infer_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 0);
    let config = micro_config(dir.path(), &data);
    let runs = dir.path().join("runs");
    let val = data.join("val").join(MANIFEST_NAME);

    for plan in ["none", "decoder_only", "detection_only"] {
        let out = runs.join(plan);
        ok(&["train", "--config", s(&config), "--out", s(&out), "--freeze-plan", plan]);
        let echo: Value = serde_json::from_str(&fs::read_to_string(out.join(CONFIG_ECHO)).unwrap()).unwrap();
        assert_eq!(echo["train"]["freeze_plan"], plan);
        assert_eq!(echo["train"]["steps"], 4);
        let ck = out.join(CHECKPOINT);
        let table = ok(&["eval", "--checkpoint", s(&ck), "--manifest", s(&val), "--beam", "2"]);
        assert!(table.contains("mAP"), "{table}");
        assert!(out.join("report.json").is_file() && out.join("report.csv").is_file());
    }

    let summary = ok(&["report", "--runs-dir", s(&runs)]);
    let rows: Vec<&str> = summary.lines().filter(|l| l.starts_with("| ")).skip(2).collect();
    assert_eq!(rows.len(), 3, "{summary}");
    assert!(rows[0].contains("decoder_only") && rows[0].contains("| 0.1 |"));
    assert!(rows[1].contains("detection_only") && rows[1].contains("| 0 |"));
    assert!(runs.join("summary.csv").is_file());

    let ck = runs.join("none").join(CHECKPOINT);
    let image = fs::read_dir(data.join("val").join(IMAGE_DIR)).unwrap().next().unwrap().unwrap().path();
    let off: Value = serde_json::from_str(&ok(&["infer", "--checkpoint", s(&ck), "--image", s(&image), "--detect", "off"])).unwrap();
    let keys: Vec<&String> = off.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["caption", "image", "logprob"]);

    let on: Value = serde_json::from_str(&ok(&["infer", "--checkpoint", s(&ck), "--image", s(&image)])).unwrap();
    assert!(on["detections"].is_array());
    let overlay = PathBuf::from(on["overlay"].as_str().unwrap());
    assert!(fs::read(&overlay).unwrap().starts_with(b"P6"));
}

#[test]
fn missing_manifest_fails_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 1);
    fs::remove_file(data.join("train").join(MANIFEST_NAME)).unwrap();
    let config = micro_config(dir.path(), &data);
    let out = dir.path().join("run");
    let res = capdet(&["train", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(EXIT_RUNTIME));
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
    assert!(!out.join(CHECKPOINT).exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let res = capdet(&["train", "--out", "x", "--lambda", "often"]);
    assert_eq!(res.status.code(), Some(capdet::cli::EXIT_USAGE));
    let res = capdet(&["infer", "--checkpoint", "none.bin", "--image", "none.ppm", "--detect", "maybe"]);
    assert_eq!(res.status.code(), Some(capdet::cli::EXIT_USAGE));
}
