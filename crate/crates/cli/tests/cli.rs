use std::path::{Path, PathBuf};
use std::process::Command;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn afw(out: &Path, args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_afw"))
        .env("AFW_OUTPUT_ROOT", out)
        .env("RUST_LOG", "warn")
        .arg("--config")
        .arg(tiny())
        .args(args)
        .output()
        .unwrap();
    assert!(o.status.success(), "afw {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn shipped_configs_parse() {
    for name in ["default.toml", "tiny.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_afw"))
            .args(["--config", path.to_str().unwrap(), "gradcheck", "--seeds", "0"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn phases_run_one_after_another() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert!(afw(out, &["generate-data", "--seed", "3"]).contains("test:"));
    afw(out, &["train", "--seed", "3"]);
    assert!(out.join("train/final.afw").exists());
    afw(out, &["train-boost", "--checkpoint", out.join("train/final.afw").to_str().unwrap()]);
    let boosted = out.join("boosted.afw");
    let text = afw(out, &["eval", "--checkpoint", boosted.to_str().unwrap()]);
    assert!(text.contains("boosted+tta"), "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["config"]["name"], "tiny");

    let video = report["predictions"][0]["video_id"].as_str().unwrap().to_string();
    let score: serde_json::Value =
        serde_json::from_str(&afw(out, &["infer", "--checkpoint", boosted.to_str().unwrap(), "--video", &video, "--stage", "boosted+tta"]))
            .unwrap();
    let p = score["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn experiment_honours_overrides_and_seed_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let text = afw(tmp.path(), &["--set", "name=\"quick\"", "experiment", "--seed", "5"]);
    assert!(text.contains("seed 5"), "{text}");
    assert!(tmp.path().join("quick/stages.txt").exists());
    assert!(tmp.path().join("quick/seed-5/report.json").exists());
}

#[test]
fn bad_input_fails_with_message() {
    let o = Command::new(env!("CARGO_BIN_EXE_afw")).args(["--set", "train.max_steps", "gradcheck"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("key=value"));
}
