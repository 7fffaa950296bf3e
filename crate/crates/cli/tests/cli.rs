use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn dfreloc(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfreloc"))
        .args(args)
        .arg("--config")
        .arg(smoke_config())
        .arg("--override")
        .arg(format!("output_dir={}", out_dir.display()))
        .env_remove("DFRELOC_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out_dir: &Path) -> String {
    let out = dfreloc(args, out_dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn single_error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfreloc(&["eval", "--override", "nerf.depth=3"], dir.path());
    let err = single_error_line(&out);
    assert!(err.starts_with("error: UNKNOWN_CONFIG_KEY:"), "{err}");
    assert!(err.contains("nerf.depth"), "{err}");
}

#[test]
fn invalid_values_and_seed_variable_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = single_error_line(&dfreloc(&["eval", "--override", "dfnet.lr=fast"], dir.path()));
    assert!(err.contains("INVALID_CONFIG_VALUE") && err.contains("dfnet.lr"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_dfreloc"))
        .args(["show-config", "--config"])
        .arg(smoke_config())
        .env("DFRELOC_SEED", "nope")
        .output()
        .unwrap();
    let err = single_error_line(&out);
    assert!(err.contains("DFRELOC_SEED"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_dfreloc"))
        .args(["show-config", "--config"])
        .arg(smoke_config())
        .env("DFRELOC_SEED", "77")
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("\nseed = 77\n"));
}

#[test]
fn usage_errors_are_one_line() {
    let out = Command::new(env!("CARGO_BIN_EXE_dfreloc")).arg("fly").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = single_error_line(&out);
    assert!(err.starts_with("error: USAGE:"), "{err}");
}

#[test]
fn stages_need_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let err = single_error_line(&dfreloc(&["train-dfnet"], dir.path()));
    assert!(err.starts_with("error: CHECKPOINT:") && err.contains("nerf.ckpt"), "{err}");
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("dfreloc.lock"), "1\n").unwrap();
    let err = single_error_line(&dfreloc(&["eval"], dir.path()));
    assert!(err.starts_with("error: LOCKED:"), "{err}");
}

#[test]
fn make_toy_writes_a_loadable_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok(&["make-toy", "--out", scene.to_str().unwrap()], dir.path());
    assert!(scene.join("toy_scene.txt").is_file());
    assert!(scene.join("train").is_dir() && scene.join("val").is_dir());

    // The folder scene drives the same stages as the generated one.
    let out = dfreloc(
        &["train-nerf", "--override", &format!("scene={}", scene.display())],
        &dir.path().join("run"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in ["train-nerf", "render", "train-dfnet", "finetune-dm", "refine"] {
        ok(&[stage], d);
    }
    let ckpt_before = fs::read(d.join("dfnet.ckpt")).unwrap();
    let summary = ok(&["eval"], d);
    assert!(summary.contains("# dfnet/val:"), "{summary}");
    assert!(summary.contains("# dfnet_dm/unlabeled:"), "{summary}");
    assert!(summary.contains("# refined/val:"), "{summary}");
    assert!(summary.contains("# psnr/val:"), "{summary}");
    let first = fs::read_to_string(d.join("report.txt")).unwrap();
    ok(&["eval"], d);
    assert_eq!(fs::read_to_string(d.join("report.txt")).unwrap(), first);
    assert_eq!(fs::read(d.join("dfnet.ckpt")).unwrap(), ckpt_before, "eval must not touch models");

    let plotted = ok(&["plot"], d);
    for name in [
        "trajectory_dfnet_val.svg",
        "trajectory_dfnet_val.csv",
        "landscape.svg",
        "curves_nerf.svg",
        "curves_dfnet.svg",
        "curves_dm.svg",
    ] {
        assert!(d.join("plots").join(name).is_file(), "{name} missing:\n{plotted}");
    }
    assert!(d.join("landscape.csv").is_file());
    for name in ["nerf.ckpt", "dfnet_dm.ckpt", "renders", "render_psnr.csv", "refine.csv"] {
        assert!(d.join(name).exists(), "{name} missing");
    }
    assert!(!d.join("dfreloc.lock").exists());
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["show-config"], dir.path());
    let file = dir.path().join("resolved.conf");
    fs::write(&file, &text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dfreloc"))
        .args(["show-config", "--config"])
        .arg(&file)
        .env_remove("DFRELOC_SEED")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);
}
