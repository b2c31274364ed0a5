use std::path::Path;
use std::process::{Command, Output};

use deshadow::manifest::RunManifest;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deshadow"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const TINY: &str = r#"
[phantom]
height = 256
width = 256

[simulate]
count = 2
rois_per_layer = 2

[augment]
out_size = [256, 256]

[train]
lr = 1e-3
cycles = 1
detector_pretrain_epochs = 1
detector_on_removed_epochs = 1
detector_on_gt_epochs = 1

[detector]
width_divisor = 16

[remover]
width_divisor = 32

[backbone]
mode = "random_seeded"
width_divisor = 16
"#;

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    std::fs::write(d.join("bad.toml"), "[train]\nbogus = 1\n").unwrap();

    assert_eq!(run(&["--help"], d).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--config", "bad.toml", "--out", "x"], d).status.code(), Some(1));

    assert_eq!(run(&["simulate", "--config", "tiny.toml", "--out", "sim"], d).status.code(), Some(0));
    // refuses to overwrite without --force
    assert_eq!(run(&["simulate", "--config", "tiny.toml", "--out", "sim"], d).status.code(), Some(1));
    assert_eq!(
        run(&["simulate", "--config", "tiny.toml", "--out", "sim", "--force"], d).status.code(),
        Some(0)
    );

    assert_eq!(run(&["train", "--config", "tiny.toml", "--data", "nowhere", "--out", "r"], d).status.code(), Some(2));
    let out = run(&["train", "--config", "tiny.toml", "--data", "sim", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let ckpt = d.join("run/checkpoint.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    assert_eq!(
        run(&["evaluate", "--checkpoint", ckpt, "--data", "sim", "--rois", "missing.tsv", "--out", "ev"], d)
            .status
            .code(),
        Some(2)
    );
    let out = run(&["infer", "--checkpoint", ckpt, "--input", "sim", "--out", "clean"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(d.join("clean")).unwrap().count(), 3);

    // one unreadable file: the others are still written, exit is a data error
    std::fs::create_dir(d.join("mixed")).unwrap();
    std::fs::copy(d.join("sim/images/phantom_0000.png"), d.join("mixed/a.png")).unwrap();
    std::fs::write(d.join("mixed/b.png"), b"not a png").unwrap();
    let out = run(&["infer", "--checkpoint", ckpt, "--input", "mixed", "--out", "mixed_out"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(d.join("mixed_out/a.png").exists());
    assert!(!d.join("mixed_out/b.png").exists());
}

#[test]
fn simulate_is_reproducible_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert!(run(&["simulate", "--config", "tiny.toml", "--seed", "5", "--out", "a"], d).status.success());
    let m = RunManifest::read(d.join("a/manifest.json")).unwrap();
    assert_eq!(m.seed, 5);
    std::fs::write(d.join("again.toml"), m.config.to_toml()).unwrap();
    assert!(run(&["simulate", "--config", "again.toml", "--out", "b"], d).status.success());
    for f in &m.outputs {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        std::fs::read(d.join("a/manifest.json")).unwrap(),
        std::fs::read(d.join("b/manifest.json")).unwrap()
    );
}
