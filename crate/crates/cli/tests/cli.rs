use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use laploss_core::data::{load_image, save_image, scan_dataset, Split};
use laploss_core::ImageGrid;

fn laploss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laploss"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("LAPLOSS_NUM_WORKERS", "1")
        .output()
        .expect("spawn laploss")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, count: usize, mode: &str, seed: u64, size: (usize, usize)) -> PathBuf {
    let out = dir.join(format!("{mode}_{seed}"));
    let o = laploss(&[
        "synth",
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--mode",
        mode,
        "--seed",
        &seed.to_string(),
        "--height",
        &size.0.to_string(),
        "--width",
        &size.1.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_config(dir: &Path, train: &Path, eval: Option<&Path>, steps: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "generator": {"blocks_low": 1, "blocks_mid": 1, "blocks_top": 1, "width": 4},
            "discriminator": {"base_width": 4, "max_width": 8, "blocks": [1, 1, 2]}
        },
        "data": {"root": train, "height": 16, "width": 16, "augment": null},
        "train": {"steps": steps, "batch_size": 2, "checkpoint_interval": 2},
        "eval": {"root": eval, "splits": ["test_under", "test_over"]}
    });
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn synth_writes_count_scenes_and_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 10, "ladder", 3, (16, 24));
    assert_eq!(std::fs::read_dir(a.join("input")).unwrap().count(), 10);
    assert_eq!(scan_dataset(&a, Split::Train).unwrap().len(), 10);
    let b_dir = dir.path().join("again");
    let b = synth(&b_dir, 10, "ladder", 3, (16, 24));
    assert_eq!(files(&a), files(&b));
    let c = synth(dir.path(), 10, "ladder", 4, (16, 24));
    assert_ne!(files(&a), files(&c));
}

#[test]
fn grad_mode_column_gain_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path(), 3, "grad", 1, (32, 48));
    for m in scan_dataset(&root, Split::Grad).unwrap() {
        let input = load_image(&m.exposure_variants[0].path).unwrap();
        let gt = load_image(&m.ground_truth).unwrap();
        // Median gain over unclipped pixels in groups of 8 columns.
        let gain: Vec<f64> = (0..input.width() / 8)
            .map(|g| {
                let mut r: Vec<f64> = Vec::new();
                for c in 0..3 {
                    for y in 0..input.height() {
                        for x in g * 8..(g + 1) * 8 {
                            let (i, t) = (input.get(c, y, x) as f64, gt.get(c, y, x) as f64);
                            if (0.02..0.98).contains(&i) && t > 0.1 {
                                r.push(i / t);
                            }
                        }
                    }
                }
                r.sort_by(f64::total_cmp);
                r[r.len() / 2]
            })
            .collect();
        let rising = gain.windows(2).all(|w| w[1] > w[0]);
        let falling = gain.windows(2).all(|w| w[1] < w[0]);
        assert!(rising || falling, "{gain:?}");
    }
}

#[test]
fn decompose_writes_levels_and_reconstructs_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageGrid::from_fn(32, 48, |c, y, x| ((c * 31 + y * 7 + x * 13) % 97) as f32 / 96.0);
    let input = dir.path().join("in.png");
    save_image(&img, &input).unwrap();
    let out = dir.path().join("pyr");
    let o = laploss(&["decompose", "--input", s(&input), "--out", s(&out), "--levels", "3", "--reconstruct"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["level_0.png", "level_1.png", "level_2.png", "levels.safetensors", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let line = stdout(&o).lines().find(|l| l.starts_with("max reconstruction error")).unwrap().to_string();
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-5, "{line}");
}

#[test]
fn constant_image_bands_are_uniform_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.png");
    save_image(&ImageGrid::filled(16, 16, 0.3), &input).unwrap();
    let out = dir.path().join("pyr");
    assert!(laploss(&["decompose", "--input", s(&input), "--out", s(&out), "--levels", "3"]).status.success());
    for k in 1..3 {
        let band = load_image(&out.join(format!("level_{k}.png"))).unwrap();
        let first = band.data()[0];
        assert!((first - 0.5).abs() <= 1.0 / 255.0);
        assert!(band.data().iter().all(|&v| v == first));
    }
}

#[test]
fn decompose_rejects_indivisible_size() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("odd.png");
    save_image(&ImageGrid::filled(18, 16, 0.3), &input).unwrap();
    let o = laploss(&["decompose", "--input", s(&input), "--out", s(&dir.path().join("p")), "--levels", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("divisible"));
}

#[test]
fn train_with_missing_config_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = laploss(&["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn train_with_unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"train": {"step": 5}}"#).unwrap();
    let o = laploss(&["train", "--config", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field"));
}

#[test]
fn train_eval_enhance_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), 2, "ladder", 0, (16, 16));
    let test = synth(dir.path(), 2, "ladder", 9, (16, 16));
    let cfg = tiny_config(dir.path(), &train, Some(&test), 4);
    let out = dir.path().join("run");
    let o = laploss(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "events.jsonl", "report.json", "checkpoint/spec.json", "checkpoints/step_000002/weights.safetensors"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let events = std::fs::read_to_string(out.join("events.jsonl")).unwrap();
    assert_eq!(events.lines().filter(|l| l.contains(r#""event":"step""#)).count(), 4);

    // The echoed config reproduces the run.
    let again = dir.path().join("again");
    let o = laploss(&["train", "--config", s(&out.join("config.json")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("checkpoint/weights.safetensors")).unwrap(),
        std::fs::read(again.join("checkpoint/weights.safetensors")).unwrap()
    );

    // Resume from step 2 continues the counter.
    let resumed = dir.path().join("resumed");
    let o = laploss(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--resume",
        s(&out.join("checkpoints/step_000002")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(resumed.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["start_step"], 2);
    assert_eq!(report["final_step"], 4);

    // Eval: explicit splits, reports on disk, deterministic.
    let ckpt = out.join("checkpoint");
    let eval_out = dir.path().join("eval");
    let args = ["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--split", "test_under", "--split", "test_over"];
    let first = laploss(&[&args[..], &["--out", s(&eval_out)]].concat());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("test_under"));
    assert!(eval_out.join("eval_test_over.csv").exists());
    assert_eq!(stdout(&laploss(&args)), stdout(&first));

    let o = laploss(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--split", "grad"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no samples"));

    let other = dir.path().join("other.json");
    std::fs::write(&other, r#"{"model": {"generator": {"width": 8}}}"#).unwrap();
    let o = laploss(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--config", s(&other)]);
    assert_eq!(o.status.code(), Some(2));

    // Enhance keeps the size of an image that is not pyramid-aligned.
    let gray = dir.path().join("gray.png");
    save_image(&ImageGrid::filled(13, 22, 0.5), &gray).unwrap();
    for name in ["e1.png", "e2.png"] {
        let dst = dir.path().join(name);
        let o = laploss(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&gray), "--output", s(&dst)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let img = load_image(&dst).unwrap();
        assert_eq!((img.height(), img.width()), (13, 22));
        assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn training_abort_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), 2, "ladder", 0, (16, 16));
    let cfg = serde_json::json!({
        "model": {
            "generator": {"blocks_low": 1, "blocks_mid": 1, "blocks_top": 1, "width": 4},
            "discriminator": {"base_width": 4, "max_width": 8, "blocks": [1, 1, 2]}
        },
        "loss": {"w": 1e308},
        "data": {"root": train, "height": 16, "width": 16, "augment": null},
        "train": {"steps": 3, "batch_size": 2}
    });
    let p = dir.path().join("huge.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    let out = dir.path().join("o");
    let o = laploss(&["train", "--config", s(&p), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert!(std::fs::read_to_string(out.join("events.jsonl")).unwrap().contains("abort"));
}
