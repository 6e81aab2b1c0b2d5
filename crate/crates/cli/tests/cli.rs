use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tpgsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpgsr"))
        .args(args)
        .env("TPGSR_THREADS", "1")
        .output()
        .expect("spawn tpgsr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = tpgsr(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "model=desk",
    "--set", "batch=8",
    "--set", "epochs=1",
    "--set", "finetune_epochs=1",
    "--set", "rec_epochs=1",
    "--set", "rec_batch=8",
    "--set", "grid_samples=2",
    "--quiet",
];

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    args.extend_from_slice(TINY);
    args
}

#[test]
fn gen_data_writes_the_file_and_prints_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sub/data.bin");
    let text = ok(&["gen-data", "--train", "5", "--test", "3", "--seed", "2", "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["count"], 8);
    assert_eq!(m["splits"]["train"], 5);
    assert_eq!(m["splits"]["test"], 3);
    assert_eq!(m["seed"], 2);
    assert_eq!(m["offsets"].as_array().unwrap().len(), 8);
    assert!(out.is_file());
}

#[test]
fn empty_splits_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.bin");
    let o = tpgsr(&["gen-data", "--train", "0", "--test", "3", "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "seed = 3\nwidth = 9\n").unwrap();
    let o = tpgsr(&["train", "--config", s(&cfg), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("error:") && err.contains("width"), "{err}");

    let o = tpgsr(&["train", "--set", "stages=two"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stages"));
}

#[test]
fn missing_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = tpgsr(&["eval", "--run", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn gradient_suite_passes() {
    let text = ok(&["gradcheck", "--trials", "1"]);
    assert!(text.contains(", 0 failed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

fn write_pgm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h).map(|i| if ((i % w) / 4).is_multiple_of(2) { 230u8 } else { 20 }));
    fs::write(path, bytes).unwrap();
}

#[test]
fn tiny_end_to_end_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    let rec_dir = dir.path().join("rec");
    let run_dir = dir.path().join("run");
    ok(&["gen-data", "--train", "24", "--test", "12", "--seed", "5", "--out", s(&data)]);

    let text = ok(&with_tiny(vec!["pretrain-rec", "--dataset", s(&data), "--out", s(&rec_dir)]));
    assert!(text.contains("bicubic"), "{text}");
    let rec_ckpt = rec_dir.join("recognizer.ckpt");
    assert!(rec_ckpt.is_file());

    let text = ok(&with_tiny(vec![
        "train",
        "--dataset", s(&data),
        "--recognizer", s(&rec_ckpt),
        "--run-dir", s(&run_dir),
        "--stages", "2",
        "--seed", "4",
    ]));
    assert!(text.contains("sr"), "{text}");
    for f in ["config.txt", "final.ckpt", "metrics.csv"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,epoch,stages,lr,loss,"), "{metrics}");
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    let config = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(config.contains("stages = 2") || config.contains("stages=2"), "{config}");

    let ckpt = fs::read(run_dir.join("final.ckpt")).unwrap();
    assert_eq!(&ckpt[..4], b"TPGS");
    let report_dir = dir.path().join("report");
    let table = ok(&["eval", "--run", s(&run_dir), "--out", s(&report_dir)]);
    for m in ["bicubic", "sr", "hr"] {
        assert!(table.lines().any(|l| l.starts_with(m)), "{table}");
        let csv = fs::read_to_string(report_dir.join(format!("eval_{m}.csv"))).unwrap();
        assert!(csv.starts_with("split,n,acc,psnr_db,ssim"), "{csv}");
    }
    assert_eq!(fs::read(run_dir.join("final.ckpt")).unwrap(), ckpt, "eval changed the checkpoint");
    assert_eq!(ok(&["eval", "--run", s(&run_dir)]), table, "eval is not repeatable");

    let image = dir.path().join("in.pgm");
    write_pgm(&image, 64, 16);
    let out = dir.path().join("infer");
    let text = ok(&["infer", "--run", s(&run_dir), "--image", s(&image), "--out", s(&out)]);
    assert_eq!(text.lines().count(), 2, "{text}");
    for k in 1..=2 {
        assert!(text.contains(&format!("stage {k}:")), "{text}");
        assert!(out.join(format!("sr_stage{k}.pgm")).is_file());
    }

    let big = dir.path().join("big.pgm");
    write_pgm(&big, 100, 40);
    ok(&["infer", "--run", s(&run_dir), "--image", s(&big), "--out", s(&out)]);

    let abl_dir = dir.path().join("abl");
    let text = ok(&with_tiny(vec![
        "ablate",
        "--dataset", s(&data),
        "--recognizer", s(&rec_ckpt),
        "--run-dir", s(&abl_dir),
        "--axis", "stages",
        "--values", "1,2",
    ]));
    assert_eq!(text.lines().count(), 3, "{text}");
    let csv = fs::read_to_string(abl_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}
