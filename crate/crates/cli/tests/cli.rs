use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aglp_core::data::SsdaDataset;
use aglp_core::{make_gaussian_shift, GaussianShiftParams};

const TINY: &str = r#"
[dataset]
n_source = 60
n_target = 40
n_test = 40

[trainer]
steps = 40
warmup = 10
update_interval = 5
eval_every = 20
batch = { source = 8, labeled = 4, unlabeled = 8 }

[trainer.model]
extractor_layers = [8, 8]
structure_dim = 4
gcn_layers = [6, 4]

[sweep]
repeats = 1
"#;

fn aglp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aglp")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = aglp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn generate_round_trips_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--seed", "5", "--out", s(&a)]);
    ok(&["generate", "--seed", "5", "--out", s(&b)]);
    let bytes = std::fs::read(a.join("dataset.csv")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("dataset.csv")).unwrap());
    assert_eq!(read(a.join("manifest.toml")), read(b.join("manifest.toml")));

    let loaded = SsdaDataset::read_csv(bytes.as_slice()).unwrap();
    let fresh = make_gaussian_shift(&GaussianShiftParams { seed: 5, ..Default::default() }).unwrap();
    assert_eq!(loaded, fresh);

    let manifest: toml::Table = toml::from_str(&read(a.join("manifest.toml"))).unwrap();
    assert_eq!(manifest["dataset"]["seed"].as_integer(), Some(5));
    assert_eq!(manifest["counts"]["labeled"].as_integer(), Some(12));
}

#[test]
fn generate_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--seed", "1", "--out", s(tmp.path()), "--shots", "1", "--shift", "0"]);
    let manifest: toml::Table = toml::from_str(&read(tmp.path().join("manifest.toml"))).unwrap();
    assert_eq!(manifest["counts"]["labeled"].as_integer(), Some(4));
    assert_eq!(manifest["dataset"]["shift"].as_float(), Some(0.0));
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[trainer]\nstepz = 3\n").unwrap();
    let out = aglp(&["train", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let cfg = tiny_config(tmp.path());
    let out = aglp(&["train", "--config", s(&cfg), "--out", s(tmp.path()), "--preset", "everything"]);
    assert_eq!(out.status.code(), Some(2));
    let out = aglp(&["generate", "--out", s(tmp.path()), "--shots", "500"]);
    assert_eq!(out.status.code(), Some(2));
    let out = aglp(&["train", "--config", s(&cfg), "--out", s(tmp.path()), "--steps", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.toml");
    std::fs::write(&cfg, TINY.replace("steps = 40", "steps = 40\nlr = 1e12")).unwrap();
    let out = aglp(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn single_seed_summary_has_zero_spread() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out_dir), "--preset", "full"]);
    let summary = read(out_dir.join("summary.csv"));
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 2);
    let fields: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(fields[0], "full");
    assert_eq!(fields[1], "1");
    assert_eq!(fields[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(fields[5].parse::<f64>().unwrap(), 0.0);
    let log = read(out_dir.join("seed-3/log.csv"));
    assert_eq!(log.lines().count(), 41);
    assert!(log.starts_with("step,source,ce,aac,pl,con,ca,total,lr\n"));
    assert!(out_dir.join("seed-3/final.ckpt").exists());
    assert!(read(out_dir.join("seed-3/eval.csv")).contains("target_confusion"));
}

#[test]
fn sweep_writes_one_row_per_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--seed", "1", "--out", s(&out_dir), "--repeat", "2", "--jobs", "2"]);
    let summary = read(out_dir.join("summary.csv"));
    let names: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["s+t", "+saa", "+ca", "full"]);
    for l in summary.lines().skip(1) {
        assert_eq!(l.split(',').nth(1), Some("2"));
    }
    for p in ["st", "saa", "ca", "full"] {
        for seed in [1, 2] {
            assert!(out_dir.join(p).join(format!("seed-{seed}")).join("log.csv").exists());
        }
    }
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (whole, split) = (tmp.path().join("whole"), tmp.path().join("split"));
    ok(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&whole)]);
    // Halt inside the pseudo-center refresh cycle, after warmup.
    ok(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&split), "--halt-at", "17"]);
    let ckpt = split.join("seed-4/checkpoint.ckpt");
    assert!(!split.join("seed-4/final.ckpt").exists());
    assert_eq!(read(split.join("seed-4/log.csv")).lines().count(), 18);
    ok(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&split), "--resume", s(&ckpt)]);
    for f in ["log.csv", "evals.csv", "eval.csv", "final.ckpt"] {
        assert_eq!(read(whole.join("seed-4").join(f)), read(split.join("seed-4").join(f)), "{f}");
    }
}

#[test]
fn periodic_checkpoints_resume_too() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--seed", "2", "--out", s(&run), "--checkpoint-every", "25"]);
    let reference = read(run.join("seed-2/log.csv"));
    let ckpt = tmp.path().join("at25.ckpt");
    std::fs::copy(run.join("seed-2/checkpoint.ckpt"), &ckpt).unwrap();
    ok(&["train", "--config", s(&cfg), "--seed", "2", "--out", s(&run), "--resume", s(&ckpt)]);
    assert_eq!(read(run.join("seed-2/log.csv")), reference);
}

#[test]
fn feature_dump_and_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data_dir = tmp.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--seed", "6", "--out", s(&data_dir)]);
    let dataset = data_dir.join("dataset.csv");
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--dataset", s(&dataset), "--seed", "6"]);
    let ckpt = run.join("seed-6/final.ckpt");

    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    for f in [&a, &b] {
        ok(&["dump-features", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--split", "target_test", "--out", s(f)]);
    }
    let dump = read(&a);
    assert_eq!(dump, read(&b));
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 1 + 40);
    // id, domain, label, then extractor (8) + structure (4) columns
    assert_eq!(lines[0].split(',').count(), 3 + 8 + 4);
    assert!(lines[1].starts_with("0,target,"));

    let unl = tmp.path().join("u.csv");
    ok(&["dump-features", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--split", "unlabeled", "--out", s(&unl)]);
    assert!(read(&unl).lines().skip(1).all(|l| l.split(',').nth(2) == Some("-1")));

    let out = ok(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--split", "target_test"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("metric,key,value\naccuracy,,"));
    let out = aglp(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&dataset), "--split", "unlabeled"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_dataset_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "0", "--preset", "s+t"]);
    let wide = tmp.path().join("wide.toml");
    std::fs::write(&wide, TINY.replace("n_test = 40", "n_test = 40\ndim = 3")).unwrap();
    let data = tmp.path().join("wide");
    ok(&["generate", "--config", s(&wide), "--out", s(&data)]);
    let out = aglp(&[
        "dump-features",
        "--checkpoint",
        s(&run.join("seed-0/final.ckpt")),
        "--dataset",
        s(&data.join("dataset.csv")),
        "--out",
        s(&tmp.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
