use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aglp_core::checkpoint::{model_from_archive, state_archive, state_from_archive, Archive};
use aglp_core::data::{make_gaussian_shift, GaussianShiftParams, Split, SsdaDataset};
use aglp_core::trainer::{evaluate as eval_model, EvalRecord, LossReport, Preset, Trainer};
use aglp_core::{Error, ExperimentConfig, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::{ensure_dir, Common, TrainOverrides};

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides) -> Result<()> {
    if let Some(steps) = o.steps {
        cfg.trainer.steps = steps;
        if cfg.trainer.warmup >= steps {
            return Err(Error::Config(format!("--steps {steps} does not exceed warmup {}", cfg.trainer.warmup)));
        }
    }
    if let Some(r) = o.repeat {
        cfg.sweep.repeats = r;
    }
    cfg.validate()
}

fn read_dataset(path: &Path) -> Result<SsdaDataset> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    SsdaDataset::read_csv(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct Counts {
    source: usize,
    labeled: usize,
    unlabeled: usize,
    target_test: usize,
    source_test: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: &'a GaussianShiftParams,
    counts: Counts,
}

fn manifest(params: &GaussianShiftParams, d: &SsdaDataset) -> String {
    let counts = Counts {
        source: d.source.len(),
        labeled: d.labeled.len(),
        unlabeled: d.unlabeled.rows(),
        target_test: d.target_test.len(),
        source_test: d.source_test.len(),
    };
    toml::to_string(&Manifest { dataset: params, counts }).expect("manifest serializes")
}

pub fn generate(common: &Common, shift: Option<f64>, rotation: Option<f64>, shots: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let p = &mut cfg.dataset;
    if let Some(v) = shift {
        p.shift = v;
    }
    if let Some(v) = rotation {
        p.rotation = v;
    }
    if let Some(v) = shots {
        p.shots = v;
    }
    p.validate()?;
    ensure_dir(&common.out)?;
    let d = make_gaussian_shift(p)?;
    let mut w = create(&common.out.join("dataset.csv"))?;
    d.write_csv(&mut w)?;
    w.flush()?;
    std::fs::write(common.out.join("manifest.toml"), manifest(p, &d))?;
    log::info!("wrote {} rows to {}", d.total_rows(), common.out.display());
    Ok(())
}

/// Directory name of a preset.
fn slug(p: Preset) -> &'static str {
    match p {
        Preset::SourceTarget => "st",
        Preset::Baseline => "baseline",
        Preset::Saa => "saa",
        Preset::Ca => "ca",
        Preset::Full => "full",
    }
}

struct RunResult {
    target: f64,
    source: f64,
}

struct RunSpec<'a> {
    cfg: ExperimentConfig,
    dataset: Option<&'a SsdaDataset>,
    dir: PathBuf,
    checkpoint_every: usize,
    resume: Option<&'a Path>,
    halt_at: Option<usize>,
}

/// Rows of an existing log strictly before `step`; used when resuming.
fn log_prefix(path: &Path, step: usize) -> Result<Vec<String>> {
    let Ok(f) = File::open(path) else { return Ok(Vec::new()) };
    let mut kept = Vec::new();
    for line in BufReader::new(f).lines().skip(1) {
        let line = line?;
        let s: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
        if s.is_some_and(|s| s < step) {
            kept.push(line);
        }
    }
    Ok(kept)
}

/// One seeded training run in its own directory. Returns `None` when the
/// run was halted early.
fn run_one(spec: RunSpec<'_>) -> Result<Option<RunResult>> {
    let RunSpec { cfg, dataset, dir, checkpoint_every, resume, halt_at } = spec;
    ensure_dir(&dir)?;
    let generated;
    let data = match dataset {
        Some(d) => d,
        None => {
            generated = make_gaussian_shift(&cfg.dataset)?;
            &generated
        }
    };
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut trainer = match resume {
        Some(path) => {
            let archive = Archive::load(path)?;
            let state = state_from_archive(&archive, &cfg.trainer)?;
            Trainer::resume(cfg.trainer.clone(), data, state)?
        }
        None => Trainer::new(cfg.trainer.clone(), data)?,
    };
    let start = trainer.state().step;
    let log_path = dir.join("log.csv");
    let evals_path = dir.join("evals.csv");
    let kept_log = log_prefix(&log_path, start)?;
    let kept_evals = log_prefix(&evals_path, start + 1)?;
    let mut log = create(&log_path)?;
    writeln!(log, "{}", LossReport::CSV_HEADER)?;
    for l in kept_log {
        writeln!(log, "{l}")?;
    }
    let mut evals = create(&evals_path)?;
    writeln!(evals, "step,source_accuracy,target_accuracy")?;
    for l in kept_evals {
        writeln!(evals, "{l}")?;
    }
    let write_eval = |w: &mut BufWriter<File>, r: EvalRecord| writeln!(w, "{},{},{}", r.step, r.source_accuracy, r.target_accuracy);

    let steps = cfg.trainer.steps;
    let every = cfg.trainer.eval_every;
    let checkpoint = dir.join("checkpoint.ckpt");
    while !trainer.is_done() {
        if halt_at.is_some_and(|h| trainer.state().step >= h) {
            state_archive(trainer.state()).save(&checkpoint)?;
            log.flush()?;
            evals.flush()?;
            log::info!("halted at step {} in {}", trainer.state().step, dir.display());
            return Ok(None);
        }
        let report = trainer.step()?;
        writeln!(log, "{}", report.csv_row())?;
        let done = trainer.state().step;
        if checkpoint_every > 0 && done % checkpoint_every == 0 {
            state_archive(trainer.state()).save(&checkpoint)?;
        }
        if every > 0 && done % every == 0 && done < steps {
            let (s, t) = trainer.evaluate()?;
            write_eval(&mut evals, EvalRecord { step: done, source_accuracy: s.accuracy, target_accuracy: t.accuracy })?;
        }
    }
    let (source, target) = trainer.evaluate()?;
    write_eval(&mut evals, EvalRecord { step: steps, source_accuracy: source.accuracy, target_accuracy: target.accuracy })?;
    log.flush()?;
    evals.flush()?;
    let mut w = create(&dir.join("eval.csv"))?;
    writeln!(w, "metric,key,value")?;
    target.write_csv(&mut w, "target_")?;
    source.write_csv(&mut w, "source_")?;
    w.flush()?;
    state_archive(trainer.state()).save(dir.join("final.ckpt"))?;
    Ok(Some(RunResult { target: target.accuracy, source: source.accuracy }))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_summary(path: &Path, rows: &[(String, Vec<RunResult>)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "config,runs,target_mean,target_std,source_mean,source_std")?;
    for (name, runs) in rows {
        let (tm, ts) = mean_std(&runs.iter().map(|r| r.target).collect::<Vec<_>>());
        let (sm, ss) = mean_std(&runs.iter().map(|r| r.source).collect::<Vec<_>>());
        writeln!(w, "{name},{},{tm},{ts},{sm},{ss}", runs.len())?;
    }
    w.flush()?;
    Ok(())
}

/// Seeds of a run set: `seed, seed + 1, ...`.
fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.sweep.repeats as u64).map(|i| cfg.trainer.seed + i).collect()
}

pub fn train(
    common: &Common,
    overrides: &TrainOverrides,
    preset: Option<&str>,
    resume: Option<&Path>,
    halt_at: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if resume.is_some() && overrides.repeat.is_none() {
        cfg.sweep.repeats = 1;
    }
    apply_overrides(&mut cfg, overrides)?;
    if let Some(p) = preset {
        cfg.trainer = p.parse::<Preset>()?.apply(cfg.trainer);
    }
    cfg.validate()?;
    if resume.is_some() && cfg.sweep.repeats != 1 {
        return Err(Error::Config("--resume continues a single run; use --repeat 1".into()));
    }
    let fixed = overrides.dataset.as_deref().map(read_dataset).transpose()?;
    if let Some(d) = &fixed {
        cfg.trainer.validate_for(d)?;
    }
    ensure_dir(&common.out)?;
    let mut results = Vec::new();
    for seed in seeds(&cfg) {
        let run_cfg = cfg.clone().with_seed(seed);
        let spec = RunSpec {
            cfg: run_cfg,
            dataset: fixed.as_ref(),
            dir: common.out.join(format!("seed-{seed}")),
            checkpoint_every: overrides.checkpoint_every,
            resume,
            halt_at,
        };
        if let Some(r) = run_one(spec)? {
            println!("seed {seed}: target {:.4} source {:.4}", r.target, r.source);
            results.push(r);
        }
    }
    if !results.is_empty() {
        let name = preset.map_or_else(|| "custom".to_string(), |p| p.parse::<Preset>().map(|p| p.name().to_string()).unwrap_or_default());
        write_summary(&common.out.join("summary.csv"), &[(name, results)])?;
    }
    Ok(())
}

pub fn sweep(common: &Common, overrides: &TrainOverrides, presets: Option<&str>, jobs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_overrides(&mut cfg, overrides)?;
    let presets = match presets {
        Some(list) => list.split(',').map(|s| s.trim().parse::<Preset>()).collect::<Result<Vec<_>>>()?,
        None => cfg.sweep.presets.clone(),
    };
    let fixed = overrides.dataset.as_deref().map(read_dataset).transpose()?;
    for p in &presets {
        let t = p.apply(cfg.trainer.clone());
        match &fixed {
            Some(d) => t.validate_for(d)?,
            None => t.validate()?,
        }
    }
    ensure_dir(&common.out)?;
    let runs: Vec<(Preset, u64)> = presets.iter().flat_map(|&p| seeds(&cfg).into_iter().map(move |s| (p, s))).collect();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Option<RunResult>>> = pool.install(|| {
        runs.par_iter()
            .map(|&(p, seed)| {
                let mut run_cfg = cfg.clone().with_seed(seed);
                run_cfg.trainer = p.apply(run_cfg.trainer);
                run_one(RunSpec {
                    cfg: run_cfg,
                    dataset: fixed.as_ref(),
                    dir: common.out.join(slug(p)).join(format!("seed-{seed}")),
                    checkpoint_every: overrides.checkpoint_every,
                    resume: None,
                    halt_at: None,
                })
            })
            .collect()
    });
    let mut rows: Vec<(String, Vec<RunResult>)> = presets.iter().map(|p| (p.name().to_string(), Vec::new())).collect();
    for (&(p, seed), r) in runs.iter().zip(results) {
        let r = r?.expect("sweep runs are never halted");
        println!("{p} seed {seed}: target {:.4} source {:.4}", r.target, r.source);
        let i = presets.iter().position(|&q| q == p).expect("preset listed");
        rows[i].1.push(r);
    }
    write_summary(&common.out.join("summary.csv"), &rows)
}

fn split_of(tag: &str) -> Result<Split> {
    tag.parse()
}

fn load_model_for(checkpoint: &Path, dataset: &SsdaDataset) -> Result<aglp_core::Model> {
    let archive = Archive::load(checkpoint)
        .map_err(|e| Error::Config(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let model = model_from_archive(&archive, 0.0)?;
    if model.input_dim != dataset.dim || model.classes != dataset.classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.input_dim, model.classes, dataset.dim, dataset.classes
        )));
    }
    Ok(model)
}

pub fn evaluate(checkpoint: &Path, dataset: &Path, split: &str, out: Option<&Path>, chunk: usize) -> Result<()> {
    let split = split_of(split)?;
    let data = read_dataset(dataset)?;
    let model = load_model_for(checkpoint, &data)?;
    let (x, labels) = data.split(split);
    let Some(labels) = labels else {
        return Err(Error::Config(format!("split '{}' has no labels", split.tag())));
    };
    let report = eval_model(&model, x, labels, chunk.max(1))?;
    let mut buf = Vec::new();
    writeln!(buf, "metric,key,value")?;
    report.write_csv(&mut buf, "")?;
    match out {
        Some(p) => std::fs::write(p, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

pub fn dump_features(checkpoint: &Path, dataset: &Path, split: &str, out: &Path, chunk: usize) -> Result<()> {
    let split = split_of(split)?;
    let data = read_dataset(dataset)?;
    let model = load_model_for(checkpoint, &data)?;
    let (x, labels) = data.split(split);
    let (fused, _) = model.predict(x, chunk.max(1))?;
    let mut w = create(out)?;
    write!(w, "id,domain,label")?;
    for j in 0..fused.cols() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (i, row) in fused.iter_rows().enumerate() {
        let label = labels.map_or(-1, |l| l[i] as i64);
        write!(w, "{i},{},{label}", split.domain())?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
