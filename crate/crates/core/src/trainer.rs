//! Training loop: batch sampling, one fused forward pass per step over the
//! source, labeled-target and unlabeled-target rows (raw and both views),
//! the composite objective, momentum SGD with a warmup/restart schedule,
//! moving centroids, and periodic pseudo-center refresh.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{sample_batch, Augment, Batch, BatchSizes, SsdaDataset};
use crate::error::{Error, Result};
use crate::losses::{
    aac_loss, centroid_alignment_loss, commit_centroids, confident_targets, consistency_loss, cross_entropy,
    moving_centroids, pairwise_pseudo_labels, pl_loss_with_targets, CentroidState, MovingCentroids, RampSchedule,
};
use crate::model::{Model, ModelConfig, ModelVars};
use crate::prototypes::{adapt_source_labels, adapted_source_loss, protonet_predict, refresh_prototypes, PrototypeSet, TemperatureMode};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: usize,
    /// Steps trained with plain source cross-entropy before label adaptation.
    pub warmup: usize,
    pub lr: f64,
    /// Inverse decay `lr * (1 + gamma * t)^-power`, restarted at `warmup`
    /// when label adaptation is on.
    pub lr_gamma: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the centroid alignment term.
    pub beta: f64,
    /// Source label mixing ratio.
    pub alpha: f64,
    pub proto_temperature: f64,
    pub temperature_mode: TemperatureMode,
    pub update_interval: usize,
    /// Pseudo-label confidence threshold.
    pub threshold: f64,
    pub ramp_coefficient: f64,
    /// Consistency ramp length; defaults to a fifth of `steps`.
    pub ramp_steps: Option<usize>,
    pub centroid_momentum: f64,
    pub top_k: usize,
    pub batch: BatchSizes,
    pub augment: Augment,
    pub model: ModelConfig,
    /// Pairwise clustering, pseudo-labeling and consistency losses.
    pub use_cdac: bool,
    pub use_sla: bool,
    pub use_saa: bool,
    pub use_ca: bool,
    /// Steps between periodic evaluations; 0 disables them.
    pub eval_every: usize,
    /// Rows per evaluation graph.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            warmup: 300,
            lr: 0.01,
            lr_gamma: 0.001,
            lr_power: 0.75,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta: 1.0,
            alpha: 0.3,
            proto_temperature: 0.6,
            temperature_mode: TemperatureMode::Multiply,
            update_interval: 100,
            threshold: 0.95,
            ramp_coefficient: 1.0,
            ramp_steps: None,
            centroid_momentum: 0.7,
            top_k: 5,
            batch: BatchSizes::default(),
            augment: Augment::default(),
            model: ModelConfig::default(),
            use_cdac: true,
            use_sla: true,
            use_saa: true,
            use_ca: true,
            eval_every: 500,
            eval_chunk: 64,
            seed: 0,
        }
    }
}

/// Named ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Preset {
    /// Source plus labeled-target cross-entropy only.
    SourceTarget,
    /// Clustering + pseudo-labeling + consistency + label adaptation.
    Baseline,
    /// Baseline with structure-aware alignment.
    Saa,
    /// Baseline with centroid alignment.
    Ca,
    /// Everything.
    Full,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::SourceTarget, Preset::Baseline, Preset::Saa, Preset::Ca, Preset::Full];
    /// Row structure of the ablation table.
    pub const ABLATION: [Preset; 4] = [Preset::SourceTarget, Preset::Saa, Preset::Ca, Preset::Full];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SourceTarget => "s+t",
            Preset::Baseline => "baseline",
            Preset::Saa => "+saa",
            Preset::Ca => "+ca",
            Preset::Full => "full",
        }
    }

    pub fn apply(self, mut config: TrainerConfig) -> TrainerConfig {
        let (cdac, sla, saa, ca) = match self {
            Preset::SourceTarget => (false, false, false, false),
            Preset::Baseline => (true, true, false, false),
            Preset::Saa => (true, true, true, false),
            Preset::Ca => (true, true, false, true),
            Preset::Full => (true, true, true, true),
        };
        config.use_cdac = cdac;
        config.use_sla = sla;
        config.use_saa = saa;
        config.use_ca = ca;
        if self == Preset::SourceTarget {
            config.beta = 0.0;
        }
        config
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> String {
        p.name().to_string()
    }
}

impl TryFrom<String> for Preset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().trim_start_matches('+') == s || (s == "st" && *p == Preset::SourceTarget))
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}'")))
    }
}

impl TrainerConfig {
    pub fn ramp(&self) -> RampSchedule {
        RampSchedule { coefficient: self.ramp_coefficient, total_steps: self.ramp_steps.unwrap_or(self.steps / 5) }
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = if self.use_sla && step >= self.warmup { step - self.warmup } else { step };
        self.lr * (1.0 + self.lr_gamma * t as f64).powf(-self.lr_power)
    }

    /// Label adaptation replaces the plain source loss from `warmup` on.
    pub fn sla_active(&self, step: usize) -> bool {
        self.use_sla && step >= self.warmup
    }

    pub fn refreshes_centers(&self, step: usize) -> bool {
        self.sla_active(step) && (step - self.warmup).is_multiple_of(self.update_interval)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup >= self.steps {
            return fail(format!("warmup {} must be below steps {}", self.warmup, self.steps));
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        for (name, v) in [("lr", self.lr), ("proto_temperature", self.proto_temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lr_gamma", self.lr_gamma), ("lr_power", self.lr_power), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return fail(format!("threshold {} outside (0, 1]", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.centroid_momentum) {
            return fail(format!("centroid_momentum {} outside [0, 1]", self.centroid_momentum));
        }
        if self.update_interval == 0 {
            return fail("update_interval must be positive".into());
        }
        if self.use_cdac && (self.top_k == 0 || self.top_k > self.model.feature_dim()) {
            return fail(format!("top_k {} outside [1, {}]", self.top_k, self.model.feature_dim()));
        }
        if self.augment.strength < 0.0 || !(0.0..1.0).contains(&self.augment.scale_jitter) {
            return fail("augment strength must be >= 0 and scale_jitter in [0, 1)".into());
        }
        self.model.validate()
    }

    pub fn validate_for(&self, dataset: &SsdaDataset) -> Result<()> {
        self.validate()?;
        let b = self.batch;
        let pools = [
            ("source", b.source, dataset.source.len()),
            ("labeled", b.labeled, dataset.labeled.len()),
            ("unlabeled", b.unlabeled, dataset.unlabeled.rows()),
        ];
        for (what, want, have) in pools {
            if want > have {
                return Err(Error::Config(format!("batch.{what} = {want} exceeds the pool of {have}")));
            }
        }
        if b.source + b.labeled + b.unlabeled == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(())
    }
}

/// Loss values of one step. `total` is the sum of the terms with the
/// centroid term scaled by `beta`; disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    /// Adapted source loss after warmup, plain source cross-entropy before.
    pub source: f64,
    pub ce: f64,
    pub aac: f64,
    pub pl: f64,
    pub con: f64,
    pub ca: f64,
    pub total: f64,
    pub lr: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,source,ce,aac,pl,con,ca,total,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.source, self.ce, self.aac, self.pl, self.con, self.ca, self.total, self.lr
        )
    }

    pub fn weighted_sum(&self, beta: f64) -> f64 {
        self.source + self.ce + self.aac + self.pl + self.con + beta * self.ca
    }
}

/// Targets derived from forward values and held fixed during
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    pub pairwise: Option<Matrix>,
    pub pseudo: Option<(Matrix, usize)>,
    pub adapted_source: Option<Matrix>,
    /// Labels for the target centroid rows: labeled rows, then unlabeled raw
    /// rows with their pseudo-labels.
    pub target_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub source: Var,
    pub ce: Var,
    pub aac: Var,
    pub pl: Var,
    pub con: Var,
    pub ca: Var,
    pub total: Var,
}

/// Everything one step needs besides the model and batch.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub config: &'a TrainerConfig,
    pub step: usize,
    pub centroids: &'a CentroidState,
    pub pseudo_centers: Option<&'a PrototypeSet>,
}

/// Recorded objective of one step.
pub struct Objective {
    pub tape: Tape,
    pub vars: ModelVars,
    pub losses: LossVars,
    pub targets: StepTargets,
    pub centroids: Option<(MovingCentroids, MovingCentroids)>,
}

impl Objective {
    pub fn report(&self, step: usize, lr: f64) -> LossReport {
        let v = |x: Var| self.tape.scalar_value(x);
        let l = &self.losses;
        LossReport {
            step,
            source: v(l.source),
            ce: v(l.ce),
            aac: v(l.aac),
            pl: v(l.pl),
            con: v(l.con),
            ca: v(l.ca),
            total: v(l.total),
            lr,
        }
    }
}

fn range(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}

/// Records the full objective for `batch`. With `frozen` set, the targets
/// are reused instead of being derived from this pass, which makes the
/// objective a smooth function of the parameters for gradient checking.
pub fn build_objective(
    model: &Model,
    inputs: StepInputs<'_>,
    batch: &Batch,
    dropout: &[Matrix],
    frozen: Option<&StepTargets>,
) -> Result<Objective> {
    let cfg = inputs.config;
    let (ns, nl, m) = (batch.n_source(), batch.n_labeled(), batch.n_unlabeled());
    let (i_s, i_l) = (range(0, ns), range(ns, nl));
    let (i_u, i_v1, i_v2) = (range(ns + nl, m), range(ns + nl + m, m), range(ns + nl + 2 * m, m));

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.constant(batch.stacked());
    let out = model.forward(&mut tape, &vars, x, dropout)?;
    let probs = out.probs;
    let p_s = tape.select_rows(probs, &i_s)?;
    let p_l = tape.select_rows(probs, &i_l)?;
    let p_u = tape.select_rows(probs, &i_u)?;
    let p_v1 = tape.select_rows(probs, &i_v1)?;
    let p_v2 = tape.select_rows(probs, &i_v2)?;
    let mut targets = StepTargets { pairwise: None, pseudo: None, adapted_source: None, target_labels: None };

    // source
    let source = if cfg.sla_active(inputs.step) {
        let adapted = match frozen.and_then(|f| f.adapted_source.clone()) {
            Some(a) => a,
            None => {
                let centers = inputs.pseudo_centers.ok_or_else(|| {
                    Error::Contract(format!("step {}: label adaptation needs pseudo centers", inputs.step))
                })?;
                let fused_s = tape.value(out.fused).select_rows(&i_s);
                let ppc = protonet_predict(centers, &fused_s)?;
                adapt_source_labels(&batch.source_one_hot(), &ppc, cfg.alpha)?
            }
        };
        let l = adapted_source_loss(&mut tape, p_s, &adapted)?;
        targets.adapted_source = Some(adapted);
        l
    } else {
        cross_entropy(&mut tape, p_s, &batch.source_one_hot())?
    };
    let ce = cross_entropy(&mut tape, p_l, &batch.labeled_one_hot())?;

    let zero = |t: &mut Tape| t.constant(Matrix::scalar(0.0));
    let (aac, pl, con) = if cfg.use_cdac && m > 0 {
        let s = match frozen.and_then(|f| f.pairwise.clone()) {
            Some(s) => s,
            None => {
                let g_u = tape.value(out.features).select_rows(&i_u);
                pairwise_pseudo_labels(&g_u, cfg.top_k)?
            }
        };
        let aac = aac_loss(&mut tape, p_u, p_v1, &s)?;
        let (pt, kept) = match frozen.and_then(|f| f.pseudo.clone()) {
            Some(p) => p,
            None => confident_targets(tape.value(p_u), cfg.threshold),
        };
        let pl = pl_loss_with_targets(&mut tape, p_v2, &pt, kept)?;
        let con = consistency_loss(&mut tape, p_v1, p_v2, cfg.ramp().weight(inputs.step))?;
        targets.pairwise = Some(s);
        targets.pseudo = Some((pt, kept));
        (aac, pl, con)
    } else {
        (zero(&mut tape), zero(&mut tape), zero(&mut tape))
    };

    let (ca, centroids) = if cfg.use_ca {
        let fused_s = tape.select_rows(out.fused, &i_s)?;
        let target_rows: Vec<usize> = i_l.iter().chain(&i_u).copied().collect();
        let fused_t = tape.select_rows(out.fused, &target_rows)?;
        // Labeled rows keep their labels; unlabeled rows take the classifier's.
        let labels = match frozen.and_then(|f| f.target_labels.clone()) {
            Some(l) => l,
            None => {
                let mut l = batch.labeled_y.clone();
                l.extend(tape.value(p_u).argmax_rows());
                l
            }
        };
        let theta = inputs.centroids.momentum;
        let cs = moving_centroids(&mut tape, &inputs.centroids.source, theta, fused_s, &batch.source_y)?;
        let ct = moving_centroids(&mut tape, &inputs.centroids.target, theta, fused_t, &labels)?;
        let ca = centroid_alignment_loss(&mut tape, &cs, &ct)?;
        targets.target_labels = Some(labels);
        (ca, Some((cs, ct)))
    } else {
        (zero(&mut tape), None)
    };

    let t = tape.add(source, ce)?;
    let t = tape.add(t, aac)?;
    let t = tape.add(t, pl)?;
    let t = tape.add(t, con)?;
    let weighted_ca = tape.scale(ca, cfg.beta);
    let total = tape.add(t, weighted_ca)?;
    Ok(Objective { tape, vars, losses: LossVars { source, ce, aac, pl, con, ca, total }, targets, centroids })
}

/// Mutable training state; everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers aligned with [`Model::trainable_mut`].
    pub velocity: Vec<Matrix>,
    pub centroids: CentroidState,
    pub pseudo_centers: Option<PrototypeSet>,
    /// Next step to run.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainerConfig, dataset: &SsdaDataset) -> Result<Self> {
        let mut model = Model::new(&config.model, dataset.dim, dataset.classes, config.use_saa, config.seed)?;
        let velocity = model.trainable_mut().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let centroids = CentroidState::new(dataset.classes, model.fused_dim(), config.centroid_momentum);
        Ok(Self { model, velocity, centroids, pseudo_centers: None, step: 0 })
    }
}

/// Randomness for `step` under `seed`: a dedicated ChaCha stream, so a run
/// resumed at any step replays the same draws.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) | step as u64);
    rng
}

pub struct Trainer<'d> {
    config: TrainerConfig,
    dataset: &'d SsdaDataset,
    state: TrainState,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainerConfig, dataset: &'d SsdaDataset) -> Result<Self> {
        config.validate_for(dataset)?;
        let state = TrainState::new(&config, dataset)?;
        Ok(Self { config, dataset, state })
    }

    /// Continues from a saved state.
    pub fn resume(config: TrainerConfig, dataset: &'d SsdaDataset, state: TrainState) -> Result<Self> {
        config.validate_for(dataset)?;
        if state.model.use_saa != config.use_saa {
            return Err(Error::Config("checkpoint and config disagree on use_saa".into()));
        }
        if state.model.input_dim != dataset.dim || state.model.classes != dataset.classes {
            return Err(Error::Config("checkpoint does not match the dataset dimensions".into()));
        }
        if state.velocity.len() != state.model.trainable_names().len() {
            return Err(Error::Config("checkpoint momentum buffers do not match the model".into()));
        }
        Ok(Self { config, dataset, state })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// Pseudo centers from the whole target training pool: labeled rows with
    /// their labels, unlabeled rows with classifier pseudo-labels.
    pub fn refresh_pseudo_centers(&mut self) -> Result<()> {
        let d = self.dataset;
        let pool = Matrix::vstack(&[&d.labeled.features, &d.unlabeled])?;
        let (fused, probs) = self.state.model.predict(&pool, self.config.eval_chunk)?;
        let mut labels = d.labeled.labels.clone();
        labels.extend(probs.select_rows(&range(d.labeled.len(), d.unlabeled.rows())).argmax_rows());
        let centers = refresh_prototypes(
            self.state.pseudo_centers.as_ref(),
            &fused,
            &labels,
            d.classes,
            self.config.proto_temperature,
            self.config.temperature_mode,
        )?;
        self.state.pseudo_centers = Some(centers);
        Ok(())
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossReport> {
        let cfg = &self.config;
        let step = self.state.step;
        if cfg.refreshes_centers(step) {
            self.refresh_pseudo_centers()?;
        }
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step);
        let batch = sample_batch(self.dataset, cfg.batch, &cfg.augment, &mut rng)?;
        let dropout = self.state.model.draw_dropout(batch.node_count(), &mut rng);
        let lr = cfg.learning_rate(step);
        let inputs = StepInputs {
            config: cfg,
            step,
            centroids: &self.state.centroids,
            pseudo_centers: self.state.pseudo_centers.as_ref(),
        };
        let obj = build_objective(&self.state.model, inputs, &batch, &dropout, None)?;
        let report = obj.report(step, lr);
        for (term, v) in [
            ("source", report.source),
            ("ce", report.ce),
            ("aac", report.aac),
            ("pl", report.pl),
            ("con", report.con),
            ("ca", report.ca),
            ("total", report.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { step, term });
            }
        }
        let grads = obj.tape.backward(obj.losses.total)?;
        let (mom, wd) = (cfg.momentum, cfg.weight_decay);
        let params = self.state.model.trainable_mut();
        for ((p, vel), var) in params.into_iter().zip(&mut self.state.velocity).zip(obj.vars.flat()) {
            let g = grads.get(var);
            for ((w, v), gv) in p.as_mut_slice().iter_mut().zip(vel.as_mut_slice()).zip(g.as_slice()) {
                *v = mom * *v + gv + wd * *w;
                *w -= lr * *v;
            }
        }
        if let Some((cs, ct)) = &obj.centroids {
            self.state.centroids.source = commit_centroids(&obj.tape, cs);
            self.state.centroids.target = commit_centroids(&obj.tape, ct);
        }
        self.state.step += 1;
        Ok(report)
    }

    pub fn evaluate(&self) -> Result<(EvalReport, EvalReport)> {
        let d = self.dataset;
        let chunk = self.config.eval_chunk;
        let source = evaluate(&self.state.model, &d.source_test.features, &d.source_test.labels, chunk)?;
        let target = evaluate(&self.state.model, &d.target_test.features, &d.target_test.labels, chunk)?;
        Ok((source, target))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty set".into()));
        }
        if predicted.len() != truth.len() {
            return Err(Error::Contract(format!("{} predictions for {} labels", predicted.len(), truth.len())));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::Contract(format!("class index outside [0, {classes})")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 { f64::NAN } else { row[k] as f64 / n as f64 }
            })
            .collect();
        Ok(Self { accuracy: correct as f64 / truth.len() as f64, per_class, confusion })
    }

    /// `metric,class,value` rows plus `confusion,true,pred,count` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, prefix: &str) -> std::io::Result<()> {
        writeln!(w, "{prefix}accuracy,,{}", self.accuracy)?;
        for (k, a) in self.per_class.iter().enumerate() {
            writeln!(w, "{prefix}class_accuracy,{k},{a}")?;
        }
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                writeln!(w, "{prefix}confusion,{t}:{p},{n}")?;
            }
        }
        Ok(())
    }
}

/// Accuracy, per-class accuracy and confusion matrix in evaluation mode.
pub fn evaluate(model: &Model, features: &Matrix, labels: &[usize], chunk: usize) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    let (_, probs) = model.predict(features, chunk)?;
    EvalReport::from_predictions(&probs.argmax_rows(), labels, model.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: Vec<LossReport>,
    pub evals: Vec<EvalRecord>,
    pub source: EvalReport,
    pub target: EvalReport,
    pub state: TrainState,
}

/// Trains `trainer` to completion, evaluating every `eval_every` steps.
pub fn run_to_end(mut trainer: Trainer<'_>) -> Result<RunOutput> {
    let mut log = Vec::with_capacity(trainer.config.steps.saturating_sub(trainer.state.step));
    let mut evals = Vec::new();
    let every = trainer.config.eval_every;
    while !trainer.is_done() {
        log.push(trainer.step()?);
        let done = trainer.state.step;
        if every > 0 && done.is_multiple_of(every) && done < trainer.config.steps {
            let (s, t) = trainer.evaluate()?;
            evals.push(EvalRecord { step: done, source_accuracy: s.accuracy, target_accuracy: t.accuracy });
        }
    }
    let (source, target) = trainer.evaluate()?;
    evals.push(EvalRecord { step: trainer.state.step, source_accuracy: source.accuracy, target_accuracy: target.accuracy });
    Ok(RunOutput { log, evals, source, target, state: trainer.into_state() })
}

/// Validates, trains from scratch and evaluates.
pub fn run(config: &TrainerConfig, dataset: &SsdaDataset) -> Result<RunOutput> {
    run_to_end(Trainer::new(config.clone(), dataset)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gaussian_shift, GaussianShiftParams};

    fn small_dataset() -> SsdaDataset {
        make_gaussian_shift(&GaussianShiftParams { n_source: 80, n_target: 60, n_test: 40, seed: 3, ..Default::default() })
            .unwrap()
    }

    fn small_config() -> TrainerConfig {
        TrainerConfig {
            steps: 30,
            warmup: 10,
            update_interval: 5,
            eval_every: 0,
            batch: BatchSizes { source: 8, labeled: 4, unlabeled: 8 },
            model: ModelConfig { extractor_layers: vec![16, 16], structure_dim: 4, gcn_layers: vec![8, 4], ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn schedule_restarts_after_warmup() {
        let c = TrainerConfig { warmup: 100, ..Default::default() };
        assert_eq!(c.learning_rate(0), c.lr);
        assert!(c.learning_rate(99) < c.lr);
        assert_eq!(c.learning_rate(100), c.lr);
        let no_sla = TrainerConfig { use_sla: false, ..c };
        assert!(no_sla.learning_rate(100) < no_sla.lr);
    }

    #[test]
    fn config_checks() {
        let bad = TrainerConfig { warmup: 3000, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainerConfig { beta: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainerConfig { lr: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let d = small_dataset();
        let bad = TrainerConfig { batch: BatchSizes { labeled: 13, ..Default::default() }, ..Default::default() };
        assert!(bad.validate_for(&d).is_err());
    }

    #[test]
    fn preset_parsing() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert_eq!("st".parse::<Preset>().unwrap(), Preset::SourceTarget);
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn source_target_reduces_to_two_terms() {
        let d = small_dataset();
        let cfg = Preset::SourceTarget.apply(small_config());
        let mut tr = Trainer::new(cfg, &d).unwrap();
        for _ in 0..15 {
            let r = tr.step().unwrap();
            assert_eq!((r.aac, r.pl, r.con, r.ca), (0.0, 0.0, 0.0, 0.0));
            assert_eq!(r.total, r.source + r.ce);
        }
    }

    #[test]
    fn totals_account_for_every_term() {
        let d = small_dataset();
        let cfg = TrainerConfig { beta: 0.7, ..small_config() };
        let beta = cfg.beta;
        let out = run(&cfg, &d).unwrap();
        for r in &out.log {
            assert!((r.total - r.weighted_sum(beta)).abs() <= 1e-12, "{r:?}");
        }
        assert_eq!(out.log.len(), 30);
    }

    #[test]
    fn sla_for_exactly_one_step() {
        let d = small_dataset();
        let cfg = TrainerConfig { steps: 12, warmup: 11, ..small_config() };
        let mut tr = Trainer::new(cfg, &d).unwrap();
        let mut with_centers = 0;
        while !tr.is_done() {
            let before = tr.state().pseudo_centers.is_some();
            tr.step().unwrap();
            assert!(!before);
            with_centers += tr.state().pseudo_centers.is_some() as usize;
        }
        assert_eq!(with_centers, 1);
    }

    #[test]
    fn warmup_leaves_pseudo_centers_untouched() {
        let d = small_dataset();
        let mut tr = Trainer::new(small_config(), &d).unwrap();
        for _ in 0..10 {
            tr.step().unwrap();
            assert!(tr.state().pseudo_centers.is_none());
        }
        tr.step().unwrap();
        assert!(tr.state().pseudo_centers.is_some());
    }

    #[test]
    fn evaluation_counts() {
        let r = EvalReport::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let truth = [0, 1, 2, 3, 0, 1, 2, 3];
        let r = EvalReport::from_predictions(&[2; 8], &truth, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        for (k, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == k).count());
        }
        assert!(EvalReport::from_predictions(&[], &[], 2).is_err());
    }
}
