//! Loss terms over prediction rows: labeled cross-entropy, the pairwise
//! clustering loss with top-k pseudo-labels, confidence-thresholded
//! pseudo-labeling, ramped consistency, and moving class-centroid alignment.
//!
//! Tape versions take prediction handles so gradients reach the network.
//! Quantities used as targets (pairwise labels, pseudo-labels, masks) are
//! computed on values and enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{top_k_indices, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Matrix};

/// Clamp applied to inner products inside the pairwise loss.
pub const AAC_EPS: f64 = 1e-12;

fn check_same(op: &'static str, a: Var, b: Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

/// Mean over rows of `-sum_k y_k ln p_k`; soft targets allowed. Zero rows
/// give zero.
pub fn cross_entropy(tape: &mut Tape, probs: Var, targets: &Matrix) -> Result<Var> {
    if probs.shape() != targets.shape() {
        return Err(Error::Dimension { op: "cross_entropy", left: probs.shape(), right: targets.shape() });
    }
    let rows = probs.shape().rows;
    if rows == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let y = tape.constant(targets.clone());
    let logp = tape.ln(probs);
    let prod = tape.mul(y, logp)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Same-cluster labels: `s_ij = 1` iff rows `i` and `j` share the same set
/// of top-`k` coordinates.
pub fn pairwise_pseudo_labels(features: &Matrix, k: usize) -> Result<Matrix> {
    if k > features.cols() {
        return Err(Error::Contract(format!("top-{k} requested from {} features", features.cols())));
    }
    let sets: Vec<Vec<usize>> = top_k_indices(features, k)
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            s
        })
        .collect();
    let n = sets.len();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            if sets[i] == sets[j] {
                s.set(i, j, 1.0);
                s.set(j, i, 1.0);
            }
        }
    }
    Ok(s)
}

/// Pairwise clustering loss between raw-view predictions `p` and
/// augmented-view predictions `p_aug`:
/// `-(1/M^2) sum_ij [s_ij ln<p_i, p'_j> + (1 - s_ij) ln(1 - <p_i, p'_j>)]`.
pub fn aac_loss(tape: &mut Tape, p: Var, p_aug: Var, s: &Matrix) -> Result<Var> {
    check_same("aac_loss", p, p_aug)?;
    let m = p.shape().rows;
    if s.shape().rows != m || s.shape().cols != m {
        return Err(Error::Dimension { op: "aac_loss", left: p.shape(), right: s.shape() });
    }
    if m == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let pt = tape.transpose(p_aug);
    let inner = tape.matmul(p, pt)?;
    let sim = tape.clamp(inner, AAC_EPS, 1.0 - AAC_EPS);
    let log_sim = tape.ln(sim);
    let neg = tape.scale(sim, -1.0);
    let dissim = tape.add_scalar(neg, 1.0);
    let log_dissim = tape.ln(dissim);
    let sv = tape.constant(s.clone());
    let not_s = tape.constant(s.map(|v| 1.0 - v));
    let a = tape.mul(sv, log_sim)?;
    let b = tape.mul(not_s, log_dissim)?;
    let both = tape.add(a, b)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / (m * m) as f64))
}

/// Pseudo-label targets from raw-view predictions: one-hot argmax rows for
/// confident predictions, zero rows otherwise. Returns the target matrix and
/// the retained count.
pub fn confident_targets(p: &Matrix, threshold: f64) -> (Matrix, usize) {
    let mut targets = Matrix::zeros(p.rows(), p.cols());
    let mut kept = 0;
    for (i, row) in p.iter_rows().enumerate() {
        let k = argmax(row);
        if row[k] >= threshold {
            targets.set(i, k, 1.0);
            kept += 1;
        }
    }
    (targets, kept)
}

/// Cross-entropy of second-view predictions against confident pseudo-labels
/// of the raw view, averaged over retained rows; 0 when none is retained.
pub fn pl_loss(tape: &mut Tape, p: Var, p_view2: Var, threshold: f64) -> Result<Var> {
    check_same("pl_loss", p, p_view2)?;
    let (targets, kept) = confident_targets(tape.value(p), threshold);
    pl_loss_with_targets(tape, p_view2, &targets, kept)
}

pub fn pl_loss_with_targets(tape: &mut Tape, p_view2: Var, targets: &Matrix, kept: usize) -> Result<Var> {
    if kept == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let y = tape.constant(targets.clone());
    let logp = tape.ln(p_view2);
    let prod = tape.mul(y, logp)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / kept as f64))
}

/// `w(t) = nu * exp(-5 (1 - t/T)^2)` for `t < T`, then `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub coefficient: f64,
    pub total_steps: usize,
}

impl RampSchedule {
    pub fn weight(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.coefficient;
        }
        let r = 1.0 - step as f64 / self.total_steps as f64;
        self.coefficient * (-5.0 * r * r).exp()
    }
}

/// `w(t) * sum_j ||p'_j - p''_j||^2 / M`.
pub fn consistency_loss(tape: &mut Tape, p1: Var, p2: Var, weight: f64) -> Result<Var> {
    check_same("consistency_loss", p1, p2)?;
    let m = p1.shape().rows;
    if m == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let d = tape.sub(p1, p2)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, weight / m as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Per-class centroid table for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    pub centroids: Matrix,
    pub initialized: Vec<bool>,
}

impl CentroidTable {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self { centroids: Matrix::zeros(classes, dim), initialized: vec![false; classes] }
    }
}

/// Moving class centroids of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidState {
    pub source: CentroidTable,
    pub target: CentroidTable,
    /// Weight on the previous centroid.
    pub momentum: f64,
}

impl CentroidState {
    pub fn new(classes: usize, dim: usize, momentum: f64) -> Self {
        Self { source: CentroidTable::new(classes, dim), target: CentroidTable::new(classes, dim), momentum }
    }

    pub fn table(&self, domain: Domain) -> &CentroidTable {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn table_mut(&mut self, domain: Domain) -> &mut CentroidTable {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }
}

/// Averaging matrix `K x n` with `1/N_k` where row `i` has label `k`.
fn class_average_matrix(labels: &[usize], classes: usize) -> (Matrix, Vec<usize>) {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let mut avg = Matrix::zeros(classes, labels.len());
    for (i, &y) in labels.iter().enumerate() {
        avg.set(y, i, 1.0 / counts[y] as f64);
    }
    (avg, counts)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// EMA update on values: for each class present in the batch,
/// `c <- momentum * c + (1 - momentum) * batch_mean`; the first observation
/// initializes `c` directly.
pub fn update_centroids(
    mut state: CentroidState,
    features: &Matrix,
    labels: &[usize],
    domain: Domain,
) -> Result<CentroidState> {
    let theta = state.momentum;
    let table = state.table_mut(domain);
    let classes = table.initialized.len();
    check_labels(labels, classes)?;
    if features.rows() != labels.len() || features.cols() != table.centroids.cols() {
        return Err(Error::Dimension { op: "update_centroids", left: features.shape(), right: table.centroids.shape() });
    }
    let (avg, counts) = class_average_matrix(labels, classes);
    let batch = avg.matmul(features)?;
    for k in 0..classes {
        if counts[k] == 0 {
            continue;
        }
        let init = table.initialized[k];
        for (c, b) in table.centroids.row_mut(k).iter_mut().zip(batch.row(k)) {
            *c = if init { theta * *c + (1.0 - theta) * b } else { *b };
        }
        table.initialized[k] = true;
    }
    Ok(state)
}

/// `sum_k ||C_S^k - C_T^k||^2` over classes initialized in both domains.
pub fn centroid_alignment(state: &CentroidState) -> f64 {
    let (s, t) = (&state.source, &state.target);
    let mut total = 0.0;
    let mut any = false;
    for k in 0..s.initialized.len() {
        if s.initialized[k] && t.initialized[k] {
            any = true;
            total += s.centroids.row(k).iter().zip(t.centroids.row(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    if !any {
        log::warn!("centroid alignment: no class initialized in both domains");
    }
    total
}

/// Centroids after blending this batch in, recorded on the tape so the
/// alignment loss reaches the features. Rows of classes absent from the
/// batch are constants.
#[derive(Debug, Clone)]
pub struct MovingCentroids {
    pub centroids: Var,
    pub initialized: Vec<bool>,
}

pub fn moving_centroids(
    tape: &mut Tape,
    previous: &CentroidTable,
    momentum: f64,
    features: Var,
    labels: &[usize],
) -> Result<MovingCentroids> {
    let classes = previous.initialized.len();
    check_labels(labels, classes)?;
    if features.shape().rows != labels.len() {
        return Err(Error::Contract(format!("{} feature rows for {} labels", features.shape().rows, labels.len())));
    }
    let (avg, counts) = class_average_matrix(labels, classes);
    let mut batch_weight = Matrix::zeros(classes, 1);
    let mut carried = previous.centroids.clone();
    let mut initialized = previous.initialized.clone();
    for k in 0..classes {
        let (w, keep) = match (counts[k] > 0, previous.initialized[k]) {
            (true, true) => (1.0 - momentum, momentum),
            (true, false) => (1.0, 0.0),
            (false, _) => (0.0, 1.0),
        };
        batch_weight.set(k, 0, w);
        carried.row_mut(k).iter_mut().for_each(|v| *v *= keep);
        initialized[k] |= counts[k] > 0;
    }
    let avg = tape.constant(avg);
    let batch = tape.matmul(avg, features)?;
    let bw = tape.constant(batch_weight);
    let blended = tape.scale_rows(batch, bw)?;
    let carried = tape.constant(carried);
    let centroids = tape.add(blended, carried)?;
    Ok(MovingCentroids { centroids, initialized })
}

/// Tape form of [`centroid_alignment`].
pub fn centroid_alignment_loss(tape: &mut Tape, source: &MovingCentroids, target: &MovingCentroids) -> Result<Var> {
    check_same("centroid_alignment", source.centroids, target.centroids)?;
    let mask: Vec<f64> = source
        .initialized
        .iter()
        .zip(&target.initialized)
        .map(|(&a, &b)| if a && b { 1.0 } else { 0.0 })
        .collect();
    if mask.iter().all(|&m| m == 0.0) {
        log::warn!("centroid alignment: no class initialized in both domains");
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let diff = tape.sub(source.centroids, target.centroids)?;
    let sq = tape.mul(diff, diff)?;
    let mask = tape.constant(Matrix::from_vec(mask.len(), 1, mask)?);
    let masked = tape.scale_rows(sq, mask)?;
    Ok(tape.sum(masked))
}

/// Detached values of tape centroids, written back as the next state.
pub fn commit_centroids(tape: &Tape, moving: &MovingCentroids) -> CentroidTable {
    CentroidTable { centroids: tape.value(moving.centroids).clone(), initialized: moving.initialized.clone() }
}
