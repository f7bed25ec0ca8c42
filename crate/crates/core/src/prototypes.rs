//! Class prototypes and source label adaptation.
//!
//! A prototype is the mean feature vector of a class. The prototypical
//! classifier scores a query by `exp(-d(f, c_k) * T)` normalized over
//! classes, with `d` the squared Euclidean distance. Pseudo centers are
//! prototypes of pooled labeled-target and pseudo-labeled unlabeled-target
//! features; their predictions on source rows soften the one-hot source
//! labels toward the target geometry.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::tensor::Matrix;

/// Where the temperature enters the prototype logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `-d * T`
    #[default]
    Multiply,
    /// `-d / T`, the usual softmax-temperature convention.
    Divide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// One center per class, `K x dim`.
    pub centers: Matrix,
    pub temperature: f64,
    pub mode: TemperatureMode,
}

impl PrototypeSet {
    pub fn new(centers: Matrix, temperature: f64, mode: TemperatureMode) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { centers, temperature, mode })
    }

    pub fn classes(&self) -> usize {
        self.centers.rows()
    }

    /// Class probabilities for each feature row.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        protonet_predict(self, features)
    }
}

/// Per-class mean rows plus the list of classes with no examples.
fn class_means(features: &Matrix, labels: &[usize], classes: usize) -> Result<(Matrix, Vec<usize>)> {
    if features.rows() != labels.len() {
        return Err(Error::Contract(format!("{} feature rows for {} labels", features.rows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
    }
    let mut sums = Matrix::zeros(classes, features.cols());
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        sums.row_mut(y).iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    for (k, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(k).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    let missing = (0..classes).filter(|&k| counts[k] == 0).collect();
    Ok((sums, missing))
}

/// Mean feature row of every class; fails when a class has no example.
pub fn compute_prototypes(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    temperature: f64,
    mode: TemperatureMode,
) -> Result<PrototypeSet> {
    let (centers, missing) = class_means(features, labels, classes)?;
    if !missing.is_empty() {
        return Err(Error::EmptyClasses(missing));
    }
    PrototypeSet::new(centers, temperature, mode)
}

/// Like [`compute_prototypes`], but classes without examples keep their
/// center from `previous`. Without a previous set, missing classes are an
/// error.
pub fn refresh_prototypes(
    previous: Option<&PrototypeSet>,
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    temperature: f64,
    mode: TemperatureMode,
) -> Result<PrototypeSet> {
    let (mut centers, missing) = class_means(features, labels, classes)?;
    if !missing.is_empty() {
        let Some(prev) = previous else { return Err(Error::EmptyClasses(missing)) };
        for &k in &missing {
            centers.row_mut(k).copy_from_slice(prev.centers.row(k));
        }
        log::debug!("pseudo centers: classes {missing:?} reuse previous centers");
    }
    PrototypeSet::new(centers, temperature, mode)
}

/// Softmax over `-d(f_i, c_k) * T` (or `/ T`).
pub fn protonet_predict(set: &PrototypeSet, features: &Matrix) -> Result<Matrix> {
    if features.cols() != set.centers.cols() {
        return Err(Error::Dimension { op: "protonet_predict", left: features.shape(), right: set.centers.shape() });
    }
    let mut logits = Matrix::zeros(features.rows(), set.classes());
    for (i, f) in features.iter_rows().enumerate() {
        for (k, c) in set.centers.iter_rows().enumerate() {
            let d: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            let logit = match set.mode {
                TemperatureMode::Multiply => -d * set.temperature,
                TemperatureMode::Divide => -d / set.temperature,
            };
            logits.set(i, k, logit);
        }
    }
    Ok(softmax_rows(&logits))
}

/// Argmax class per row, lowest index on ties.
pub fn pseudo_label(probs: &Matrix) -> Vec<usize> {
    probs.argmax_rows()
}

/// `(1 - alpha) * y + alpha * p` per row.
pub fn adapt_source_labels(labels: &Matrix, ppc: &Matrix, alpha: f64) -> Result<Matrix> {
    if labels.shape() != ppc.shape() {
        return Err(Error::Dimension { op: "adapt_source_labels", left: labels.shape(), right: ppc.shape() });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("mixing ratio {alpha} outside [0, 1]")));
    }
    let data = labels.as_slice().iter().zip(ppc.as_slice()).map(|(y, p)| (1.0 - alpha) * y + alpha * p).collect();
    Matrix::from_vec(labels.rows(), labels.cols(), data)
}

/// Mean soft-target cross-entropy of source predictions.
pub fn adapted_source_loss(tape: &mut Tape, source_probs: Var, adapted: &Matrix) -> Result<Var> {
    cross_entropy(tape, source_probs, adapted)
}
