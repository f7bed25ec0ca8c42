//! Synthetic domain-shift problems and mini-batch sampling.
//!
//! Source classes are isotropic Gaussian blobs whose means sit on a circle in
//! the first two coordinates. The target domain applies one rigid transform
//! to every source sample: a rotation about the origin in the first two
//! coordinates followed by a translation along the first axis. Class
//! identity survives the transform, so an optimal target classifier exists.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Generation parameters for [`make_gaussian_shift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianShiftParams {
    pub classes: usize,
    pub dim: usize,
    pub n_source: usize,
    /// Target examples split into the labeled and unlabeled pools.
    pub n_target: usize,
    /// Held-out examples per domain for evaluation.
    pub n_test: usize,
    pub shots: usize,
    pub shift: f64,
    /// Degrees.
    pub rotation: f64,
    pub radius: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GaussianShiftParams {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 2,
            n_source: 400,
            n_target: 400,
            n_test: 1000,
            shots: 3,
            shift: 1.5,
            rotation: 30.0,
            radius: 3.0,
            noise: 0.6,
            seed: 0,
        }
    }
}

impl GaussianShiftParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("need dimension >= 2, got {}", self.dim)));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be positive".into()));
        }
        if self.n_target < self.shots * self.classes {
            return Err(Error::Config(format!(
                "n_target = {} cannot hold {} shots x {} classes",
                self.n_target, self.shots, self.classes
            )));
        }
        if self.n_source < self.classes {
            return Err(Error::Config(format!(
                "n_source = {} leaves some of the {} classes without examples",
                self.n_source, self.classes
            )));
        }
        if !(self.noise >= 0.0 && self.radius >= 0.0 && self.shift.is_finite() && self.rotation.is_finite()) {
            return Err(Error::Config("noise and radius must be non-negative and finite".into()));
        }
        Ok(())
    }

    pub fn labeled_count(&self) -> usize {
        self.shots * self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn empty(dim: usize) -> Self {
        Self { features: Matrix::zeros(0, dim), labels: Vec::new() }
    }
}

/// A semi-supervised domain adaptation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdaDataset {
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub source: LabeledSet,
    pub labeled: LabeledSet,
    pub unlabeled: Matrix,
    /// Held-out labeled target examples, never sampled for training.
    pub target_test: LabeledSet,
    /// Held-out source examples, never sampled for training.
    pub source_test: LabeledSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    Labeled,
    Unlabeled,
    TargetTest,
    SourceTest,
}

impl Split {
    pub const ALL: [Split; 5] =
        [Split::Source, Split::Labeled, Split::Unlabeled, Split::TargetTest, Split::SourceTest];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::TargetTest => "target_test",
            Split::SourceTest => "source_test",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    /// `source` or `target`.
    pub fn domain(self) -> &'static str {
        match self {
            Split::Source | Split::SourceTest => "source",
            _ => "target",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::from_tag(s).ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

impl SsdaDataset {
    /// Features and labels of a split; unlabeled rows carry no labels.
    pub fn split(&self, split: Split) -> (&Matrix, Option<&[usize]>) {
        match split {
            Split::Source => (&self.source.features, Some(&self.source.labels)),
            Split::Labeled => (&self.labeled.features, Some(&self.labeled.labels)),
            Split::Unlabeled => (&self.unlabeled, None),
            Split::TargetTest => (&self.target_test.features, Some(&self.target_test.labels)),
            Split::SourceTest => (&self.source_test.features, Some(&self.source_test.labels)),
        }
    }

    pub fn total_rows(&self) -> usize {
        Split::ALL.iter().map(|&s| self.split(s).0.rows()).sum()
    }

    /// One row per example: `split,label,x0,...`, label `-1` when unknown.
    /// A leading comment line records class count, dimension and seed.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# aglp-dataset classes={} dim={} seed={}", self.classes, self.dim, self.seed)?;
        let mut header = String::from("split,label");
        for j in 0..self.dim {
            write!(header, ",x{j}").unwrap();
        }
        writeln!(w, "{header}")?;
        for split in Split::ALL {
            let (x, y) = self.split(split);
            for (i, row) in x.iter_rows().enumerate() {
                let mut line = String::with_capacity(16 + row.len() * 20);
                let label = y.map_or(-1, |y| y[i] as i64);
                write!(line, "{},{label}", split.tag()).unwrap();
                for v in row {
                    write!(line, ",{v}").unwrap();
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "dataset csv", detail };
        let mut lines = BufReader::new(r).lines();
        let meta = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let meta = meta
            .strip_prefix("# aglp-dataset")
            .ok_or_else(|| bad("missing '# aglp-dataset' header".into()))?;
        let (mut classes, mut dim, mut seed) = (None, None, None);
        for kv in meta.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad header field '{kv}'")))?;
            let parse = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "classes" => classes = Some(parse(v)? as usize),
                "dim" => dim = Some(parse(v)? as usize),
                "seed" => seed = Some(parse(v)?),
                _ => return Err(bad(format!("unknown header field '{k}'"))),
            }
        }
        let (classes, dim, seed) = match (classes, dim, seed) {
            (Some(c), Some(d), Some(s)) => (c, d, s),
            _ => return Err(bad("header must record classes, dim and seed".into())),
        };
        lines.next().ok_or_else(|| bad("missing column header".into()))??;

        let mut rows: Vec<(Split, i64, Vec<f64>)> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let tag = fields.next().unwrap_or_default();
            let split = Split::from_tag(tag).ok_or_else(|| bad(format!("line {}: unknown split '{tag}'", n + 3)))?;
            let label: i64 = fields
                .next()
                .ok_or_else(|| bad(format!("line {}: missing label", n + 3)))?
                .parse()
                .map_err(|e| bad(format!("line {}: label: {e}", n + 3)))?;
            let feats = fields
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 3))))
                .collect::<Result<Vec<_>>>()?;
            if feats.len() != dim {
                return Err(bad(format!("line {}: {} features, expected {dim}", n + 3, feats.len())));
            }
            let labeled = split != Split::Unlabeled;
            if labeled && !(0..classes as i64).contains(&label) {
                return Err(bad(format!("line {}: label {label} outside [0, {classes})", n + 3)));
            }
            rows.push((split, label, feats));
        }

        let collect = |split: Split| -> Result<LabeledSet> {
            let picked: Vec<_> = rows.iter().filter(|r| r.0 == split).collect();
            if picked.is_empty() {
                return Ok(LabeledSet::empty(dim));
            }
            let feats: Vec<&[f64]> = picked.iter().map(|r| r.2.as_slice()).collect();
            Ok(LabeledSet {
                features: Matrix::from_rows(&feats)?,
                labels: picked.iter().map(|r| r.1 as usize).collect(),
            })
        };
        let unlabeled = collect(Split::Unlabeled)?.features;
        Ok(Self {
            classes,
            dim,
            seed,
            source: collect(Split::Source)?,
            labeled: collect(Split::Labeled)?,
            unlabeled,
            target_test: collect(Split::TargetTest)?,
            source_test: collect(Split::SourceTest)?,
        })
    }
}

fn class_mean(k: usize, classes: usize, dim: usize, radius: f64) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
    let mut m = vec![0.0; dim];
    m[0] = radius * angle.cos();
    m[1] = radius * angle.sin();
    m
}

fn to_target(x: &mut [f64], rotation_deg: f64, shift: f64) {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let (a, b) = (x[0], x[1]);
    x[0] = c * a - s * b + shift;
    x[1] = s * a + c * b;
}

fn draw_blobs(
    params: &GaussianShiftParams,
    n: usize,
    target: bool,
    rng: &mut ChaCha8Rng,
) -> LabeledSet {
    let means: Vec<Vec<f64>> =
        (0..params.classes).map(|k| class_mean(k, params.classes, params.dim, params.radius)).collect();
    let mut data = Vec::with_capacity(n * params.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % params.classes;
        let mut x: Vec<f64> = means[k]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + params.noise * z
            })
            .collect();
        if target {
            to_target(&mut x, params.rotation, params.shift);
        }
        data.extend_from_slice(&x);
        labels.push(k);
    }
    LabeledSet { features: Matrix::from_vec(n, params.dim, data).expect("sized"), labels }
}

/// Seeded synthetic problem; a pure function of `params`.
pub fn make_gaussian_shift(params: &GaussianShiftParams) -> Result<SsdaDataset> {
    params.validate()?;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(s);
        rng
    };
    let source = draw_blobs(params, params.n_source, false, &mut stream(0));
    let target = draw_blobs(params, params.n_target, true, &mut stream(1));
    let target_test = draw_blobs(params, params.n_test, true, &mut stream(2));
    let source_test = draw_blobs(params, params.n_test, false, &mut stream(3));

    // round-robin labels: the first `shots * classes` rows hold exactly
    // `shots` examples of every class
    let n_l = params.labeled_count();
    let idx_l: Vec<usize> = (0..n_l).collect();
    let idx_u: Vec<usize> = (n_l..params.n_target).collect();
    let labeled = LabeledSet {
        features: target.features.select_rows(&idx_l),
        labels: idx_l.iter().map(|&i| target.labels[i]).collect(),
    };
    Ok(SsdaDataset {
        classes: params.classes,
        dim: params.dim,
        seed: params.seed,
        source,
        labeled,
        unlabeled: target.features.select_rows(&idx_u),
        target_test,
        source_test,
    })
}

/// Stochastic view of a feature vector: additive Gaussian jitter followed by
/// per-coordinate scaling drawn from `[1 - scale_jitter, 1 + scale_jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub strength: f64,
    pub scale_jitter: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self { strength: 0.3, scale_jitter: 0.1 }
    }
}

impl Augment {
    pub fn identity() -> Self {
        Self { strength: 0.0, scale_jitter: 0.0 }
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                let noisy = v + self.strength * z;
                if self.scale_jitter > 0.0 {
                    noisy * rng.random_range(1.0 - self.scale_jitter..=1.0 + self.scale_jitter)
                } else {
                    noisy
                }
            })
            .collect()
    }

    fn apply_rows<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let v = self.apply(x.row(r), rng);
            out.row_mut(r).copy_from_slice(&v);
        }
        out
    }
}

/// Free-standing form of [`Augment::apply`].
pub fn augment<R: Rng + ?Sized>(x: &[f64], strength: f64, scale_jitter: f64, rng: &mut R) -> Vec<f64> {
    Augment { strength, scale_jitter }.apply(x, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSizes {
    pub source: usize,
    pub labeled: usize,
    /// Unlabeled rows per step; each contributes a raw row and two views.
    pub unlabeled: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        Self { source: 24, labeled: 12, unlabeled: 24 }
    }
}

/// One training mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub classes: usize,
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub labeled_x: Matrix,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Matrix,
    /// First augmented view of `unlabeled_x` (used by the pairwise loss).
    pub view1: Matrix,
    /// Second augmented view (used by pseudo-labeling).
    pub view2: Matrix,
}

impl Batch {
    pub fn source_one_hot(&self) -> Matrix {
        Matrix::one_hot(&self.source_y, self.classes)
    }

    pub fn labeled_one_hot(&self) -> Matrix {
        Matrix::one_hot(&self.labeled_y, self.classes)
    }

    pub fn n_source(&self) -> usize {
        self.source_y.len()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.rows()
    }

    /// Rows of the fused graph: source, labeled, raw unlabeled, view 1, view 2.
    pub fn node_count(&self) -> usize {
        self.n_source() + self.n_labeled() + 3 * self.n_unlabeled()
    }

    /// All rows stacked in graph order.
    pub fn stacked(&self) -> Matrix {
        Matrix::vstack(&[&self.source_x, &self.labeled_x, &self.unlabeled_x, &self.view1, &self.view2])
            .expect("blocks share a feature dimension")
    }
}

/// Uniform sampling without replacement from each pool.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &SsdaDataset,
    sizes: BatchSizes,
    aug: &Augment,
    rng: &mut R,
) -> Result<Batch> {
    let check = |what: &str, want: usize, have: usize| {
        if want > have {
            Err(Error::Config(format!("batch asks for {want} {what} rows, pool has {have}")))
        } else {
            Ok(())
        }
    };
    check("source", sizes.source, dataset.source.len())?;
    check("labeled", sizes.labeled, dataset.labeled.len())?;
    check("unlabeled", sizes.unlabeled, dataset.unlabeled.rows())?;

    let is = index::sample(rng, dataset.source.len(), sizes.source).into_vec();
    let il = index::sample(rng, dataset.labeled.len(), sizes.labeled).into_vec();
    let iu = index::sample(rng, dataset.unlabeled.rows(), sizes.unlabeled).into_vec();
    let unlabeled_x = dataset.unlabeled.select_rows(&iu);
    let view1 = aug.apply_rows(&unlabeled_x, rng);
    let view2 = aug.apply_rows(&unlabeled_x, rng);
    Ok(Batch {
        classes: dataset.classes,
        source_x: dataset.source.features.select_rows(&is),
        source_y: is.iter().map(|&i| dataset.source.labels[i]).collect(),
        labeled_x: dataset.labeled.features.select_rows(&il),
        labeled_y: il.iter().map(|&i| dataset.labeled.labels[i]).collect(),
        unlabeled_x,
        view1,
        view2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(seed: u64) -> GaussianShiftParams {
        GaussianShiftParams { seed, ..Default::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = make_gaussian_shift(&desk(7)).unwrap();
        let b = make_gaussian_shift(&desk(7)).unwrap();
        assert_eq!(a, b);
        let c = make_gaussian_shift(&desk(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shot_protocol() {
        let d = make_gaussian_shift(&desk(1)).unwrap();
        assert_eq!(d.labeled.len(), 12);
        for k in 0..4 {
            assert_eq!(d.labeled.labels.iter().filter(|&&y| y == k).count(), 3);
        }
        assert_eq!(d.labeled.len() + d.unlabeled.rows(), 400);
    }

    #[test]
    fn one_shot_protocol() {
        let p = GaussianShiftParams { shots: 1, classes: 5, ..desk(2) };
        let d = make_gaussian_shift(&p).unwrap();
        assert_eq!(d.labeled.len(), 5);
    }

    #[test]
    fn too_few_target_rows() {
        let p = GaussianShiftParams { n_target: 11, ..desk(0) };
        assert!(matches!(make_gaussian_shift(&p), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shift_has_same_means() {
        let p = GaussianShiftParams { shift: 0.0, rotation: 0.0, n_test: 20000, ..desk(3) };
        let d = make_gaussian_shift(&p).unwrap();
        let mean = |s: &LabeledSet, k: usize| {
            let rows: Vec<_> = (0..s.len()).filter(|&i| s.labels[i] == k).collect();
            let n = rows.len() as f64;
            (0..2).map(|c| rows.iter().map(|&i| s.features.get(i, c)).sum::<f64>() / n).collect::<Vec<_>>()
        };
        for k in 0..4 {
            let (a, b) = (mean(&d.source_test, k), mean(&d.target_test, k));
            for c in 0..2 {
                assert!((a[c] - b[c]).abs() < 0.05, "class {k}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn identity_augment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = [1.0, -2.0, 3.5];
        assert_eq!(augment(&x, 0.0, 0.0, &mut rng), x.to_vec());
    }

    #[test]
    fn augment_draws_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = [1.0, -2.0];
        let a = Augment::default();
        assert_ne!(a.apply(&x, &mut rng), a.apply(&x, &mut rng));
    }

    #[test]
    fn augment_is_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Augment::default();
        let x = [1.0, -2.0];
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let v = a.apply(&x, &mut rng);
            for c in 0..2 {
                let d = v[c] - x[c];
                sum[c] += d;
                sq[c] += d * d;
            }
        }
        for c in 0..2 {
            let mean = sum[c] / n as f64;
            let sd = (sq[c] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "coord {c}: mean {mean}, sd {sd}");
        }
    }

    #[test]
    fn batch_determinism_and_shapes() {
        let d = make_gaussian_shift(&desk(4)).unwrap();
        let sizes = BatchSizes::default();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            sample_batch(&d, sizes, &Augment::default(), &mut rng).unwrap()
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a, b);
        assert_eq!(a.n_unlabeled(), sizes.unlabeled);
        assert_eq!(a.view1.shape(), a.unlabeled_x.shape());
        assert_ne!(a.view1, a.view2);
        for row in a.labeled_one_hot().iter_rows() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        let mut il = a.source_x.iter_rows().map(|r| r.to_vec()).collect::<Vec<_>>();
        il.dedup();
        assert_eq!(il.len(), sizes.source);
    }

    #[test]
    fn empty_unlabeled_block() {
        let d = make_gaussian_shift(&desk(4)).unwrap();
        let sizes = BatchSizes { unlabeled: 0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&d, sizes, &Augment::default(), &mut rng).unwrap();
        assert_eq!(b.n_unlabeled(), 0);
        assert_eq!(b.node_count(), sizes.source + sizes.labeled);
    }

    #[test]
    fn oversized_batch_is_config_error() {
        let d = make_gaussian_shift(&desk(4)).unwrap();
        let sizes = BatchSizes { labeled: 13, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_batch(&d, sizes, &Augment::default(), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let p = GaussianShiftParams { n_test: 50, ..desk(5) };
        let d = make_gaussian_shift(&p).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = SsdaDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(d, back);
        let unl = String::from_utf8(buf).unwrap();
        assert!(unl.lines().any(|l| l.starts_with("unlabeled,-1,")));
    }
}
