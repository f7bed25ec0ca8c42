//! Network stack: feature extractor, structure analyzer, instance graph,
//! stacked graph convolutions and the classifier over fused features.
//!
//! All blocks treat nodes (examples) as rows. For a batch `x` of `w` rows:
//!
//! ```text
//! G    = extractor(x)                      w x f
//! S    = sigmoid(dsa(G))                   w x h   structure scores
//! A    = S S^T + I                         w x w
//! P    = D^-1/2 A D^-1/2,  D_ii = sum_j A_ij
//! Z    = gcn(P, G)                         w x c
//! prob = softmax([G | Z] W_c + b_c)        w x K
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden and output widths of the extractor; the last entry is the
    /// graph-signal dimension.
    pub extractor_layers: Vec<usize>,
    /// Structure-score width `h`; also the DSA hidden width.
    pub structure_dim: usize,
    /// GCN hidden widths followed by the output width.
    pub gcn_layers: Vec<usize>,
    pub dropout: f64,
    /// Initial bias of the DSA output layer. Negative values start the
    /// instance graph close to self-loops only.
    pub structure_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { extractor_layers: vec![64, 64], structure_dim: 16, gcn_layers: vec![32, 16], dropout: 0.2, structure_bias: -3.0 }
    }
}

impl ModelConfig {
    /// Widths at full scale: 1000 graph-signal channels, 256 hidden, 4 layers.
    pub fn paper_scale(output_channels: usize) -> Self {
        Self {
            extractor_layers: vec![1000],
            structure_dim: 16,
            gcn_layers: vec![256, 256, 256, output_channels],
            dropout: 0.2,
            structure_bias: -3.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_layers.last().copied().unwrap_or(0)
    }

    pub fn structure_out_dim(&self) -> usize {
        self.gcn_layers.last().copied().unwrap_or(0)
    }

    pub fn fused_dim(&self, use_saa: bool) -> usize {
        self.feature_dim() + if use_saa { self.structure_out_dim() } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extractor_layers.is_empty() || self.extractor_layers.contains(&0) {
            return Err(Error::Config("extractor_layers must be non-empty and positive".into()));
        }
        if self.gcn_layers.is_empty() || self.gcn_layers.contains(&0) {
            return Err(Error::Config("gcn_layers must be non-empty and positive".into()));
        }
        if self.structure_dim == 0 {
            return Err(Error::Config("structure_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Affine layer `x W + b`, weights stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Matrix::zeros(fan_in, fan_out), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub layers: Vec<Dense>,
}

/// Data Structure Analyzer: one hidden layer of width `h`, logistic output.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaNetwork {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnStack {
    /// Filters `W` of each layer, `in x out`.
    pub filters: Vec<Matrix>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier(pub Dense);

#[derive(Debug, Clone, PartialEq)]
pub struct StructureBranch {
    pub dsa: DsaNetwork,
    pub gcn: GcnStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_dim: usize,
    pub classes: usize,
    pub extractor: Extractor,
    pub structure: StructureBranch,
    /// When false the structure branch is neither evaluated nor trained and
    /// the classifier reads `G` alone.
    pub use_saa: bool,
    pub classifier: Classifier,
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl Model {
    pub fn new(config: &ModelConfig, input_dim: usize, classes: usize, use_saa: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x11);
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &w in &config.extractor_layers {
            layers.push(Dense::init(&mut rng, fan_in, w, RELU_GAIN));
            fan_in = w;
        }
        let f = config.feature_dim();
        let structure = {
            let h = config.structure_dim;
            let mut dsa = DsaNetwork {
                hidden: Dense::init(&mut rng, f, h, RELU_GAIN),
                output: Dense::init(&mut rng, h, h, 1.0),
            };
            dsa.output.bias.as_mut_slice().fill(config.structure_bias);
            let mut filters = Vec::new();
            let mut fan_in = f;
            for &c in &config.gcn_layers {
                filters.push(Dense::init(&mut rng, fan_in, c, RELU_GAIN).weight);
                fan_in = c;
            }
            StructureBranch { dsa, gcn: GcnStack { filters, dropout: config.dropout } }
        };
        let classifier = Classifier(Dense::init(&mut rng, config.fused_dim(use_saa), classes, 1.0));
        Ok(Self { input_dim, classes, extractor: Extractor { layers }, structure, use_saa, classifier })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.layers.last().map_or(self.input_dim, Dense::out_dim)
    }

    pub fn fused_dim(&self) -> usize {
        self.classifier.0.in_dim()
    }

    /// Named parameters in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &l.weight));
            out.push((format!("extractor.{i}.bias"), &l.bias));
        }
        {
            let s = &self.structure;
            out.push(("dsa.0.weight".into(), &s.dsa.hidden.weight));
            out.push(("dsa.0.bias".into(), &s.dsa.hidden.bias));
            out.push(("dsa.1.weight".into(), &s.dsa.output.weight));
            out.push(("dsa.1.bias".into(), &s.dsa.output.bias));
            for (i, w) in s.gcn.filters.iter().enumerate() {
                out.push((format!("gcn.{i}.weight"), w));
            }
        }
        out.push(("classifier.weight".into(), &self.classifier.0.weight));
        out.push(("classifier.bias".into(), &self.classifier.0.bias));
        out
    }

    /// Mutable parameters in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.collect_mut(true)
    }

    /// Parameters updated by the optimizer, in the order of
    /// [`ModelVars::flat`]. Excludes the structure branch when it is off.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let all = self.use_saa;
        self.collect_mut(all)
    }

    /// Names of [`Model::trainable_mut`] entries.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| self.use_saa || !(n.starts_with("dsa.") || n.starts_with("gcn.")))
            .collect()
    }

    fn collect_mut(&mut self, with_structure: bool) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.extractor.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if with_structure {
            let s = &mut self.structure;
            out.push(&mut s.dsa.hidden.weight);
            out.push(&mut s.dsa.hidden.bias);
            out.push(&mut s.dsa.output.weight);
            out.push(&mut s.dsa.output.bias);
            for w in &mut s.gcn.filters {
                out.push(w);
            }
        }
        out.push(&mut self.classifier.0.weight);
        out.push(&mut self.classifier.0.bias);
        out
    }

    /// Rebuilds a model from named tensors; layer counts come from the names.
    pub fn from_named(named: &[(String, Matrix)], dropout: f64) -> Result<Self> {
        let get = |name: &str| -> Result<Matrix> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Format { what: "checkpoint", detail: format!("missing tensor '{name}'") })
        };
        let count = |prefix: &str| {
            (0..).take_while(|i| named.iter().any(|(n, _)| n == &format!("{prefix}.{i}.weight"))).count()
        };
        let dense = |prefix: String| -> Result<Dense> {
            Ok(Dense { weight: get(&format!("{prefix}.weight"))?, bias: get(&format!("{prefix}.bias"))? })
        };
        let layers =
            (0..count("extractor")).map(|i| dense(format!("extractor.{i}"))).collect::<Result<Vec<_>>>()?;
        let Some(first) = layers.first() else {
            return Err(Error::Format { what: "checkpoint", detail: "no extractor layers".into() });
        };
        let input_dim = first.in_dim();
        let filters = (0..count("gcn")).map(|i| get(&format!("gcn.{i}.weight"))).collect::<Result<Vec<_>>>()?;
        if filters.is_empty() {
            return Err(Error::Format { what: "checkpoint", detail: "no gcn layers".into() });
        }
        let structure = StructureBranch {
            dsa: DsaNetwork { hidden: dense("dsa.0".into())?, output: dense("dsa.1".into())? },
            gcn: GcnStack { filters, dropout },
        };
        let classifier = Classifier(dense("classifier".into())?);
        let feature_dim = layers.last().map_or(input_dim, Dense::out_dim);
        let use_saa = classifier.0.in_dim() != feature_dim;
        let model = Self {
            input_dim,
            classes: classifier.0.out_dim(),
            extractor: Extractor { layers },
            structure,
            use_saa,
            classifier,
        };
        model.check_chain()?;
        Ok(model)
    }

    fn check_chain(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Format { what: "checkpoint", detail });
        let mut d = self.input_dim;
        for (i, l) in self.extractor.layers.iter().enumerate() {
            if l.in_dim() != d || l.bias.cols() != l.out_dim() {
                return bad(format!("extractor layer {i} does not chain"));
            }
            d = l.out_dim();
        }
        let mut fused = d;
        {
            let s = &self.structure;
            if s.dsa.hidden.in_dim() != d || s.dsa.output.in_dim() != s.dsa.hidden.out_dim() {
                return bad("dsa does not chain".into());
            }
            let mut c = d;
            for (i, w) in s.gcn.filters.iter().enumerate() {
                if w.rows() != c {
                    return bad(format!("gcn layer {i} does not chain"));
                }
                c = w.cols();
            }
            if self.use_saa {
                fused += c;
            }
        }
        if self.classifier.0.in_dim() != fused {
            return bad(format!("classifier expects {} inputs, fused dimension is {fused}", self.classifier.0.in_dim()));
        }
        Ok(())
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let bind_dense = |t: &mut Tape, d: &Dense| DenseVars { weight: t.param(d.weight.clone()), bias: t.param(d.bias.clone()) };
        let extractor = self.extractor.layers.iter().map(|l| bind_dense(tape, l)).collect();
        let structure = self.use_saa.then(|| {
            let s = &self.structure;
            StructureVars {
                dsa_hidden: bind_dense(tape, &s.dsa.hidden),
                dsa_output: bind_dense(tape, &s.dsa.output),
                filters: s.gcn.filters.iter().map(|w| tape.param(w.clone())).collect(),
            }
        });
        let classifier = bind_dense(tape, &self.classifier.0);
        ModelVars { extractor, structure, classifier }
    }

    /// Dropout masks for one training forward pass over `nodes` rows. Masks
    /// hold 0 or `1 / (1 - p)`.
    pub fn draw_dropout(&self, nodes: usize, rng: &mut impl Rng) -> Vec<Matrix> {
        if !self.use_saa {
            return Vec::new();
        }
        let s = &self.structure;
        let p = s.gcn.dropout;
        let hidden = &s.gcn.filters[..s.gcn.filters.len() - 1];
        hidden
            .iter()
            .map(|w| {
                let keep = 1.0 / (1.0 - p);
                let data = (0..nodes * w.cols())
                    .map(|_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                Matrix::from_vec(nodes, w.cols(), data).expect("sized")
            })
            .collect()
    }

    /// Full forward pass over the rows of `x`. `dropout` holds one mask per
    /// hidden GCN layer, or is empty at evaluation time.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, x: Var, dropout: &[Matrix]) -> Result<Forward> {
        if x.shape().cols != self.input_dim {
            return Err(Error::Contract(format!(
                "input has {} features, extractor expects {}",
                x.shape().cols,
                self.input_dim
            )));
        }
        let g = extract(tape, &vars.extractor, x)?;
        let (graph, structure) = match &vars.structure {
            Some(sv) => {
                let graph = build_graph(tape, sv, g)?;
                let z = gcn_forward(tape, graph.propagation, g, &sv.filters, dropout)?;
                (Some(graph), Some(z))
            }
            None => (None, None),
        };
        let (fused, probs) = classify(tape, &vars.classifier, g, structure)?;
        Ok(Forward { features: g, graph, structure, fused, probs })
    }

    /// Evaluation-mode pass in chunks of `chunk` rows; each chunk forms its
    /// own instance graph. Returns fused features and class probabilities.
    pub fn predict(&self, x: &Matrix, chunk: usize) -> Result<(Matrix, Matrix)> {
        let chunk = chunk.max(1);
        let mut fused = Vec::new();
        let mut probs = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + chunk).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape);
            let xv = tape.constant(x.select_rows(&idx));
            let out = self.forward(&mut tape, &vars, xv, &[])?;
            fused.push(tape.value(out.fused).clone());
            probs.push(tape.value(out.probs).clone());
            start = end;
        }
        let stack = |v: &[Matrix], cols: usize| {
            if v.is_empty() {
                Ok(Matrix::zeros(0, cols))
            } else {
                Matrix::vstack(&v.iter().collect::<Vec<_>>())
            }
        };
        Ok((stack(&fused, self.fused_dim())?, stack(&probs, self.classes)?))
    }

    fn bind_frozen(&self, tape: &mut Tape) -> ModelVars {
        let bind_dense =
            |t: &mut Tape, d: &Dense| DenseVars { weight: t.constant(d.weight.clone()), bias: t.constant(d.bias.clone()) };
        let extractor = self.extractor.layers.iter().map(|l| bind_dense(tape, l)).collect();
        let structure = self.use_saa.then(|| {
            let s = &self.structure;
            StructureVars {
                dsa_hidden: bind_dense(tape, &s.dsa.hidden),
                dsa_output: bind_dense(tape, &s.dsa.output),
                filters: s.gcn.filters.iter().map(|w| tape.constant(w.clone())).collect(),
            }
        });
        let classifier = bind_dense(tape, &self.classifier.0);
        ModelVars { extractor, structure, classifier }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct StructureVars {
    pub dsa_hidden: DenseVars,
    pub dsa_output: DenseVars,
    pub filters: Vec<Var>,
}

/// Tape handles for every parameter, mirroring [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub extractor: Vec<DenseVars>,
    pub structure: Option<StructureVars>,
    pub classifier: DenseVars,
}

impl ModelVars {
    /// Handles in the order of [`Model::trainable_mut`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.extractor {
            out.extend([l.weight, l.bias]);
        }
        if let Some(s) = &self.structure {
            out.extend([s.dsa_hidden.weight, s.dsa_hidden.bias, s.dsa_output.weight, s.dsa_output.bias]);
            out.extend(s.filters.iter().copied());
        }
        out.extend([self.classifier.weight, self.classifier.bias]);
        out
    }
}

/// Instance graph recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub scores: Var,
    pub adjacency: Var,
    pub degrees: Var,
    pub propagation: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Extractor output `G`.
    pub features: Var,
    pub graph: Option<GraphVars>,
    /// GCN output `Z`.
    pub structure: Option<Var>,
    /// `[G | Z]`, or `G` alone without the structure branch.
    pub fused: Var,
    pub probs: Var,
}

fn dense(tape: &mut Tape, d: &DenseVars, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, d.weight)?;
    tape.add_row(xw, d.bias)
}

/// `G = F(x)`: rectified multilayer perceptron.
pub fn extract(tape: &mut Tape, layers: &[DenseVars], x: Var) -> Result<Var> {
    let mut h = x;
    for l in layers {
        let a = dense(tape, l, h)?;
        h = tape.relu(a);
    }
    Ok(h)
}

/// Structure scores, adjacency `S S^T + I`, degrees and the symmetric
/// normalized propagation matrix.
pub fn build_graph(tape: &mut Tape, sv: &StructureVars, g: Var) -> Result<GraphVars> {
    let h = dense(tape, &sv.dsa_hidden, g)?;
    let h = tape.relu(h);
    let s = dense(tape, &sv.dsa_output, h)?;
    let scores = tape.sigmoid(s);
    graph_from_scores(tape, scores)
}

pub fn graph_from_scores(tape: &mut Tape, scores: Var) -> Result<GraphVars> {
    let n = scores.shape().rows;
    let st = tape.transpose(scores);
    let gram = tape.matmul(scores, st)?;
    let eye = tape.constant(Matrix::identity(n));
    let adjacency = tape.add(gram, eye)?;
    let degrees = tape.row_sum(adjacency);
    let inv_sqrt = tape.powf(degrees, -0.5);
    let inv_sqrt_t = tape.transpose(inv_sqrt);
    let left = tape.scale_rows(adjacency, inv_sqrt)?;
    let propagation = tape.scale_cols(left, inv_sqrt_t)?;
    Ok(GraphVars { scores, adjacency, degrees, propagation })
}

/// Stacked graph convolution `H <- P H W`; every layer but the last is
/// followed by a rectifier and its dropout mask.
pub fn gcn_forward(tape: &mut Tape, propagation: Var, g: Var, filters: &[Var], dropout: &[Matrix]) -> Result<Var> {
    if propagation.shape().cols != g.shape().rows {
        return Err(Error::Dimension { op: "gcn_forward", left: propagation.shape(), right: g.shape() });
    }
    if !dropout.is_empty() && dropout.len() + 1 != filters.len() {
        return Err(Error::Config(format!(
            "{} dropout masks for {} gcn layers",
            dropout.len(),
            filters.len()
        )));
    }
    let mut h = g;
    for (i, &w) in filters.iter().enumerate() {
        let p = tape.matmul(propagation, h)?;
        h = tape.matmul(p, w).map_err(|e| Error::Config(format!("gcn layer {i}: {e}")))?;
        if i + 1 < filters.len() {
            h = tape.relu(h);
            if let Some(mask) = dropout.get(i) {
                h = tape.apply_mask(h, mask)?;
            }
        }
    }
    Ok(h)
}

/// Fused features `[G | Z]` and class probabilities.
pub fn classify(tape: &mut Tape, classifier: &DenseVars, g: Var, z: Option<Var>) -> Result<(Var, Var)> {
    let fused = match z {
        Some(z) => tape.concat_cols(g, z)?,
        None => g,
    };
    let logits = dense(tape, classifier, fused)?;
    Ok((fused, tape.softmax_rows(logits)))
}

/// Instance graph on plain values, for inspection and export.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGraph {
    pub adjacency: Matrix,
    pub degrees: Vec<f64>,
    pub propagation: Matrix,
}

impl InstanceGraph {
    pub fn from_scores(scores: &Matrix) -> Result<Self> {
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let g = graph_from_scores(&mut tape, s)?;
        Ok(Self {
            adjacency: tape.value(g.adjacency).clone(),
            degrees: tape.value(g.degrees).as_slice().to_vec(),
            propagation: tape.value(g.propagation).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_node_graph() {
        let g = InstanceGraph::from_scores(&m(&[&[0.5, 0.25]])).unwrap();
        assert_eq!(g.adjacency.as_slice(), &[1.0 + 0.25 + 0.0625]);
        assert!((g.propagation.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_scores_symmetric() {
        let g = InstanceGraph::from_scores(&m(&[&[0.3, 0.7], &[0.3, 0.7]])).unwrap();
        assert_eq!(g.adjacency.get(0, 1), g.adjacency.get(1, 0));
        assert_eq!(g.adjacency, g.adjacency.transpose());
    }

    #[test]
    fn two_node_gcn_averages() {
        let mut t = Tape::new();
        let p = t.constant(m(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let deg = t.row_sum(p);
        assert_eq!(t.value(deg).as_slice(), &[2.0, 2.0]);
        let inv = t.powf(deg, -0.5);
        let inv_t = t.transpose(inv);
        let l = t.scale_rows(p, inv).unwrap();
        let prop = t.scale_cols(l, inv_t).unwrap();
        let x = t.constant(m(&[&[1.0], &[3.0]]));
        let w = t.constant(m(&[&[1.0]]));
        let z = gcn_forward(&mut t, prop, x, &[w], &[]).unwrap();
        assert!(t.value(z).as_slice().iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn zero_filters_zero_output() {
        let mut t = Tape::new();
        let prop = t.constant(Matrix::identity(3));
        let x = t.constant(Matrix::filled(3, 2, 1.5));
        let w1 = t.constant(Matrix::zeros(2, 4));
        let w2 = t.constant(Matrix::zeros(4, 2));
        let z = gcn_forward(&mut t, prop, x, &[w1, w2], &[]).unwrap();
        assert_eq!(t.value(z), &Matrix::zeros(3, 2));
    }

    #[test]
    fn identity_propagation_and_filter() {
        let mut t = Tape::new();
        let prop = t.constant(Matrix::identity(3));
        let feats = m(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0], &[2.0, 2.0, -1.0]]);
        let x = t.constant(feats.clone());
        let w = t.constant(Matrix::identity(3));
        let z = gcn_forward(&mut t, prop, x, &[w], &[]).unwrap();
        assert_eq!(t.value(z), &feats);
    }

    #[test]
    fn gcn_chain_mismatch() {
        let mut t = Tape::new();
        let prop = t.constant(Matrix::identity(2));
        let x = t.constant(Matrix::zeros(2, 3));
        let w = t.constant(Matrix::zeros(4, 1));
        assert!(matches!(gcn_forward(&mut t, prop, x, &[w], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let model = zeroed(Model::new(&ModelConfig::default(), 3, 4, true, 0).unwrap());
        let mut t = Tape::new();
        let vars = model.bind(&mut t);
        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let out = model.forward(&mut t, &vars, x, &[]).unwrap();
        assert_eq!(t.value(out.features), &Matrix::zeros(1, 64));
        // zero classifier too: uniform prediction
        assert_eq!(t.value(out.probs).as_slice(), &[0.25; 4]);
        assert_eq!(out.fused.shape().cols, 64 + 16);
    }

    fn zeroed(mut model: Model) -> Model {
        for p in model.params_mut() {
            p.as_mut_slice().fill(0.0);
        }
        model
    }

    #[test]
    fn forced_logits() {
        let mut t = Tape::new();
        let g = t.constant(m(&[&[1.0]]));
        let c = DenseVars { weight: t.constant(m(&[&[10.0, -10.0]])), bias: t.constant(Matrix::zeros(1, 2)) };
        let (_, p) = classify(&mut t, &c, g, None).unwrap();
        let want = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((t.value(p).get(0, 0) - want).abs() < 1e-15);
        assert!(t.value(p).get(0, 1) < 3e-9);
    }

    #[test]
    fn classify_shape() {
        let model = Model::new(&ModelConfig::default(), 2, 5, true, 3).unwrap();
        let x = Matrix::filled(7, 2, 0.5);
        let (fused, probs) = model.predict(&x, 4).unwrap();
        assert_eq!(fused.shape().cols, 80);
        assert_eq!(probs.shape().rows, 7);
        assert_eq!(probs.shape().cols, 5);
    }

    #[test]
    fn wrong_input_width() {
        let model = Model::new(&ModelConfig::default(), 2, 3, false, 3).unwrap();
        assert!(matches!(model.predict(&Matrix::zeros(2, 3), 8), Err(Error::Contract(_))));
    }

    #[test]
    fn named_round_trip() {
        let model = Model::new(&ModelConfig::default(), 2, 4, true, 9).unwrap();
        let named: Vec<(String, Matrix)> = model.named_params().into_iter().map(|(n, m)| (n, m.clone())).collect();
        let back = Model::from_named(&named, 0.2).unwrap();
        assert_eq!(model, back);
    }
}
