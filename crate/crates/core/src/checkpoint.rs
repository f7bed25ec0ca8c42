//! Plain-text tensor archives. One tensor per line:
//! `name,rows,cols,v0,v1,...` in row-major order, after a `# aglp-checkpoint`
//! header. Floats are written in shortest round-trip form, so a save/load
//! cycle is exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{CentroidState, CentroidTable};
use crate::model::Model;
use crate::prototypes::PrototypeSet;
use crate::tensor::Matrix;
use crate::trainer::{TrainState, TrainerConfig};

const HEADER: &str = "# aglp-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Matrix)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name).ok_or_else(|| bad(format!("missing tensor '{name}'")))
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Matrix)> {
        self.tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone())))
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        for (name, m) in &self.tensors {
            if name.contains(',') || name.contains('\n') {
                return Err(bad(format!("tensor name '{name}' contains a separator")));
            }
            write!(w, "{name},{},{}", m.rows(), m.cols())?;
            for v in m.as_slice() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        match lines.next() {
            Some(Ok(h)) if h.trim_end() == HEADER => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(bad("missing header line")),
        }
        let mut out = Self::default();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let mut fields = line.split(',');
            let name = fields.next().unwrap_or_default().to_string();
            let mut dim = |what: &str| -> Result<usize> {
                fields
                    .next()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| bad(format!("line {lineno}: bad {what}")))
            };
            let (rows, cols) = (dim("rows")?, dim("cols")?);
            let data = fields
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad(format!("line {lineno}: bad value '{s}'"))))
                .collect::<Result<Vec<_>>>()?;
            if data.len() != rows * cols {
                return Err(bad(format!("line {lineno}: {} values for [{rows}, {cols}]", data.len())));
            }
            out.push(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

fn flags(v: &[bool]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("row shape")
}

fn table(archive: &Archive, prefix: &str, classes: usize, dim: usize) -> Result<CentroidTable> {
    let centroids = archive.require(&format!("{prefix}.centroids"))?.clone();
    let init = archive.require(&format!("{prefix}.initialized"))?;
    if centroids.rows() != classes || centroids.cols() != dim || init.as_slice().len() != classes {
        return Err(bad(format!("{prefix} has the wrong shape")));
    }
    Ok(CentroidTable { centroids, initialized: init.as_slice().iter().map(|&v| v != 0.0).collect() })
}

/// Model weights only, under `param/`.
pub fn model_archive(model: &Model) -> Archive {
    let mut a = Archive::default();
    for (name, m) in model.named_params() {
        a.push(format!("param/{name}"), m.clone());
    }
    a
}

pub fn model_from_archive(archive: &Archive, dropout: f64) -> Result<Model> {
    Model::from_named(&archive.with_prefix("param/"), dropout)
}

pub fn state_archive(state: &TrainState) -> Archive {
    let mut a = model_archive(&state.model);
    for (name, v) in state.model.trainable_names().into_iter().zip(&state.velocity) {
        a.push(format!("velocity/{name}"), v.clone());
    }
    let c = &state.centroids;
    a.push("centroid/source.centroids", c.source.centroids.clone());
    a.push("centroid/source.initialized", flags(&c.source.initialized));
    a.push("centroid/target.centroids", c.target.centroids.clone());
    a.push("centroid/target.initialized", flags(&c.target.initialized));
    if let Some(p) = &state.pseudo_centers {
        a.push("pseudo/centers", p.centers.clone());
    }
    a.push("meta/step", Matrix::scalar(state.step as f64));
    a
}

/// Rebuilds training state; hyperparameters not stored in the archive come
/// from `config`.
pub fn state_from_archive(archive: &Archive, config: &TrainerConfig) -> Result<TrainState> {
    let model = model_from_archive(archive, config.model.dropout)?;
    let velocity = model
        .trainable_names()
        .iter()
        .map(|n| archive.require(&format!("velocity/{n}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let (k, d) = (model.classes, model.fused_dim());
    let centroids = CentroidState {
        source: table(archive, "centroid/source", k, d)?,
        target: table(archive, "centroid/target", k, d)?,
        momentum: config.centroid_momentum,
    };
    let pseudo_centers = archive
        .get("pseudo/centers")
        .map(|c| PrototypeSet::new(c.clone(), config.proto_temperature, config.temperature_mode))
        .transpose()?;
    let step = archive.require("meta/step")?.as_slice().first().copied().unwrap_or(-1.0);
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(bad(format!("bad step {step}")));
    }
    Ok(TrainState { model, velocity, centroids, pseudo_centers, step: step as usize })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut a = Archive::default();
        a.push("x", Matrix::from_rows(&[[0.1, -1e-300], [f64::MAX, 1.0 / 3.0]]).unwrap());
        a.push("empty", Matrix::zeros(0, 3));
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        assert_eq!(Archive::read(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::read("nope\n".as_bytes()).is_err());
        assert!(Archive::read(format!("{HEADER}\nx,2,2,1,2,3\n").as_bytes()).is_err());
        assert!(Archive::read(format!("{HEADER}\nx,1,1,abc\n").as_bytes()).is_err());
        let err = Archive::read(format!("{HEADER}\nx,1\n").as_bytes()).unwrap_err();
        assert!(err.is_config());
    }
}
