//! Accuracy, confusion matrices and checkpoint evaluation.

use std::fs;
use std::path::Path;

use crate::classifier::class_names;
use crate::data::{load_dataset, Dataset, Split};
use crate::model::AgcdNet;
use crate::params::ParamStore;
use crate::tensor::io::encode;
use crate::tensor::{DType, Graph, Scalar, Tensor};
use crate::{Error, Result};

use super::checkpoint::read_archive;
use super::load_model;

/// Row-wise argmax of `[N, K]` logits.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, j| if row[j].as_f64() > row[best].as_f64() { j } else { best }))
        .collect()
}

/// `(correct, total)` for `[N, K]` logits.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let correct = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    (correct, labels.len())
}

/// Per-sample AG-CIM intermediates and stream gates collected during
/// inference: the module outputs stacked to `[N, d]`, the stream gates to `[N]`.
#[derive(Clone, Debug, Default)]
pub struct CimDump {
    pub phi_c_pert: Vec<f64>,
    pub delta: Vec<f64>,
    pub gate: Vec<f64>,
    pub phi_c_corr: Vec<f64>,
    pub h_face: Vec<f64>,
    pub h_context: Vec<f64>,
    pub dim: usize,
}

impl CimDump {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.h_face.len();
        let d = self.dim;
        let items: [(&str, &Vec<f64>, Vec<usize>); 6] = [
            ("phi_c_pert", &self.phi_c_pert, vec![n, d]),
            ("delta", &self.delta, vec![n, d]),
            ("gate", &self.gate, vec![n, d]),
            ("phi_c_corr", &self.phi_c_corr, vec![n, d]),
            ("h_face", &self.h_face, vec![n]),
            ("h_context", &self.h_context, vec![n]),
        ];
        for (name, values, shape) in items {
            let t = Tensor::<f32>::from_f64(shape, values)?;
            let mut buf = Vec::new();
            encode(&t, &mut buf)?;
            let path = dir.join(format!("{name}.agt"));
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Predicted classes for every sample of `ds`, in order.
pub fn predict<T: Scalar>(net: &AgcdNet, params: &ParamStore<T>, ds: &Dataset, batch_size: usize, mut dump: Option<&mut CimDump>) -> Result<Vec<usize>> {
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut preds = Vec::with_capacity(ds.len());
    for batch in ds.batches::<T>(&order, batch_size) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (f, c) = (g.constant(batch.face), g.constant(batch.context));
        let out = net.forward(&mut g, &p, f, c)?;
        let logits = g.value(out.logits);
        if !logits.all_finite() {
            return Err(Error::Numerical("non-finite logits during evaluation".into()));
        }
        preds.extend(argmax_rows(logits));
        if let Some(d) = dump.as_deref_mut() {
            let trace = out.trace.ok_or_else(|| Error::config("the model has no AG-CIM module to dump"))?;
            let v = |x| g.value(x).to_f64_vec();
            d.dim = g.shape(trace.delta)[1];
            d.phi_c_pert.extend(v(trace.phi_c_pert));
            d.delta.extend(v(trace.delta));
            d.gate.extend(v(trace.gate));
            d.phi_c_corr.extend(v(trace.phi_c_corr));
            d.h_face.extend(v(out.h_face));
            d.h_context.extend(v(out.h_context));
        }
    }
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `counts[true][pred]`.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized `counts`; rows without samples are all zero.
    pub matrix: Vec<Vec<f64>>,
    pub empty_rows: Vec<bool>,
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<Evaluation> {
    if preds.len() != labels.len() {
        return Err(Error::config(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::config(format!("class index out of range for {k} classes (pred {p}, label {y})")));
        }
        counts[y][p] += 1;
    }
    let matrix = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
        })
        .collect();
    let empty_rows = counts.iter().map(|row| row.iter().all(|&c| c == 0)).collect();
    let correct: usize = (0..k).map(|i| counts[i][i]).sum();
    Ok(Evaluation { accuracy: correct as f64 / preds.len().max(1) as f64, counts, matrix, empty_rows })
}

/// Header row of class names; each row is the true class followed by the
/// normalized predictions and an `empty` flag for classes with no samples.
pub fn confusion_csv(e: &Evaluation) -> String {
    let names = class_names(e.matrix.len());
    let mut s = format!("class,{},empty\n", names.join(","));
    for ((name, row), empty) in names.iter().zip(&e.matrix).zip(&e.empty_rows) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{name},{},{}\n", vals.join(","), *empty as u8));
    }
    s
}

/// Loads `ckpt`, predicts `split` of the dataset at `data`, and optionally
/// dumps AG-CIM intermediates.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path, split: Split, batch_size: usize, dump_dir: Option<&Path>) -> Result<Evaluation> {
    let dtype = read_archive(ckpt)?.meta.get_str("dtype").unwrap_or("f64").to_string();
    match dtype.parse::<DType>().map_err(|e| Error::data(ckpt, e))? {
        DType::F32 => evaluate_typed::<f32>(ckpt, data, split, batch_size, dump_dir),
        DType::F64 => evaluate_typed::<f64>(ckpt, data, split, batch_size, dump_dir),
    }
}

fn evaluate_typed<T: Scalar>(ckpt: &Path, data: &Path, split: Split, batch_size: usize, dump_dir: Option<&Path>) -> Result<Evaluation> {
    let m = load_model::<T>(ckpt)?;
    let ds = load_dataset(data, split)?;
    if m.net.cfg.num_classes != ds.spec.k {
        return Err(Error::data(ckpt, format!("checkpoint has {} classes, dataset has {}", m.net.cfg.num_classes, ds.spec.k)));
    }
    let mut dump = dump_dir.map(|_| CimDump::default());
    let preds = predict(&m.net, &m.params, &ds, batch_size, dump.as_mut())?;
    if let (Some(d), Some(dir)) = (dump, dump_dir) {
        d.write(dir)?;
    }
    confusion(&preds, &ds.labels(), ds.spec.k)
}
