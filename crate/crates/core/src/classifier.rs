//! Gated fusion, the linear classification head, and the training objective.

use std::fmt;

use crate::encoder::linear;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const EMOTIONS: [&str; 7] = ["angry", "disgust", "fear", "happy", "neutral", "sad", "surprise"];

/// Class names: the seven emotions for `k == 7`, `class0..` otherwise.
pub fn class_names(k: usize) -> Vec<String> {
    if k == EMOTIONS.len() {
        EMOTIONS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EmotionLabel {
    index: usize,
    k: usize,
}

impl EmotionLabel {
    pub fn new(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::config(format!("label {index} out of range for {k} classes")));
        }
        Ok(Self { index, k })
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn num_classes(self) -> usize {
        self.k
    }

    pub fn name(self) -> String {
        class_names(self.k).swap_remove(self.index)
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// `σ(h_f)·φ_f + σ(h_c)·φ_c` for `phi: [N,d]`, `h: [N]`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, phi_f: Var, phi_c: Var, h_f: Var, h_c: Var) -> Result<Var> {
    if g.shape(phi_f) != g.shape(phi_c) {
        return Err(Error::config(format!("fusion of {:?} and {:?}", g.shape(phi_f), g.shape(phi_c))));
    }
    let sf = g.sigmoid(h_f)?;
    let sc = g.sigmoid(h_c)?;
    let a = g.scale_rows(phi_f, sf)?;
    let b = g.scale_rows(phi_c, sc)?;
    Ok(g.add(a, b)?)
}

/// Logits `[N,K]` of the fused features; `w_f: [d,K]`, `b_f: [K]`.
pub fn fuse_classify<T: Scalar>(g: &mut Graph<T>, phi_f: Var, phi_c: Var, h_f: Var, h_c: Var, w_f: Var, b_f: Var) -> Result<Var> {
    let fused = fuse(g, phi_f, phi_c, h_f, h_c)?;
    linear(g, fused, w_f, Some(b_f))
}

/// Smoothed targets: `1 − ε + ε/K` on the label, `ε/K` elsewhere.
pub fn smoothed_targets<T: Scalar>(labels: &[usize], k: usize, eps: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("label smoothing must lie in [0,1), got {eps}")));
    }
    let off = eps / k as f64;
    let mut q = vec![off; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::config(format!("label {y} out of range for {k} classes")));
        }
        q[i * k + y] = 1.0 - eps + off;
    }
    Ok(Tensor::from_f64([labels.len(), k], &q)?)
}

/// Batch-mean of `−Σ_k q_k log p_k`, computed with log-softmax of `logits`.
pub fn cross_entropy_smoothed<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::config(format!("logits {s:?} for {} labels", labels.len())));
    }
    let q = g.constant(smoothed_targets(labels, s[1], eps)?);
    let logp = g.log_softmax(logits)?;
    let w = g.mul(logp, q)?;
    let total = g.sum(w)?;
    Ok(g.scale(total, -1.0 / s[0] as f64)?)
}

/// `(1/N) Σ_i (|h_f,i| + |h_c,i|)`.
pub fn attention_loss<T: Scalar>(g: &mut Graph<T>, h_f: Var, h_c: Var) -> Result<Var> {
    let (sf, sc) = (g.shape(h_f).to_vec(), g.shape(h_c).to_vec());
    if sf.len() != 1 || sf != sc || sf[0] == 0 {
        return Err(Error::config(format!("gate lengths {sf:?} and {sc:?} differ")));
    }
    let af = g.abs(h_f)?;
    let ac = g.abs(h_c)?;
    let both = g.add(af, ac)?;
    let total = g.sum(both)?;
    Ok(g.scale(total, 1.0 / sf[0] as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub att: f64,
    pub total: f64,
}

/// Unweighted sum of the two terms.
pub fn final_loss(ce: f64, att: f64) -> Result<LossParts> {
    if !ce.is_finite() || !att.is_finite() {
        return Err(Error::Numerical(format!("loss terms ce={ce}, att={att}")));
    }
    Ok(LossParts { ce, att, total: ce + att })
}

/// Graph node of the total loss plus its numeric breakdown.
pub fn objective<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], eps: f64, h_f: Var, h_c: Var) -> Result<(Var, LossParts)> {
    let ce = cross_entropy_smoothed(g, logits, labels, eps)?;
    let att = attention_loss(g, h_f, h_c)?;
    let total = g.add(ce, att)?;
    let parts = final_loss(g.value(ce).item().as_f64(), g.value(att).item().as_f64())?;
    Ok((total, parts))
}
