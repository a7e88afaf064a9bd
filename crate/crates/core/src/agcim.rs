//! Attention-guided causal intervention on pooled context features.
//!
//! A learned map produces a counterfactual context, the difference to the
//! observed context is taken as bias, and a face-gated projection of that
//! bias is subtracted.

use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Standard deviation of the noise added to the identity `W_p` at init.
pub const WP_NOISE: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct AgCimVars {
    /// `[d,d]`, applied as `W_p · φ` per sample.
    pub w_p: Var,
    /// `[d,d]`, applied as `W_c · Δφ` per sample.
    pub w_c: Var,
    /// Scalar gate temperature.
    pub alpha: Var,
}

impl AgCimVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let v = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self { w_p: v("w_p")?, w_c: v("w_c")?, alpha: v("alpha")? })
    }
}

/// Intermediate values, each `[N,d]`.
#[derive(Clone, Copy, Debug)]
pub struct CimTrace {
    pub phi_c_pert: Var,
    pub delta: Var,
    pub gate: Var,
    pub phi_c_corr: Var,
}

fn check_rows<T: Scalar>(g: &Graph<T>, op: &str, vars: &[Var], d: usize) -> Result<()> {
    let first = g.shape(vars[0]).to_vec();
    for &v in vars {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != d || s[0] != first[0] {
            return Err(Error::config(format!("{op}: feature shape {s:?} does not match [{}, {d}]", first.first().copied().unwrap_or(0))));
        }
    }
    Ok(())
}

/// Row-wise `M · φ` for `phi: [N,d]`, `m: [d,d]`.
fn apply<T: Scalar>(g: &mut Graph<T>, m: Var, phi: Var) -> Result<Var> {
    let mt = g.permute(m, &[1, 0])?;
    Ok(g.matmul(phi, mt)?)
}

fn square_dim<T: Scalar>(g: &Graph<T>, m: Var) -> Result<usize> {
    match g.shape(m) {
        &[a, b] if a == b => Ok(a),
        s => Err(Error::config(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Counterfactual context `W_p · φ_c`.
pub fn perturb<T: Scalar>(g: &mut Graph<T>, phi_c: Var, w_p: Var) -> Result<Var> {
    let d = square_dim(g, w_p)?;
    check_rows(g, "perturb", &[phi_c], d)?;
    apply(g, w_p, phi_c)
}

/// `Δφ_c = φ_c − φ_c,pert`.
pub fn context_bias<T: Scalar>(g: &mut Graph<T>, phi_c: Var, phi_c_pert: Var) -> Result<Var> {
    if g.shape(phi_c) != g.shape(phi_c_pert) {
        return Err(Error::config(format!("context_bias: {:?} vs {:?}", g.shape(phi_c), g.shape(phi_c_pert))));
    }
    Ok(g.sub(phi_c, phi_c_pert)?)
}

/// `φ_c − (W_c · Δφ_c) ⊙ σ(α φ_f)`; returns the corrected features and the gate.
pub fn correct<T: Scalar>(g: &mut Graph<T>, phi_c: Var, delta: Var, phi_f: Var, v: &AgCimVars) -> Result<(Var, Var)> {
    let d = square_dim(g, v.w_c)?;
    check_rows(g, "correct", &[phi_c, delta, phi_f], d)?;
    if g.value(v.alpha).numel() != 1 {
        return Err(Error::config(format!("alpha must be a scalar, got {:?}", g.shape(v.alpha))));
    }
    let proj = apply(g, v.w_c, delta)?;
    let scaled = g.mul(phi_f, v.alpha)?;
    let gate = g.sigmoid(scaled)?;
    let corr = g.mul(proj, gate)?;
    Ok((g.sub(phi_c, corr)?, gate))
}

/// Module wrapper; when disabled, the context features pass through.
#[derive(Clone, Debug)]
pub struct AgCim {
    pub dim: usize,
    pub enabled: bool,
    pub prefix: String,
}

impl AgCim {
    pub fn new(dim: usize, enabled: bool, prefix: impl Into<String>) -> Self {
        Self { dim, enabled, prefix: prefix.into() }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        if !self.enabled {
            return;
        }
        let mut init = Init { rng };
        store.insert(format!("{}.w_p", self.prefix), init.eye_noise::<T>(self.dim, WP_NOISE));
        store.insert(format!("{}.w_c", self.prefix), Tensor::<T>::zeros([self.dim, self.dim]));
        store.insert(format!("{}.alpha", self.prefix), Tensor::<T>::ones([1]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, phi_c: Var, phi_f: Var) -> Result<(Var, Option<CimTrace>)> {
        if !self.enabled {
            return Ok((phi_c, None));
        }
        let v = AgCimVars::bind(p, &self.prefix)?;
        let (corr, trace) = ag_cim_forward(g, phi_c, phi_f, &v)?;
        Ok((corr, Some(trace)))
    }
}

/// perturb → context_bias → correct.
pub fn ag_cim_forward<T: Scalar>(g: &mut Graph<T>, phi_c: Var, phi_f: Var, v: &AgCimVars) -> Result<(Var, CimTrace)> {
    let phi_c_pert = perturb(g, phi_c, v.w_p)?;
    let delta = context_bias(g, phi_c, phi_c_pert)?;
    let (phi_c_corr, gate) = correct(g, phi_c, delta, phi_f, v)?;
    Ok((phi_c_corr, CimTrace { phi_c_pert, delta, gate, phi_c_corr }))
}
