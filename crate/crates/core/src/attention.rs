//! Multi-head self-attention over spatial tokens and the per-stream gate.

use rand_chacha::ChaCha8Rng;

use crate::encoder::linear;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Projection weights `[d,d]` (applied as `x @ w`) and biases `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct MhsaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MhsaVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let v = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self { wq: v("wq")?, bq: v("bq")?, wk: v("wk")?, bk: v("bk")?, wv: v("wv")?, bv: v("bv")?, wo: v("wo")?, bo: v("bo")? })
    }
}

/// Attention output `[N,T,d]` and the attention weights `[N*heads,T,T]`.
#[derive(Clone, Copy, Debug)]
pub struct MhsaOutput {
    pub out: Var,
    pub weights: Var,
}

/// `tokens + Wo(concat_h softmax(Q_h K_hᵀ / sqrt(d/heads)) V_h)`.
pub fn mhsa<T: Scalar>(g: &mut Graph<T>, tokens: Var, heads: usize, p: &MhsaVars) -> Result<MhsaOutput> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("mhsa expects [N,T,d] tokens, got {s:?}")));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("token dim {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let flat = g.reshape(tokens, &[n * t, d])?;
    // [N*T, d] -> [N*heads, T, dh], or [N*heads, dh, T] for keys.
    let split = |g: &mut Graph<T>, w: Var, b: Var, keys: bool| -> Result<Var> {
        let y = linear(g, flat, w, Some(b))?;
        let y = g.reshape(y, &[n, t, heads, dh])?;
        let (perm, shape) = if keys { ([0, 2, 3, 1], [n * heads, dh, t]) } else { ([0, 2, 1, 3], [n * heads, t, dh]) };
        let y = g.permute(y, &perm)?;
        Ok(g.reshape(y, &shape)?)
    };
    let q = split(g, p.wq, p.bq, false)?;
    let kt = split(g, p.wk, p.bk, true)?;
    let v = split(g, p.wv, p.bv, false)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let ctx = g.bmm(weights, v)?;
    let ctx = g.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n * t, d])?;
    let o = linear(g, ctx, p.wo, Some(p.bo))?;
    let o = g.reshape(o, &[n, t, d])?;
    Ok(MhsaOutput { out: g.add(tokens, o)?, weights })
}

/// Attended pooled feature `[N,d]` and gate logit `[N]` of one stream.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub phi: Var,
    pub h: Var,
}

/// One stream's attention block with parameters under `prefix`.
#[derive(Clone, Debug)]
pub struct AttentionStream {
    pub dim: usize,
    pub heads: usize,
    pub mhsa: bool,
    pub prefix: String,
}

impl AttentionStream {
    pub fn new(dim: usize, heads: usize, mhsa: bool, prefix: impl Into<String>) -> Result<Self> {
        if mhsa && (heads == 0 || dim % heads != 0) {
            return Err(Error::config(format!("feature dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self { dim, heads, mhsa, prefix: prefix.into() })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        let mut init = Init { rng };
        if self.mhsa {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(self.name(&format!("mhsa.{w}")), init.fan_in::<T>(&[d, d], d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(self.name(&format!("mhsa.{b}")), Tensor::<T>::zeros([d]));
            }
        }
        store.insert(self.name("gate.w"), Tensor::<T>::zeros([d, 1]));
        store.insert(self.name("gate.b"), Tensor::<T>::zeros([1]));
    }

    /// Tokens are the H·W positions of `map: [N,C,H,W]`; the attended
    /// tokens are mean-pooled. Without MHSA this is plain average pooling.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, map: Var) -> Result<Attended> {
        let s = g.shape(map).to_vec();
        if s.len() != 4 || s[1] != self.dim {
            return Err(Error::config(format!("attention expects [N,{},H,W], got {s:?}", self.dim)));
        }
        let phi = if self.mhsa {
            let tokens = g.permute(map, &[0, 2, 3, 1])?;
            let tokens = g.reshape(tokens, &[s[0], s[2] * s[3], s[1]])?;
            let vars = MhsaVars::bind(p, &self.name("mhsa"))?;
            let out = mhsa(g, tokens, self.heads, &vars)?.out;
            g.mean_axis(out, 1)?
        } else {
            g.global_avg_pool(map)?
        };
        let h = linear(g, phi, p.get(&self.name("gate.w"))?, Some(p.get(&self.name("gate.b"))?))?;
        let h = g.reshape(h, &[s[0]])?;
        Ok(Attended { phi, h })
    }
}
