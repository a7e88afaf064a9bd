//! Hybrid ConvNeXt encoder: spatial transformer at the input, patchified
//! stem, ConvNeXt stages each closed by squeeze-and-excitation, final
//! channel LayerNorm.

use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
const LOC_HIDDEN: [usize; 3] = [8, 16, 32];
const KERNEL: usize = 7;
const EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub se_reduction: usize,
    pub stn: bool,
    pub se: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 3, patch: 4, dims: vec![32, 64], depths: vec![2, 2], se_reduction: 4, stn: true, se: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.depths.len() {
            return Err(Error::config(format!("encoder dims {:?} and depths {:?} must be non-empty and equally long", self.dims, self.depths)));
        }
        if self.in_channels == 0 || self.patch == 0 || self.dims.contains(&0) {
            return Err(Error::config("encoder channels, patch and dims must be positive"));
        }
        if self.se_reduction == 0 {
            return Err(Error::config("se_reduction must be >= 1"));
        }
        Ok(())
    }

    /// Feature dimension of the pooled output.
    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    /// Total spatial reduction from input to final map.
    pub fn stride(&self) -> usize {
        self.patch << self.dims.len().saturating_sub(1)
    }

    /// Final map extent `(h, w)` for an `h x w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::config(format!("input {h}x{w} is not divisible by the encoder stride {s}")));
        }
        Ok((h / s, w / s))
    }

    fn se_hidden(&self, c: usize) -> usize {
        (c / self.se_reduction.min(c)).max(1)
    }
}

/// Per-sample affine parameters `(a11, a12, tx, a21, a22, ty)`, shape `[N,6]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T>(pub Tensor<T>);

impl<T: Scalar> AffineParams<T> {
    pub const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    pub fn identity(n: usize) -> Self {
        let v: Vec<f64> = (0..n).flat_map(|_| Self::IDENTITY).collect();
        Self(Tensor::from_f64([n, 6], &v).expect("shape matches"))
    }

    pub fn is_identity(&self) -> bool {
        self.0.data().chunks(6).all(|r| r.iter().zip(Self::IDENTITY).all(|(&a, b)| a.as_f64() == b))
    }
}

/// `x @ w + b` over the last axis of a 2-D input, `w: [in, out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(match b {
        Some(b) => g.add_row(y, b)?,
        None => y,
    })
}

/// LayerNorm over the channel axis of an NCHW map.
pub fn channel_layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    let y = g.layer_norm(nhwc, gamma, beta, LN_EPS)?;
    Ok(g.permute(y, &[0, 3, 1, 2])?)
}

/// Handles of one ConvNeXt block's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub dw_w: Var,
    pub dw_b: Var,
    pub ln_g: Var,
    pub ln_b: Var,
    pub pw1_w: Var,
    pub pw1_b: Var,
    pub pw2_w: Var,
    pub pw2_b: Var,
}

impl BlockVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let v = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self {
            dw_w: v("dw.w")?,
            dw_b: v("dw.b")?,
            ln_g: v("ln.g")?,
            ln_b: v("ln.b")?,
            pw1_w: v("pw1.w")?,
            pw1_b: v("pw1.b")?,
            pw2_w: v("pw2.w")?,
            pw2_b: v("pw2.b")?,
        })
    }
}

/// `x + pw2(gelu(pw1(LN(dwconv7x7(x)))))`.
pub fn convnext_block<T: Scalar>(g: &mut Graph<T>, x: Var, b: &BlockVars) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(crate::tensor::TensorError::Shape { op: "convnext_block", detail: format!("input {s:?}") }.into());
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let y = g.conv2d(x, b.dw_w, Some(b.dw_b), 1, KERNEL / 2, c)?;
    let y = g.permute(y, &[0, 2, 3, 1])?;
    let y = g.reshape(y, &[n * h * w, c])?;
    let y = g.layer_norm(y, b.ln_g, b.ln_b, LN_EPS)?;
    let y = linear(g, y, b.pw1_w, Some(b.pw1_b))?;
    let y = g.gelu(y)?;
    let y = linear(g, y, b.pw2_w, Some(b.pw2_b))?;
    let y = g.reshape(y, &[n, h, w, c])?;
    let y = g.permute(y, &[0, 3, 1, 2])?;
    Ok(g.add(x, y)?)
}

/// Squeeze-and-excitation: `x_c * sigmoid(relu(z W1) W2)_c` with `z` the
/// channel means. `w1: [C, C/r]`, `w2: [C/r, C]`.
pub fn se_block<T: Scalar>(g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let z = g.global_avg_pool(x)?;
    let h = g.matmul(z, w1)?;
    let h = g.relu(h)?;
    let s = g.matmul(h, w2)?;
    let s = g.sigmoid(s)?;
    Ok(g.scale_rows(x, s)?)
}

/// Encoder outputs: final map `[N,C,H,W]` and its pooled vector `[N,C]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub map: Var,
    pub pooled: Var,
}

/// One encoder instance whose parameters live under `prefix`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, prefix: prefix.into() })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let cfg = &self.cfg;
        let mut init = Init { rng };
        let put = |store: &mut ParamStore<T>, name: &str, t: Tensor<T>| store.insert(self.name(name), t);
        if cfg.stn {
            let [h1, h2, h3] = LOC_HIDDEN;
            let c = cfg.in_channels;
            put(store, "loc.conv1.w", init.fan_in(&[h1, c, 5, 5], c * 25));
            put(store, "loc.conv1.b", Tensor::zeros([h1]));
            put(store, "loc.conv2.w", init.fan_in(&[h2, h1, 5, 5], h1 * 25));
            put(store, "loc.conv2.b", Tensor::zeros([h2]));
            put(store, "loc.fc1.w", init.fan_in(&[h2, h3], h2));
            put(store, "loc.fc1.b", Tensor::zeros([h3]));
            put(store, "loc.fc2.w", Tensor::zeros([h3, 6]));
            put(store, "loc.fc2.b", Tensor::from_f64([6], &AffineParams::<T>::IDENTITY).expect("six entries"));
        }
        let (d0, p) = (cfg.dims[0], cfg.patch);
        put(store, "stem.w", init.fan_in(&[d0, cfg.in_channels, p, p], cfg.in_channels * p * p));
        put(store, "stem.b", Tensor::zeros([d0]));
        put(store, "stem.ln.g", Tensor::ones([d0]));
        put(store, "stem.ln.b", Tensor::zeros([d0]));
        for (i, (&c, &depth)) in cfg.dims.iter().zip(&cfg.depths).enumerate() {
            if i > 0 {
                let prev = cfg.dims[i - 1];
                put(store, &format!("stage{i}.down.ln.g"), Tensor::ones([prev]));
                put(store, &format!("stage{i}.down.ln.b"), Tensor::zeros([prev]));
                put(store, &format!("stage{i}.down.w"), init.fan_in(&[c, prev, 2, 2], prev * 4));
                put(store, &format!("stage{i}.down.b"), Tensor::zeros([c]));
            }
            for j in 0..depth {
                let b = format!("stage{i}.block{j}");
                put(store, &format!("{b}.dw.w"), init.fan_in(&[c, 1, KERNEL, KERNEL], KERNEL * KERNEL));
                put(store, &format!("{b}.dw.b"), Tensor::zeros([c]));
                put(store, &format!("{b}.ln.g"), Tensor::ones([c]));
                put(store, &format!("{b}.ln.b"), Tensor::zeros([c]));
                put(store, &format!("{b}.pw1.w"), init.fan_in(&[c, EXPANSION * c], c));
                put(store, &format!("{b}.pw1.b"), Tensor::zeros([EXPANSION * c]));
                put(store, &format!("{b}.pw2.w"), init.fan_in(&[EXPANSION * c, c], EXPANSION * c));
                put(store, &format!("{b}.pw2.b"), Tensor::zeros([c]));
            }
            if cfg.se {
                let hid = cfg.se_hidden(c);
                put(store, &format!("stage{i}.se.w1"), init.fan_in(&[c, hid], c));
                put(store, &format!("stage{i}.se.w2"), init.fan_in(&[hid, c], hid));
            }
        }
        let dl = cfg.out_dim();
        put(store, "norm.g", Tensor::ones([dl]));
        put(store, "norm.b", Tensor::zeros([dl]));
    }

    /// Affine parameters `[N,6]` predicted by the localization network.
    pub fn localization<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let v = |s: &str| p.get(&self.name(s));
        let y = g.conv2d(x, v("loc.conv1.w")?, Some(v("loc.conv1.b")?), 2, 2, 1)?;
        let y = g.relu(y)?;
        let y = g.conv2d(y, v("loc.conv2.w")?, Some(v("loc.conv2.b")?), 2, 2, 1)?;
        let y = g.relu(y)?;
        let y = g.global_avg_pool(y)?;
        let y = linear(g, y, v("loc.fc1.w")?, Some(v("loc.fc1.b")?))?;
        let y = g.relu(y)?;
        linear(g, y, v("loc.fc2.w")?, Some(v("loc.fc2.b")?))
    }

    /// Resamples `x` under the predicted affine transform; pass-through
    /// when the transformer is disabled.
    pub fn stn<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if !self.cfg.stn {
            return Ok(x);
        }
        let s = g.shape(x).to_vec();
        let theta = self.localization(g, p, x)?;
        let grid = g.affine_grid(theta, s[2], s[3])?;
        Ok(g.bilinear_sample(x, grid)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<EncoderOutput> {
        let cfg = &self.cfg;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != cfg.in_channels {
            return Err(Error::config(format!("encoder expects [N,{},H,W] input, got {s:?}", cfg.in_channels)));
        }
        cfg.out_hw(s[2], s[3])?;
        let v = |s: &str| p.get(&self.name(s));
        let x = self.stn(g, p, x)?;
        let mut y = g.conv2d(x, v("stem.w")?, Some(v("stem.b")?), cfg.patch, 0, 1)?;
        y = channel_layer_norm(g, y, v("stem.ln.g")?, v("stem.ln.b")?)?;
        for (i, &depth) in cfg.depths.iter().enumerate() {
            if i > 0 {
                y = channel_layer_norm(g, y, v(&format!("stage{i}.down.ln.g"))?, v(&format!("stage{i}.down.ln.b"))?)?;
                y = g.conv2d(y, v(&format!("stage{i}.down.w"))?, Some(v(&format!("stage{i}.down.b"))?), 2, 0, 1)?;
            }
            for j in 0..depth {
                let b = BlockVars::bind(p, &self.name(&format!("stage{i}.block{j}")))?;
                y = convnext_block(g, y, &b)?;
            }
            if cfg.se {
                y = se_block(g, y, v(&format!("stage{i}.se.w1"))?, v(&format!("stage{i}.se.w2"))?)?;
            }
        }
        let map = channel_layer_norm(g, y, v("norm.g")?, v("norm.b")?)?;
        let pooled = g.global_avg_pool(map)?;
        Ok(EncoderOutput { map, pooled })
    }
}
