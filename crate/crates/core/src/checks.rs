//! Finite-difference gradient checks for every differentiable piece of the
//! model, from single ops up to the full network with its loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agcim::{ag_cim_forward, AgCimVars};
use crate::attention::{mhsa, MhsaVars};
use crate::classifier::objective;
use crate::encoder::{Encoder, EncoderConfig};
use crate::model::{AgcdNet, ModelConfig};
use crate::params::{grad_check_store, Bound, ParamStore};
use crate::tensor::gradcheck::{compare, grad_check, numeric_grad, value_and_grad, GradCheckReport};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const MODULES: [&str; 5] = ["ops", "encoder", "attention", "agcim", "model"];

pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tolerance {
    Relative(f64),
    Absolute(f64),
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: Tolerance,
}

impl Check {
    pub fn error(&self) -> f64 {
        match self.tol {
            Tolerance::Relative(_) => self.report.max_rel_error,
            Tolerance::Absolute(_) => self.report.max_abs_error,
        }
    }

    pub fn passed(&self) -> bool {
        match self.tol {
            Tolerance::Relative(t) | Tolerance::Absolute(t) => self.error() <= t,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, tol) = match self.tol {
            Tolerance::Relative(t) => ("rel", t),
            Tolerance::Absolute(t) => ("abs", t),
        };
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        write!(f, "{:<28} {:>6} entries  max {kind} err {:.3e} (tol {tol:.0e})  {verdict}", self.name, self.report.checked, self.error())
    }
}

/// Runs the checks of one module, or of all of them.
pub fn run(module: Option<&str>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for m in MODULES.iter().filter(|m| module.is_none_or(|x| x == **m)) {
        out.extend(match *m {
            "ops" => ops()?,
            "encoder" => vec![encoder()?],
            "attention" => attention()?,
            "agcim" => vec![agcim()?],
            _ => model()?,
        });
    }
    if out.is_empty() {
        return Err(Error::config(format!("unknown module `{}`; expected one of {}", module.unwrap_or(""), MODULES.join(", "))));
    }
    Ok(out)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<T: Scalar>(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let data: Vec<f64> = (0..shape.iter().product()).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches data")
}

/// Magnitudes in `[lo, hi)` with random sign, keeping clear of kinks at 0.
pub fn away_from_zero<T: Scalar>(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| {
            let m = r.random_range(lo..hi);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches data")
}

/// `sum(v * R)` for a fixed pseudo-random `R`, so every output element
/// reaches the gradient with its own weight.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, v: Var, seed: u64) -> crate::tensor::Result<Var> {
    let w = away_from_zero::<T>(&mut rng(seed), g.shape(v), 0.5, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

pub type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> crate::tensor::Result<Var>>;

pub struct OpCase<T> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub build: Build<T>,
}

/// Every differentiable op on three input shapes each.
pub fn op_cases<T: Scalar>(seed: u64) -> Vec<OpCase<T>> {
    let mut r = rng(seed);
    let mut cases: Vec<OpCase<T>> = Vec::new();
    let mut push = |name, inputs, build: Build<T>| cases.push(OpCase { name, inputs, build });
    let shapes: [&[usize]; 3] = [&[3], &[2, 3], &[2, 2, 3]];
    for (si, &s) in shapes.iter().enumerate() {
        let a = uniform::<T>(&mut r, s, -1.5, 1.5);
        let b = uniform::<T>(&mut r, s, -1.5, 1.5);
        let nz = away_from_zero::<T>(&mut r, s, 0.2, 1.5);
        let sc = uniform::<T>(&mut r, &[1], 0.5, 1.5);
        push("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1])));
        push("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1])));
        push("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1])));
        push("mul_scalar", vec![sc.clone(), a.clone()], Box::new(|g, v| g.mul(v[0], v[1])));
        push("sub_scalar", vec![a.clone(), sc.clone()], Box::new(|g, v| g.sub(v[0], v[1])));
        push("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], -0.75)));
        push("abs", vec![nz.clone()], Box::new(|g, v| g.abs(v[0])));
        push("relu", vec![nz.clone()], Box::new(|g, v| g.relu(v[0])));
        push("gelu", vec![a.clone()], Box::new(|g, v| g.gelu(v[0])));
        push("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0])));
        push("mean", vec![a.clone()], Box::new(|g, v| g.mean(v[0])));
        push("sum", vec![a.clone()], Box::new(|g, v| g.sum(v[0])));
        push("softmax", vec![a.clone()], Box::new(|g, v| g.softmax(v[0])));
        push("log_softmax", vec![a.clone()], Box::new(|g, v| g.log_softmax(v[0])));
        push("mean_axis", vec![a.clone()], Box::new(move |g, v| g.mean_axis(v[0], si)));
        let d = *s.last().expect("non-empty shape");
        let gamma = uniform::<T>(&mut r, &[d], 0.5, 1.5);
        let beta = uniform::<T>(&mut r, &[d], -0.5, 0.5);
        push("layer_norm", vec![a.clone(), gamma, beta], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)));
        let bias = uniform::<T>(&mut r, &[d], -1.0, 1.0);
        push("add_row", vec![a.clone(), bias], Box::new(|g, v| g.add_row(v[0], v[1])));
        let rows = uniform::<T>(&mut r, &s[..1], -1.0, 1.0);
        push("scale_rows", vec![a.clone(), rows], Box::new(|g, v| g.scale_rows(v[0], v[1])));
        let n: usize = s.iter().product();
        push("reshape", vec![a.clone()], Box::new(move |g, v| g.reshape(v[0], &[n])));
        let perm: Vec<usize> = (0..s.len()).rev().collect();
        push("permute", vec![a.clone()], Box::new(move |g, v| g.permute(v[0], &perm)));
    }
    for (m, k, n) in [(1, 2, 3), (3, 3, 2), (4, 2, 5)] {
        let a = uniform::<T>(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform::<T>(&mut r, &[k, n], -1.0, 1.0);
        push("matmul", vec![a, b], Box::new(|g, v| g.matmul(v[0], v[1])));
        let a = uniform::<T>(&mut r, &[2, m, k], -1.0, 1.0);
        let b = uniform::<T>(&mut r, &[2, k, n], -1.0, 1.0);
        push("bmm", vec![a, b], Box::new(|g, v| g.bmm(v[0], v[1])));
    }
    // (input, weight, stride, padding, groups)
    let convs: [([usize; 4], [usize; 4], usize, usize, usize); 4] = [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1, 1),
        ([2, 4, 4, 6], [4, 2, 2, 2], 2, 0, 2),
        ([1, 3, 6, 5], [3, 1, 3, 3], 1, 1, 3),
        ([1, 2, 7, 7], [2, 1, 7, 7], 1, 3, 2),
    ];
    for (xs, ws, stride, pad, groups) in convs {
        let x = uniform::<T>(&mut r, &xs, -1.0, 1.0);
        let w = uniform::<T>(&mut r, &ws, -1.0, 1.0);
        let b = uniform::<T>(&mut r, &[ws[0]], -1.0, 1.0);
        push("conv2d", vec![x, w, b], Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups)));
    }
    for s in [[1, 1, 2, 2], [2, 3, 3, 4], [1, 2, 5, 1]] {
        let x = uniform::<T>(&mut r, &s, -1.0, 1.0);
        push("global_avg_pool", vec![x], Box::new(|g, v| g.global_avg_pool(v[0])));
    }
    for (s, ho, wo) in [([1, 1, 3, 3], 2, 2), ([2, 2, 4, 5], 3, 2), ([1, 3, 5, 4], 4, 4)] {
        let x = uniform::<T>(&mut r, &s, -1.0, 1.0);
        let grid = uniform::<T>(&mut r, &[s[0], ho, wo, 2], -1.2, 1.2);
        push("bilinear_sample", vec![x, grid], Box::new(|g, v| g.bilinear_sample(v[0], v[1])));
    }
    for (n, h, w) in [(1, 2, 2), (2, 3, 4), (1, 5, 3)] {
        let theta = uniform::<T>(&mut r, &[n, 6], -1.0, 1.0);
        push("affine_grid", vec![theta], Box::new(move |g, v| g.affine_grid(v[0], h, w)));
    }
    cases
}

/// One check per op, with all shapes of that op folded together.
pub fn ops() -> Result<Vec<Check>> {
    let mut out: Vec<Check> = Vec::new();
    for (i, case) in op_cases::<f64>(77).into_iter().enumerate() {
        let build = &case.build;
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = build(g, v)?;
            weighted_sum(g, y, 1000 + i as u64)
        };
        let r = grad_check(f, &case.inputs, EPS)?;
        match out.iter_mut().find(|c| c.name == case.name) {
            Some(c) => {
                c.report.checked += r.checked;
                c.report.max_abs_error = c.report.max_abs_error.max(r.max_abs_error);
                c.report.max_rel_error = c.report.max_rel_error.max(r.max_rel_error);
            }
            None => out.push(Check { name: case.name.to_string(), report: r, tol: Tolerance::Relative(1e-6) }),
        }
    }
    Ok(out)
}

/// The full encoder, STN and SE on, on a `1x3x16x16` input.
pub fn encoder() -> Result<Check> {
    let enc = Encoder::new(EncoderConfig { in_channels: 3, patch: 2, dims: vec![4, 8], depths: vec![1, 1], se_reduction: 2, stn: true, se: true }, "enc")?;
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng(50));
    // An input-dependent, non-identity transform.
    let mut r = rng(51);
    *store.get_mut("enc.loc.fc2.w")? = uniform(&mut r, &[32, 6], -0.05, 0.05);
    *store.get_mut("enc.loc.fc2.b")? = Tensor::from_f64([6], &[0.9, -0.15, 0.07, 0.12, 1.05, -0.04])?;
    let x = uniform::<f64>(&mut rng(52), &[1, 3, 16, 16], -1.0, 1.0);
    let report = grad_check_store(
        &store,
        |g, p| {
            let xv = g.constant(x.clone());
            let out = enc.forward(g, p, xv)?;
            let a = weighted_sum(g, out.map, 53)?;
            let b = weighted_sum(g, out.pooled, 54)?;
            Ok(g.add(a, b)?)
        },
        EPS,
    )?;
    Ok(Check { name: "encoder".into(), report, tol: Tolerance::Relative(1e-5) })
}

/// Two-token, two-head self-attention, including its input.
pub fn attention() -> Result<Vec<Check>> {
    let d = 4;
    let mut r = rng(7);
    let mut store = ParamStore::new();
    for name in ["q", "k", "v", "o"] {
        store.insert(format!("m.w{name}"), uniform::<f64>(&mut r, &[d, d], -0.8, 0.8));
        store.insert(format!("m.b{name}"), uniform::<f64>(&mut r, &[d], -0.3, 0.3));
    }
    store.insert("x", uniform(&mut rng(8), &[1, 2, d], -2.0, 2.0));
    let (names, tensors) = store.to_parts();
    let loss = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let b = Bound::from_vars(&names, v);
        let vars = MhsaVars::bind(&b, "m")?;
        let out = mhsa(g, b.get("x")?, 2, &vars)?;
        Ok(weighted_sum(g, out.out, 9)?)
    };
    split_key_bias("attention", &names, &tensors, &loss, 1e-5)
}

/// The bias-correction module with both of its inputs, `d = 4`.
pub fn agcim() -> Result<Check> {
    let (n, d) = (2, 4);
    let mut r = rng(10);
    let mut store = ParamStore::new();
    store.insert("phi_c", uniform::<f64>(&mut r, &[n, d], -2.0, 2.0));
    store.insert("phi_f", uniform::<f64>(&mut r, &[n, d], -2.0, 2.0));
    store.insert("cim.w_p", uniform::<f64>(&mut r, &[d, d], -1.0, 1.0));
    store.insert("cim.w_c", uniform::<f64>(&mut r, &[d, d], -1.0, 1.0));
    store.insert("cim.alpha", uniform::<f64>(&mut r, &[1], 0.2, 0.8));
    let report = grad_check_store(
        &store,
        |g, p| {
            let v = AgCimVars::bind(p, "cim")?;
            let (out, _) = ag_cim_forward(g, p.get("phi_c")?, p.get("phi_f")?, &v)?;
            Ok(weighted_sum(g, out, 20)?)
        },
        EPS,
    )?;
    Ok(Check { name: "agcim".into(), report, tol: Tolerance::Relative(1e-6) })
}

/// The whole network and its training objective: one ConvNeXt stage of
/// width 8, three classes, every module switched on.
///
/// A key bias shifts all scores of a query equally, so its gradient is
/// identically zero; those entries are checked in absolute terms.
pub fn model() -> Result<Vec<Check>> {
    let cfg = ModelConfig {
        encoder: EncoderConfig { in_channels: 4, patch: 4, dims: vec![8], depths: vec![1], se_reduction: 4, stn: true, se: true },
        heads: 2,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let net = AgcdNet::new(cfg)?;
    let mut store = net.init::<f64>(0);
    // Off the special initial values (zero gates, identity transforms), at a
    // point whose ReLU and bilinear kinks all lie outside the stencil.
    let mut r = rng(41);
    for (_, p) in store.iter_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let face = uniform::<f64>(&mut rng(2), &[2, 4, 16, 16], -1.0, 1.0);
    let context = uniform::<f64>(&mut rng(3), &[2, 4, 16, 16], -1.0, 1.0);
    let (names, tensors) = store.to_parts();
    let loss = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(&names, v);
        let (f, c) = (g.constant(face.clone()), g.constant(context.clone()));
        let out = net.forward(g, &p, f, c)?;
        Ok(objective(g, out.logits, &[0, 2], 0.2, out.h_face, out.h_context)?.0)
    };
    split_key_bias("model", &names, &tensors, &loss, 1e-5)
}

/// A key bias shifts all scores of a query equally, so its gradient is
/// identically zero and the difference quotient is pure roundoff. Those
/// entries are checked in absolute terms, the rest relative to `tol`.
fn split_key_bias<F>(name: &str, names: &[String], tensors: &[Tensor<f64>], loss: &F, tol: f64) -> Result<Vec<Check>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(loss, tensors)?;
    let numeric = numeric_grad(loss, tensors, EPS)?;
    let (bk, rest): (Vec<usize>, Vec<usize>) = (0..names.len()).partition(|&i| names[i].ends_with(".bk"));
    let pick = |g: &[Tensor<f64>], idx: &[usize]| idx.iter().map(|&i| g[i].clone()).collect::<Vec<_>>();
    Ok(vec![
        Check { name: name.into(), report: compare(&pick(&analytic, &rest), &pick(&numeric, &rest)), tol: Tolerance::Relative(tol) },
        Check { name: format!("{name} key biases (zero)"), report: compare(&pick(&analytic, &bk), &pick(&numeric, &bk)), tol: Tolerance::Absolute(1e-9) },
    ])
}
