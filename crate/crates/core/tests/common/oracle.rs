//! Reference implementations written directly from the definitions,
//! independent of the engine's kernels.


pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [co, cig, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cog = co / groups;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let grp = o / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..cig {
                        let cin = grp * cig + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as i64 - pad as i64;
                                let ix = (ox * stride + kj) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                s += wt[((o * cig + ci) * kh + ki) * kw + kj] * x[((b * c + cin) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

/// Four-corner bilinear weights written directly from the definition.
pub fn bilinear_ref(x: &[f64], [n, c, h, w]: [usize; 4], grid: &[f64], ho: usize, wo: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let gi = ((b * ho + i) * wo + j) * 2;
                let px = if w > 1 { (grid[gi] + 1.0) / 2.0 * (w - 1) as f64 } else { 0.0 };
                let py = if h > 1 { (grid[gi + 1] + 1.0) / 2.0 * (h - 1) as f64 } else { 0.0 };
                let (x0, y0) = (px.floor(), py.floor());
                for ch in 0..c {
                    let mut s = 0.0;
                    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                        let (yy, xx) = (y0 + dy, x0 + dx);
                        let wgt = (1.0 - (py - yy).abs()) * (1.0 - (px - xx).abs());
                        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                            s += wgt * x[((b * c + ch) * h + yy as usize) * w + xx as usize];
                        }
                    }
                    out[((b * c + ch) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}

/// Maclaurin series for erf, accurate to ~1e-15 for |x| <= 3.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Scaled dot-product self-attention with output projection and residual,
/// evaluated token by token. Weights are `[in, out]` row-major, in the
/// order query, key, value, output.
pub fn mhsa_ref(x: &[f64], n: usize, t: usize, d: usize, heads: usize, w: [&[f64]; 4], b: [&[f64]; 4]) -> Vec<f64> {
    let dh = d / heads;
    let lin = |row: &[f64], k: usize| -> Vec<f64> { (0..d).map(|j| (0..d).map(|i| row[i] * w[k][i * d + j]).sum::<f64>() + b[k][j]).collect() };
    let mut out = x.to_vec();
    for s in 0..n {
        let tok = |i: usize| &x[(s * t + i) * d..(s * t + i + 1) * d];
        let q: Vec<Vec<f64>> = (0..t).map(|i| lin(tok(i), 0)).collect();
        let k: Vec<Vec<f64>> = (0..t).map(|i| lin(tok(i), 1)).collect();
        let v: Vec<Vec<f64>> = (0..t).map(|i| lin(tok(i), 2)).collect();
        for i in 0..t {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..t).map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r {
                    concat[c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
            let o = lin(&concat, 3);
            for c in 0..d {
                out[(s * t + i) * d + c] += o[c];
            }
        }
    }
    out
}

/// Perturbation, bias and gated correction coordinate by coordinate for
/// `n` samples of dimension `d`: returns `(pert, delta, gate, corr)`.
pub fn ag_cim_ref(phi_c: &[f64], phi_f: &[f64], w_p: &[f64], w_c: &[f64], alpha: f64, n: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut pert, mut delta, mut gate, mut corr) = (vec![], vec![], vec![], vec![]);
    for s in 0..n {
        let pc = &phi_c[s * d..(s + 1) * d];
        let pf = &phi_f[s * d..(s + 1) * d];
        let p: Vec<f64> = (0..d).map(|i| (0..d).map(|j| w_p[i * d + j] * pc[j]).sum()).collect();
        let dl: Vec<f64> = (0..d).map(|i| pc[i] - p[i]).collect();
        for i in 0..d {
            let proj: f64 = (0..d).map(|j| w_c[i * d + j] * dl[j]).sum();
            let gt = 1.0 / (1.0 + (-alpha * pf[i]).exp());
            gate.push(gt);
            corr.push(pc[i] - proj * gt);
        }
        pert.extend(p);
        delta.extend(dl);
    }
    (pert, delta, gate, corr)
}
