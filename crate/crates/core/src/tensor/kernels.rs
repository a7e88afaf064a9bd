//! Raw forward/backward kernels operating on flat buffers.
//!
//! Shapes are validated by the graph layer before these are called.

use super::Scalar;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    /// Output positions `[lo, hi)` whose tap `k` lands inside `[0, extent)`.
    fn tap_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = if extent + self.padding > k { (extent - 1 + self.padding - k) / self.stride + 1 } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfolds one group of one image into `[cin_g*kh*kw, h_out*w_out]` columns.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], n: usize, grp: usize, cols: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let c = grp * g.cin_g() + ci;
        let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let sy = g.src(oy, ki, g.h);
                    for ox in 0..wo {
                        dst[oy * wo + ox] = match (sy, g.src(ox, kj, g.w)) {
                            (Some(y), Some(xx)) => plane[y * g.w + xx],
                            _ => T::zero(),
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], n: usize, grp: usize, dx: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let c = grp * g.cin_g() + ci;
        let plane = &mut dx[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let Some(y) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..wo {
                        if let Some(xx) = g.src(ox, kj, g.w) {
                            plane[y * g.w + xx] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let krows = g.cin_g() * g.kh * g.kw;
        let mut cols = vec![T::zero(); krows * hw];
        for n in 0..g.n {
            for grp in 0..g.groups {
                im2col(g, x, n, grp, &mut cols);
                let w_g = &w[grp * g.cout_g() * krows..][..g.cout_g() * krows];
                let o = &mut out[(n * g.c_out + grp * g.cout_g()) * hw..][..g.cout_g() * hw];
                T::gemm(g.cout_g(), krows, hw, T::one(), w_g, krows as isize, 1, &cols, hw as isize, 1, T::zero(), o, hw as isize, 1);
            }
        }
    }
    if let Some(b) = b {
        for n in 0..g.n {
            for co in 0..g.c_out {
                for v in &mut out[(n * g.c_out + co) * hw..][..hw] {
                    *v += b[co];
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            let k = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let o = &mut out[(n * g.c_in + c) * ho * wo..][..ho * wo];
            for ki in 0..g.kh {
                let (y0, y1) = g.tap_range(ki, g.h, ho);
                for kj in 0..g.kw {
                    let (x0, x1) = g.tap_range(kj, g.w, wo);
                    if x0 >= x1 {
                        continue;
                    }
                    let kv = k[ki * g.kw + kj];
                    for oy in y0..y1 {
                        let src = &plane[(oy * g.stride + ki - g.padding) * g.w..][..g.w];
                        let dst = &mut o[oy * wo + x0..oy * wo + x1];
                        let first = x0 * g.stride + kj - g.padding;
                        axpy_strided(dst, &src[first..], g.stride, kv);
                    }
                }
            }
        }
    }
}

/// `dst[i] += a * src[i * stride]`.
#[inline]
fn axpy_strided<T: Scalar>(dst: &mut [T], src: &[T], stride: usize, a: T) {
    if stride == 1 {
        let n = dst.len();
        for (d, s) in dst.iter_mut().zip(&src[..n]) {
            *d += a * *s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += a * *s;
        }
    }
}

/// `dst[i * stride] += a * src[i]`.
#[inline]
fn scatter_strided<T: Scalar>(dst: &mut [T], src: &[T], stride: usize, a: T) {
    if stride == 1 {
        for (d, s) in dst[..src.len()].iter_mut().zip(src) {
            *d += a * *s;
        }
    } else {
        for (d, s) in dst.iter_mut().step_by(stride).zip(src) {
            *d += a * *s;
        }
    }
}

/// `sum_i a[i] * b[i * stride]`.
#[inline]
fn dot_strided<T: Scalar>(a: &[T], b: &[T], stride: usize) -> T {
    if stride == 1 {
        a.iter().zip(&b[..a.len()]).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
    } else {
        a.iter().zip(b.iter().step_by(stride)).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
    }
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &dy[(n * g.c_out + co) * hw..][..hw] {
                    *acc += v;
                }
            }
        }
        db
    });
    if !need[0] && !need[1] {
        return (dx, dw, db);
    }
    if g.is_depthwise() {
        for n in 0..g.n {
            for c in 0..g.c_in {
                let base = (n * g.c_in + c) * g.h * g.w;
                let dyp = &dy[(n * g.c_in + c) * hw..][..hw];
                for ki in 0..g.kh {
                    let (y0, y1) = g.tap_range(ki, g.h, ho);
                    for kj in 0..g.kw {
                        let (x0, x1) = g.tap_range(kj, g.w, wo);
                        if x0 >= x1 {
                            continue;
                        }
                        let tap = c * g.kh * g.kw + ki * g.kw + kj;
                        let first = x0 * g.stride + kj - g.padding;
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let row = base + (oy * g.stride + ki - g.padding) * g.w;
                            let d = &dyp[oy * wo + x0..oy * wo + x1];
                            if dw.is_some() {
                                acc += dot_strided(d, &x[row + first..row + g.w], g.stride);
                            }
                            if let Some(dx) = dx.as_mut() {
                                scatter_strided(&mut dx[row + first..row + g.w], d, g.stride, w[tap]);
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[tap] += acc;
                        }
                    }
                }
            }
        }
        return (dx, dw, db);
    }
    let krows = g.cin_g() * g.kh * g.kw;
    let cog = g.cout_g();
    let mut cols = vec![T::zero(); krows * hw];
    let mut dcols = vec![T::zero(); krows * hw];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let dy_g = &dy[(n * g.c_out + grp * cog) * hw..][..cog * hw];
            let w_g = &w[grp * cog * krows..][..cog * krows];
            if let Some(dw) = dw.as_mut() {
                im2col(g, x, n, grp, &mut cols);
                let dw_g = &mut dw[grp * cog * krows..][..cog * krows];
                // dW += dY * cols^T
                T::gemm(cog, hw, krows, T::one(), dy_g, hw as isize, 1, &cols, 1, hw as isize, T::one(), dw_g, krows as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = W^T * dY
                T::gemm(krows, cog, hw, T::one(), w_g, 1, krows as isize, dy_g, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                col2im(g, &dcols, n, grp, dx);
            }
        }
    }
    (dx, dw, db)
}

/// Maps a normalized coordinate to pixel space with `-1`/`+1` at the outer
/// pixel centres. Values within a few ulps of an integer snap onto it so
/// that a grid built from pixel centres reproduces them exactly.
#[inline]
fn unnormalize<T: Scalar>(g: T, extent: usize) -> T {
    if extent <= 1 {
        return T::zero();
    }
    let span = T::from_f64((extent - 1) as f64);
    let two = T::from_f64(2.0);
    let p = (g + T::one()) * span / two;
    let r = p.round();
    let tol = T::epsilon() * T::from_f64(64.0) * r.abs().max(T::one());
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

struct Corners<T> {
    x0: isize,
    y0: isize,
    wx1: T,
    wy1: T,
}

#[inline]
fn corners<T: Scalar>(gx: T, gy: T, h: usize, w: usize) -> Corners<T> {
    let px = unnormalize(gx, w);
    let py = unnormalize(gy, h);
    let fx = px.floor();
    let fy = py.floor();
    Corners { x0: fx.to_isize().unwrap_or(isize::MIN / 2), y0: fy.to_isize().unwrap_or(isize::MIN / 2), wx1: px - fx, wy1: py - fy }
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], y: isize, x: isize, h: usize, w: usize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// `x: [n,c,h,w]`, `grid: [n,ho,wo,2]` holding `(x, y)` pairs.
pub(crate) fn bilinear_forward<T: Scalar>(x: &[T], dims: [usize; 4], grid: &[T], ho: usize, wo: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut out = vec![T::zero(); n * c * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let k = corners(grid[gi], grid[gi + 1], h, w);
            let (wx0, wy0) = (T::one() - k.wx1, T::one() - k.wy1);
            for ch in 0..c {
                let plane = &x[(b * c + ch) * h * w..][..h * w];
                let v = wy0 * (wx0 * fetch(plane, k.y0, k.x0, h, w) + k.wx1 * fetch(plane, k.y0, k.x0 + 1, h, w))
                    + k.wy1 * (wx0 * fetch(plane, k.y0 + 1, k.x0, h, w) + k.wx1 * fetch(plane, k.y0 + 1, k.x0 + 1, h, w));
                out[(b * c + ch) * ho * wo + p] = v;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    grid: &[T],
    ho: usize,
    wo: usize,
    dy: &[T],
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c, h, w] = dims;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dgrid = need[1].then(|| vec![T::zero(); grid.len()]);
    let half = T::from_f64(0.5);
    let sx = T::from_f64(w.saturating_sub(1) as f64) * half;
    let sy = T::from_f64(h.saturating_sub(1) as f64) * half;
    let inb = |y: isize, xx: isize| y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let k = corners(grid[gi], grid[gi + 1], h, w);
            let (wx0, wy0) = (T::one() - k.wx1, T::one() - k.wy1);
            let taps = [
                (k.y0, k.x0, wy0 * wx0),
                (k.y0, k.x0 + 1, wy0 * k.wx1),
                (k.y0 + 1, k.x0, k.wy1 * wx0),
                (k.y0 + 1, k.x0 + 1, k.wy1 * k.wx1),
            ];
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ch in 0..c {
                let d = dy[(b * c + ch) * ho * wo + p];
                let off = (b * c + ch) * h * w;
                if let Some(dx) = dx.as_mut() {
                    for &(yy, xx, wt) in &taps {
                        if inb(yy, xx) {
                            dx[off + yy as usize * w + xx as usize] += wt * d;
                        }
                    }
                }
                if dgrid.is_some() {
                    let plane = &x[off..off + h * w];
                    let v00 = fetch(plane, k.y0, k.x0, h, w);
                    let v01 = fetch(plane, k.y0, k.x0 + 1, h, w);
                    let v10 = fetch(plane, k.y0 + 1, k.x0, h, w);
                    let v11 = fetch(plane, k.y0 + 1, k.x0 + 1, h, w);
                    gx += d * (wy0 * (v01 - v00) + k.wy1 * (v11 - v10));
                    gy += d * (wx0 * (v10 - v00) + k.wx1 * (v11 - v01));
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                dg[gi] += gx * sx;
                dg[gi + 1] += gy * sy;
            }
        }
    }
    (dx, dgrid)
}

/// Normalized pixel-centre coordinate `i` of `extent` (align-corners convention).
#[inline]
pub(crate) fn grid_coord<T: Scalar>(i: usize, extent: usize) -> T {
    if extent <= 1 {
        T::zero()
    } else {
        T::from_f64((2 * i) as f64 / (extent - 1) as f64 - 1.0)
    }
}

/// `theta: [n,6]` ordered `(a11, a12, tx, a21, a22, ty)` -> grid `[n,ho,wo,2]`.
pub(crate) fn affine_grid_forward<T: Scalar>(theta: &[T], n: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * ho * wo * 2);
    for b in 0..n {
        let t = &theta[b * 6..b * 6 + 6];
        for i in 0..ho {
            let yt: T = grid_coord(i, ho);
            for j in 0..wo {
                let xt: T = grid_coord(j, wo);
                out.push(t[0] * xt + t[1] * yt + t[2]);
                out.push(t[3] * xt + t[4] * yt + t[5]);
            }
        }
    }
    out
}

pub(crate) fn affine_grid_backward<T: Scalar>(dgrid: &[T], n: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut dt = vec![T::zero(); n * 6];
    for b in 0..n {
        let d = &mut dt[b * 6..b * 6 + 6];
        for i in 0..ho {
            let yt: T = grid_coord(i, ho);
            for j in 0..wo {
                let xt: T = grid_coord(j, wo);
                let gi = ((b * ho + i) * wo + j) * 2;
                let (gx, gy) = (dgrid[gi], dgrid[gi + 1]);
                d[0] += gx * xt;
                d[1] += gx * yt;
                d[2] += gx;
                d[3] += gy * xt;
                d[4] += gy * yt;
                d[5] += gy;
            }
        }
    }
    dt
}

/// Layer norm over rows of length `d`. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_forward<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (xr[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            dgamma[i] += dyr[i] * xr[i];
            dbeta[i] += dyr[i];
            let g = dyr[i] * gamma[i];
            m1 += g;
            m2 += g * xr[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for i in 0..d {
            let g = dyr[i] * gamma[i];
            dx[r * d + i] = rstd[r] * (g - m1 - xr[i] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[idx] = x[idx permuted]`, where output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let nd = out_shape.len();
    if x.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    loop {
        out.push(x[off]);
        // advance the odometer
        let mut ax = nd;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Exact standard normal CDF via `erf`.
#[inline]
pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn normal_pdf<T: Scalar>(x: T) -> T {
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Stable in both tails.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
