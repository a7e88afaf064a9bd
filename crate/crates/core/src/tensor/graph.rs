use super::kernels::{self, ConvGeom};
use super::{shape_err, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Matmul(Var, Var),
    Bmm(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    GlobalAvgPool(Var),
    Bilinear { x: Var, grid: Var },
    AffineGrid { theta: Var, h: usize, w: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_scalar_like(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if is_scalar_like(sb) {
            Ok(sa.to_vec())
        } else if is_scalar_like(sa) {
            Ok(sb.to_vec())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?} (only equal shapes or a single-element operand broadcast)")))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = if va.shape() != shape.as_slice() {
            let s = va.item();
            vb.data().iter().map(|&y| f(s, y)).collect()
        } else if vb.shape() != shape.as_slice() {
            let s = vb.item();
            va.data().iter().map(|&x| f(x, s)).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        self.push(name, Tensor::new(shape, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.push("abs", out, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * kernels::normal_cdf(x));
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::Invalid { op: "mean", detail: "empty tensor".into() });
        }
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x) / T::from_f64(v.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let n = T::from_f64(len as f64);
        out.iter_mut().for_each(|v| *v /= n);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("mean_axis", Tensor::new(out_shape, out)?, Op::MeanAxis { x: a, axis }, &[a])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        self.push("matmul", Tensor::new([m, n], out)?, Op::Matmul(a, b), &[a, b])
    }

    /// Batched matmul `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            T::gemm(m, k, n, T::one(), &da[i * m * k..][..m * k], k as isize, 1, &db[i * k * n..][..k * n], n as isize, 1, T::zero(), &mut out[i * m * n..][..m * n], n as isize, 1);
        }
        self.push("bmm", Tensor::new([bs, m, n], out)?, Op::Bmm(a, b), &[a, b])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().unwrap_or(&0);
        if sb != [d] {
            return Err(shape_err("add_row", format!("{sx:?} + {sb:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    /// Scales each leading-index slice of `x` by one entry of `s`, where
    /// `s.shape` is a prefix of `x.shape` (per-sample or per-channel scaling).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss.len() > sx.len() || sx[..ss.len()] != *ss {
            return Err(shape_err("scale_rows", format!("{sx:?} by {ss:?}")));
        }
        let inner: usize = sx[ss.len()..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        if inner > 0 {
            for (row, &f) in out.data_mut().chunks_mut(inner).zip(&sv) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        self.push("scale_rows", out, Op::ScaleRows(x, s), &[x, s])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid { op: "permute", detail: format!("{perm:?} for {shape:?}") });
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        self.push("permute", Tensor::new(out_shape, data)?, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x: [N,C,H,W]`, `w: [C_out, C/groups, kh, kw]`, optional `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if stride == 0 || groups == 0 {
            return Err(TensorError::Invalid { op: "conv2d", detail: "stride and groups must be positive".into() });
        }
        let geom = ConvGeom { n: sx[0], c_in: sx[1], h: sx[2], w: sx[3], c_out: sw[0], kh: sw[2], kw: sw[3], stride, padding, groups };
        if geom.c_in % groups != 0 || geom.c_out % groups != 0 || sw[1] != geom.c_in / groups {
            return Err(shape_err(
                "conv2d",
                format!("{} input / {} output channels incompatible with groups={groups} and weight {sw:?}", geom.c_in, geom.c_out),
            ));
        }
        if geom.h + 2 * padding < geom.kh || geom.w + 2 * padding < geom.kw {
            return Err(shape_err("conv2d", format!("kernel {}x{} larger than padded input {sx:?}", geom.kh, geom.kw)));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", self.shape(b), geom.c_out)));
            }
        }
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let shape = [geom.n, geom.c_out, geom.h_out(), geom.w_out()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid { op: "layer_norm", detail: format!("eps must be positive, got {eps}") });
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta))));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_forward(self.value(x).data(), d, self.value(gamma).data(), self.value(beta).data(), T::from_f64(eps));
        self.push("layer_norm", Tensor::new(sx, y)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_last(self.value(a), false);
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_last(self.value(a), true);
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// `[N,C,H,W] -> [N,C]`, mean over spatial positions.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(shape_err("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let denom = T::from_f64(hw as f64);
        let out: Vec<T> = self.value(a).data().chunks(hw).map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v) / denom).collect();
        self.push("global_avg_pool", Tensor::new([s[0], s[1]], out)?, Op::GlobalAvgPool(a), &[a])
    }

    /// Samples `x: [N,C,H,W]` at `grid: [N,H',W',2]` (normalized `(x,y)`
    /// pairs, `-1`/`+1` at the outer pixel centres). Each of the four taps
    /// that falls outside the image reads zero.
    pub fn bilinear_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(grid).to_vec());
        if sx.len() != 4 || sg.len() != 4 || sg[3] != 2 || sg[0] != sx[0] {
            return Err(shape_err("bilinear_sample", format!("input {sx:?}, grid {sg:?}")));
        }
        let dims = [sx[0], sx[1], sx[2], sx[3]];
        let out = kernels::bilinear_forward(self.value(x).data(), dims, self.value(grid).data(), sg[1], sg[2]);
        self.push("bilinear_sample", Tensor::new([sx[0], sx[1], sg[1], sg[2]], out)?, Op::Bilinear { x, grid }, &[x, grid])
    }

    /// Source sampling grid for affine parameters `theta: [N,6]`.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let st = self.shape(theta).to_vec();
        if st.len() != 2 || st[1] != 6 {
            return Err(shape_err("affine_grid", format!("theta {st:?}, expected [N,6]")));
        }
        if h == 0 || w == 0 {
            return Err(TensorError::Invalid { op: "affine_grid", detail: "output extent must be >= 1".into() });
        }
        let out = kernels::affine_grid_forward(self.value(theta).data(), st[0], h, w);
        self.push("affine_grid", Tensor::new([st[0], h, w, 2], out)?, Op::AffineGrid { theta, h, w }, &[theta])
    }

    /// Reverse sweep from a scalar `loss`; populates gradients of every
    /// node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if !is_scalar_like(ls) {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls.to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(n.value.shape().to_vec()));
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, gd.to_vec(), out.shape());
                self.acc_broadcast(grads, *b, gd.to_vec(), out.shape());
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, gd.to_vec(), out.shape());
                self.acc_broadcast(grads, *b, gd.iter().map(|&v| -v).collect(), out.shape());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = zip_broadcast(gd, vb.data(), |g, y| g * y);
                    self.acc_broadcast(grads, *a, d, out.shape());
                }
                if self.needs(*b) {
                    let d = zip_broadcast(gd, va.data(), |g, x| g * x);
                    self.acc_broadcast(grads, *b, d, out.shape());
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, gd.iter().map(|&v| v * *c).collect()),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(&g, &x)| g * x.sign()).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(&g, &x)| g * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x))).collect());
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, *a, gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gd[0] / T::from_f64(n as f64); n]);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let inv = T::one() / T::from_f64(len as f64);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            d[(o * len + l) * inner + j] = gd[o * inner + j] * inv;
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, self.value(*b).data(), 1, n as isize, T::zero(), &mut d, k as isize, 1);
                    self.acc(grads, *a, d);
                }
                if self.needs(*b) {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut d, n as isize, 1);
                    self.acc(grads, *b, d);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut d = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        T::gemm(m, n, k, T::one(), &gd[i * m * n..][..m * n], n as isize, 1, &db[i * k * n..][..k * n], 1, n as isize, T::zero(), &mut d[i * m * k..][..m * k], k as isize, 1);
                    }
                    self.acc(grads, *a, d);
                }
                if self.needs(*b) {
                    let mut d = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        T::gemm(k, m, n, T::one(), &da[i * m * k..][..m * k], 1, k as isize, &gd[i * m * n..][..m * n], n as isize, 1, T::zero(), &mut d[i * k * n..][..k * n], n as isize, 1);
                    }
                    self.acc(grads, *b, d);
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, gd.to_vec());
                if self.needs(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d.max(1)) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *bias, db);
                }
            }
            Op::ScaleRows(x, s) => {
                let sv = self.value(*s).data();
                let inner = out.numel() / sv.len().max(1);
                if self.needs(*x) {
                    let mut d = gd.to_vec();
                    if inner > 0 {
                        for (row, &f) in d.chunks_mut(inner).zip(sv) {
                            row.iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    self.acc(grads, *x, d);
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let d: Vec<T> = if inner == 0 {
                        vec![T::zero(); sv.len()]
                    } else {
                        gd.chunks(inner).zip(xv.chunks(inner)).map(|(g, x)| g.iter().zip(x).fold(T::zero(), |a, (&g, &x)| a + g * x)).collect()
                    };
                    self.acc(grads, *s, d);
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, gd.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, _) = kernels::permute(gd, out.shape(), &inv);
                self.acc(grads, *a, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let (dx, dw, db) = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), gd, need);
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let (dx, dg, db) = kernels::layer_norm_backward(gd, xhat, rstd, self.value(*gamma).data(), d);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::Softmax(a) => {
                let k = *out.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(k).zip(gd.chunks(k)).zip(out.data().chunks(k)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for ((dv, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = y * (g - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let k = *out.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(k).zip(gd.chunks(k)).zip(out.data().chunks(k)) {
                    let total = gr.iter().fold(T::zero(), |a, &g| a + g);
                    for ((dv, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = g - y.exp() * total;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let mut d = Vec::with_capacity(hw * gd.len());
                for &g in gd {
                    d.extend(std::iter::repeat_n(g * inv, hw));
                }
                self.acc(grads, *a, d);
            }
            Op::Bilinear { x, grid } => {
                let s = self.shape(*x);
                let dims = [s[0], s[1], s[2], s[3]];
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let need = [self.needs(*x), self.needs(*grid)];
                let (dx, dg) = kernels::bilinear_backward(self.value(*x).data(), dims, self.value(*grid).data(), ho, wo, gd, need);
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dg) = dg {
                    self.acc(grads, *grid, dg);
                }
            }
            Op::AffineGrid { theta, h, w } => {
                let n = self.shape(*theta)[0];
                self.acc(grads, *theta, kernels::affine_grid_backward(gd, n, *h, *w));
            }
        }
    }

    /// Accumulates `d` (same numel as `v`) into the gradient slot of `v`.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor::new(shape, d).expect("gradient shape"));
            }
        }
    }

    /// Like [`Self::acc`], reducing to a single element when `v` was broadcast.
    fn acc_broadcast(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>, out_shape: &[usize]) {
        if self.shape(v) == out_shape || self.value(v).numel() == d.len() {
            self.acc(grads, v, d);
        } else {
            let s = d.iter().fold(T::zero(), |a, &x| a + x);
            self.acc(grads, v, vec![s]);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Elementwise `f(g, other)` where `other` may be a single element.
fn zip_broadcast<T: Scalar>(g: &[T], other: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(&a, &b)| f(a, b)).collect()
    } else {
        let s = other[0];
        g.iter().map(|&a| f(a, s)).collect()
    }
}

fn softmax_last<T: Scalar>(x: &Tensor<T>, log: bool) -> Tensor<T> {
    let k = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    if k == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v -= m;
            total += v.exp();
        }
        if log {
            let lt = total.ln();
            row.iter_mut().for_each(|v| *v -= lt);
        } else {
            row.iter_mut().for_each(|v| *v = v.exp() / total);
        }
    }
    out
}
