//! Dense f64 tensors and a small reverse-mode differentiation tape.
//!
//! The tape records one node per tensor-level operation. Only the operations
//! the denoiser and its losses need are provided; everything is row-major and
//! single-threaded so gradients are bit-reproducible.

use std::rc::Rc;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor data does not match shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// `c (+)= op(a) * op(b)` on row-major storage.
///
/// `a` is stored as `a_rows x a_cols`; with `ta` it is used transposed. Same
/// for `b`. The product shape is inferred from the transposition flags.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (m, k, rsa, csa) = if ta {
        (a_cols, a_rows, 1isize, a_cols as isize)
    } else {
        (a_rows, a_cols, a_cols as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if tb {
        (b_cols, b_rows, 1isize, b_cols as isize)
    } else {
        (b_rows, b_cols, b_cols as isize, 1isize)
    };
    assert_eq!(k, k2, "inner dimensions disagree");
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths were checked against the strides above and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Vector-Jacobian product for a unary operation defined outside the tape.
pub trait UnaryVjp {
    fn vjp(&self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    AddJointBias(usize, usize),
    Linear(usize, usize),
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    MatmulLeft(usize, usize),
    Silu(usize),
    SoftmaxLast(usize),
    TransposeLast2(usize),
    LayerNorm { x: usize, eps: f64 },
    Gather { x: usize, index: Rc<[Option<u32>]> },
    Sum(usize),
    Mse { x: usize, target: Rc<Tensor> },
    Custom(usize, Box<dyn UnaryVjp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let v = Tensor::from_vec(t.shape(), t.data.iter().map(|x| x * s).collect());
        let rg = self.rg(a.0);
        self.push(v, Op::Scale(a.0, s), rg)
    }

    /// `x + b` where `b` is broadcast over the leading dimensions of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let nb = tb.numel();
        assert_eq!(tx.numel() % nb, 0, "broadcast operand does not divide input");
        let mut out = tx.clone();
        for chunk in out.data.chunks_mut(nb) {
            for (o, bv) in chunk.iter_mut().zip(&tb.data) {
                *o += bv;
            }
        }
        let rg = self.rg(x.0) || self.rg(b.0);
        self.push(out, Op::AddBcast(x.0, b.0), rg)
    }

    /// `x * g` where `g` is broadcast over the leading dimensions of `x`.
    pub fn mul_bcast(&mut self, x: Var, g: Var) -> Var {
        let (tx, tg) = (self.value(x), self.value(g));
        let ng = tg.numel();
        assert_eq!(tx.numel() % ng, 0, "broadcast operand does not divide input");
        let mut out = tx.clone();
        for chunk in out.data.chunks_mut(ng) {
            for (o, gv) in chunk.iter_mut().zip(&tg.data) {
                *o *= gv;
            }
        }
        let rg = self.rg(x.0) || self.rg(g.0);
        self.push(out, Op::MulBcast(x.0, g.0), rg)
    }

    /// `x[j, f, n] + b[j, n]`.
    pub fn add_joint_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let (j, f, n) = dims3(tx);
        assert_eq!(tb.shape(), &[j, n], "joint bias shape");
        let mut out = tx.clone();
        for jj in 0..j {
            let bias = &tb.data[jj * n..(jj + 1) * n];
            for row in out.data[jj * f * n..(jj + 1) * f * n].chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(b.0);
        self.push(out, Op::AddJointBias(x.0, b.0), rg)
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.shape().len(), 2);
        let (k, n) = (tw.shape[0], tw.shape[1]);
        assert_eq!(tx.last_dim(), k, "linear inner dimension");
        let rows = tx.numel() / k;
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        matmul_into(&tx.data, rows, k, false, &tw.data, k, n, false, &mut out.data, false);
        let rg = self.rg(x.0) || self.rg(w.0);
        self.push(out, Op::Linear(x.0, w.0), rg)
    }

    /// Batched matrix product over the leading dimension of two rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (tav, tbv) = (self.value(a), self.value(b));
        let (ba, ar, ac) = dims3(tav);
        let (bb, br, bc) = dims3(tbv);
        assert_eq!(ba, bb, "bmm batch mismatch");
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut out = Tensor::zeros(&[ba, m, n]);
        for i in 0..ba {
            matmul_into(
                &tav.data[i * ar * ac..(i + 1) * ar * ac],
                ar,
                ac,
                ta,
                &tbv.data[i * br * bc..(i + 1) * br * bc],
                br,
                bc,
                tb,
                &mut out.data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Bmm { a: a.0, b: b.0, ta, tb }, rg)
    }

    /// `w[p, q] @ x[q, ...]`, flattening the trailing dimensions of `x`.
    pub fn matmul_left(&mut self, w: Var, x: Var) -> Var {
        let (tw, tx) = (self.value(w), self.value(x));
        let (p, q) = (tw.shape[0], tw.shape[1]);
        assert_eq!(tx.shape[0], q, "matmul_left inner dimension");
        let r = tx.numel() / q;
        let mut shape = tx.shape().to_vec();
        shape[0] = p;
        let mut out = Tensor::zeros(&shape);
        matmul_into(&tw.data, p, q, false, &tx.data, q, r, false, &mut out.data, false);
        let rg = self.rg(w.0) || self.rg(x.0);
        self.push(out, Op::MatmulLeft(w.0, x.0), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(t.shape(), data);
        let rg = self.rg(x.0);
        self.push(out, Op::Silu(x.0), rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.clone();
        for row in out.data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::SoftmaxLast(x.0), rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (b, m, n) = dims3(t);
        let out = transpose3(&t.data, b, m, n);
        let out = Tensor::from_vec(&[b, n, m], out);
        let rg = self.rg(x.0);
        self.push(out, Op::TransposeLast2(x.0), rg)
    }

    /// Normalizes each row over the last dimension (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.clone();
        for row in out.data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::LayerNorm { x: x.0, eps }, rg)
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Rc<[Option<u32>]>, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let data = index
            .iter()
            .map(|i| i.map_or(0.0, |i| t.data[i as usize]))
            .collect();
        let out = Tensor::from_vec(shape, data);
        let rg = self.rg(x.0);
        self.push(out, Op::Gather { x: x.0, index }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, x: Var, target: Rc<Tensor>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape(), "mse target shape");
        let n = t.numel() as f64;
        let s = t
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mse { x: x.0, target }, rg)
    }

    /// Applies an externally defined function with a hand-written VJP.
    pub fn custom(&mut self, x: Var, output: Tensor, vjp: Box<dyn UnaryVjp>) -> Var {
        let rg = self.rg(x.0);
        self.push(output, Op::Custom(x.0, vjp), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &go, &mut grads);
            grads[idx] = Some(go);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || go.data.clone());
                self.accum(grads, *b, || go.data.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || go.data.clone());
                self.accum(grads, *b, || go.data.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accum(grads, *a, || zip_map(&go.data, &vb.data, |g, y| g * y));
                self.accum(grads, *b, || zip_map(&go.data, &va.data, |g, x| g * x));
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, || go.data.iter().map(|g| g * s).collect());
            }
            Op::AddBcast(x, b) => {
                self.accum(grads, *x, || go.data.clone());
                let nb = val(*b).numel();
                self.accum(grads, *b, || {
                    let mut gb = vec![0.0; nb];
                    for chunk in go.data.chunks(nb) {
                        for (acc, g) in gb.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    gb
                });
            }
            Op::MulBcast(x, gv) => {
                let (vx, vg) = (val(*x), val(*gv));
                let ng = vg.numel();
                self.accum(grads, *x, || {
                    let mut gx = go.data.clone();
                    for chunk in gx.chunks_mut(ng) {
                        for (o, s) in chunk.iter_mut().zip(&vg.data) {
                            *o *= s;
                        }
                    }
                    gx
                });
                self.accum(grads, *gv, || {
                    let mut gg = vec![0.0; ng];
                    for (gchunk, xchunk) in go.data.chunks(ng).zip(vx.data.chunks(ng)) {
                        for ((acc, g), xv) in gg.iter_mut().zip(gchunk).zip(xchunk) {
                            *acc += g * xv;
                        }
                    }
                    gg
                });
            }
            Op::AddJointBias(x, b) => {
                self.accum(grads, *x, || go.data.clone());
                let (j, f, n) = dims3(go);
                self.accum(grads, *b, || {
                    let mut gb = vec![0.0; j * n];
                    for jj in 0..j {
                        let acc = &mut gb[jj * n..(jj + 1) * n];
                        for row in go.data[jj * f * n..(jj + 1) * f * n].chunks(n) {
                            for (a, g) in acc.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                    }
                    gb
                });
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let (k, n) = (vw.shape[0], vw.shape[1]);
                let rows = vx.numel() / k;
                self.accum(grads, *x, || {
                    let mut gx = vec![0.0; rows * k];
                    matmul_into(&go.data, rows, n, false, &vw.data, k, n, true, &mut gx, false);
                    gx
                });
                self.accum(grads, *w, || {
                    let mut gw = vec![0.0; k * n];
                    matmul_into(&vx.data, rows, k, true, &go.data, rows, n, false, &mut gw, false);
                    gw
                });
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let (bn, ar, ac) = dims3(va);
                let (_, br, bc) = dims3(vb);
                let (_, m, n) = dims3(go);
                self.accum(grads, *a, || {
                    let mut ga = vec![0.0; va.numel()];
                    for i in 0..bn {
                        let gos = &go.data[i * m * n..(i + 1) * m * n];
                        let bs = &vb.data[i * br * bc..(i + 1) * br * bc];
                        let gas = &mut ga[i * ar * ac..(i + 1) * ar * ac];
                        if *ta {
                            // dA = op(B) dC^T
                            matmul_into(bs, br, bc, *tb, gos, m, n, true, gas, false);
                        } else {
                            // dA = dC op(B)^T
                            matmul_into(gos, m, n, false, bs, br, bc, !*tb, gas, false);
                        }
                    }
                    ga
                });
                self.accum(grads, *b, || {
                    let mut gb = vec![0.0; vb.numel()];
                    for i in 0..bn {
                        let gos = &go.data[i * m * n..(i + 1) * m * n];
                        let as_ = &va.data[i * ar * ac..(i + 1) * ar * ac];
                        let gbs = &mut gb[i * br * bc..(i + 1) * br * bc];
                        if *tb {
                            // dB = dC^T op(A)
                            matmul_into(gos, m, n, true, as_, ar, ac, *ta, gbs, false);
                        } else {
                            // dB = op(A)^T dC
                            matmul_into(as_, ar, ac, !*ta, gos, m, n, false, gbs, false);
                        }
                    }
                    gb
                });
            }
            Op::MatmulLeft(w, x) => {
                let (vw, vx) = (val(*w), val(*x));
                let (p, q) = (vw.shape[0], vw.shape[1]);
                let r = vx.numel() / q;
                self.accum(grads, *w, || {
                    let mut gw = vec![0.0; p * q];
                    matmul_into(&go.data, p, r, false, &vx.data, q, r, true, &mut gw, false);
                    gw
                });
                self.accum(grads, *x, || {
                    let mut gx = vec![0.0; q * r];
                    matmul_into(&vw.data, p, q, true, &go.data, p, r, false, &mut gx, false);
                    gx
                });
            }
            Op::Silu(x) => {
                let vx = val(*x);
                self.accum(grads, *x, || {
                    zip_map(&go.data, &vx.data, |g, v| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                });
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let n = y.last_dim();
                self.accum(grads, *x, || {
                    let mut gx = vec![0.0; y.numel()];
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(go.data.chunks(n)).zip(y.data.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (g - dot);
                        }
                    }
                    gx
                });
            }
            Op::TransposeLast2(x) => {
                let (b, n, m) = dims3(go);
                self.accum(grads, *x, || transpose3(&go.data, b, n, m));
            }
            Op::LayerNorm { x, eps } => {
                let vx = val(*x);
                let y = &node.value;
                let n = y.last_dim();
                self.accum(grads, *x, || {
                    let mut gx = vec![0.0; y.numel()];
                    for (((gxr, gr), yr), xr) in gx
                        .chunks_mut(n)
                        .zip(go.data.chunks(n))
                        .zip(y.data.chunks(n))
                        .zip(vx.data.chunks(n))
                    {
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gymean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for ((o, g), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o = inv * (g - gmean - yv * gymean);
                        }
                    }
                    gx
                });
            }
            Op::Gather { x, index } => {
                let n = val(*x).numel();
                self.accum(grads, *x, || {
                    let mut gx = vec![0.0; n];
                    for (i, g) in index.iter().zip(&go.data) {
                        if let Some(i) = i {
                            gx[*i as usize] += g;
                        }
                    }
                    gx
                });
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                let g = go.item();
                self.accum(grads, *x, || vec![g; n]);
            }
            Op::Mse { x, target } => {
                let vx = val(*x);
                let scale = 2.0 * go.item() / vx.numel() as f64;
                self.accum(grads, *x, || zip_map(&vx.data, &target.data, |a, b| scale * (a - b)));
            }
            Op::Custom(x, vjp) => {
                let vx = val(*x);
                self.accum(grads, *x, || vjp.vjp(vx, &node.value, go).into_data());
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], idx: usize, make: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[idx] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(Tensor::from_vec(self.nodes[idx].value.shape(), g)),
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected rank-3 tensor, got {:?}", t.shape());
    (t.shape[0], t.shape[1], t.shape[2])
}

fn transpose3(data: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let src = &data[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks every input gradient of `build` against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("missing gradient");
            for i in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data_mut()[i] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = ins.into_iter().map(|t| g2.param(t)).collect();
                    let o = build(&mut g2, &vs);
                    g2.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_transposes_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let mut c = vec![0.0; 15];
        matmul_into(a.data(), 3, 4, false, b.data(), 4, 5, false, &mut c, false);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|p| a.data()[i * 4 + p] * b.data()[p * 5 + j]).sum();
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
        // (B^T A^T)^T == A B
        let mut ct = vec![0.0; 15];
        matmul_into(b.data(), 4, 5, true, a.data(), 3, 4, true, &mut ct, false);
        for i in 0..3 {
            for j in 0..5 {
                assert!((ct[j * 3 + i] - c[i * 5 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bmm_gradients_all_transpose_modes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let a = if ta { rand_tensor(&mut rng, &[2, 4, 3]) } else { rand_tensor(&mut rng, &[2, 3, 4]) };
            let b = if tb { rand_tensor(&mut rng, &[2, 5, 4]) } else { rand_tensor(&mut rng, &[2, 4, 5]) };
            let w = rand_tensor(&mut rng, &[2, 3, 5]);
            check(vec![a, b, w], |g, v| {
                let p = g.bmm(v[0], v[1], ta, tb);
                let q = g.mul(p, v[2]);
                g.sum(q)
            });
        }
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let gain = rand_tensor(&mut rng, &[4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let mix = rand_tensor(&mut rng, &[2, 2]);
        let jb = rand_tensor(&mut rng, &[2, 4]);
        let target = Rc::new(rand_tensor(&mut rng, &[2, 3, 4]));
        check(vec![x, w, gain, bias, mix, jb], move |g, v| {
            let n = g.layer_norm(v[0], 1e-5);
            let n = g.mul_bcast(n, v[2]);
            let n = g.add_bcast(n, v[3]);
            let h = g.linear(n, v[1]);
            let h = g.silu(h);
            let s = g.softmax_last(h);
            let t = g.transpose_last2(s);
            let t = g.transpose_last2(t);
            let m = g.matmul_left(v[4], t);
            let m = g.add_joint_bias(m, v[5]);
            let d = g.sub(m, v[0]);
            let d = g.scale(d, 0.7);
            let e = g.add(d, v[0]);
            g.mse(e, target.clone())
        });
    }

    #[test]
    fn gather_scatters_gradient() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let idx: Rc<[Option<u32>]> = vec![Some(2), None, Some(0), Some(2)].into();
        let mut g = Graph::new();
        let v = g.param(x);
        let y = g.gather(v, idx, &[4]);
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 1.0, 3.0]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[2], 3.0));
        let p = g.param(Tensor::filled(&[2], 2.0));
        let m = g.mul(c, p);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }
}
