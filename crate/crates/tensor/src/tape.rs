//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products.
//! Leaves can borrow their data so frozen weights are never copied.
//!
//! Layout conventions: feature maps are `[h, w, c]` (channels last), token
//! sets are `[n, d]`. Matmul treats every leading dimension of its left
//! operand as rows.

use std::borrow::Cow;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, col2im_add, gemm, im2col, ConvGeom, Mat};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Stack along the leading dimension.
    First,
    /// Concatenate along the trailing (channel) dimension.
    Last,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Vec<Var>, Axis),
    MeanRows(Var),
    Reshape(Var),
    Mse(Var, Var),
    Sum(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Computation record. Lifetime `'a` is that of borrowed leaf data.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad. `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let n = if c == 0 { 0 } else { shape.iter().product::<usize>() / c };
    (n, c)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf borrowing `t`'s storage.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf taking ownership of `t`.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Owned leaf that requires grad (inputs to gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is consistent")
    }

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k) = rows_of(sa);
        let n = sb[1];
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            Mat::rows(self.value(a), k),
            Mat::rows(self.value(b), n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// `a [m, k] · b[n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            Mat::rows(self.value(a), k),
            Mat::trans(self.value(b), k),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &[sa, sb]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// `x [.., c] + bias [c]`, broadcast over the leading dimensions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let (_, c) = rows_of(sx);
        if sb.len() != 1 || sb[0] != c {
            return Err(shape_err("add_bias", &[sx, sb]));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, s), rg)
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_of(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Layer normalization over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let (n, c) = rows_of(sx);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", &[sx, self.shape(gamma), self.shape(beta)]));
        }
        let shape = sx.to_vec();
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        let cc = c.max(1);
        let rows = xv.chunks_exact(cc).zip(xhat.chunks_exact_mut(cc)).zip(out.chunks_exact_mut(cc));
        for (((row, hr), or), rs_slot) in rows.zip(rstd.iter_mut()) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            *rs_slot = rs;
            for ((((&xv, h), o), &gj), &bj) in row.iter().zip(hr.iter_mut()).zip(or.iter_mut()).zip(g).zip(b) {
                *h = (xv - mean) * rs;
                *o = *h * gj + bj;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// 3x3 convolution, padding 1. `x [h, w, ci]`, `w [3, 3, ci, co]`, `b [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3
            || sw.len() != 4
            || sw[0] != 3
            || sw[1] != 3
            || sw[2] != sx[2]
            || sb != [sw[3]]
            || !(stride == 1 || stride == 2)
            || sx[0] == 0
            || sx[1] == 0
        {
            return Err(shape_err("conv2d", &[sx, sw, sb]));
        }
        let co = sw[3];
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], stride);
        let cols = im2col(self.value(x), geom);
        let rows = geom.ho * geom.wo;
        let bias = self.value(b);
        let mut out: Vec<f64> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            rows,
            geom.patch(),
            co,
            1.0,
            Mat::rows(&cols, geom.patch()),
            Mat::rows(self.value(w), co),
            1.0,
            &mut out,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![geom.ho, geom.wo, co], out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `[h, w, c]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(shape_err("upsample2x", &[sx]));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![2 * h, 2 * w, c], out, Op::Upsample2x(x), rg))
    }

    /// 2x2 average pooling of `[h, w, c]` with even `h`, `w`.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] % 2 != 0 || sx[1] % 2 != 0 {
            return Err(shape_err("avg_pool2x", &[sx]));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let src = (y * w + xx) * c;
                let dst = ((y / 2) * wo + xx / 2) * c;
                for k in 0..c {
                    out[dst + k] += 0.25 * xv[src + k];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![ho, wo, c], out, Op::AvgPool2x(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let s0 = self.shape(first).to_vec();
        if s0.is_empty() {
            return Err(shape_err("concat", &[&s0]));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let (shape, out) = match axis {
            Axis::First => {
                if shapes.iter().any(|s| s.len() != s0.len() || s[1..] != s0[1..]) {
                    return Err(shape_err("concat", &shapes));
                }
                let mut shape = s0.clone();
                shape[0] = shapes.iter().map(|s| s[0]).sum();
                let out: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
                (shape, out)
            }
            Axis::Last => {
                let lead = &s0[..s0.len() - 1];
                if shapes.iter().any(|s| s.len() != s0.len() || &s[..s.len() - 1] != lead) {
                    return Err(shape_err("concat", &shapes));
                }
                let widths: Vec<usize> = shapes.iter().map(|s| *s.last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows: usize = lead.iter().product();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&p, &wd) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&self.value(p)[r * wd..(r + 1) * wd]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(total);
                (shape, out)
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Mean over all leading rows: `[.., c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, c) = rows_of(self.shape(x));
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(&[x]);
        self.push(vec![c], out, Op::MeanRows(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", &[self.shape(x), shape]));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Mean squared error, a scalar `[1]`.
    pub fn mse(&mut self, a: Var, target: Var) -> Result<Var> {
        let (_, diff) = self.zip_same("mse", a, target, |x, y| x - y)?;
        let v = diff.iter().map(|d| d * d).sum::<f64>() / diff.len().max(1) as f64;
        let rg = self.rg(&[a, target]);
        Ok(self.push(vec![1], vec![v], Op::Mse(a, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![v], Op::Sum(a), rg)
    }

    /// `softmax(q k^T / sqrt(d)) v` for `q [m, dk]`, `k [n, dk]`, `v [n, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, d: usize) -> Result<Var> {
        if d == 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: "head dimension must be positive".into(),
            });
        }
        let (sk, sv) = (self.shape(k), self.shape(v));
        if sk.len() != 2 || sv.len() != 2 || sk[0] != sv[0] {
            return Err(shape_err("attention", &[self.shape(q), sk, sv]));
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let p = self.softmax(scaled);
        self.matmul(p, v)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", &[self.shape(loss)]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = rows_of(self.shape(a));
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, Mat::rows(g, n), Mat::trans(self.value(b), n), 0.0, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, Mat::trans(self.value(a), k), Mat::rows(g, n), 0.0, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, Mat::rows(g, n), Mat::rows(self.value(b), k), 0.0, &mut da);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, Mat::trans(g, n), Mat::rows(self.value(a), k), 0.0, &mut db);
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = g.iter().zip(self.value(b).iter()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(b) {
                    let d = g.iter().zip(self.value(a).iter()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            &Op::AddBias(x, b) => {
                if self.wants(x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.wants(b) {
                    let c = self.shape(b)[0];
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.iter().map(|v| v * s).collect());
                }
            }
            &Op::Softmax(a) => {
                if self.wants(a) {
                    let (_, c) = rows_of(&node.shape);
                    let y = &node.value;
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gv = self.value(*gamma);
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dx[r * c + j] = rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[beta.0], db);
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a) {
                    let d = g
                        .iter()
                        .zip(self.value(a).iter())
                        .map(|(gg, &x)| gg * kernels::gelu_grad(x))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let co = self.shape(w)[3];
                let rows = geom.ho * geom.wo;
                let p = geom.patch();
                if self.wants(x) {
                    let mut dcols = vec![0.0; rows * p];
                    gemm(rows, co, p, 1.0, Mat::rows(g, co), Mat::trans(self.value(w), co), 0.0, &mut dcols);
                    let mut dx = vec![0.0; geom.h * geom.w * geom.ci];
                    col2im_add(&dcols, geom, &mut dx);
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(w) {
                    let cols = im2col(self.value(x), geom);
                    let mut dw = vec![0.0; p * co];
                    gemm(p, rows, co, 1.0, Mat::trans(&cols, p), Mat::rows(g, co), 0.0, &mut dw);
                    accumulate(&mut grads[w.0], dw);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; co];
                    for row in g.chunks(co) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            &Op::Upsample2x(x) => {
                if self.wants(x) {
                    let s = self.shape(x);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let mut dx = vec![0.0; h * w * c];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = ((y / 2) * w + xx / 2) * c;
                            let src = (y * 2 * w + xx) * c;
                            for k in 0..c {
                                dx[dst + k] += g[src + k];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            &Op::AvgPool2x(x) => {
                if self.wants(x) {
                    let s = self.shape(x);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let wo = w / 2;
                    let mut dx = vec![0.0; h * w * c];
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = (y * w + xx) * c;
                            let src = ((y / 2) * wo + xx / 2) * c;
                            for k in 0..c {
                                dx[dst + k] = 0.25 * g[src + k];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::First => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.wants(p) {
                            accumulate(&mut grads[p.0], g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Axis::Last => {
                    let total = *node.shape.last().unwrap();
                    let rows = g.len() / total.max(1);
                    let mut off = 0;
                    for &p in parts {
                        let wd = *self.shape(p).last().unwrap();
                        if self.wants(p) {
                            let mut d = Vec::with_capacity(rows * wd);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + off..r * total + off + wd]);
                            }
                            accumulate(&mut grads[p.0], d);
                        }
                        off += wd;
                    }
                }
            },
            &Op::MeanRows(x) => {
                if self.wants(x) {
                    let (n, c) = rows_of(self.shape(x));
                    let inv = 1.0 / n as f64;
                    let d = (0..n).flat_map(|_| g.iter().map(|v| v * inv)).collect::<Vec<_>>();
                    debug_assert_eq!(d.len(), n * c);
                    accumulate(&mut grads[x.0], d);
                }
            }
            &Op::Reshape(x) => {
                if self.wants(x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            &Op::Mse(a, t) => {
                let n = self.value(a).len() as f64;
                let k = 2.0 * g[0] / n;
                let diff: Vec<f64> = self
                    .value(a)
                    .iter()
                    .zip(self.value(t).iter())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                if self.wants(t) {
                    accumulate(&mut grads[t.0], diff.iter().map(|v| -v).collect());
                }
                if self.wants(a) {
                    accumulate(&mut grads[a.0], diff);
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], vec![g[0]; self.value(a).len()]);
                }
            }
        }
    }
}
