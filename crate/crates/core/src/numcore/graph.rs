//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; `backward` walks the tape
//! in reverse. Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grads`]. A graph is single-threaded; build one per thread.

use super::tensor::{
    gelu_grad_scalar, gelu_scalar, layer_norm_kernel, matmul_kernel, matmul_nt_kernel,
    matmul_tn_kernel, softmax_rows_kernel, Tensor,
};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let rg = t.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let c = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return shape_err(format!(
                "matmul_nt widths disagree: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let c = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `mul · x + add`, elementwise.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let t = self.value(x).map(|v| mul * v + add);
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, mul), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    fn row_broadcast(&self, x: Var, r: Var, what: &str) -> Result<(usize, usize)> {
        let (n, d) = self.dims(x)?;
        if self.value(r).len() != d {
            return shape_err(format!(
                "{what}: row of shape {:?} does not match width of {:?}",
                self.shape(r),
                self.shape(x)
            ));
        }
        Ok((n, d))
    }

    /// Adds a `[d]` (or `[1×d]`) row to every row of `x[n×d]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(x, r, "add_row")?;
        let rv = self.value(r).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + rv[i % d])
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(t, Op::AddRow(x, r), rg))
    }

    /// Multiplies every row of `x[n×d]` elementwise by a `[d]` row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(x, r, "mul_row")?;
        let rv = self.value(r).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * rv[i % d])
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(t, Op::MulRow(x, r), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let cols = *vx.shape().last().unwrap();
        let t = Tensor::new(vx.shape(), softmax_rows_kernel(vx.data(), cols)).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(format!(
                "layer_norm width {d} vs gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (y, xhat, inv_std) = layer_norm_kernel(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            n,
            d,
            eps,
        );
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenation along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = super::tensor::concat_tokens(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        if start + len > n {
            return shape_err(format!("row slice {start}..{} of {n} rows", start + len));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[len, d], data)?, Op::SliceRows(x, start), rg))
    }

    /// Splits rows into consecutive chunks of the given sizes.
    pub fn split_rows(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let (n, _) = self.dims(x)?;
        if sizes.iter().sum::<usize>() != n {
            return shape_err(format!("split sizes {sizes:?} do not sum to {n} rows"));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(self.slice_rows(x, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of an empty list");
        };
        let (n, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != n {
                return shape_err(format!("concat_cols row mismatch: {n} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[n, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        if start + len > d {
            return shape_err(format!("column slice {start}..{} of {d} columns", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, len], data)?, Op::SliceCols(x, start), rg))
    }

    /// Linear layer `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                add_into(&mut self.nodes[i].grad, &g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], &contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if self.rg(*a) {
                    send(*a, matmul_nt_kernel(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, matmul_tn_kernel(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                // c[m×n] = a[m×k] b[n×k]ᵀ
                let (m, k) = self.dims(*a)?;
                let (n, _) = self.dims(*b)?;
                if self.rg(*a) {
                    send(*a, matmul_kernel(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, matmul_tn_kernel(g, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Affine(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, r) => {
                let d = self.value(*r).len();
                let mut gr = vec![0.0; d];
                for (j, v) in g.iter().enumerate() {
                    gr[j % d] += v;
                }
                send(*x, g.to_vec());
                send(*r, gr);
            }
            Op::MulRow(x, r) => {
                let rv = self.value(*r).data();
                let xv = self.value(*x).data();
                let d = rv.len();
                let mut gr = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for (j, v) in g.iter().enumerate() {
                    gx[j] = v * rv[j % d];
                    gr[j % d] += v * xv[j];
                }
                send(*x, gx);
                send(*r, gr);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.dims(*x)?;
                let gv = self.value(*gain).data();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for c in 0..d {
                        gg[c] += gr[c] * hr[c];
                        gb[c] += gr[c];
                        let gh = gr[c] * gv[c];
                        mean_gh += gh;
                        mean_ghh += gh * hr[c];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for c in 0..d {
                        let gh = gr[c] * gv[c];
                        gx[r * d + c] = inv_std[r] * (gh - mean_gh - hr[c] * mean_ghh);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gb);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(g, &v)| g * gelu_grad_scalar(v)).collect());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let (_, d) = self.dims(*x)?;
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.dims(p)?;
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    send(p, gp);
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.dims(*x)?;
                let (_, w) = node.value.dims2()?;
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    gx[r * d + start..r * d + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 2]).trainable());
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::row(&[1.0, 2.0]).trainable());
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::row(&[1.0, 2.0]).trainable());
        let c = g.constant(Tensor::row(&[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn concat_routes_ones() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]).trainable());
        let b = g.leaf(&Tensor::zeros(&[1, 3]).trainable());
        let c = g.concat_rows(&[a, b]).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }
}
