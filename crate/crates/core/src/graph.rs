//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes only ever refer
//! to earlier nodes, so the push order is a topological order and the
//! adjoint pass is a single reverse sweep that visits each node once.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass for a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt inner extents differ: {:?} · {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_map(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias` (one value per last-axis column) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).numel() != cols {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, extent, inner) = split_axis(self.shape(x), axis)?;
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::softmax_strided(self.data(x), &mut out, outer, extent, inner);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::dim("layernorm of a scalar"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!(
                "layernorm affine shapes {:?}/{:?} do not match last axis of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let rows = self.value(x).numel() / d;
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for (r, row) in self.data(x).chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layernorm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        split_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat along axis {axis}: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Contiguous range `[start, start + len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, extent, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of bounds for axis {axis} of {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// Selects rows of the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::dim("gather_rows of a scalar"))?;
        if index.is_empty() {
            return Err(Error::dim("gather_rows with empty index"));
        }
        let width: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(Error::Index(format!("row {r} out of range for {rows} rows")));
            }
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let value = Tensor::new(out_shape, out)?;
        self.push("gather_rows", value, Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, row) in self.data(logits).chunks_exact(c).enumerate() {
            let lse = kernels::log_sum_exp(row);
            total += lse - row[labels[r]];
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(total / b as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", value, op, &[logits])
    }

    /// Accumulates adjoints of `loss` into every trainable leaf.
    ///
    /// A graph can be differentiated once; a second call returns
    /// [`Error::StaleGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.propagate(i, &gout, &mut grads)?;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if wants(v) {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; numel(v)]);
                f(buf);
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let n = nodes[b.0].value.dims2()?.1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| kernels::matmul_nt_acc(gout, bd, ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(ad, gout, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let n = nodes[b.0].value.dims2()?.0;
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| kernels::matmul_acc(gout, bd, ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(gout, ad, gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(bd) {
                        *g += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(ad) {
                        *g += d * x;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
                let cols = numel(*bias);
                acc(*bias, &mut |g| {
                    for row in gout.chunks_exact(cols) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d * s));
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |g| {
                    for ((g, d), &v) in g.iter_mut().zip(gout).zip(xd) {
                        *g += d * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = nodes[i].value.data();
                let (outer, extent, inner) = split_axis(nodes[i].value.shape(), *axis)?;
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + c;
                            let dot: f64 = (0..extent).map(|e| gout[idx(e)] * y[idx(e)]).sum();
                            for e in 0..extent {
                                g[idx(e)] += y[idx(e)] * (gout[idx(e)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = numel(*gamma);
                let gam = self.data(*gamma);
                acc(*gamma, &mut |g| {
                    for (drow, hrow) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            g[c] += drow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for drow in gout.chunks_exact(d) {
                        g.iter_mut().zip(drow).for_each(|(g, v)| *g += v);
                    }
                });
                acc(*x, &mut |g| {
                    let inv_d = 1.0 / d as f64;
                    for (r, (drow, hrow)) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = drow[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[c];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let grow = &mut g[r * d..(r + 1) * d];
                        for c in 0..d {
                            let dh = drow[c] * gam[c];
                            grow[c] += rstd[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(nodes[i].value.shape(), *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let ext = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for (gv, dv) in g[dst..dst + ext * inner].iter_mut().zip(&gout[src..]) {
                                *gv += dv;
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = split_axis(nodes[x.0].value.shape(), *axis)?;
                let len = nodes[i].value.shape()[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for (gv, dv) in g[dst..dst + len * inner].iter_mut().zip(&gout[src..]) {
                            *gv += dv;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let width = numel(*x) / nodes[x.0].value.shape()[0];
                acc(*x, &mut |g| {
                    for (k, &r) in index.iter().enumerate() {
                        let src = &gout[k * width..(k + 1) * width];
                        g[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0]));
            }
            Op::Mean(x) => {
                let s = gout[0] / numel(*x) as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += s));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let s = gout[0] / b as f64;
                acc(*logits, &mut |g| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_2x2() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let out = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));

        let x = g.constant(Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(close(d[0], 1.0 / 3.0, 1e-15) && close(d[1], 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = vec![0.3, -1.2, 2.5, 0.0, 0.7];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![5], base.clone()).unwrap());
        let shifted = g.constant(Tensor::new(vec![5], base.iter().map(|v| v + 1000.0).collect()).unwrap());
        let a = g.softmax(x, 0).unwrap();
        let b = g.softmax(shifted, 0).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 5.0], &[1.0, -5.0]]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(close(d[0], 0.5, 1e-15) && close(d[2], 0.5, 1e-15));
        assert!(close(d[1] + d[3], 1.0, 1e-15));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 196]));
        let l = g.cross_entropy(z, &[0, 5, 195]).unwrap();
        assert!(close(g.value(l).item(), 196f64.ln(), 1e-12));

        let mut row = vec![0.0; 10];
        row[3] = 40.0;
        let z = g.constant(Tensor::new(vec![1, 10], row).unwrap());
        let l = g.cross_entropy(z, &[3]).unwrap();
        assert!(g.value(l).item() < 1e-10);

        let z = g.constant(Tensor::new(vec![1, 3], vec![0.0, 2f64.ln(), 3f64.ln()]).unwrap());
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!(close(g.value(l).item(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(g.cross_entropy(z, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn layernorm_closed_forms() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::ones(&[4]));
        let zero = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[1, 4], 3.7));
        let y = g.layernorm(x, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let one2 = g.constant(Tensor::ones(&[2]));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
        let y = g.layernorm(x, one2, zero2, 1e-14).unwrap();
        let d = g.value(y).data();
        assert!(close(d[0], -1.0, 1e-12) && close(d[1], 1.0, 1e-12));

        let gamma0 = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let y = g.layernorm(x, gamma0, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn gelu_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1));
        let b = g.constant(Tensor::from_fn(&[2, 5], |i| -(i as f64)));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
        let back = g.slice(c, 1, 0, 3).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
        let tail = g.slice(c, 1, 3, 5).unwrap();
        assert_eq!(g.value(tail).data(), g.value(b).data());
    }

    #[test]
    fn concat_of_half_vectors_has_full_extent() {
        let mut g = Graph::new();
        let zi = g.constant(Tensor::from_fn(&[1, 6], |i| i as f64));
        let zj = g.constant(Tensor::from_fn(&[1, 6], |i| 10.0 + i as f64));
        let hi = g.slice(zi, 1, 0, 3).unwrap();
        let hj = g.slice(zj, 1, 0, 3).unwrap();
        let zij = g.concat(&[hi, hj], 1).unwrap();
        assert_eq!(g.shape(zij), &[1, 6]);
        assert_eq!(g.value(zij).data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn concat_extent_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.concat(&[a, b], 1), Err(Error::Dimension(_))));
        assert!(g.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn sum_and_square_gradients() {
        let x0 = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let expect: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_twice_is_stale() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::StaleGraph)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.gather_rows(x, &[3]), Err(Error::Index(_))));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2], f64::MAX));
        assert!(matches!(g.add(x, x), Err(Error::NonFinite { op: "add" })));
    }
}
