use super::ops::{gelu_grad_scalar, gelu_scalar, layer_norm_rows, softmax_row};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `tb`; both operands 2-D.
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Row-broadcast add: `x[i, j] + row[j]`.
    AddRow {
        x: Var,
        row: Var,
    },
    /// Row-broadcast product: `x[i, j] · row[j]`.
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
    },
    Softmax {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
    leaf_grad: Option<Vec<S>>,
    /// Per-op saved state: normalized rows for layer norm.
    saved: Vec<S>,
    /// Reciprocal std per row for layer norm.
    saved2: Vec<S>,
}

/// Reverse-mode tape over the fixed op set.
///
/// Leaves are added with [`Graph::param`] (gradient tracked) or
/// [`Graph::constant`]. Every op appends one node; [`Graph::backward`] runs the
/// list in reverse and accumulates into the trainable leaves only, so repeated
/// calls add up until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    let c = t.last_dim();
    (t.outer(), c)
}

impl<S: Scalar> Graph<S> {
    /// New tape. Non-finite checks after each op are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf_grad: None,
            saved: Vec::new(),
            saved2: Vec::new(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            leaf_grad: None,
            saved: Vec::new(),
            saved2: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<S> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.leaf_grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a trainable leaf, zeros if nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<S> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let out = super::ops::matmul_t(self.value(a), self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, tb }, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b }, rg, "mul")
    }

    fn row_check(&self, x: Var, row: Var, op: &'static str) -> Result<usize> {
        let c = self.value(x).last_dim();
        if self.value(row).numel() != c {
            return Err(Error::shape(
                op,
                format!("row of {} values against last axis {}", self.value(row).numel(), c),
            ));
        }
        Ok(c)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row, "add_row")?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                chunk.iter_mut().zip(r).for_each(|(v, &b)| *v = *v + b);
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow { x, row }, rg, "add_row")
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row, "mul_row")?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                chunk.iter_mut().zip(r).for_each(|(v, &b)| *v = *v * b);
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow { x, row }, rg, "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = S::from_f64(c);
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = S::from_f64(c);
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg, "add_scalar")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg, "gelu")
    }

    /// Layer norm over the last axis with optional affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        for p in [gain, bias].into_iter().flatten() {
            self.row_check(x, p, "layer_norm")?;
        }
        let (r, c) = rows_cols(self.value(x));
        let mut xhat = self.value(x).clone();
        let mut rstd = vec![S::zero(); r];
        layer_norm_rows(xhat.data_mut(), c, S::from_f64(eps), &mut rstd);
        let mut out = xhat.clone();
        if c > 0 {
            if let Some(g) = gain {
                let g = self.value(g).data();
                for chunk in out.data_mut().chunks_mut(c) {
                    chunk.iter_mut().zip(g).for_each(|(v, &w)| *v = *v * w);
                }
            }
            if let Some(b) = bias {
                let b = self.value(b).data();
                for chunk in out.data_mut().chunks_mut(c) {
                    chunk.iter_mut().zip(b).for_each(|(v, &w)| *v = *v + w);
                }
            }
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        let v = self.push(out, Op::LayerNorm { x, gain, bias }, rg, "layer_norm")?;
        let node = &mut self.nodes[v.0];
        node.saved = xhat.into_data();
        node.saved2 = rstd;
        Ok(v)
    }

    /// Softmax over the last axis. Columns where `key_mask` is false receive
    /// exactly zero weight.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (_, c) = rows_cols(self.value(x));
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::shape("softmax", format!("mask {} vs {} columns", m.len(), c)));
            }
        }
        let mut out = self.value(x).clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_row(row, key_mask);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg, "softmax")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = super::ops::embedding_lookup(self.value(table), ids)?;
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{} vs {} columns", pc, c)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows { parts: parts.to_vec() }, rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{} vs {} rows", pr, r)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let out = super::ops::mse_loss(self.value(pred), self.value(target))?;
        let rg = self.rg(pred) || self.rg(target);
        self.push(out, Op::Mse { pred, target }, rg, "mse")
    }

    /// Accumulates `∂loss/∂leaf` into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.leaf_grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.leaf_grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        // Returns the gradient buffer for `v`, zero-initialized on first touch.
        fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> &'a mut Vec<S> {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()])
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if want(a) {
                    // dA = G·Bᵀ (NN) or G·B (NT)
                    let ga = slot(grads, nodes, a);
                    gemm(false, !tb, m, n, k, g, vb.data(), ga, true);
                }
                if want(b) {
                    let gb = slot(grads, nodes, b);
                    if tb {
                        // B is n×k: dB = Gᵀ·A
                        gemm(true, false, n, m, k, g, va.data(), gb, true);
                    } else {
                        // B is k×n: dB = Aᵀ·G
                        gemm(true, false, k, m, n, va.data(), g, gb, true);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if want(v) {
                        let s = slot(grads, nodes, v);
                        s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if want(a) {
                    let s = slot(grads, nodes, a);
                    for ((x, &gy), &o) in s.iter_mut().zip(g).zip(vb) {
                        *x = *x + gy * o;
                    }
                }
                if want(b) {
                    let s = slot(grads, nodes, b);
                    for ((x, &gy), &o) in s.iter_mut().zip(g).zip(va) {
                        *x = *x + gy * o;
                    }
                }
            }
            &Op::AddRow { x, row } => {
                let c = nodes[x.0].value.last_dim();
                if want(x) {
                    let s = slot(grads, nodes, x);
                    s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
                if want(row) && c > 0 {
                    let s = slot(grads, nodes, row);
                    for chunk in g.chunks(c) {
                        s.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            &Op::MulRow { x, row } => {
                let c = nodes[x.0].value.last_dim();
                if c == 0 {
                    return;
                }
                let r = nodes[row.0].value.data();
                if want(x) {
                    let s = slot(grads, nodes, x);
                    for (sc, gc) in s.chunks_mut(c).zip(g.chunks(c)) {
                        for ((a, &b), &w) in sc.iter_mut().zip(gc).zip(r) {
                            *a = *a + b * w;
                        }
                    }
                }
                if want(row) {
                    let xv = nodes[x.0].value.data();
                    let s = slot(grads, nodes, row);
                    for (gc, xc) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((a, &b), &xv) in s.iter_mut().zip(gc).zip(xc) {
                            *a = *a + b * xv;
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                if want(x) {
                    let c = S::from_f64(c);
                    let s = slot(grads, nodes, x);
                    s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * c);
                }
            }
            &Op::AddScalar { x } => {
                if want(x) {
                    let s = slot(grads, nodes, x);
                    s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
            }
            &Op::Gelu { x } => {
                if want(x) {
                    let xv = nodes[x.0].value.data();
                    let s = slot(grads, nodes, x);
                    for ((a, &b), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *a = *a + b * gelu_grad_scalar(xi);
                    }
                }
            }
            &Op::LayerNorm { x, gain, bias } => {
                let (_, c) = rows_cols(&node.value);
                if c == 0 {
                    return;
                }
                let xhat = &node.saved;
                let rstd = &node.saved2;
                if let Some(b) = bias.filter(|&b| want(b)) {
                    let s = slot(grads, nodes, b);
                    for gc in g.chunks(c) {
                        s.iter_mut().zip(gc).for_each(|(a, &v)| *a = *a + v);
                    }
                }
                if let Some(w) = gain.filter(|&w| want(w)) {
                    let s = slot(grads, nodes, w);
                    for (gc, xc) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((a, &gv), &xv) in s.iter_mut().zip(gc).zip(xc) {
                            *a = *a + gv * xv;
                        }
                    }
                }
                if want(x) {
                    let gain_v = gain.map(|w| nodes[w.0].value.data());
                    let inv_n = S::one() / S::from_f64(c as f64);
                    let s = slot(grads, nodes, x);
                    let mut dxhat = vec![S::zero(); c];
                    for (((sc, gc), xc), &r) in s.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).zip(rstd) {
                        for (j, d) in dxhat.iter_mut().enumerate() {
                            *d = match gain_v {
                                Some(w) => gc[j] * w[j],
                                None => gc[j],
                            };
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() * inv_n;
                        let mean_dx = dxhat.iter().zip(xc).map(|(&d, &xv)| d * xv).sum::<S>() * inv_n;
                        for ((a, &d), &xv) in sc.iter_mut().zip(&dxhat).zip(xc) {
                            *a = *a + r * (d - mean_d - xv * mean_dx);
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if want(x) {
                    let c = node.value.last_dim();
                    if c == 0 {
                        return;
                    }
                    let y = node.value.data();
                    let s = slot(grads, nodes, x);
                    for ((sc, gc), yc) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<S>();
                        for ((a, &gv), &yv) in sc.iter_mut().zip(gc).zip(yc) {
                            *a = *a + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let d = nodes[table.0].value.last_dim();
                    let s = slot(grads, nodes, *table);
                    for (row, &id) in g.chunks(d.max(1)).zip(ids) {
                        s[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if want(p) {
                        let s = slot(grads, nodes, p);
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a = *a + b);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                if want(x) {
                    let c = nodes[x.0].value.last_dim();
                    let s = slot(grads, nodes, x);
                    s[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a = *a + b);
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.outer();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if want(p) {
                        let s = slot(grads, nodes, p);
                        for i in 0..rows {
                            let src = &g[i * total + off..i * total + off + w];
                            s[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a = *a + b);
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                if want(x) {
                    let c = nodes[x.0].value.last_dim();
                    let w = node.value.last_dim();
                    let rows = node.value.outer();
                    let s = slot(grads, nodes, x);
                    for i in 0..rows {
                        s[i * c + start..i * c + start + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let p = nodes[pred.0].value.data();
                let t = nodes[target.0].value.data();
                let n = p.len().max(1);
                let coef = g[0] * S::from_f64(2.0 / n as f64);
                if want(pred) {
                    let s = slot(grads, nodes, pred);
                    for ((a, &pv), &tv) in s.iter_mut().zip(p).zip(t) {
                        *a = *a + coef * (pv - tv);
                    }
                }
                if want(target) {
                    let s = slot(grads, nodes, target);
                    for ((a, &pv), &tv) in s.iter_mut().zip(p).zip(t) {
                        *a = *a - coef * (pv - tv);
                    }
                }
            }
        }
    }

    /// Current loss value for a scalar node.
    pub fn scalar(&self, v: Var) -> S {
        self.value(v).item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

    /// Max abs deviation between analytic and central-difference gradients,
    /// relative to the largest central-difference magnitude.
    fn check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
        let h = 1e-5;
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let l = build(&mut g, &vars).unwrap();
            g.scalar(l)
        };
        let mut worst = 0.0f64;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g.grad_or_zeros(vars[k]);
            let mut numeric = vec![0.0; t.numel()];
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let dev = analytic
                .data()
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            worst = worst.max(dev / scale);
        }
        worst
    }

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        rng.normal_tensor(shape.to_vec())
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        // accumulation across calls
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_rows(&[&[1.0, 2.0]]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let t = g.constant(Tensor::zeros(vec![1, 2]));
        let l = g.mse(y, t).unwrap();
        g.backward(l).unwrap();
        // d(mean((x*c)^2))/dx = x*c^2 with c frozen = x: [1*1, 2*4]
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 8.0]);
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.param(Tensor::scalar(1.0));
        let d2 = g2.detach(x2);
        let l2 = g2.mul(d2, d2).unwrap();
        g2.backward(l2).unwrap();
        assert!(g2.grad(x2).is_none());
    }

    #[test]
    fn repeated_id_doubles_embedding_grad() {
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]));
        let e = g.embedding(table, &[1, 1]).unwrap();
        let t = g.constant(Tensor::zeros(vec![2, 2]));
        let l = g.mse(e, t).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(table).unwrap();
        // each occurrence contributes 2*2/4 = 1 per element
        assert_eq!(gr.data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_is_reported_when_checking() {
        let mut g = Graph::<f64>::new().with_finite_checks(true);
        let x = g.constant(Tensor::scalar(f64::MAX));
        let r = g.scale(x, 10.0);
        assert!(matches!(r, Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let base = Rng::new(99);
        for seed in 0..5u64 {
            let mut rng = base.fork(seed);
            let a = rand(&mut rng, &[3, 4]);
            let b = rand(&mut rng, &[4, 5]);
            let bt = rand(&mut rng, &[5, 4]);
            let row = rand(&mut rng, &[4]);
            let y = rand(&mut rng, &[3, 5]);

            let cases: Vec<(Vec<Tensor<f64>>, Box<Build>)> = vec![
                (
                    vec![a.clone(), b.clone(), y.clone()],
                    Box::new(|g, v| {
                        let p = g.matmul(v[0], v[1])?;
                        g.mse(p, v[2])
                    }),
                ),
                (
                    vec![a.clone(), bt.clone(), y.clone()],
                    Box::new(|g, v| {
                        let p = g.matmul_nt(v[0], v[1])?;
                        g.mse(p, v[2])
                    }),
                ),
                (
                    vec![a.clone(), row.clone(), a.map(|x| x * 0.5)],
                    Box::new(|g, v| {
                        let p = g.add_row(v[0], v[1])?;
                        let q = g.mul_row(p, v[1])?;
                        let r = g.mul(q, v[2])?;
                        let s = g.add(r, v[0])?;
                        let s = g.scale(s, 0.7)?;
                        let s = g.add_scalar(s, 0.1)?;
                        let z = g.constant(Tensor::zeros(vec![3, 4]));
                        g.mse(s, z)
                    }),
                ),
                (
                    vec![a.clone(), row.clone(), row.map(|x| x + 1.0), a.map(|x| x.sin())],
                    Box::new(|g, v| {
                        let n = g.layer_norm(v[0], Some(v[2]), Some(v[1]), 1e-5)?;
                        let n = g.gelu(n)?;
                        g.mse(n, v[3])
                    }),
                ),
                (
                    vec![a.clone(), a.map(|x| x.cos())],
                    Box::new(|g, v| {
                        let s = g.softmax(v[0], Some(&[true, false, true, true]))?;
                        let s2 = g.softmax(v[0], None)?;
                        let s = g.add(s, s2)?;
                        g.mse(s, v[1])
                    }),
                ),
                (
                    vec![b.clone(), rand(&mut rng, &[3, 5])],
                    Box::new(|g, v| {
                        let e = g.embedding(v[0], &[2, 0, 2])?;
                        g.mse(e, v[1])
                    }),
                ),
                (
                    vec![a.clone(), rand(&mut rng, &[2, 4]), rand(&mut rng, &[3, 6])],
                    Box::new(|g, v| {
                        let c = g.concat_rows(&[v[0], v[1]])?;
                        let s = g.slice_rows(c, 1, 3)?;
                        let l = g.slice_cols(s, 1, 2)?;
                        let r = g.slice_cols(s, 0, 4)?;
                        let cc = g.concat_cols(&[r, l])?;
                        g.mse(cc, v[2])
                    }),
                ),
            ];
            for (i, (ins, f)) in cases.iter().enumerate() {
                let err = check(ins, f.as_ref());
                assert!(err < 1e-4, "case {i} seed {seed}: rel err {err}");
            }
        }
    }
}
