//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when an
//! op is appended, and [`Graph::backward`] walks the tape once in reverse.
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction. Leaves can borrow their values, which lets a
//! model hand its parameters to a graph without copying them.
//!
//! Gradients only flow into nodes that (transitively) depend on a leaf
//! created with `requires_grad = true`; frozen weights therefore cost no
//! gradient work of their own.

use std::borrow::Cow;

use crate::error::{dim, Error, Result};
use crate::tensor::{
    log_sum_exp, matmul_into, matmul_nt_into, matmul_tn_into, softmax_row, Tensor,
};

/// Handle to a node on a [`Graph`].
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
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Abs(Var),
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    LayerNorm(Var),
    Gelu(Var),
    Row(Var, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ScaleColBlocks(Var, Var),
    Embedding(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Vec<bool>),
    SumOffDiag(Var),
    MeanRows(Var),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    // Op-specific saved state (layer-norm inverse std, softmax probabilities).
    saved: Vec<f64>,
}

impl Node<'_> {
    fn dims2(&self) -> (usize, usize) {
        let c = *self.shape.last().unwrap();
        (self.value.len() / c, c)
    }
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Tensor::new(self.shapes[v.0].clone(), g.to_vec()).ok()
    }

    /// Number of leaves that received a gradient buffer.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The recording tape. One backward pass is allowed per graph.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf borrowing a tensor's storage.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), requires_grad)
    }

    /// Leaf borrowing a contiguous slice, viewed with the given shape.
    pub fn leaf_slice(
        &mut self,
        data: &'a [f64],
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(dim("leaf_slice", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push_leaf(Cow::Borrowed(data), shape, requires_grad))
    }

    /// Leaf owning its values.
    pub fn leaf_owned(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(Cow::Owned(t.into_data()), shape, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_owned(t, false)
    }

    fn push_leaf(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, saved: Vec<f64>) -> Var {
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::ScaleColBlocks(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::CausalSoftmax(a)
            | Op::LayerNorm(a)
            | Op::Gelu(a)
            | Op::Row(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Embedding(a, _)
            | Op::CrossEntropy(a, _, _)
            | Op::SumOffDiag(a)
            | Op::MeanRows(a) => vec![*a],
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("graph nodes hold consistent shapes")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].dims2()
    }

    // ---- operations ----------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), Vec::new()))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the shape of a dense layer with weight `[d_out, d_in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], Op::MatMulNt(a, b), Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b), Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b), Vec::new()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(a), Vec::new())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Abs(a), Vec::new())
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let mut out = vec![0.0; r * c];
        let x = self.value(a);
        for i in 0..r {
            softmax_row(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::SoftmaxRows(a), Vec::new())
    }

    /// Row softmax of a square score matrix where row `t` only sees
    /// columns `0..=t`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if r != c {
            return Err(dim("causal_softmax", format!("expected square, got [{r},{c}]")));
        }
        let mut out = vec![0.0; r * c];
        let x = self.value(a);
        for i in 0..r {
            softmax_row(&x[i * c..i * c + i + 1], &mut out[i * c..i * c + i + 1]);
        }
        Ok(self.push(out, vec![r, c], Op::CausalSoftmax(a), Vec::new()))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        let mut inv = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + EPS).sqrt();
            inv[i] = s;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::LayerNorm(a), inv)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu(a), Vec::new())
    }

    /// Row `i` of a 2-D node as a `[1, c]` node.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if i >= r {
            return Err(dim("row", format!("row {i} of {r}")));
        }
        let out = self.value(a)[i * c..(i + 1) * c].to_vec();
        Ok(self.push(out, vec![1, c], Op::Row(a, i), Vec::new()))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if len == 0 || start + len > r {
            return Err(dim("slice_rows", format!("{start}+{len} of {r}")));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(out, vec![len, c], Op::SliceRows(a, start), Vec::new()))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if len == 0 || start + len > c {
            return Err(dim("slice_cols", format!("{start}+{len} of {c}")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, vec![r, len], Op::SliceCols(a, start), Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim("concat_cols", "no inputs"));
        };
        let r = self.dims2(first).0;
        if parts.iter().any(|&p| self.dims2(p).0 != r) {
            return Err(dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims2(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(out, vec![r, total], Op::ConcatCols(parts.to_vec()), Vec::new()))
    }

    /// Multiplies column block `j` (width `cols / w.len()`) of `x` by `w[j]`.
    /// This is how expert weights scale each expert's rank slice.
    pub fn scale_col_blocks(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let n = self.value(w).len();
        if c % n != 0 {
            return Err(dim("scale_col_blocks", format!("{c} columns into {n} blocks")));
        }
        let width = c / n;
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..n {
                for k in j * width..(j + 1) * width {
                    out[i * c + k] = xv[i * c + k] * wv[j];
                }
            }
        }
        Ok(self.push(out, vec![r, c], Op::ScaleColBlocks(x, w), Vec::new()))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        if ids.is_empty() {
            return Err(dim("embedding", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(dim("embedding", format!("id {bad} out of vocabulary {v}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(out, vec![ids.len(), d], Op::Embedding(table, ids.to_vec()), Vec::new()))
    }

    /// Mean negative log-likelihood of `targets` over positions where
    /// `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits);
        if targets.len() != t || mask.len() != t {
            return Err(dim(
                "cross_entropy",
                format!("{t} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(bad) = targets.iter().zip(mask).find(|(&y, &m)| m && y >= v) {
            return Err(dim("cross_entropy", format!("target {} out of {v}", bad.0)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("no masked-in positions".into()));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &x[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[targets[i]];
            softmax_row(row, &mut probs[i * v..(i + 1) * v]);
        }
        let loss = total / count as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy(logits, targets.to_vec(), mask.to_vec()),
            probs,
        ))
    }

    /// Sum of the off-diagonal entries of a square matrix.
    pub fn sum_off_diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if r != c {
            return Err(dim("sum_off_diag", format!("expected square, got [{r},{c}]")));
        }
        let x = self.value(a);
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..c {
                if i != j {
                    s += x[i * c + j];
                }
            }
        }
        Ok(self.push(vec![s], vec![1], Op::SumOffDiag(a), Vec::new()))
    }

    /// Column means, `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let x = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(out, vec![1, c], Op::MeanRows(a), Vec::new())
    }

    fn same_len(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- backward ------------------------------------------------------

    /// Propagates d`loss`/d`leaf` to every leaf created with
    /// `requires_grad`. Leaves with no path to `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut leaf_grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn backprop_node(
        &self,
        index: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let node = &nodes[index];
        // Accumulates into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {
                let slot = &mut leaf_grads[index];
                match slot {
                    Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
                    None => *slot = Some(g.to_vec()),
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].dims2();
                let n = nodes[b.0].dims2().1;
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |da| matmul_nt_into(g, bv, m, n, k, da));
                acc(*b, &mut |db| matmul_tn_into(av, g, m, k, n, db));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].dims2();
                let n = nodes[b.0].dims2().0;
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |da| matmul_into(g, bv, m, n, k, da));
                acc(*b, &mut |db| matmul_tn_into(g, av, m, n, k, db));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv.iter()) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av.iter()) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| {
                for (d, x) in da.iter_mut().zip(g) {
                    *d += c * x;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Abs(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for ((d, x), v) in da.iter_mut().zip(g).zip(av.iter()) {
                        *d += x * v.signum() * f64::from(u8::from(*v != 0.0));
                    }
                });
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let (r, c) = node.dims2();
                let y = &node.value;
                acc(*a, &mut |da| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            da[i * c + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let (r, c) = node.dims2();
                let y = &node.value;
                let inv = &node.saved;
                acc(*a, &mut |da| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for k in 0..c {
                            da[i * c + k] += inv[i] * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for ((d, x), v) in da.iter_mut().zip(g).zip(av.iter()) {
                        *d += x * gelu_grad(*v);
                    }
                });
            }
            Op::Row(a, i) => {
                let c = node.value.len();
                acc(*a, &mut |da| add_into(&mut da[i * c..(i + 1) * c], g));
            }
            Op::SliceRows(a, start) => {
                let c = nodes[a.0].dims2().1;
                acc(*a, &mut |da| add_into(&mut da[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (r, len) = node.dims2();
                let c = nodes[a.0].dims2().1;
                acc(*a, &mut |da| {
                    for i in 0..r {
                        add_into(
                            &mut da[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.dims2();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].dims2().1;
                    acc(*p, &mut |dp| {
                        for i in 0..r {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::ScaleColBlocks(x, w) => {
                let (r, c) = node.dims2();
                let wv = &nodes[w.0].value;
                let xv = &nodes[x.0].value;
                let n = wv.len();
                let width = c / n;
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..n {
                            for k in j * width..(j + 1) * width {
                                dx[i * c + k] += g[i * c + k] * wv[j];
                            }
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for i in 0..r {
                        for j in 0..n {
                            let mut s = 0.0;
                            for k in j * width..(j + 1) * width {
                                s += g[i * c + k] * xv[i * c + k];
                            }
                            dw[j] += s;
                        }
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = node.dims2().1;
                acc(*table, &mut |dt| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy(logits, targets, mask) => {
                let (t, v) = nodes[logits.0].dims2();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let probs = &node.saved;
                let scale = g[0] / count;
                acc(*logits, &mut |dl| {
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        for k in 0..v {
                            dl[i * v + k] += scale * probs[i * v + k];
                        }
                        dl[i * v + targets[i]] -= scale;
                    }
                });
            }
            Op::SumOffDiag(a) => {
                let c = nodes[a.0].dims2().1;
                acc(*a, &mut |da| {
                    for (idx, d) in da.iter_mut().enumerate() {
                        if idx / c != idx % c {
                            *d += g[0];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = nodes[a.0].dims2();
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for k in 0..c {
                            da[i * c + k] += g[k] / r as f64;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_all_ones() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x, true);
        let s = g.sum(xv);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn constant_loss_writes_no_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let a = Tensor::filled(&[2], 1.0);
        let b = Tensor::filled(&[3], 1.0);
        let mut g = Graph::new();
        let av = g.leaf(&a, true);
        let bv = g.leaf(&b, true);
        let s = g.sum(av);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(bv).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn second_backward_and_non_scalar_are_errors() {
        let a = Tensor::filled(&[2], 1.0);
        let mut g = Graph::new();
        let av = g.leaf(&a, true);
        assert!(matches!(g.backward(av), Err(Error::Autodiff(_))));
        let s = g.sum(av);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn softmax_of_zero_row_is_uniform_and_shift_invariant() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let s = g.softmax_rows(z);
        assert_eq!(g.value(s), &[0.25; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let shifted =
            Tensor::new(vec![3, 5], x.data().iter().map(|v| v + 123.25).collect()).unwrap();
        let a = g.leaf(&x, false);
        let b = g.leaf(&shifted, false);
        let sa = g.softmax_rows(a);
        let sb = g.softmax_rows(b);
        let diff = g
            .value(sa)
            .iter()
            .zip(g.value(sb))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn softmax_matches_exp_over_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 7], 1.5, &mut rng);
        let mut g = Graph::new();
        let v = g.leaf(&x, false);
        let s = g.softmax_rows(v);
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (got, xi) in g.value(s).iter().zip(x.data()) {
            assert!((got - xi.exp() / denom).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 256]));
        let ce = g.cross_entropy(uniform, &[1, 2, 3], &[true; 3]).unwrap();
        assert!((g.scalar(ce) - 256f64.ln()).abs() < 1e-12);

        let mut peaked = Tensor::zeros(&[1, 10]);
        peaked.data_mut()[4] = 50.0;
        let p = g.constant(peaked);
        let ce = g.cross_entropy(p, &[4], &[true]).unwrap();
        assert!(g.scalar(ce) < 1e-9);

        let e = g.cross_entropy(uniform, &[1, 2, 3], &[false; 3]);
        assert!(matches!(e, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 6], 3.0, &mut rng);
        let targets = [0, 5, 2, 3];
        let mask = [true, false, true, true];
        let mut g = Graph::new();
        let v = g.leaf(&x, false);
        let ce = g.cross_entropy(v, &targets, &mask).unwrap();
        let mut want = 0.0;
        for i in [0, 2, 3] {
            let row = x.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[targets[i]];
        }
        want /= 3.0;
        assert!((g.scalar(ce) - want).abs() <= 1e-10);
    }

    #[test]
    fn softmax_cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let err = finite_diff_check(&[x, w], 1e-5, |g, p| {
            let h = g.matmul(p[0], p[1])?;
            let s = g.softmax_rows(h);
            let ln = g.layer_norm(s);
            let ge = g.gelu(ln);
            g.cross_entropy(ge, &[1, 0, 4], &[true, true, false])
        })
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn every_structural_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let table = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let err = finite_diff_check(&[a, b, w, table], 1e-5, |g, p| {
            let s = g.matmul_nt(p[0], p[1])?; // [4,4]
            let cs = g.causal_softmax(s)?;
            let off = g.sum_off_diag(cs)?;
            let left = g.slice_cols(p[0], 0, 3)?;
            let right = g.slice_cols(p[1], 3, 3)?;
            let cat = g.concat_cols(&[right, left])?;
            let blocks = g.scale_col_blocks(cat, p[2])?;
            let emb = g.embedding(p[3], &[4, 0, 4, 2])?;
            let mix = g.mul(blocks, emb)?;
            let r = g.row(mix, 2)?;
            let rows = g.slice_rows(mix, 1, 2)?;
            let m = g.mean_rows(rows);
            let ab = g.abs(m);
            let t1 = g.sum(ab);
            let t2 = g.sum(r);
            let t3 = g.scale(off, 0.7);
            let u = g.add(t1, t2)?;
            g.add(u, t3)
        })
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn independent_subgraphs_have_separate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);

        let solo = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(t, true);
            let s = g.softmax_rows(v);
            let q = g.mul(s, s).unwrap();
            let l = g.sum(q);
            g.backward(l).unwrap().tensor(v).unwrap()
        };
        let mut g = Graph::new();
        let av = g.leaf(&a, true);
        let bv = g.leaf(&b, true);
        let parts: Vec<Var> = [av, bv]
            .iter()
            .map(|&v| {
                let s = g.softmax_rows(v);
                let q = g.mul(s, s).unwrap();
                g.sum(q)
            })
            .collect();
        let total = g.add(parts[0], parts[1]).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.tensor(av).unwrap(), solo(&a));
        assert_eq!(grads.tensor(bv).unwrap(), solo(&b));
    }
}
