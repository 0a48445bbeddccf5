//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass builds a fresh [`Graph`]. Nodes are appended in creation
//! order, so walking the node list backwards is a valid topological order and
//! every node is visited exactly once during [`Graph::backward`].

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, b_t: bool },
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    MulConst { a: usize, c: Vec<f64> },
    AddRow { x: usize, bias: usize },
    MulRow { x: usize, v: usize },
    Scale(usize, f64),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    AddN(Vec<usize>),
    MeanN(Vec<usize>),
    Gather { table: usize, ids: Vec<usize> },
    Reshape(usize),
    SumAll(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::MulRow { x, v } => vec![*x, *v],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MulConst { a, .. }
            | Op::SliceCols { a, .. } => vec![*a],
            Op::ConcatCols(v) | Op::AddN(v) | Op::MeanN(v) => v.clone(),
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

/// Which keys a query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    /// Keys at column index `>= key_len` are padding.
    pub key_len: usize,
    /// Row `j` only sees columns `<= j`.
    pub causal: bool,
}

impl AttnMask {
    pub fn allows(&self, row: usize, col: usize) -> bool {
        col < self.key_len && (!self.causal || col <= row)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.id], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn raw(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient (features, encodings, masks).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check_same(&self, op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(())
    }

    fn unary(&self, a: Var<'_>, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let value = {
            let av = self.value(a.id);
            let data = av.data().iter().map(|&x| f(x)).collect();
            Tensor::new(av.shape(), data).expect("same shape")
        };
        self.push(value, op)
    }

    /// Runs reverse-mode accumulation from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(Error::shape("backward", nodes[output.id].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, b_t } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.rows(), av.cols());
                    let n = out.cols();
                    if nodes[*a].needs_grad {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm_acc(m, n, k, &g, false, bv.data(), !*b_t, ga);
                    }
                    if nodes[*b].needs_grad {
                        let gb = acc(&mut grads, *b, n * k);
                        if *b_t {
                            gemm_acc(n, m, k, &g, true, av.data(), false, gb);
                        } else {
                            gemm_acc(k, m, n, av.data(), true, &g, false, gb);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.rows(), out.cols());
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::MulConst { a, c } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), ci) in ga.iter_mut().zip(&g).zip(c) {
                        *d += gi * ci;
                    }
                }
                Op::AddRow { x, bias } => {
                    let cols = out.cols();
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let gb = acc(&mut grads, *bias, cols);
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
                Op::MulRow { x, v } => {
                    let cols = out.cols();
                    let xv = nodes[*x].value.data();
                    let vv = nodes[*v].value.data();
                    let gx = acc(&mut grads, *x, g.len());
                    for (grow, dx) in g.chunks(cols).zip(gx.chunks_mut(cols)) {
                        for j in 0..cols {
                            dx[j] += grow[j] * vv[j];
                        }
                    }
                    let gv = acc(&mut grads, *v, cols);
                    for (grow, xrow) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for j in 0..cols {
                            gv[j] += grow[j] * xrow[j];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (d, gi) in ga.iter_mut().zip(&g) {
                        *d += gi * s;
                    }
                }
                Op::Relu(a) => {
                    let av = nodes[*a].value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), x) in ga.iter_mut().zip(&g).zip(av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let cols = out.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((grow, yrow), drow) in
                        g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for j in 0..cols {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let cols = out.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((grow, yrow), drow) in
                        g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        for j in 0..cols {
                            drow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = out.cols();
                    let gv = nodes[*gain].value.data();
                    {
                        let dgain = acc(&mut grads, *gain, cols);
                        for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                dgain[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let dbias = acc(&mut grads, *bias, cols);
                        for grow in g.chunks(cols) {
                            add_into(dbias, grow);
                        }
                    }
                    let gx = acc(&mut grads, *x, g.len());
                    let n = cols as f64;
                    for (r, ((grow, hrow), drow)) in g
                        .chunks(cols)
                        .zip(xhat.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let scale = inv_std[r] / n;
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            drow[j] += scale * (n * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        let gp = acc(&mut grads, p, rows * pc);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * pc..(r + 1) * pc],
                                &g[r * total + offset..r * total + offset + pc],
                            );
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, width) = (out.rows(), out.cols());
                    let src_cols = nodes[*a].value.cols();
                    let ga = acc(&mut grads, *a, rows * src_cols);
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * src_cols + start..r * src_cols + start + width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        add_into(acc(&mut grads, p, g.len()), &g);
                    }
                }
                Op::MeanN(parts) => {
                    let w = 1.0 / parts.len() as f64;
                    for &p in parts {
                        let gp = acc(&mut grads, p, g.len());
                        for (d, gi) in gp.iter_mut().zip(&g) {
                            *d += gi * w;
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let cols = out.cols();
                    let tlen = nodes[*table].value.numel();
                    let gt = acc(&mut grads, *table, tlen);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Reshape(a) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                }
                Op::SumAll(a) => {
                    let n = nodes[*a].value.numel();
                    let ga = acc(&mut grads, *a, n);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn matmul_impl(self, other: Var<'g>, b_t: bool) -> Result<Var<'g>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = a.dims2()?;
            let (kb, n) = if b_t {
                let (n, kb) = b.dims2()?;
                (kb, n)
            } else {
                b.dims2()?
            };
            if k != kb || a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(m, k, n, a.data(), false, b.data(), b_t, &mut out);
            Tensor::new(&[m, n], out)?
        };
        Ok(self.graph.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                b_t,
            },
        ))
    }

    /// `self · other` for an m×k and a k×n matrix.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` where `other` is n×k.
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, true)
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let value = self.value().transpose()?;
        Ok(self.graph.push(value, Op::Transpose(self.id)))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check_same("add", &self, &other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.graph.push(value, Op::Add(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check_same("mul", &self, &other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.graph.push(value, Op::Mul(self.id, other.id)))
    }

    /// Elementwise product with a tensor that takes no gradient.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'g>> {
        let value = {
            let a = self.value();
            if a.shape() != c.shape() {
                return Err(Error::shape("mul_const", a.shape(), c.shape()));
            }
            let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.graph.push(
            value,
            Op::MulConst {
                a: self.id,
                c: c.data().to_vec(),
            },
        ))
    }

    /// `self + 1·biasᵀ`: adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let (x, b) = (self.value(), bias.value());
            let (_, n) = x.dims2()?;
            if b.numel() != n {
                return Err(Error::shape("add_row", x.shape(), b.shape()));
            }
            let data = x
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b.data()).map(|(v, bi)| v + bi))
                .collect();
            Tensor::new(x.shape(), data)?
        };
        Ok(self.graph.push(
            value,
            Op::AddRow {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// `self ⊙ 1·vᵀ`: scales every row elementwise by a length-n vector.
    pub fn mul_row(self, v: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let (x, w) = (self.value(), v.value());
            let (_, n) = x.dims2()?;
            if w.numel() != n {
                return Err(Error::shape("mul_row", x.shape(), w.shape()));
            }
            let data = x
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(w.data()).map(|(a, b)| a * b))
                .collect();
            Tensor::new(x.shape(), data)?
        };
        Ok(self.graph.push(value, Op::MulRow { x: self.id, v: v.id }))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.graph.unary(self, |x| x * s, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.unary(self, |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'g>> {
        self.softmax_rows_masked(None)
    }

    /// Row softmax with disallowed entries forced to probability zero.
    pub fn softmax_rows_masked(self, mask: Option<AttnMask>) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            if x.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("NaN entering softmax".into()));
            }
            let mut out = x.data().to_vec();
            for (i, row) in out.chunks_mut(c).enumerate() {
                if let Some(m) = mask {
                    for (j, v) in row.iter_mut().enumerate() {
                        if !m.allows(i, j) {
                            *v = f64::NEG_INFINITY;
                        }
                    }
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Input(format!("softmax row {i} is fully masked")));
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::new(&[r, c], out)?
        };
        Ok(self.graph.push(value, Op::Softmax(self.id)))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            if x.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("NaN entering log_softmax".into()));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(&[r, c], out)?
        };
        Ok(self.graph.push(value, Op::LogSoftmax(self.id)))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (value, xhat, inv_std) = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            if c < 2 {
                return Err(Error::shape("layer_norm", x.shape(), &[r, 2]));
            }
            let (gv, bv) = (gain.value(), bias.value());
            if gv.numel() != c || bv.numel() != c {
                return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
            }
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for (i, row) in x.data().chunks(c).enumerate() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..c {
                    let h = (row[j] - mean) * inv;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(&[r, c], out)?, xhat, inv_std)
        };
        Ok(self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let value = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            if start > end || end > c {
                return Err(Error::Index { index: end, size: c });
            }
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for row in x.data().chunks(c) {
                out.extend_from_slice(&row[start..end]);
            }
            Tensor::new(&[r, w], out)?
        };
        Ok(self.graph.push(value, Op::SliceCols { a: self.id, start }))
    }

    /// Splits d columns into `heads` contiguous blocks of d/heads columns.
    pub fn split_heads(self, heads: usize) -> Result<Vec<Var<'g>>> {
        let d = self.cols();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let w = d / heads;
        (0..heads).map(|h| self.slice_cols(h * w, (h + 1) * w)).collect()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.to_tensor().reshape(shape)?;
        Ok(self.graph.push(value, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id))
    }
}

/// Concatenates matrices with equal row counts along the last dimension.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
    let graph = first.graph;
    let value = {
        let rows = first.rows();
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for v in &vals {
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        Tensor::new(&[rows, total], out)?
    };
    Ok(graph.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
}

/// Inverse of [`Var::split_heads`].
pub fn merge_heads<'g>(heads: &[Var<'g>]) -> Result<Var<'g>> {
    concat_cols(heads)
}

fn reduce_n<'g>(parts: &[Var<'g>], op: &'static str, mean: bool) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input(format!("{op} of zero tensors")))?;
    let graph = first.graph;
    let value = {
        let shape = first.shape();
        let mut acc = vec![0.0; first.value().numel()];
        for p in parts {
            let v = p.value();
            if v.shape() != shape.as_slice() {
                return Err(Error::shape(op, &shape, v.shape()));
            }
            add_into(&mut acc, v.data());
        }
        if mean {
            let w = 1.0 / parts.len() as f64;
            acc.iter_mut().for_each(|v| *v *= w);
        }
        Tensor::new(&shape, acc)?
    };
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(value, if mean { Op::MeanN(ids) } else { Op::AddN(ids) }))
}

/// Elementwise sum of equally-shaped tensors.
pub fn add_n<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    reduce_n(parts, "add_n", false)
}

/// Elementwise mean of equally-shaped tensors.
pub fn mean_over<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    reduce_n(parts, "mean_over", true)
}

/// Gathers rows of `table` (L×d). Gradients flow to the table only.
pub fn embedding_lookup<'g>(table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
    let value = {
        let t = table.value();
        let (rows, cols) = t.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, size: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        Tensor::new(&[ids.len(), cols], out)?
    };
    Ok(table.graph.push(
        value,
        Op::Gather {
            table: table.id,
            ids: ids.to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat<'g>(g: &'g Graph, rows: &[Vec<f64>]) -> Var<'g> {
        g.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn matmul_identity_and_small() {
        let g = Graph::new();
        let i = mat(&g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = mat(&g, &[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = mat(&g, &[vec![1.0, 2.0]]);
        let c = mat(&g, &[vec![3.0], vec![4.0]]);
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_saturation() {
        let g = Graph::new();
        let x = mat(&g, &[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, 0.0]]);
        let y = x.softmax_rows().unwrap();
        let y = y.value();
        for v in &y.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.data()[3] - 1.0).abs() < 1e-12);
        assert!(y.data()[4] < 1e-12 && y.data()[5] < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let g = Graph::new();
        let x = mat(&g, &[vec![f64::NAN, 0.0]]);
        assert!(matches!(x.softmax_rows(), Err(Error::Numeric(_))));
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 3]));
        let mask = AttnMask { key_len: 3, causal: true };
        let y = x.softmax_rows_masked(Some(mask)).unwrap();
        let y = y.value();
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Graph::new();
        let gain = g.leaf(Tensor::ones(&[2]));
        let bias = g.leaf(Tensor::zeros(&[2]));
        let x = mat(&g, &[vec![1.0, -1.0], vec![5.0, 5.0]]);
        let y = x.layer_norm(gain, bias, 1e-12).unwrap();
        let y = y.value();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn relu_concat_shapes() {
        let g = Graph::new();
        let x = mat(&g, &[vec![-1.0, 0.0, 2.0]]);
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let a = g.leaf(Tensor::zeros(&[4, 3]));
        let b = g.leaf(Tensor::zeros(&[4, 5]));
        assert_eq!(concat_cols(&[a, b]).unwrap().shape(), vec![4, 8]);
    }

    #[test]
    fn split_merge_roundtrip() {
        let g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.leaf(Tensor::new(&[3, 8], data).unwrap());
        let heads = x.split_heads(4).unwrap();
        assert_eq!(heads[1].value().row(0), &[2.0, 3.0]);
        let back = merge_heads(&heads).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let g = Graph::new();
        let table = g.leaf(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(rows.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let grads = g.backward(rows.sum()).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(embedding_lookup(table, &[3]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }
}
