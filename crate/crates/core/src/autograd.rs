//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and the
//! backward sweep simply walks it in reverse. Parameters live outside the
//! graph in a [`ParamSet`]; each parameter used in a forward pass becomes a
//! single leaf node, and [`Graph::accumulate_grads`] adds the leaf gradients
//! back into the set after [`Graph::backward`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{dim_err, MomeError, Result};
use crate::linalg::{gemm, matmul, View};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse attention visibility: for each query row, the sorted key columns
/// it may attend to. Every other column is blocked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    cols: usize,
    open: Vec<Vec<u32>>,
}

impl AttnMask {
    pub fn new(cols: usize, mut open: Vec<Vec<u32>>) -> Result<Self> {
        for row in &mut open {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&c| c as usize >= cols) {
                return Err(dim_err!("mask column out of range (cols = {cols})"));
            }
        }
        Ok(Self { cols, open })
    }

    /// Mask with every key visible to every row.
    pub fn all_open(rows: usize, cols: usize) -> Self {
        let row: Vec<u32> = (0..cols as u32).collect();
        Self {
            cols,
            open: vec![row; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.open.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn open(&self, row: usize) -> &[u32] {
        &self.open[row]
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.open[row].binary_search(&(col as u32)).is_err()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            cols: self.cols,
            open: rows.iter().map(|&r| self.open[r].clone()).collect(),
        }
    }

    /// Rows `rows`, keeping only columns in `cols` renumbered from zero.
    pub fn restrict(&self, rows: &[usize], cols: std::ops::Range<usize>) -> Self {
        let (lo, hi) = (cols.start as u32, cols.end as u32);
        Self {
            cols: cols.len(),
            open: rows
                .iter()
                .map(|&r| {
                    self.open[r]
                        .iter()
                        .filter(|&&c| c >= lo && c < hi)
                        .map(|&c| c - lo)
                        .collect()
                })
                .collect(),
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionSaved>),
    FocalLoss {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    mask: Option<Arc<AttnMask>>,
    /// Dense: `heads x n x m`. Sparse: per head, the concatenated open-row
    /// probabilities in mask order.
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A single forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(dim_err!("{what}: expected a matrix, got shape {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

/// Clamp bounds applied to probabilities inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-7;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked free input (gradients are kept but not routed to a ParamSet).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    /// Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param, !params.is_frozen(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let id = params.expect(name)?;
        Ok(self.param(params, id))
    }

    /// The parameters that took part in this graph.
    pub fn used_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d(self.value(a), "matmul lhs")?;
        let (k2, n) = check_2d(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul: inner dims {k} and {k2} disagree"));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = check_2d(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul_nt: inner dims {k} and {k2} disagree"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            View::row_major(k),
            self.value(b).data(),
            View::transposed(k),
            0.0,
            &mut out,
            View::row_major(n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = check_2d(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = check_2d(self.value(a), "add_row")?;
        if self.value(row).numel() != c {
            return Err(dim_err!(
                "add_row: row vector of {} values for {c} columns",
                self.value(row).numel()
            ));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    // ---- normalisation -----------------------------------------------------

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalisation with per-column gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = check_2d(self.value(x), "layernorm")?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(dim_err!("layernorm: gain/bias must have {c} values"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
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

    // ---- structure ---------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_rows: no inputs"));
        }
        let c = check_2d(self.value(parts[0]), "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = check_2d(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(dim_err!("concat_rows: column counts {c} and {pc} differ"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_cols: no inputs"));
        }
        let r = check_2d(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = check_2d(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(dim_err!("concat_cols: row counts {r} and {pr} differ"));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = vec![0.0; r * c];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * c + off..i * c + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = check_2d(self.value(a), "slice_rows")?;
        if start > end || end > r {
            return Err(dim_err!("slice_rows: {start}..{end} out of 0..{r}"));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = check_2d(self.value(a), "slice_cols")?;
        if start > end || end > c {
            return Err(dim_err!("slice_cols: {start}..{end} out of 0..{c}"));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![r, w], data)?, Op::SliceCols(a, start), rg))
    }

    /// Output row `i` is input row `idx[i]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = check_2d(self.value(a), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim_err!("gather_rows: index {bad} out of 0..{r}"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ---- attention ---------------------------------------------------------

    /// Multi-head scaled dot-product attention core on already-projected
    /// `q: n x d`, `k: m x d`, `v: m x d`. Head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads`. Blocked keys receive zero weight; a row
    /// with no visible key produces a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Arc<AttnMask>>) -> Result<Var> {
        let (n, d) = check_2d(self.value(q), "attention q")?;
        let (m, dk) = check_2d(self.value(k), "attention k")?;
        let (mv, dv) = check_2d(self.value(v), "attention v")?;
        if dk != d || dv != d || mv != m {
            return Err(dim_err!(
                "attention: q {n}x{d}, k {m}x{dk}, v {mv}x{dv} are inconsistent"
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(MomeError::Config(format!(
                "head count {heads} does not divide model dim {d}"
            )));
        }
        if let Some(mk) = &mask {
            if mk.rows() != n || mk.cols() != m {
                return Err(dim_err!(
                    "attention mask is {}x{}, expected {n}x{m}",
                    mk.rows(),
                    mk.cols()
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(heads);
        match &mask {
            None => {
                for h in 0..heads {
                    let off = h * dh;
                    let mut s = vec![0.0; n * m];
                    gemm(
                        n,
                        dh,
                        m,
                        scale,
                        qd,
                        View::row_major(d).at(off),
                        kd,
                        View::transposed(d).at(off),
                        0.0,
                        &mut s,
                        View::row_major(m),
                    );
                    if m > 0 {
                        for row in s.chunks_mut(m) {
                            softmax_in_place(row);
                        }
                    }
                    gemm(
                        n,
                        m,
                        dh,
                        1.0,
                        &s,
                        View::row_major(m),
                        vd,
                        View::row_major(d).at(off),
                        0.0,
                        &mut out,
                        View::row_major(d).at(off),
                    );
                    probs.push(s);
                }
            }
            Some(mk) => {
                let total: usize = (0..n).map(|i| mk.open(i).len()).sum();
                for h in 0..heads {
                    let off = h * dh;
                    let mut p = Vec::with_capacity(total);
                    for i in 0..n {
                        let keys = mk.open(i);
                        if keys.is_empty() {
                            continue;
                        }
                        let qi = &qd[i * d + off..i * d + off + dh];
                        let start = p.len();
                        for &j in keys {
                            let kj = &kd[j as usize * d + off..j as usize * d + off + dh];
                            p.push(dot(qi, kj) * scale);
                        }
                        softmax_in_place(&mut p[start..]);
                        let oi = &mut out[i * d + off..i * d + off + dh];
                        for (w, &j) in p[start..].iter().zip(keys) {
                            let vj = &vd[j as usize * d + off..j as usize * d + off + dh];
                            for (o, x) in oi.iter_mut().zip(vj) {
                                *o += w * x;
                            }
                        }
                    }
                    probs.push(p);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                scale,
                mask,
                probs,
            })),
            rg,
        ))
    }

    // ---- losses ------------------------------------------------------------

    /// Sigmoid focal loss summed over every element of `logits`.
    pub fn focal_loss(&mut self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        if targets.shape() != self.shape(logits) {
            return Err(dim_err!(
                "focal_loss: targets {:?} vs logits {:?}",
                targets.shape(),
                self.shape(logits)
            ));
        }
        let total = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| focal_term(sigmoid(x), t, alpha, gamma))
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                logits,
                targets: targets.data().to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Softmax cross entropy `-Σ y log softmax(x)` summed over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if targets.shape() != self.shape(logits) {
            return Err(dim_err!(
                "cross entropy: targets {:?} vs logits {:?}",
                targets.shape(),
                self.shape(logits)
            ));
        }
        let c = self.value(logits).cols();
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, (x, y)) in probs
            .chunks_mut(c)
            .zip(self.value(logits).data().chunks(c).zip(targets.data().chunks(c)))
        {
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += x.iter().zip(y).map(|(xv, yv)| -yv * (xv - lse)).sum::<f64>();
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(MomeError::Usage(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(MomeError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Add the gradient of every unfrozen parameter leaf into `params`.
    pub fn accumulate_grads(&self, params: &mut ParamSet) {
        for (&id, &v) in &self.params {
            if params.is_frozen(id) {
                continue;
            }
            if let Some(g) = &self.nodes[v.0].grad {
                for (acc, x) in params.grad_mut(id).data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn acc_add(&mut self, v: Var, delta: &[f64]) {
        self.acc(v, |g| {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so the other nodes can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        View::row_major(n),
                        self.value(*b).data(),
                        View::transposed(n),
                        0.0,
                        &mut da,
                        View::row_major(k),
                    );
                    self.acc_add(*a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.value(*a).data(),
                        View::transposed(k),
                        g,
                        View::row_major(n),
                        0.0,
                        &mut db,
                        View::row_major(n),
                    );
                    self.acc_add(*b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ, A: m x k, B: n x k.
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        View::row_major(n),
                        self.value(*b).data(),
                        View::row_major(k),
                        0.0,
                        &mut da,
                        View::row_major(k),
                    );
                    self.acc_add(*a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        g,
                        View::transposed(n),
                        self.value(*a).data(),
                        View::row_major(k),
                        0.0,
                        &mut db,
                        View::row_major(k),
                    );
                    self.acc_add(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                self.acc(*a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_add(*a, g);
                self.acc_add(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_add(*a, g);
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.acc_add(*a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.acc_add(*b, &d);
                }
            }
            Op::AddRow(a, row) => {
                self.acc_add(*a, g);
                let c = self.value(*row).numel();
                self.acc(*row, |gr| {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d));
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc_add(*a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.acc_add(*a, &d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                self.acc_add(*a, &d);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(gv, &t)| gv * (1.0 - t * t)).collect();
                self.acc_add(*a, &d);
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(gv, &e)| gv * e).collect();
                self.acc_add(*a, &d);
            }
            Op::Abs(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| gv * sign(x))
                    .collect();
                self.acc_add(*a, &d);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.cols().max(1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc_add(*a, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*x).cols();
                let r = inv_std.len();
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.acc_add(*gain, &dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    self.acc_add(*bias, &db);
                }
                if self.requires_grad(*x) {
                    let gain_v = self.value(*gain).data().to_vec();
                    let mut dx = vec![0.0; r * c];
                    let mut dxh = vec![0.0; c];
                    for row in 0..r {
                        let gr = &g[row * c..(row + 1) * c];
                        let hr = &xhat[row * c..(row + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gain_v[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxh, hr) / c as f64;
                        for j in 0..c {
                            dx[row * c + j] = inv_std[row] * (dxh[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.acc_add(*x, &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc_add(p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[i].value.shape()[0];
                let c = self.nodes[i].value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.acc(p, |gp| {
                        for row in 0..r {
                            for j in 0..w {
                                gp[row * w + j] += g[row * c + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.value(*a).cols();
                let start = *start * c;
                self.acc(*a, |ga| {
                    ga[start..start + g.len()].iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let w = self.nodes[i].value.cols();
                let start = *start;
                self.acc(*a, |ga| {
                    for (row, gr) in g.chunks(w.max(1)).enumerate() {
                        for j in 0..w {
                            ga[row * c + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).cols();
                self.acc(*a, |ga| {
                    for (row, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[row * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_add(*a, g),
            Op::Sum(a) => {
                let s = g[0];
                self.acc(*a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).numel().max(1) as f64;
                self.acc(*a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Attention(saved) => self.backprop_attention(saved, g),
            Op::FocalLoss {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let s = g[0];
                let d: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| s * focal_grad(x, t, *alpha, *gamma))
                    .collect();
                self.acc_add(*logits, &d);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let s = g[0];
                let c = self.value(*logits).cols();
                let mut d = vec![0.0; probs.len()];
                for ((dr, pr), yr) in d.chunks_mut(c).zip(probs.chunks(c)).zip(targets.chunks(c)) {
                    let ysum: f64 = yr.iter().sum();
                    for j in 0..c {
                        dr[j] = s * (pr[j] * ysum - yr[j]);
                    }
                }
                self.acc_add(*logits, &d);
            }
        }
        self.nodes[i].op = op;
    }

    fn backprop_attention(&mut self, saved: &AttentionSaved, g: &[f64]) {
        let AttentionSaved {
            q,
            k,
            v,
            heads,
            scale,
            mask,
            probs,
        } = saved;
        let (n, d) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
        let m = self.value(*k).shape()[0];
        let dh = d / heads;
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        {
            let qd = self.value(*q).data();
            let kd = self.value(*k).data();
            let vd = self.value(*v).data();
            match mask {
                None => {
                    let mut ds = vec![0.0; n * m];
                    for (h, p) in probs.iter().enumerate().take(*heads) {
                        let off = h * dh;
                        // dV_h = Pᵀ dO_h
                        gemm(
                            m,
                            n,
                            dh,
                            1.0,
                            p,
                            View::transposed(m),
                            g,
                            View::row_major(d).at(off),
                            0.0,
                            &mut dv,
                            View::row_major(d).at(off),
                        );
                        // dP = dO_h V_hᵀ
                        gemm(
                            n,
                            dh,
                            m,
                            1.0,
                            g,
                            View::row_major(d).at(off),
                            vd,
                            View::transposed(d).at(off),
                            0.0,
                            &mut ds,
                            View::row_major(m),
                        );
                        if m > 0 {
                            for (dr, pr) in ds.chunks_mut(m).zip(p.chunks(m)) {
                                let s = dot(dr, pr);
                                for j in 0..m {
                                    dr[j] = pr[j] * (dr[j] - s);
                                }
                            }
                        }
                        gemm(
                            n,
                            m,
                            dh,
                            *scale,
                            &ds,
                            View::row_major(m),
                            kd,
                            View::row_major(d).at(off),
                            0.0,
                            &mut dq,
                            View::row_major(d).at(off),
                        );
                        gemm(
                            m,
                            n,
                            dh,
                            *scale,
                            &ds,
                            View::transposed(m),
                            qd,
                            View::row_major(d).at(off),
                            0.0,
                            &mut dk,
                            View::row_major(d).at(off),
                        );
                    }
                }
                Some(mk) => {
                    for (h, p) in probs.iter().enumerate().take(*heads) {
                        let off = h * dh;
                        let mut cursor = 0;
                        for i in 0..n {
                            let keys = mk.open(i);
                            if keys.is_empty() {
                                continue;
                            }
                            let pr = &p[cursor..cursor + keys.len()];
                            cursor += keys.len();
                            let go = &g[i * d + off..i * d + off + dh];
                            let mut dp: Vec<f64> = keys
                                .iter()
                                .map(|&j| dot(go, &vd[j as usize * d + off..j as usize * d + off + dh]))
                                .collect();
                            let s = dot(&dp, pr);
                            for (x, &pj) in dp.iter_mut().zip(pr) {
                                *x = pj * (*x - s) * scale;
                            }
                            let qi = &qd[i * d + off..i * d + off + dh];
                            for ((&j, &pj), &dsj) in keys.iter().zip(pr).zip(&dp) {
                                let j = j as usize;
                                for t in 0..dh {
                                    dv[j * d + off + t] += pj * go[t];
                                    dq[i * d + off + t] += dsj * kd[j * d + off + t];
                                    dk[j * d + off + t] += dsj * qi[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.acc_add(*q, &dq);
        self.acc_add(*k, &dk);
        self.acc_add(*v, &dv);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Focal loss of one probability/target pair with the probability clamped
/// to `[FOCAL_EPS, 1 - FOCAL_EPS]`.
pub fn focal_term(p: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    target * (-alpha * (1.0 - p).powf(gamma) * p.ln())
        + (1.0 - target) * (-(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln())
}

fn focal_grad(x: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let raw = sigmoid(x);
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&raw) {
        return 0.0;
    }
    let p = raw;
    let pos = alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p));
    let neg = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (1.0 - p).ln());
    target * pos + (1.0 - target) * neg
}
