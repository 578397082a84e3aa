//! Define-by-run tape. Every op appends a node holding its forward value;
//! `backward` walks the tape in reverse and hands parameter gradients back
//! as a [`Gradients`] value so the borrowed [`ParamStore`] stays immutable.
//!
//! All values are 2-D (rows x cols). Scalars are 1x1, vectors are 1xn
//! unless an op documents otherwise.

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::kernels::{gemm, Layout};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_FLOOR: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    ExpClamped { a: Var, lo: f64, hi: f64 },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumSquaresRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick { a: Var, idx: Vec<usize> },
    MaskedCe { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ScatterRows { base: Var, positions: Vec<usize>, src: Var },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    L2NormRows { a: Var, norms: Vec<f64> },
    ClippedSurrogate { ratio: Var, adv: Vec<f64>, eps: f64 },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    grad_inputs: Vec<Var>,
    no_grad: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), grad_inputs: Vec::new(), no_grad: false }
    }

    /// A graph that records values only; `backward` yields empty gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { no_grad: true, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad: needs_grad && !self.no_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn row(&self, v: Var, i: usize) -> &[f64] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).unwrap()
    }

    // ---- leaves ----

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "input dims");
        self.push(rows, cols, data, Op::Input, false)
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.as_matrix_dims();
        self.input(r, c, t.data().to_vec())
    }

    /// An input whose gradient is reported by `Gradients::input`.
    pub fn input_with_grad(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "input dims");
        let v = self.push(rows, cols, data, Op::Input, true);
        self.grad_inputs.push(v);
        v
    }

    /// The parameter as a graph leaf. Repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = self.params.value(id);
        let (r, c) = t.as_matrix_dims();
        let v = self.push(r, c, t.data().to_vec(), Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    /// Same values as `a`, cut off from gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.nodes[a.0].value.clone();
        self.push(r, c, v, Op::Input, false)
    }

    // ---- linear algebra ----

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (n, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, m) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dims {n}x{k} . {br}x{bc} (trans_b={trans_b})");
        let mut out = vec![0.0; n * m];
        let bl = if trans_b { Layout::t(bc) } else { Layout::n(bc) };
        gemm(n, k, m, &self.nodes[a.0].value, Layout::n(k), &self.nodes[b.0].value, bl, &mut out, m, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(n, m, out, Op::MatMul { a, b, trans_b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.dims(a), self.dims(b), "{what}: operand dims differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_dims(a, b, "add");
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_dims(a, b, "sub");
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_dims(a, b, "mul");
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, v, Op::Mul(a, b), ng)
    }

    /// Adds a 1xc row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row: row must be 1x{c}");
        let bias = &self.nodes[row.0].value;
        let mut v = self.nodes[a.0].value.clone();
        for chunk in v.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(r, c, v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, v, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Var {
        assert_eq!(k.len(), self.nodes[a.0].value.len(), "mul_const length");
        let v = zip_map(&self.nodes[a.0].value, &k, |x, y| x * y);
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, v, Op::MulConst(a, k), ng)
    }

    // ---- pointwise ----

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, v, Op::Gelu(a), ng)
    }

    /// `exp(clamp(a, lo, hi))`; gradient is zero where the clamp binds.
    pub fn exp_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| x.clamp(lo, hi).exp()).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, v, Op::ExpClamped { a, lo, hi }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.exp_clamped(a, f64::NEG_INFINITY, f64::INFINITY)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s: f64 = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::MeanAll(a), ng)
    }

    /// Column means: rxc -> 1xc.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.nodes[a.0].value.chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(a);
        self.push(1, c, out, Op::MeanRows(a), ng)
    }

    /// Squared Euclidean norm of each row: rxc -> rx1.
    pub fn sum_squares_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.chunks(c).map(|row| row.iter().map(|x| x * x).sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumSquaresRows(a), ng)
    }

    // ---- normalization ----

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c), "layer_norm gamma");
        assert_eq!(self.dims(beta), (1, c), "layer_norm beta");
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut out = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(r, c, out, Op::LayerNorm { x, gamma, beta, rstd }, ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > NORM_FLOOR) {
                return Err(DiffError::DegenerateNorm { norm: n, floor: NORM_FLOOR });
            }
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::L2NormRows { a, norms }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row)?;
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::SoftmaxRows(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row)?;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::LogSoftmaxRows(a), ng))
    }

    /// `out[i] = a[i, idx[i]]` as an rx1 column.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(idx.len(), r, "pick needs one index per row");
        let av = &self.nodes[a.0].value;
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick index {j} out of {c}");
                av[i * c + j]
            })
            .collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::Pick { a, idx }, ng)
    }

    /// Mean of `-log softmax(logits_t)[target_t]` over rows with `mask` set;
    /// 0 when no row is selected.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t || mask.len() != t {
            return Err(DiffError::ShapeMismatch(format!(
                "{t} logit rows, {} targets, {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&x| x >= v) {
            return Err(DiffError::ShapeMismatch(format!("target {bad} outside vocabulary of {v}")));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let lse = log_sum_exp(row)?;
            total += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits) && count > 0;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::MaskedCe { logits, targets: targets.to_vec(), mask: mask.to_vec(), count, probs },
            ng,
        ))
    }

    // ---- attention ----

    /// Multi-head scaled dot-product attention over pre-projected q, k, v.
    /// With `causal`, query i sees keys `j <= i + (keys - queries)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        assert_eq!(d, dk, "attention q/k width");
        assert_eq!(self.dims(v), (tk, d), "attention v dims");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let mut out = vec![0.0; tq * d];
        let mut weights = vec![0.0; heads * tq * tk];
        attention_forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            tq,
            tk,
            d,
            heads,
            causal,
            &mut out,
            &mut weights,
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(tq, d, out, Op::Attention { q, k, v, heads, weights }, ng)
    }

    /// Softmax weights of an attention node, laid out `[head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ---- indexing ----

    /// Row lookup into a table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (r, c) = self.dims(table);
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < r, "gather id {id} out of {r} rows");
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let ng = self.ng(table);
        self.push(ids.len(), c, out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Copy of `base` with row `positions[k]` replaced by row k of `src`.
    pub fn scatter_rows(&mut self, base: Var, positions: &[usize], src: Var) -> Var {
        let (r, c) = self.dims(base);
        assert_eq!(self.dims(src), (positions.len(), c), "scatter_rows src dims");
        let mut out = self.nodes[base.0].value.clone();
        let sv = &self.nodes[src.0].value;
        for (k, &p) in positions.iter().enumerate() {
            assert!(p < r, "scatter position {p} out of {r}");
            out[p * c..(p + 1) * c].copy_from_slice(&sv[k * c..(k + 1) * c]);
        }
        let ng = self.ng(base) || self.ng(src);
        self.push(r, c, out, Op::ScatterRows { base, positions: positions.to_vec(), src }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows width");
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += r;
            ng |= self.ng(p);
        }
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start <= end && end <= r, "slice_rows {start}..{end} of {r}");
        let out = self.nodes[a.0].value[start * c..end * c].to_vec();
        let ng = self.ng(a);
        self.push(end - start, c, out, Op::SliceRows { a, start }, ng)
    }

    /// Elementwise `min(ratio * adv, clip(ratio, 1-eps, 1+eps) * adv)`.
    pub fn clipped_surrogate(&mut self, ratio: Var, adv: Vec<f64>, eps: f64) -> Var {
        let (r, c) = self.dims(ratio);
        assert_eq!(adv.len(), r * c, "clipped_surrogate advantages");
        let out = zip_map(&self.nodes[ratio.0].value, &adv, |p, a| {
            (p * a).min(p.clamp(1.0 - eps, 1.0 + eps) * a)
        });
        let ng = self.ng(ratio);
        self.push(r, c, out, Op::ClippedSurrogate { ratio, adv, eps }, ng)
    }

    // ---- reverse pass ----

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(DiffError::NotScalar { rows: r, cols: c });
        }
        let mut out = Gradients { params: vec![None; self.params.len()], inputs: HashMap::new() };
        if !self.ng(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, idx, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Input => {
                out.inputs.insert(idx, g.to_vec());
            }
            Op::Param(id) => {
                out.params[id.0] = Some(g.to_vec());
            }
            &Op::MatMul { a, b, trans_b } => {
                let (n, k) = self.dims(a);
                let m = node.cols;
                let (br, bc) = self.dims(b);
                if wants(a) {
                    // dA = G @ B^T  (or G @ B when trans_b)
                    let bl = if trans_b { Layout::n(bc) } else { Layout::t(bc) };
                    let ga = slot(grads, a, n * k);
                    gemm(n, m, k, g, Layout::n(m), val(b), bl, ga, k, 1.0);
                }
                if wants(b) {
                    let gb = slot(grads, b, br * bc);
                    if trans_b {
                        // dB = G^T @ A, B is m x k
                        gemm(m, n, k, g, Layout::t(m), val(a), Layout::n(k), gb, k, 1.0);
                    } else {
                        // dB = A^T @ G, B is k x m
                        gemm(k, n, m, val(a), Layout::t(k), g, Layout::n(m), gb, m, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    add_into(slot(grads, b, g.len()), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    let gb = slot(grads, b, g.len());
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = val(a);
                    let gb = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(row) {
                    let c = node.cols;
                    let gr = slot(grads, row, c);
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga = slot(grads, a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * s;
                }
            }
            Op::MulConst(a, k) => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * k[i];
                }
            }
            &Op::Gelu(a) => {
                let av = val(a);
                let ga = slot(grads, a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            }
            &Op::ExpClamped { a, lo, hi } => {
                let av = val(a);
                let ga = slot(grads, a, g.len());
                for i in 0..g.len() {
                    if av[i] >= lo && av[i] <= hi {
                        ga[i] += g[i] * node.value[i];
                    }
                }
            }
            &Op::SumAll(a) => {
                let ga = slot(grads, a, nodes[a.0].value.len());
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            &Op::MeanAll(a) => {
                let n = nodes[a.0].value.len();
                let ga = slot(grads, a, n);
                let s = g[0] / n as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.dims(a);
                let ga = slot(grads, a, r * c);
                for chunk in ga.chunks_mut(c) {
                    for (x, y) in chunk.iter_mut().zip(g) {
                        *x += y / r as f64;
                    }
                }
            }
            &Op::SumSquaresRows(a) => {
                let (r, c) = self.dims(a);
                let av = val(a);
                let ga = slot(grads, a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += 2.0 * av[i * c + j] * g[i];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (r, c) = self.dims(*x);
                let xv = val(*x);
                let gv = val(*gamma);
                let mut xhat = vec![0.0; r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * rstd[i];
                    }
                }
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for i in 0..r * c {
                        gg[i % c] += g[i] * xhat[i];
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, c);
                    for i in 0..r * c {
                        gb[i % c] += g[i];
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, r * c);
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gv[j];
                            gx[i * c + j] += rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::L2NormRows { a, norms } => {
                let c = node.cols;
                let y = &node.value;
                let ga = slot(grads, *a, y.len());
                for (i, n) in norms.iter().enumerate() {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] += (gs[j] - ys[j] * dot) / n;
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let c = node.cols;
                let y = &node.value;
                let ga = slot(grads, a, y.len());
                for i in 0..node.rows {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            &Op::LogSoftmaxRows(a) => {
                let c = node.cols;
                let y = &node.value;
                let ga = slot(grads, a, y.len());
                for i in 0..node.rows {
                    let gs = &g[i * c..(i + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] += gs[j] - y[i * c + j].exp() * total;
                    }
                }
            }
            Op::Pick { a, idx } => {
                let c = nodes[a.0].cols;
                let ga = slot(grads, *a, nodes[a.0].value.len());
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
            }
            Op::MaskedCe { logits, targets, mask, count, probs } => {
                let (t, v) = self.dims(*logits);
                let gl = slot(grads, *logits, t * v);
                let s = g[0] / *count as f64;
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        gl[i * v + j] += s * probs[i * v + j];
                    }
                    gl[i * v + targets[i]] -= s;
                }
            }
            Op::Attention { q, k, v, heads, weights } => {
                let (tq, d) = self.dims(*q);
                let tk = self.dims(*k).0;
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                attention_backward(
                    g, val(*q), val(*k), val(*v), weights, tq, tk, d, *heads, &mut dq, &mut dk, &mut dv,
                );
                if wants(*q) {
                    add_into(slot(grads, *q, tq * d), &dq);
                }
                if wants(*k) {
                    add_into(slot(grads, *k, tk * d), &dk);
                }
                if wants(*v) {
                    add_into(slot(grads, *v, tk * d), &dv);
                }
            }
            Op::Gather { table, ids } => {
                let c = node.cols;
                let gt = slot(grads, *table, nodes[table.0].value.len());
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::ScatterRows { base, positions, src } => {
                let c = node.cols;
                if wants(*src) {
                    let gs = slot(grads, *src, positions.len() * c);
                    for (k, &p) in positions.iter().enumerate() {
                        add_into(&mut gs[k * c..(k + 1) * c], &g[p * c..(p + 1) * c]);
                    }
                }
                if wants(*base) {
                    let mut gb = g.to_vec();
                    for &p in positions {
                        gb[p * c..(p + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                    }
                    add_into(slot(grads, *base, g.len()), &gb);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { a, start } => {
                let c = node.cols;
                let ga = slot(grads, a, nodes[a.0].value.len());
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
            Op::ClippedSurrogate { ratio, adv, eps } => {
                let rv = val(*ratio);
                let gr = slot(grads, *ratio, g.len());
                for i in 0..g.len() {
                    let p = rv[i];
                    let unclipped = p * adv[i];
                    let clipped = p.clamp(1.0 - eps, 1.0 + eps) * adv[i];
                    if unclipped <= clipped {
                        gr[i] += g[i] * adv[i];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> Result<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        if !x.is_finite() {
            return Err(DiffError::NonFinite);
        }
        m = m.max(x);
    }
    let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let mut m = f64::NEG_INFINITY;
    for &x in row.iter() {
        if !x.is_finite() {
            return Err(DiffError::NonFinite);
        }
        m = m.max(x);
    }
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
    Ok(())
}

/// Shared by the tape and by cached inference paths.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
    out: &mut [f64],
    weights: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = tk as isize - tq as isize;
    for h in 0..heads {
        let w = &mut weights[h * tq * tk..(h + 1) * tq * tk];
        gemm(tq, dh, tk, &q[h * dh..], Layout::n(d), &k[h * dh..], Layout::t(d), w, tk, 0.0);
        for i in 0..tq {
            let row = &mut w[i * tk..(i + 1) * tk];
            let visible = if causal { ((i as isize + offset + 1).max(0) as usize).min(tk) } else { tk };
            let mut m = f64::NEG_INFINITY;
            for x in row[..visible].iter_mut() {
                *x *= scale;
                m = m.max(*x);
            }
            let mut s = 0.0;
            for x in row[..visible].iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row[..visible].iter_mut() {
                *x /= s;
            }
            row[visible..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm(tq, tk, dh, w, Layout::n(tk), &v[h * dh..], Layout::n(d), &mut out[h * dh..], d, 0.0);
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; tq * tk];
    for h in 0..heads {
        let w = &weights[h * tq * tk..(h + 1) * tq * tk];
        // dP = G_h V_h^T
        gemm(tq, dh, tk, &g[h * dh..], Layout::n(d), &v[h * dh..], Layout::t(d), &mut dp, tk, 0.0);
        // dV_h += P^T G_h
        gemm(tk, tq, dh, w, Layout::t(tk), &g[h * dh..], Layout::n(d), &mut dv[h * dh..], d, 1.0);
        for i in 0..tq {
            let pr = &w[i * tk..(i + 1) * tk];
            let dr = &mut dp[i * tk..(i + 1) * tk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for j in 0..tk {
                dr[j] = pr[j] * (dr[j] - dot) * scale;
            }
        }
        gemm(tq, tk, dh, &dp, Layout::n(tk), &k[h * dh..], Layout::n(d), &mut dq[h * dh..], d, 1.0);
        gemm(tk, tq, dh, &dp, Layout::t(tk), &q[h * dh..], Layout::n(d), &mut dk[h * dh..], d, 1.0);
    }
}
