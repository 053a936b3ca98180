//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every op of one forward pass. Parameter leaves borrow
//! their buffers from a [`ParamStore`], so building a graph copies no
//! weights. [`Graph::backward`] replays the tape in reverse and returns a
//! [`Gradients`] table; only nodes that can reach a trainable leaf get a
//! gradient buffer.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::NumericsError;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{matmul_into, MatView, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout and masking of a packed attention call.
///
/// Queries, keys and values are `[batch * seq, dim]` with sample `b`
/// occupying rows `b * seq .. (b + 1) * seq`. Keys at positions
/// `>= lens[b]` are padding and never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub seq: usize,
    pub lens: Vec<usize>,
    pub causal: bool,
}

impl AttentionLayout {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.lens[b] && (!self.causal || j <= i)
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var, gate: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { src: Var, index: Vec<Option<usize>> },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T> },
    MeanRows { x: Var, groups: Vec<(usize, usize)> },
    WeightedSum { x: Var, weights: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("graph values are well-formed")
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), NumericsError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NumericsError::Shape(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, requires_grad)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            Cow::Borrowed(p.tensor.data()),
            p.tensor.shape().to_vec(),
            Op::Param,
            p.trainable,
        );
        self.param_nodes.insert(id, v);
        v
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b` is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, "matmul lhs")?;
        let (br, bc) = self.dims2(b, "matmul rhs")?;
        let (bn, p) = if transpose_b { (bc, br) } else { (br, bc) };
        if bn != n {
            return Err(NumericsError::Shape(format!(
                "matmul inner dims differ: [{m}, {n}] · [{bn}, {p}]"
            )));
        }
        let bv = if transpose_b { MatView::dense_t(br, bc) } else { MatView::dense(br, bc) };
        let mut out = vec![T::zero(); m * p];
        matmul_into(
            self.value(a),
            0,
            MatView::dense(m, n),
            self.value(b),
            0,
            bv,
            &mut out,
            0,
            MatView::dense(m, p),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, p], Op::MatMul { a, b, transpose_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape(format!(
                "add operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row of a 2-D tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.shape(bias).iter().product::<usize>() != c {
            return Err(NumericsError::Shape(format!(
                "bias {:?} does not match {c} columns",
                self.shape(bias)
            )));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), vec![r, c], Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out: Vec<T> = self.value(x).iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), shape, Op::Scale { x, factor: f }, rg)
    }

    /// GELU, tanh approximation, evaluated as `x · σ(2u)` (equal to
    /// `0.5 x (1 + tanh u)`) in the graph's own precision.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rg = self.rg(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut gate = Vec::with_capacity(if rg { xv.len() } else { 0 });
        let (c2, k) = (T::of(2.0 * GELU_C), T::of(0.044715));
        for &v in xv {
            let s = T::one() / (T::one() + (-(c2 * (v + k * v * v * v))).exp());
            out.push(v * s);
            if rg {
                gate.push(s);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu { x, gate }, rg)
    }

    /// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gain).iter().product::<usize>() != c
            || self.shape(bias).iter().product::<usize>() != c
        {
            return Err(NumericsError::Shape("layer_norm affine size mismatch".into()));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_c;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_c;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), vec![r, c], Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Softmax along `axis` of an arbitrary-rank tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Input(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(NumericsError::Input("softmax over an empty axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for n in 0..inner {
                let at = |i: usize| (o * len + i) * inner + n;
                let max = (0..len).map(|i| xv[at(i)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (xv[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum = sum + e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = self.dims2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(NumericsError::Input("embedding lookup of a zero-length sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Input(format!("token id {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Cow::Owned(out), vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Builds a new 2-D tensor whose row `i` is `src[index[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(src, "gather_rows")?;
        if index.is_empty() {
            return Err(NumericsError::Input("gather of zero rows".into()));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= r) {
            return Err(NumericsError::Input(format!("row {bad} outside source of {r} rows")));
        }
        let sv = self.value(src);
        let mut out = vec![T::zero(); index.len() * c];
        for (dst, i) in index.iter().enumerate() {
            if let Some(i) = *i {
                out[dst * c..(dst + 1) * c].copy_from_slice(&sv[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(src);
        let n = index.len();
        Ok(self.push(Cow::Owned(out), vec![n, c], Op::GatherRows { src, index }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| NumericsError::Input("concat of nothing".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(NumericsError::Shape(format!("concat column mismatch: {pc} vs {c}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), vec![rows, c], Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![c, r], Op::Transpose(x), rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
    ) -> Result<Var, NumericsError> {
        let (rows, dim) = self.dims2(q, "attention q")?;
        if self.shape(k) != [rows, dim] || self.shape(v) != [rows, dim] {
            return Err(NumericsError::Shape("attention q/k/v shapes differ".into()));
        }
        let (bsz, t, h) = (layout.batch(), layout.seq, layout.heads);
        if t == 0 || bsz == 0 {
            return Err(NumericsError::Input("attention over a zero-length sequence".into()));
        }
        if bsz * t != rows {
            return Err(NumericsError::Shape(format!("{rows} rows do not pack {bsz} × {t}")));
        }
        if h == 0 || dim % h != 0 {
            return Err(NumericsError::Shape(format!("{dim} not divisible into {h} heads")));
        }
        if layout.lens.iter().any(|&l| l == 0 || l > t) {
            return Err(NumericsError::Input("attention lengths must lie in 1..=seq".into()));
        }
        let dh = dim / h;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); bsz * h * t * t];
        let mut out = vec![T::zero(); rows * dim];
        let head = MatView::strided(t, dh, dim);
        for b in 0..bsz {
            for hh in 0..h {
                let off = b * t * dim + hh * dh;
                let pbase = (b * h + hh) * t * t;
                let pm = &mut probs[pbase..pbase + t * t];
                matmul_into(qv, off, head, kv, off, head.t(), pm, 0, MatView::dense(t, t), false);
                for i in 0..t {
                    let row = &mut pm[i * t..(i + 1) * t];
                    let mut max = T::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.allowed(b, i, j) {
                            *s = *s * scale;
                            max = max.max(*s);
                        }
                    }
                    let mut sum = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.allowed(b, i, j) {
                            *s = (*s - max).exp();
                            sum = sum + *s;
                        } else {
                            *s = T::zero();
                        }
                    }
                    row.iter_mut().for_each(|s| *s = *s / sum);
                }
                matmul_into(pm, 0, MatView::dense(t, t), vv, off, head, &mut out, off, head, false);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Cow::Owned(out), vec![rows, dim], Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// Mean next-token negative log-likelihood over rows where `mask` is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(NumericsError::Shape(format!(
                "{n} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumericsError::DegenerateBatch);
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(NumericsError::Input(format!("target {} outside vocab {vocab}", targets[i])));
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let pr = &mut probs[i * vocab..(i + 1) * vocab];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum = sum + *p;
            }
            pr.iter_mut().for_each(|p| *p = *p / sum);
            total = total + (sum.ln() + max - row[targets[i]]);
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            rg,
        ))
    }

    /// One output row per `(start, len)` group: the mean of those source rows.
    pub fn mean_rows(&mut self, x: Var, groups: Vec<(usize, usize)>) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if groups.is_empty() || groups.iter().any(|&(s, l)| l == 0 || s + l > r) {
            return Err(NumericsError::Input("mean_rows groups must be non-empty and in range".into()));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); groups.len() * c];
        for (g, &(s, l)) in groups.iter().enumerate() {
            let inv = T::one() / T::of(l as f64);
            for i in s..s + l {
                for j in 0..c {
                    out[g * c + j] = out[g * c + j] + xv[i * c + j];
                }
            }
            out[g * c..(g + 1) * c].iter_mut().for_each(|o| *o = *o * inv);
        }
        let rg = self.rg(x);
        let g = groups.len();
        Ok(self.push(Cow::Owned(out), vec![g, c], Op::MeanRows { x, groups }, rg))
    }

    /// Scalar `Σ wᵢ xᵢ`; turns any tensor into a loss for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var, NumericsError> {
        if weights.len() != self.value(x).len() {
            return Err(NumericsError::Shape("weighted_sum weight count".into()));
        }
        let s = self.value(x).iter().zip(&weights).fold(T::zero(), |s, (&a, &w)| s + a * w);
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::WeightedSum { x, weights }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::Input("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .filter_map(|(&id, v)| grads[v.0].as_ref().map(|_| (id, *v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (br, bc) = (self.shape(*b)[0], self.shape(*b)[1]);
                let p = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · Bᵀ  (or G · B when B was used transposed)
                    let bv = if *transpose_b { MatView::dense(br, bc) } else { MatView::dense_t(br, bc) };
                    matmul_into(g, 0, MatView::dense(m, p), self.value(*b), 0, bv, ga, 0, MatView::dense(m, n), true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *transpose_b {
                        // dB = Gᵀ · A, shape [p, n]
                        matmul_into(g, 0, MatView::dense_t(m, p), self.value(*a), 0, MatView::dense(m, n), gb, 0, MatView::dense(p, n), true);
                    } else {
                        matmul_into(self.value(*a), 0, MatView::dense_t(m, n), g, 0, MatView::dense(m, p), gb, 0, MatView::dense(n, p), true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                }
                let c = node.shape[1];
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * *factor);
                }
            }
            Op::Gelu { x, gate } => {
                let xv = self.value(*x);
                let (c2, k3) = (T::of(2.0 * GELU_C), T::of(3.0 * 0.044715));
                if let Some(gx) = self.slot(grads, *x) {
                    for (((o, &gi), &xi), &s) in gx.iter_mut().zip(g).zip(xv).zip(gate) {
                        let du2 = c2 * (T::one() + k3 * xi * xi);
                        *o = *o + gi * (s + xi * s * (T::one() - s) * du2);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.shape[1];
                let gain_v = self.value(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for (row_g, row_h) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row_g in g.chunks_exact(c) {
                        gb.iter_mut().zip(row_g).for_each(|(o, &x)| *o = *o + x);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for (i, (row_g, row_h)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            dxhat[j] = row_g[j] * gain_v[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dh = mean_dh + dxhat[j] * row_h[j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dh = mean_dh * inv_c;
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + rstd[i] * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for n in 0..*inner {
                            let at = |i: usize| (o * len + i) * inner + n;
                            let dot = (0..*len).fold(T::zero(), |s, i| s + g[at(i)] * y[at(i)]);
                            for i in 0..*len {
                                gx[at(i)] = gx[at(i)] + y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { src, index } => {
                let c = node.shape[1];
                if let Some(gs) = self.slot(grads, *src) {
                    for (dst, i) in index.iter().enumerate() {
                        if let Some(i) = *i {
                            for j in 0..c {
                                gs[i * c + j] = gs[i * c + j] + g[dst * c + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(o, &x)| *o = *o + x);
                    }
                    off += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(node, *q, *k, *v, layout, probs, g, grads);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let vocab = self.shape(*logits)[1];
                let count = mask.iter().filter(|&&m| m).count();
                let scale = g[0] / T::of(count as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == targets[i] { T::one() } else { T::zero() };
                            gl[i * vocab + j] = gl[i * vocab + j] + scale * (probs[i * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::MeanRows { x, groups } => {
                let c = node.shape[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (gi, &(s, l)) in groups.iter().enumerate() {
                        let inv = T::one() / T::of(l as f64);
                        for i in s..s + l {
                            for j in 0..c {
                                gx[i * c + j] = gx[i * c + j] + g[gi * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(weights).for_each(|(o, &w)| *o = *o + g[0] * w);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<'a, T>,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let dim = node.shape[1];
        let (bsz, t, h) = (layout.batch(), layout.seq, layout.heads);
        let dh = dim / h;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let head = MatView::strided(t, dh, dim);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let need_qk = self.rg(q) || self.rg(k);
        let mut ds = vec![T::zero(); t * t];
        if let Some(gv) = self.slot(grads, v) {
            for b in 0..bsz {
                for hh in 0..h {
                    let off = b * t * dim + hh * dh;
                    let pbase = (b * h + hh) * t * t;
                    // dV = Pᵀ · dO
                    matmul_into(probs, pbase, MatView::dense_t(t, t), g, off, head, gv, off, head, true);
                }
            }
        }
        if !need_qk {
            return;
        }
        let mut gq_buf = self.rg(q).then(|| vec![T::zero(); qv.len()]);
        let mut gk_buf = self.rg(k).then(|| vec![T::zero(); kv.len()]);
        for b in 0..bsz {
            for hh in 0..h {
                let off = b * t * dim + hh * dh;
                let pbase = (b * h + hh) * t * t;
                let p = &probs[pbase..pbase + t * t];
                // dP = dO · Vᵀ
                matmul_into(g, off, head, vv, off, head.t(), &mut ds, 0, MatView::dense(t, t), false);
                for i in 0..t {
                    let row_p = &p[i * t..(i + 1) * t];
                    let row_d = &mut ds[i * t..(i + 1) * t];
                    let dot = row_p.iter().zip(row_d.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (d, &pp) in row_d.iter_mut().zip(row_p) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                if let Some(gq) = gq_buf.as_mut() {
                    matmul_into(&ds, 0, MatView::dense(t, t), kv, off, head, gq, off, head, true);
                }
                if let Some(gk) = gk_buf.as_mut() {
                    matmul_into(&ds, 0, MatView::dense_t(t, t), qv, off, head, gk, off, head, true);
                }
            }
        }
        for (var, buf) in [(q, gq_buf), (k, gk_buf)] {
            if let (Some(slot), Some(buf)) = (self.slot(grads, var), buf) {
                slot.iter_mut().zip(&buf).for_each(|(o, &x)| *o = *o + x);
            }
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Sums every trainable parameter's gradient into its store buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let p = store.get_mut(id);
                if p.trainable {
                    p.tensor.accumulate_grad(g);
                }
            }
        }
    }
}
