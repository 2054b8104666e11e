//! Operation-aware embedding model.
//!
//! The logit for a one-hot input `x` is
//!
//! ```text
//! first_order(x) + Σ_{i<j} Σ_k α_ij^(k) · (w_k · O_k(e_i^(k), e_j^(k)) + b_k)
//! ```
//!
//! where `e_i^(k)` is the row of field `i`'s embedding table for operator `k`.
//! With operation-aware embeddings each operator owns its own table; the
//! shared variant maps every operator onto one table per field.
//!
//! Gradients are derived by hand for this fixed architecture. MAX/MIN route the
//! gradient to the winning operand per dimension, ties go to the first operand.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FieldSchema};
use crate::search::{ArchWeights, OperatorSelection};

pub const NUM_OPERATORS: usize = 5;

/// Interaction operators in canonical order; every tie-break refers to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OperatorKind {
    Multiply,
    Plus,
    Max,
    Min,
    Concat,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; NUM_OPERATORS] = [
        OperatorKind::Multiply,
        OperatorKind::Plus,
        OperatorKind::Max,
        OperatorKind::Min,
        OperatorKind::Concat,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn output_dim(self, d: usize) -> usize {
        match self {
            OperatorKind::Concat => 2 * d,
            _ => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Multiply => "MULTIPLY",
            OperatorKind::Plus => "PLUS",
            OperatorKind::Max => "MAX",
            OperatorKind::Min => "MIN",
            OperatorKind::Concat => "CONCAT",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MULTIPLY" => Ok(OperatorKind::Multiply),
            "PLUS" => Ok(OperatorKind::Plus),
            "MAX" => Ok(OperatorKind::Max),
            "MIN" => Ok(OperatorKind::Min),
            "CONCAT" => Ok(OperatorKind::Concat),
            _ => Err(Error::Config(format!("unknown operator {s:?}"))),
        }
    }
}

pub fn apply_operator(kind: OperatorKind, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("operand lengths {} and {}", p.len(), q.len())));
    }
    let zip = p.iter().zip(q);
    Ok(match kind {
        OperatorKind::Multiply => zip.map(|(a, b)| a * b).collect(),
        OperatorKind::Plus => zip.map(|(a, b)| a + b).collect(),
        OperatorKind::Max => zip.map(|(a, b)| a.max(*b)).collect(),
        OperatorKind::Min => zip.map(|(a, b)| a.min(*b)).collect(),
        OperatorKind::Concat => p.iter().chain(q).copied().collect(),
    })
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `σ(logit)` against `y`, in log-sum-exp form.
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    softplus(logit) - y * logit
}

/// Probability clamped away from 0 and 1 so saturated logits stay usable.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Table geometry: per-field row counts, embedding dimension and whether
/// each operator has its own table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    rows: Vec<usize>,
    dim: usize,
    operation_aware: bool,
    field_offsets: Vec<usize>,
    embedding_len: usize,
}

impl ModelLayout {
    pub fn new(rows: Vec<usize>, dim: usize, operation_aware: bool) -> Self {
        let tables = if operation_aware { NUM_OPERATORS } else { 1 };
        let mut field_offsets = Vec::with_capacity(rows.len());
        let mut off = 0;
        for &r in &rows {
            field_offsets.push(off);
            off += tables * r * dim;
        }
        ModelLayout {
            rows,
            dim,
            operation_aware,
            field_offsets,
            embedding_len: off,
        }
    }

    pub fn for_schema(schema: &FieldSchema, dim: usize, operation_aware: bool) -> Self {
        Self::new(schema.table_rows(), dim, operation_aware)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_fields(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn n_pairs(&self) -> usize {
        let l = self.n_fields();
        l * l.saturating_sub(1) / 2
    }

    pub fn operation_aware(&self) -> bool {
        self.operation_aware
    }

    pub fn tables_per_field(&self) -> usize {
        if self.operation_aware {
            NUM_OPERATORS
        } else {
            1
        }
    }

    /// Table slot used by `op`; always 0 when tables are shared.
    #[inline]
    pub fn table_of(&self, op: OperatorKind) -> usize {
        if self.operation_aware {
            op.index()
        } else {
            0
        }
    }

    pub fn embedding_len(&self) -> usize {
        self.embedding_len
    }

    /// Offset of the start of table `table` for `field`.
    #[inline]
    pub fn table_offset(&self, field: usize, table: usize) -> usize {
        self.field_offsets[field] + table * self.rows[field] * self.dim
    }

    #[inline]
    pub fn row_offset(&self, field: usize, op: OperatorKind, row: usize) -> usize {
        self.table_offset(field, self.table_of(op)) + row * self.dim
    }

    pub fn table_len(&self, field: usize) -> usize {
        self.rows[field] * self.dim
    }

    pub fn head_len(&self, op: OperatorKind) -> usize {
        op.output_dim(self.dim) + 1
    }

    pub fn first_order_len(&self) -> usize {
        self.rows.iter().sum::<usize>() + 1
    }

    pub fn heads_len(&self) -> usize {
        OperatorKind::ALL.iter().map(|&k| self.head_len(k)).sum()
    }

    /// Total parameter count (embeddings, heads, first-order terms and bias).
    pub fn param_count(&self) -> usize {
        self.embedding_len + self.heads_len() + self.first_order_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl FcHead {
    pub fn zeros(op: OperatorKind, dim: usize) -> Self {
        FcHead {
            weights: vec![0.0; op.output_dim(dim)],
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderTerms {
    pub weights: Vec<Vec<f64>>,
    pub bias: f64,
}

impl FirstOrderTerms {
    pub fn zeros(rows: &[usize]) -> Self {
        FirstOrderTerms {
            weights: rows.iter().map(|&r| vec![0.0; r]).collect(),
            bias: 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, x: &FeatureVector) -> f64 {
        self.bias
            + x.active()
                .iter()
                .zip(&self.weights)
                .map(|(&v, w)| w[v])
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub layout: ModelLayout,
    pub data: Vec<f64>,
}

impl EmbeddingTables {
    pub fn zeros(layout: ModelLayout) -> Self {
        let n = layout.embedding_len();
        EmbeddingTables { layout, data: vec![0.0; n] }
    }

    #[inline]
    pub fn row(&self, field: usize, op: OperatorKind, row: usize) -> &[f64] {
        let o = self.layout.row_offset(field, op, row);
        &self.data[o..o + self.layout.dim()]
    }

    pub fn row_mut(&mut self, field: usize, op: OperatorKind, row: usize) -> &mut [f64] {
        let o = self.layout.row_offset(field, op, row);
        let d = self.layout.dim();
        &mut self.data[o..o + d]
    }
}

/// Borrowed view of everything the forward pass reads.
#[derive(Clone, Copy)]
pub struct ParamsRef<'a> {
    pub embeddings: &'a EmbeddingTables,
    pub heads: &'a [FcHead],
    pub first_order: &'a FirstOrderTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embeddings: EmbeddingTables,
    pub heads: Vec<FcHead>,
    pub first_order: FirstOrderTerms,
}

impl ModelParams {
    pub fn zeros(layout: ModelLayout) -> Self {
        let d = layout.dim();
        let first_order = FirstOrderTerms::zeros(layout.rows());
        ModelParams {
            heads: OperatorKind::ALL.iter().map(|&k| FcHead::zeros(k, d)).collect(),
            embeddings: EmbeddingTables::zeros(layout),
            first_order,
        }
    }

    /// Embeddings ~ N(0, 0.01²), head weights ~ N(0, 1/d), biases and
    /// first-order terms zero.
    pub fn init<R: Rng + ?Sized>(layout: ModelLayout, rng: &mut R) -> Self {
        let d = layout.dim();
        let mut p = Self::zeros(layout);
        let emb = Normal::new(0.0, 0.01).expect("valid std");
        for v in &mut p.embeddings.data {
            *v = emb.sample(rng);
        }
        let head = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        for h in &mut p.heads {
            for w in &mut h.weights {
                *w = head.sample(rng);
            }
        }
        p
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.embeddings.layout
    }

    pub fn view(&self) -> ParamsRef<'_> {
        ParamsRef {
            embeddings: &self.embeddings,
            heads: &self.heads,
            first_order: &self.first_order,
        }
    }

    /// Sum-pooling heads: all-ones weights, zero bias. Turns MULTIPLY into the
    /// plain inner product.
    pub fn set_sum_pooling_heads(&mut self) {
        for h in &mut self.heads {
            h.weights.iter_mut().for_each(|w| *w = 1.0);
            h.bias = 0.0;
        }
    }

    /// Flat order: embeddings (field, operator, row, dim), heads in operator
    /// order (weights then bias), first-order weights per field, global bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().param_count());
        out.extend_from_slice(&self.embeddings.data);
        for h in &self.heads {
            out.extend_from_slice(&h.weights);
            out.push(h.bias);
        }
        for w in &self.first_order.weights {
            out.extend_from_slice(w);
        }
        out.push(self.first_order.bias);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.layout().param_count() {
            return Err(Error::Shape(format!(
                "flat length {} vs {} parameters",
                flat.len(),
                self.layout().param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for v in &mut self.embeddings.data {
            *v = it.next().unwrap();
        }
        for h in &mut self.heads {
            for w in &mut h.weights {
                *w = it.next().unwrap();
            }
            h.bias = it.next().unwrap();
        }
        for w in &mut self.first_order.weights {
            for v in w.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        self.first_order.bias = it.next().unwrap();
        Ok(())
    }
}

/// Gradient buffers congruent with [`ModelParams`], plus one scalar per
/// (pair, operator) for the architecture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: Vec<f64>,
    pub heads: Vec<FcHead>,
    pub first_order: FirstOrderTerms,
    pub alpha: Vec<[f64; NUM_OPERATORS]>,
}

impl Gradients {
    pub fn zeros(layout: &ModelLayout) -> Self {
        let d = layout.dim();
        Gradients {
            embeddings: vec![0.0; layout.embedding_len()],
            heads: OperatorKind::ALL.iter().map(|&k| FcHead::zeros(k, d)).collect(),
            first_order: FirstOrderTerms::zeros(layout.rows()),
            alpha: vec![[0.0; NUM_OPERATORS]; layout.n_pairs()],
        }
    }

    pub fn clear(&mut self) {
        self.embeddings.iter_mut().for_each(|v| *v = 0.0);
        for h in &mut self.heads {
            h.weights.iter_mut().for_each(|v| *v = 0.0);
            h.bias = 0.0;
        }
        for w in &mut self.first_order.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        self.first_order.bias = 0.0;
        self.alpha.iter_mut().for_each(|a| *a = [0.0; NUM_OPERATORS]);
    }

    /// Same ordering as [`ModelParams::to_flat`]; α gradients are excluded.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = self.embeddings.clone();
        for h in &self.heads {
            out.extend_from_slice(&h.weights);
            out.push(h.bias);
        }
        for w in &self.first_order.weights {
            out.extend_from_slice(w);
        }
        out.push(self.first_order.bias);
        out
    }
}

/// Contribution of one pair under operator `op`: `w · O(p, q) + b`.
#[inline]
fn contribution(op: OperatorKind, p: &[f64], q: &[f64], head: &FcHead) -> f64 {
    let w = &head.weights;
    let mut s = head.bias;
    match op {
        OperatorKind::Multiply => {
            for t in 0..p.len() {
                s += w[t] * p[t] * q[t];
            }
        }
        OperatorKind::Plus => {
            for t in 0..p.len() {
                s += w[t] * (p[t] + q[t]);
            }
        }
        OperatorKind::Max => {
            for t in 0..p.len() {
                s += w[t] * p[t].max(q[t]);
            }
        }
        OperatorKind::Min => {
            for t in 0..p.len() {
                s += w[t] * p[t].min(q[t]);
            }
        }
        OperatorKind::Concat => {
            let d = p.len();
            for t in 0..d {
                s += w[t] * p[t] + w[d + t] * q[t];
            }
        }
    }
    s
}

pub fn pair_contribution(kind: OperatorKind, e_i: &[f64], e_j: &[f64], head: &FcHead) -> Result<f64> {
    if e_i.len() != e_j.len() {
        return Err(Error::Shape(format!("operand lengths {} and {}", e_i.len(), e_j.len())));
    }
    if head.weights.len() != kind.output_dim(e_i.len()) {
        return Err(Error::Shape(format!(
            "{kind} head has {} weights for d = {}",
            head.weights.len(),
            e_i.len()
        )));
    }
    Ok(contribution(kind, e_i, e_j, head))
}

/// Pre-sigmoid logit under mixed architecture weights.
pub fn forward_mixed(x: &FeatureVector, alpha: &ArchWeights, params: &ModelParams) -> f64 {
    logit_with(x, alpha, params.view())
}

pub fn logit_with(x: &FeatureVector, alpha: &ArchWeights, params: ParamsRef<'_>) -> f64 {
    let emb = params.embeddings;
    let act = x.active();
    let l = act.len();
    let mut z = params.first_order.eval(x);
    let mut p = 0;
    for i in 0..l {
        for j in (i + 1)..l {
            let w = alpha.get(p);
            for op in OperatorKind::ALL {
                let a = w[op.index()];
                if a != 0.0 {
                    let ei = emb.row(i, op, act[i]);
                    let ej = emb.row(j, op, act[j]);
                    z += a * contribution(op, ei, ej, &params.heads[op.index()]);
                }
            }
            p += 1;
        }
    }
    z
}

/// Logit with one operator per pair; skips the α multiply entirely.
pub fn logit_selected(x: &FeatureVector, selection: &OperatorSelection, params: ParamsRef<'_>) -> f64 {
    let emb = params.embeddings;
    let act = x.active();
    let l = act.len();
    let mut z = params.first_order.eval(x);
    let mut p = 0;
    for i in 0..l {
        for j in (i + 1)..l {
            let op = selection.get(p);
            let ei = emb.row(i, op, act[i]);
            let ej = emb.row(j, op, act[j]);
            z += contribution(op, ei, ej, &params.heads[op.index()]);
            p += 1;
        }
    }
    z
}

/// Expected reward `σ(Σ O_ij(e_i, e_j) + first-order)` with one operator per pair.
pub fn predict_ctr(x: &FeatureVector, selection: &OperatorSelection, params: &ModelParams) -> f64 {
    probability(logit_selected(x, selection, params.view()))
}

/// Loss and gradients for one example.
pub fn backward(x: &FeatureVector, y: f64, alpha: &ArchWeights, params: &ModelParams) -> (Gradients, f64) {
    let mut grads = Gradients::zeros(params.layout());
    let loss = backward_into(x, y, alpha, params.view(), 1.0, &mut grads);
    (grads, loss)
}

/// Accumulates `scale · ∂loss/∂·` into `grads` and returns the unscaled loss.
///
/// Every operator branch of every pair is evaluated so that α receives a
/// gradient even where its weight is zero; parameter gradients are only
/// nonzero for branches with nonzero α.
pub fn backward_into(
    x: &FeatureVector,
    y: f64,
    alpha: &ArchWeights,
    params: ParamsRef<'_>,
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    let logit = logit_with(x, alpha, params);
    let loss = bce_with_logit(logit, y);
    let g = (sigmoid(logit) - y) * scale;
    if g == 0.0 {
        return loss;
    }
    let emb = params.embeddings;
    let layout = &emb.layout;
    let d = layout.dim();
    let act = x.active();
    let l = act.len();

    for (f, &v) in act.iter().enumerate() {
        grads.first_order.weights[f][v] += g;
    }
    grads.first_order.bias += g;

    let mut p = 0;
    for i in 0..l {
        for j in (i + 1)..l {
            let w = alpha.get(p);
            for op in OperatorKind::ALL {
                let k = op.index();
                let head = &params.heads[k];
                let oi = layout.row_offset(i, op, act[i]);
                let oj = layout.row_offset(j, op, act[j]);
                let ei = &emb.data[oi..oi + d];
                let ej = &emb.data[oj..oj + d];
                grads.alpha[p][k] += g * contribution(op, ei, ej, head);
                let a = w[k];
                if a == 0.0 {
                    continue;
                }
                let ga = g * a;
                let hw = &head.weights;
                let gh = &mut grads.heads[k];
                gh.bias += ga;
                let ge = &mut grads.embeddings;
                match op {
                    OperatorKind::Multiply => {
                        for t in 0..d {
                            gh.weights[t] += ga * ei[t] * ej[t];
                            ge[oi + t] += ga * hw[t] * ej[t];
                            ge[oj + t] += ga * hw[t] * ei[t];
                        }
                    }
                    OperatorKind::Plus => {
                        for t in 0..d {
                            gh.weights[t] += ga * (ei[t] + ej[t]);
                            ge[oi + t] += ga * hw[t];
                            ge[oj + t] += ga * hw[t];
                        }
                    }
                    OperatorKind::Max => {
                        for t in 0..d {
                            if ei[t] >= ej[t] {
                                gh.weights[t] += ga * ei[t];
                                ge[oi + t] += ga * hw[t];
                            } else {
                                gh.weights[t] += ga * ej[t];
                                ge[oj + t] += ga * hw[t];
                            }
                        }
                    }
                    OperatorKind::Min => {
                        for t in 0..d {
                            if ei[t] <= ej[t] {
                                gh.weights[t] += ga * ei[t];
                                ge[oi + t] += ga * hw[t];
                            } else {
                                gh.weights[t] += ga * ej[t];
                                ge[oj + t] += ga * hw[t];
                            }
                        }
                    }
                    OperatorKind::Concat => {
                        for t in 0..d {
                            gh.weights[t] += ga * ei[t];
                            gh.weights[d + t] += ga * ej[t];
                            ge[oi + t] += ga * hw[t];
                            ge[oj + t] += ga * hw[d + t];
                        }
                    }
                }
            }
            p += 1;
        }
    }
    loss
}
