//! One-shot interaction-function search.
//!
//! Each field pair `(i, j)` carries a weight vector `α_ij` over the five
//! operators. A step discretizes α with `prox_c1` (keep the argmax), evaluates
//! the loss at the discretized point, takes a gradient step on the continuous
//! α using the gradient at the discretized point, and clamps with `prox_c2`.

use std::borrow::Borrow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LabeledExample;
use crate::model::{
    backward_into, FcHead, FirstOrderTerms, Gradients, ModelLayout, ModelParams, OperatorKind,
    NUM_OPERATORS,
};
use crate::optim::{Optimizer, OptimizerKind};

/// Lower/upper margin of the clamp that stands in for the open interval (0, 1).
pub const ALPHA_CLIP: f64 = 1e-3;
pub const ALPHA_INIT: f64 = 0.2;

/// Index of pair `(i, j)`, `i < j`, in lexicographic pair order.
#[inline]
pub fn pair_index(n_fields: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n_fields);
    i * (2 * n_fields - i - 1) / 2 + (j - i - 1)
}

pub fn pairs(n_fields: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_fields).flat_map(move |i| ((i + 1)..n_fields).map(move |j| (i, j)))
}

fn argmax(v: &[f64; NUM_OPERATORS]) -> usize {
    let mut best = 0;
    for k in 1..NUM_OPERATORS {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

/// Keeps the largest entry and zeroes the rest; ties go to the lowest index.
pub fn prox_c1(v: &[f64; NUM_OPERATORS]) -> [f64; NUM_OPERATORS] {
    let k = argmax(v);
    let mut out = [0.0; NUM_OPERATORS];
    out[k] = v[k];
    out
}

/// Elementwise clamp into `[ALPHA_CLIP, 1 - ALPHA_CLIP]`.
pub fn prox_c2(v: &[f64; NUM_OPERATORS]) -> Result<[f64; NUM_OPERATORS]> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("architecture weights"));
    }
    Ok(v.map(|x| x.clamp(ALPHA_CLIP, 1.0 - ALPHA_CLIP)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchWeights {
    n_fields: usize,
    weights: Vec<[f64; NUM_OPERATORS]>,
}

impl ArchWeights {
    pub fn uniform(n_fields: usize, value: f64) -> Self {
        let k = n_fields * n_fields.saturating_sub(1) / 2;
        ArchWeights {
            n_fields,
            weights: vec![[value; NUM_OPERATORS]; k],
        }
    }

    pub fn one_hot(selection: &OperatorSelection) -> Self {
        let weights = selection
            .ops
            .iter()
            .map(|op| {
                let mut w = [0.0; NUM_OPERATORS];
                w[op.index()] = 1.0;
                w
            })
            .collect();
        ArchWeights {
            n_fields: selection.n_fields,
            weights,
        }
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn n_pairs(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn get(&self, pair: usize) -> &[f64; NUM_OPERATORS] {
        &self.weights[pair]
    }

    pub fn set(&mut self, pair: usize, w: [f64; NUM_OPERATORS]) {
        self.weights[pair] = w;
    }

    pub fn weights(&self) -> &[[f64; NUM_OPERATORS]] {
        &self.weights
    }

    /// The discretized view ᾱ: `prox_c1` applied to every pair.
    pub fn discretize(&self) -> ArchWeights {
        ArchWeights {
            n_fields: self.n_fields,
            weights: self.weights.iter().map(prox_c1).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> ArchWeights {
        ArchWeights {
            n_fields: self.n_fields,
            weights: self.weights.iter().map(|w| w.map(|v| v * c)).collect(),
        }
    }
}

/// One operator per field pair, in lexicographic pair order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSelection {
    n_fields: usize,
    ops: Vec<OperatorKind>,
}

impl OperatorSelection {
    pub fn uniform(n_fields: usize, op: OperatorKind) -> Self {
        let k = n_fields * n_fields.saturating_sub(1) / 2;
        OperatorSelection {
            n_fields,
            ops: vec![op; k],
        }
    }

    pub fn from_ops(n_fields: usize, ops: Vec<OperatorKind>) -> Result<Self> {
        let k = n_fields * n_fields.saturating_sub(1) / 2;
        if ops.len() != k {
            return Err(Error::Shape(format!("{} operators for {k} pairs", ops.len())));
        }
        Ok(OperatorSelection { n_fields, ops })
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    #[inline]
    pub fn get(&self, pair: usize) -> OperatorKind {
        self.ops[pair]
    }

    pub fn ops(&self) -> &[OperatorKind] {
        &self.ops
    }

    pub fn op_for(&self, i: usize, j: usize) -> OperatorKind {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.ops[pair_index(self.n_fields, a, b)]
    }

    /// `{"i,j": "OPERATOR"}` map.
    pub fn to_map(&self) -> BTreeMap<String, OperatorKind> {
        pairs(self.n_fields)
            .zip(&self.ops)
            .map(|((i, j), op)| (format!("{i},{j}"), *op))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, OperatorKind>) -> Result<Self> {
        let mut parsed = Vec::with_capacity(map.len());
        let mut n_fields = 0;
        for (key, op) in map {
            let (a, b) = key
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("bad pair key {key:?}")))?;
            let i: usize = a.trim().parse().map_err(|_| Error::Config(format!("bad pair key {key:?}")))?;
            let j: usize = b.trim().parse().map_err(|_| Error::Config(format!("bad pair key {key:?}")))?;
            if i >= j {
                return Err(Error::Config(format!("pair key {key:?} must have i < j")));
            }
            n_fields = n_fields.max(j + 1);
            parsed.push((i, j, *op));
        }
        let k = n_fields * n_fields.saturating_sub(1) / 2;
        if parsed.len() != k {
            return Err(Error::Config(format!("{} pairs given, {k} expected", parsed.len())));
        }
        let mut ops = vec![OperatorKind::Multiply; k];
        for (i, j, op) in parsed {
            ops[pair_index(n_fields, i, j)] = op;
        }
        Ok(OperatorSelection { n_fields, ops })
    }
}

impl Serialize for OperatorSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for OperatorSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, OperatorKind>::deserialize(d)?;
        OperatorSelection::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// Argmax per pair with ties to the lowest operator index.
pub fn select_ops(alpha: &ArchWeights) -> OperatorSelection {
    OperatorSelection {
        n_fields: alpha.n_fields,
        ops: alpha
            .weights
            .iter()
            .map(|w| OperatorKind::ALL[argmax(w)])
            .collect(),
    }
}

/// Whether operators are searched or pinned to one operator for every pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionMode {
    Search,
    Fixed(OperatorKind),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lr_alpha: f64,
    pub lr_theta: f64,
    pub optimizer: OptimizerKind,
    pub mode: InteractionMode,
    /// When false the FC heads stay at their initial values.
    pub train_heads: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lr_alpha: 1e-2,
            lr_theta: 1e-3,
            optimizer: OptimizerKind::Adam,
            mode: InteractionMode::Search,
            train_heads: true,
        }
    }
}

/// Architecture weights plus point-estimate model parameters.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub alpha: ArchWeights,
    pub params: ModelParams,
    pub config: SearchConfig,
    optimizer: Optimizer,
    grads: Gradients,
}

impl SearchState {
    pub fn new(params: ModelParams, config: SearchConfig) -> Self {
        let layout = params.layout().clone();
        let alpha = initial_alpha(layout.n_fields(), config.mode);
        let optimizer = Optimizer::new(config.optimizer, config.lr_theta, layout.param_count());
        SearchState {
            alpha,
            grads: Gradients::zeros(&layout),
            params,
            config,
            optimizer,
        }
    }

    pub fn layout(&self) -> &ModelLayout {
        self.params.layout()
    }

    pub fn selection(&self) -> OperatorSelection {
        select_ops(&self.alpha)
    }

    pub fn last_gradients(&self) -> &Gradients {
        &self.grads
    }
}

pub fn initial_alpha(n_fields: usize, mode: InteractionMode) -> ArchWeights {
    match mode {
        InteractionMode::Search => ArchWeights::uniform(n_fields, ALPHA_INIT),
        InteractionMode::Fixed(op) => ArchWeights::one_hot(&OperatorSelection::uniform(n_fields, op)),
    }
}

/// Which (field, table) blocks are read by the discretized architecture.
pub fn selected_tables(layout: &ModelLayout, selection: &OperatorSelection) -> Vec<bool> {
    let t = layout.tables_per_field();
    let mut mask = vec![false; layout.n_fields() * t];
    for ((i, j), op) in pairs(layout.n_fields()).zip(selection.ops()) {
        let table = layout.table_of(*op);
        mask[i * t + table] = true;
        mask[j * t + table] = true;
    }
    mask
}

/// Applies the α update `α ← prox_c2(α − η ∇_ᾱ F)`.
pub(crate) fn update_alpha(alpha: &mut ArchWeights, grads: &Gradients, lr: f64) -> Result<()> {
    for (p, g) in grads.alpha.iter().enumerate() {
        let w = alpha.get(p);
        let mut next = [0.0; NUM_OPERATORS];
        for k in 0..NUM_OPERATORS {
            next[k] = w[k] - lr * g[k];
        }
        alpha.set(p, prox_c2(&next)?);
    }
    Ok(())
}

/// Optimizer step on the selected embedding tables, offset `base` in `opt`'s space.
pub(crate) fn update_tables(
    opt: &mut Optimizer,
    base: usize,
    layout: &ModelLayout,
    mask: &[bool],
    data: &mut [f64],
    grads: &[f64],
) {
    let t = layout.tables_per_field();
    for field in 0..layout.n_fields() {
        for table in 0..t {
            if !mask[field * t + table] {
                continue;
            }
            let start = layout.table_offset(field, table);
            let end = start + layout.table_len(field);
            opt.update(base + start, &mut data[start..end], &grads[start..end]);
        }
    }
}

/// Optimizer step on heads and first-order terms, laid out from `base`.
pub(crate) fn update_dense(
    opt: &mut Optimizer,
    base: usize,
    heads: &mut [FcHead],
    head_grads: &[FcHead],
    first: &mut FirstOrderTerms,
    first_grads: &FirstOrderTerms,
    train_heads: bool,
) {
    let mut off = base;
    for (h, g) in heads.iter_mut().zip(head_grads) {
        let n = h.weights.len();
        if train_heads {
            opt.update(off, &mut h.weights, &g.weights);
            opt.update_scalar(off + n, &mut h.bias, g.bias);
        }
        off += n + 1;
    }
    for (w, g) in first.weights.iter_mut().zip(&first_grads.weights) {
        opt.update(off, w, g);
        off += w.len();
    }
    opt.update_scalar(off, &mut first.bias, first_grads.bias);
}

/// One minibatch step of the interaction-function search; returns mean loss.
///
/// α moves by the gradient evaluated at the discretized architecture; model
/// parameters take an optimizer step at the same point.
pub fn ifs_step<B: Borrow<LabeledExample>>(batch: &[B], state: &mut SearchState) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty minibatch".into()));
    }
    let discrete = match state.config.mode {
        InteractionMode::Search => state.alpha.discretize(),
        InteractionMode::Fixed(_) => state.alpha.clone(),
    };
    let selection = select_ops(&discrete);
    state.grads.clear();
    let scale = 1.0 / batch.len() as f64;
    let view = state.params.view();
    let mut loss = 0.0;
    for ex in batch {
        let ex = ex.borrow();
        loss += backward_into(&ex.x, ex.y, &discrete, view, scale, &mut state.grads);
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    if state.config.mode == InteractionMode::Search {
        update_alpha(&mut state.alpha, &state.grads, state.config.lr_alpha)?;
    }

    let layout = state.params.layout().clone();
    let mask = selected_tables(&layout, &selection);
    let opt = &mut state.optimizer;
    opt.begin_step();
    update_tables(
        opt,
        0,
        &layout,
        &mask,
        &mut state.params.embeddings.data,
        &state.grads.embeddings,
    );
    update_dense(
        opt,
        layout.embedding_len(),
        &mut state.params.heads,
        &state.grads.heads,
        &mut state.params.first_order,
        &state.grads.first_order,
        state.config.train_heads,
    );
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;
    use crate::model::{forward_mixed, ModelLayout};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prox_c1_examples() {
        assert_eq!(prox_c1(&[0.1, 0.7, 0.2, 0.05, 0.3]), [0.0, 0.7, 0.0, 0.0, 0.0]);
        assert_eq!(prox_c1(&[0.4, 0.4, 0.1, 0.1, 0.0]), [0.4, 0.0, 0.0, 0.0, 0.0]);
        let one_hot = [0.0, 0.0, 0.9, 0.0, 0.0];
        assert_eq!(prox_c1(&one_hot), one_hot);
    }

    #[test]
    fn prox_c2_examples() {
        assert_eq!(
            prox_c2(&[-0.2, 0.5, 1.3, 0.001, 0.999]).unwrap(),
            [0.001, 0.5, 0.999, 0.001, 0.999]
        );
        let interior = [0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(prox_c2(&interior).unwrap(), interior);
        assert!(prox_c2(&[0.2, f64::NAN, 0.2, 0.2, 0.2]).is_err());
    }

    #[test]
    fn select_ops_ties_and_one_hot() {
        let uniform = ArchWeights::uniform(4, 0.2);
        assert!(select_ops(&uniform).ops().iter().all(|&o| o == OperatorKind::Multiply));
        let mut a = ArchWeights::uniform(3, 0.0);
        a.set(0, [0.0, 0.0, 0.0, 1.0, 0.0]);
        a.set(2, [0.0, 0.0, 0.0, 0.0, 1.0]);
        let s = select_ops(&a);
        assert_eq!(s.op_for(0, 1), OperatorKind::Min);
        assert_eq!(s.op_for(1, 2), OperatorKind::Concat);
    }

    #[test]
    fn pair_index_is_lexicographic() {
        let n = 6;
        for (p, (i, j)) in pairs(n).enumerate() {
            assert_eq!(pair_index(n, i, j), p);
        }
    }

    #[test]
    fn selection_json_shape() {
        let s = OperatorSelection::from_ops(
            3,
            vec![OperatorKind::Plus, OperatorKind::Max, OperatorKind::Concat],
        )
        .unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"0,1":"PLUS","0,2":"MAX","1,2":"CONCAT"}"#);
        let back: OperatorSelection = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<OperatorSelection>(r#"{"0,1":"PLUS","0,2":"MAX"}"#).is_err());
    }

    fn toy_state(seed: u64, mode: InteractionMode) -> SearchState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(ModelLayout::new(vec![4, 3, 5], 3, true), &mut rng);
        SearchState::new(
            params,
            SearchConfig {
                mode,
                ..SearchConfig::default()
            },
        )
    }

    #[test]
    fn zero_gradient_batch_leaves_alpha() {
        let mut state = toy_state(5, InteractionMode::Search);
        let x = FeatureVector::new(vec![1, 2, 3]);
        let y = crate::model::sigmoid(forward_mixed(&x, &state.alpha.discretize(), &state.params));
        let before = state.alpha.clone();
        ifs_step(&[LabeledExample::new(x, y)], &mut state).unwrap();
        assert_eq!(state.alpha, before);
    }

    #[test]
    fn fixed_mode_never_moves_alpha() {
        let mut state = toy_state(6, InteractionMode::Fixed(OperatorKind::Max));
        let batch: Vec<_> = (0..8)
            .map(|i| LabeledExample::new(FeatureVector::new(vec![i % 4, i % 3, i % 5]), (i % 2) as f64))
            .collect();
        for _ in 0..20 {
            ifs_step(&batch, &mut state).unwrap();
        }
        assert!(state.selection().ops().iter().all(|&o| o == OperatorKind::Max));
        assert_eq!(state.alpha.get(0), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut state = toy_state(7, InteractionMode::Search);
        assert!(ifs_step::<LabeledExample>(&[], &mut state).is_err());
    }

    fn alpha_vec() -> impl Strategy<Value = [f64; NUM_OPERATORS]> {
        prop::array::uniform5(-2.0f64..2.0)
    }

    proptest! {
        #[test]
        fn prox_c1_idempotent_and_sparse(v in prop::array::uniform5(ALPHA_CLIP..1.0)) {
            let once = prox_c1(&v);
            prop_assert_eq!(prox_c1(&once), once);
            prop_assert_eq!(once.iter().filter(|x| **x != 0.0).count(), 1);
        }

        #[test]
        fn prox_c2_bounds_and_idempotent(v in alpha_vec()) {
            let once = prox_c2(&v).unwrap();
            prop_assert!(once.iter().all(|x| (ALPHA_CLIP..=1.0 - ALPHA_CLIP).contains(x)));
            prop_assert_eq!(prox_c2(&once).unwrap(), once);
        }

        #[test]
        fn selection_survives_projection_and_scaling(
            ws in prop::collection::vec(prop::array::uniform5(0.0f64..1.0), 6),
            c in 0.01f64..100.0,
        ) {
            let mut a = ArchWeights::uniform(4, 0.0);
            for (p, w) in ws.into_iter().enumerate() {
                a.set(p, w);
            }
            let s = select_ops(&a);
            prop_assert_eq!(select_ops(&a.discretize()), s.clone());
            prop_assert_eq!(select_ops(&a.scaled(c)), s);
        }
    }
}
