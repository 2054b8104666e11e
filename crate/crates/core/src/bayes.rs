//! Mean-field Gaussian posterior over the embedding tables.
//!
//! Each embedding entry has `q(θ) = N(μ, σ²)` with `σ = softplus(ρ)`; heads and
//! first-order terms stay point estimates. Training minimises
//! `mean BCE(θ) + kl_weight · KL(q ‖ N(0, σ₀²))` with one reparameterised
//! sample `θ = μ + σ ε` per minibatch.

use std::borrow::Borrow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, LabeledExample};
use crate::model::{
    backward_into, logit_selected, sigmoid, softplus, EmbeddingTables, Gradients, ModelLayout,
    ModelParams, OperatorKind, ParamsRef,
};
use crate::optim::Optimizer;
use crate::search::{
    initial_alpha, select_ops, selected_tables, update_alpha, update_dense, update_tables,
    ArchWeights, InteractionMode, OperatorSelection, SearchConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma0: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { sigma0: 1.0 }
    }
}

pub const RHO_INIT: f64 = -5.0;

/// `KL(N(μ, σ²) ‖ N(0, σ₀²))` for one coordinate.
#[inline]
pub fn kl_diag_gaussian(mu: f64, sigma: f64, sigma0: f64) -> f64 {
    (sigma0 / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * sigma0 * sigma0) - 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    /// μ for the embeddings; heads and first-order terms are point estimates.
    pub mean: ModelParams,
    pub rho: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mean: ModelParams, rho_init: f64) -> Self {
        let n = mean.layout().embedding_len();
        VariationalParams {
            mean,
            rho: vec![rho_init; n],
        }
    }

    pub fn layout(&self) -> &ModelLayout {
        self.mean.layout()
    }

    #[inline]
    pub fn sigma(&self, i: usize) -> f64 {
        softplus(self.rho[i])
    }

    pub fn kl(&self, prior: PriorSpec) -> f64 {
        self.mean
            .embeddings
            .data
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| kl_diag_gaussian(m, softplus(r), prior.sigma0))
            .sum()
    }
}

/// Full posterior draw of the model parameters.
pub fn sample_theta<R: Rng + ?Sized>(vp: &VariationalParams, rng: &mut R) -> ModelParams {
    let mut theta = vp.mean.clone();
    for (i, v) in theta.embeddings.data.iter_mut().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        *v += vp.sigma(i) * eps;
    }
    theta
}

/// Negative ELBO scaled per example: `mean BCE + kl_weight · KL`.
pub fn elbo_loss(
    batch: &[LabeledExample],
    theta: &ModelParams,
    alpha: &ArchWeights,
    vp: &VariationalParams,
    prior: PriorSpec,
    kl_weight: f64,
) -> f64 {
    let nll = batch
        .iter()
        .map(|ex| crate::model::bce_with_logit(crate::model::logit_with(&ex.x, alpha, theta.view()), ex.y))
        .sum::<f64>()
        / batch.len().max(1) as f64;
    if kl_weight == 0.0 {
        nll
    } else {
        nll + kl_weight * vp.kl(prior)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalConfig {
    pub search: SearchConfig,
    pub prior: PriorSpec,
    /// Usually `1 / N` for a replay store of `N` examples.
    pub kl_weight: f64,
    pub rho_init: f64,
    pub freeze_rho: bool,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            search: SearchConfig::default(),
            prior: PriorSpec::default(),
            kl_weight: 0.0,
            rho_init: RHO_INIT,
            freeze_rho: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariationalState {
    pub alpha: ArchWeights,
    pub vp: VariationalParams,
    pub config: VariationalConfig,
    optimizer: Optimizer,
    grads: Gradients,
    theta: ModelParams,
    eps: Vec<f64>,
    grad_rho: Vec<f64>,
}

impl VariationalState {
    pub fn new(mean: ModelParams, config: VariationalConfig) -> Self {
        let layout = mean.layout().clone();
        let e = layout.embedding_len();
        let optimizer = Optimizer::new(
            config.search.optimizer,
            config.search.lr_theta,
            layout.param_count() + e,
        );
        VariationalState {
            alpha: initial_alpha(layout.n_fields(), config.search.mode),
            grads: Gradients::zeros(&layout),
            theta: mean.clone(),
            eps: vec![0.0; e],
            grad_rho: vec![0.0; e],
            vp: VariationalParams::new(mean, config.rho_init),
            config,
            optimizer,
        }
    }

    pub fn layout(&self) -> &ModelLayout {
        self.vp.layout()
    }

    pub fn selection(&self) -> OperatorSelection {
        select_ops(&self.alpha)
    }

    pub fn last_gradients(&self) -> &Gradients {
        &self.grads
    }
}

/// Negative ELBO and its gradients for a fixed noise draw `eps`.
///
/// On return `grads.embeddings` holds ∂/∂μ, `grad_rho` holds ∂/∂ρ, heads,
/// first-order terms and α carry their usual gradients; `theta` receives the
/// sampled embeddings `μ + softplus(ρ) ε`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_backward<B: Borrow<LabeledExample>>(
    batch: &[B],
    alpha: &ArchWeights,
    vp: &VariationalParams,
    eps: &[f64],
    prior: PriorSpec,
    kl_weight: f64,
    theta: &mut EmbeddingTables,
    grads: &mut Gradients,
    grad_rho: &mut [f64],
) -> f64 {
    let mu = &vp.mean.embeddings.data;
    for (i, t) in theta.data.iter_mut().enumerate() {
        *t = mu[i] + softplus(vp.rho[i]) * eps[i];
    }
    let view = ParamsRef {
        embeddings: theta,
        heads: &vp.mean.heads,
        first_order: &vp.mean.first_order,
    };
    grads.clear();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    for ex in batch {
        let ex = ex.borrow();
        loss += backward_into(&ex.x, ex.y, alpha, view, scale, grads);
    }
    loss *= scale;

    let s0sq = prior.sigma0 * prior.sigma0;
    let g_theta = &mut grads.embeddings;
    for i in 0..mu.len() {
        let rho = vp.rho[i];
        let sigma = softplus(rho);
        let mut gs = g_theta[i] * eps[i];
        // skipped entirely at zero weight: σ may underflow to 0
        if kl_weight != 0.0 {
            let m = mu[i];
            loss += kl_weight * kl_diag_gaussian(m, sigma, prior.sigma0);
            gs += kl_weight * (-1.0 / sigma + sigma / s0sq);
            g_theta[i] += kl_weight * m / s0sq;
        }
        grad_rho[i] = gs * sigmoid(rho);
    }
    loss
}

/// One minibatch step on (α, μ, ρ, heads); returns the per-example negative ELBO.
///
/// Only the tables read by the discretized architecture are updated, matching
/// the point-estimate search step.
pub fn vi_step<B: Borrow<LabeledExample>, R: Rng + ?Sized>(
    batch: &[B],
    state: &mut VariationalState,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty minibatch".into()));
    }
    let discrete = match state.config.search.mode {
        InteractionMode::Search => state.alpha.discretize(),
        InteractionMode::Fixed(_) => state.alpha.clone(),
    };
    let selection = select_ops(&discrete);
    let layout = state.vp.layout().clone();
    let mask = selected_tables(&layout, &selection);

    for e in state.eps.iter_mut() {
        *e = rng.sample(StandardNormal);
    }
    let loss = elbo_backward(
        batch,
        &discrete,
        &state.vp,
        &state.eps,
        state.config.prior,
        state.config.kl_weight,
        &mut state.theta.embeddings,
        &mut state.grads,
        &mut state.grad_rho,
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    if state.config.search.mode == InteractionMode::Search {
        update_alpha(&mut state.alpha, &state.grads, state.config.search.lr_alpha)?;
    }

    let e = layout.embedding_len();
    let opt = &mut state.optimizer;
    opt.begin_step();
    update_tables(
        opt,
        0,
        &layout,
        &mask,
        &mut state.vp.mean.embeddings.data,
        &state.grads.embeddings,
    );
    if !state.config.freeze_rho {
        update_tables(opt, e, &layout, &mask, &mut state.vp.rho, &state.grad_rho);
    }
    update_dense(
        opt,
        2 * e,
        &mut state.vp.mean.heads,
        &state.grads.heads,
        &mut state.vp.mean.first_order,
        &state.grads.first_order,
        state.config.search.train_heads,
    );
    Ok(loss)
}

/// Draws embedding rows from the posterior on first touch within one
/// posterior sample, so scoring a request costs only the rows it reads.
#[derive(Debug, Clone)]
pub struct LazySampler {
    buf: EmbeddingTables,
    stamp: Vec<u32>,
    epoch: u32,
    /// Tables each field reads under the current selection.
    tables: Vec<Vec<OperatorKind>>,
}

impl LazySampler {
    pub fn new(layout: &ModelLayout) -> Self {
        let d = layout.dim().max(1);
        LazySampler {
            buf: EmbeddingTables::zeros(layout.clone()),
            stamp: vec![0; layout.embedding_len() / d],
            epoch: 0,
            tables: vec![Vec::new(); layout.n_fields()],
        }
    }

    /// Starts a fresh posterior sample under `selection`.
    pub fn begin(&mut self, selection: &OperatorSelection) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
        let layout = &self.buf.layout;
        for t in &mut self.tables {
            t.clear();
        }
        for ((i, j), &op) in crate::search::pairs(layout.n_fields()).zip(selection.ops()) {
            for f in [i, j] {
                let slot = layout.table_of(op);
                if !self.tables[f].iter().any(|&o| layout.table_of(o) == slot) {
                    self.tables[f].push(op);
                }
            }
        }
    }

    fn ensure<R: Rng + ?Sized>(&mut self, x: &FeatureVector, vp: &VariationalParams, rng: &mut R) {
        let d = self.buf.layout.dim();
        for (f, &v) in x.active().iter().enumerate() {
            for &op in &self.tables[f] {
                let off = self.buf.layout.row_offset(f, op, v);
                let r = off / d.max(1);
                if self.stamp[r] == self.epoch {
                    continue;
                }
                self.stamp[r] = self.epoch;
                for k in off..off + d {
                    let e: f64 = rng.sample(StandardNormal);
                    self.buf.data[k] = vp.mean.embeddings.data[k] + vp.sigma(k) * e;
                }
            }
        }
    }

    /// Logit of `x` under the current posterior sample.
    pub fn logit<R: Rng + ?Sized>(
        &mut self,
        x: &FeatureVector,
        selection: &OperatorSelection,
        vp: &VariationalParams,
        rng: &mut R,
    ) -> f64 {
        self.ensure(x, vp, rng);
        let view = ParamsRef {
            embeddings: &self.buf,
            heads: &vp.mean.heads,
            first_order: &vp.mean.first_order,
        };
        logit_selected(x, selection, view)
    }
}
