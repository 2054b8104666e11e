//! Selection policies.
//!
//! Every policy scores a list of candidates, picks the highest score (ties to
//! the lowest index) and learns from the batch of observations delivered at
//! the end of each feedback batch.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayes::{LazySampler, VariationalConfig, VariationalState};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, FieldSchema, LabeledExample};
use crate::model::{logit_selected, probability, ModelLayout, ModelParams};
use crate::optim::OptimizerKind;
use crate::search::{
    ifs_step, select_ops, InteractionMode, OperatorSelection, SearchConfig, SearchState,
};
use crate::bayes::vi_step;

/// Reward paid when the candidate's binary outcome is a success or a failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Payoff {
    pub success: f64,
    pub failure: f64,
}

impl Payoff {
    pub const CLICK: Payoff = Payoff {
        success: 1.0,
        failure: 0.0,
    };

    /// Expected reward given success probability `p`.
    #[inline]
    pub fn expected(&self, p: f64) -> f64 {
        self.failure + (self.success - self.failure) * p
    }

    /// Whether the outcome carries any information.
    pub fn informative(&self) -> bool {
        self.success != self.failure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x: FeatureVector,
    /// Stable identity of the arm (creative cell or action) for per-arm policies.
    pub arm: usize,
    pub payoff: Payoff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: FeatureVector,
    pub arm: usize,
    pub payoff: Payoff,
    pub reward: f64,
}

impl Observation {
    pub fn new(candidate: &Candidate, reward: f64) -> Self {
        Observation {
            x: candidate.x.clone(),
            arm: candidate.arm,
            payoff: candidate.payoff,
            reward,
        }
    }

    /// 1 when the success reward was paid out.
    pub fn label(&self) -> f64 {
        if self.payoff.informative() && self.reward == self.payoff.success {
            1.0
        } else {
            0.0
        }
    }

    pub fn example(&self) -> LabeledExample {
        LabeledExample::new(self.x.clone(), self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub chosen: usize,
    pub scores: Vec<f64>,
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn decide(scores: Vec<f64>) -> Decision {
    Decision {
        chosen: argmax(&scores),
        scores,
    }
}

fn uniform_decision<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Decision {
    let chosen = rng.random_range(0..n);
    let mut scores = vec![0.0; n];
    scores[chosen] = 1.0;
    Decision { chosen, scores }
}

// ---------------------------------------------------------------------------
// neural policies

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exploration {
    Greedy,
    Thompson,
    EpsilonGreedy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// A fresh posterior sample for every request.
    #[default]
    PerRequest,
    /// One posterior sample shared by every request of a feedback batch.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlWeight {
    /// `1 / N` with `N` the replay store size at update time.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub interaction: InteractionMode,
    pub operation_aware: bool,
    /// Frozen all-ones heads with zero bias (plain inner-product FM).
    pub fm_heads: bool,
    pub exploration: Exploration,
    pub sampling: SamplingMode,
    pub dim: usize,
    pub lr_alpha: f64,
    pub lr_theta: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub minibatch: usize,
    pub sigma0: f64,
    pub rho_init: f64,
    pub kl_weight: KlWeight,
    /// Oldest observations are dropped beyond this size.
    pub replay_cap: Option<usize>,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            interaction: InteractionMode::Search,
            operation_aware: true,
            fm_heads: false,
            exploration: Exploration::Thompson,
            sampling: SamplingMode::PerRequest,
            dim: 8,
            lr_alpha: 1e-2,
            lr_theta: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: 1,
            minibatch: 64,
            sigma0: 1.0,
            rho_init: crate::bayes::RHO_INIT,
            kl_weight: KlWeight::Auto,
            replay_cap: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Trainer {
    Point(SearchState),
    Variational(VariationalState),
}

#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    config: NeuralConfig,
    trainer: Trainer,
    selection: OperatorSelection,
    sampler: LazySampler,
    replay: Vec<LabeledExample>,
    order: Vec<usize>,
}

impl NeuralPolicy {
    pub fn new<R: Rng + ?Sized>(schema: &FieldSchema, config: NeuralConfig, rng: &mut R) -> Self {
        let layout = ModelLayout::for_schema(schema, config.dim, config.operation_aware);
        let mut params = ModelParams::init(layout.clone(), rng);
        if config.fm_heads {
            params.set_sum_pooling_heads();
        }
        let search = SearchConfig {
            lr_alpha: config.lr_alpha,
            lr_theta: config.lr_theta,
            optimizer: config.optimizer,
            mode: config.interaction,
            train_heads: !config.fm_heads,
        };
        let trainer = match config.exploration {
            Exploration::Thompson => Trainer::Variational(VariationalState::new(
                params,
                VariationalConfig {
                    search,
                    prior: crate::bayes::PriorSpec {
                        sigma0: config.sigma0,
                    },
                    kl_weight: 0.0,
                    rho_init: config.rho_init,
                    freeze_rho: false,
                },
            )),
            _ => Trainer::Point(SearchState::new(params, search)),
        };
        let mut p = NeuralPolicy {
            sampler: LazySampler::new(&layout),
            selection: OperatorSelection::uniform(layout.n_fields(), crate::model::OperatorKind::Multiply),
            config,
            trainer,
            replay: Vec::new(),
            order: Vec::new(),
        };
        p.selection = p.current_selection();
        p.sampler.begin(&p.selection);
        p
    }

    fn current_selection(&self) -> OperatorSelection {
        match &self.trainer {
            Trainer::Point(s) => select_ops(&s.alpha),
            Trainer::Variational(s) => select_ops(&s.alpha),
        }
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn selection(&self) -> &OperatorSelection {
        &self.selection
    }

    /// Posterior mean (or point estimate) parameters.
    pub fn mean_params(&self) -> &ModelParams {
        match &self.trainer {
            Trainer::Point(s) => &s.params,
            Trainer::Variational(s) => &s.vp.mean,
        }
    }

    pub fn variational(&self) -> Option<&VariationalState> {
        match &self.trainer {
            Trainer::Variational(s) => Some(s),
            Trainer::Point(_) => None,
        }
    }

    pub fn variational_mut(&mut self) -> Option<&mut VariationalState> {
        match &mut self.trainer {
            Trainer::Variational(s) => Some(s),
            Trainer::Point(_) => None,
        }
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    /// Logit of `x` at the posterior mean under the current operators.
    pub fn mean_logit(&self, x: &FeatureVector) -> f64 {
        logit_selected(x, &self.selection, self.mean_params().view())
    }

    fn begin_batch(&mut self) {
        if self.config.sampling == SamplingMode::PerBatch {
            self.sampler.begin(&self.selection);
        }
    }

    fn select<R: Rng + ?Sized>(&mut self, candidates: &[Candidate], rng: &mut R) -> Decision {
        if let Exploration::EpsilonGreedy(eps) = self.config.exploration {
            if rng.random::<f64>() < eps {
                return uniform_decision(candidates.len(), rng);
            }
        }
        let thompson = matches!(self.trainer, Trainer::Variational(_));
        if thompson && self.config.sampling == SamplingMode::PerRequest {
            self.sampler.begin(&self.selection);
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for c in candidates {
            if !c.payoff.informative() {
                scores.push(c.payoff.failure);
                continue;
            }
            let z = match &self.trainer {
                Trainer::Variational(s) => self.sampler.logit(&c.x, &self.selection, &s.vp, rng),
                Trainer::Point(s) => logit_selected(&c.x, &self.selection, s.params.view()),
            };
            scores.push(c.payoff.expected(probability(z)));
        }
        decide(scores)
    }

    fn update<R: Rng + ?Sized>(&mut self, observations: &[Observation], rng: &mut R) -> Result<()> {
        let before = self.replay.len();
        self.replay
            .extend(observations.iter().filter(|o| o.payoff.informative()).map(Observation::example));
        if self.replay.len() == before {
            return Ok(());
        }
        if let Some(cap) = self.config.replay_cap {
            if self.replay.len() > cap {
                let excess = self.replay.len() - cap;
                self.replay.drain(..excess);
            }
        }
        let n = self.replay.len();
        if let Trainer::Variational(s) = &mut self.trainer {
            s.config.kl_weight = match self.config.kl_weight {
                KlWeight::Auto => 1.0 / n as f64,
                KlWeight::Fixed(w) => w,
            };
        }
        let mb = self.config.minibatch.max(1);
        let mut batch: Vec<&LabeledExample> = Vec::with_capacity(mb);
        for _ in 0..self.config.epochs {
            self.order.clear();
            self.order.extend(0..n);
            self.order.shuffle(rng);
            for chunk in self.order.chunks(mb) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| &self.replay[i]));
                match &mut self.trainer {
                    Trainer::Point(s) => ifs_step(&batch, s)?,
                    Trainer::Variational(s) => vi_step(&batch, s, rng)?,
                };
            }
        }
        self.selection = self.current_selection();
        self.sampler.begin(&self.selection);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// linear policies

/// Maps a candidate to the indices of its nonzero (binary) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Featurizer {
    /// Concatenated per-field one-hots.
    OneHot { cards: Vec<usize> },
    /// One-hots plus one indicator per category pair of `cross_fields`.
    Poly2 {
        cards: Vec<usize>,
        cross_fields: Vec<usize>,
    },
    /// A separate copy of `inner` for each arm id.
    PerArm { inner: Box<Featurizer>, n_arms: usize },
}

fn poly2_dim(cards: &[usize], cross: &[usize]) -> usize {
    let base: usize = cards.iter().sum();
    let mut c = 0;
    for (a, &i) in cross.iter().enumerate() {
        for &j in &cross[a + 1..] {
            c += cards[i] * cards[j];
        }
    }
    base + c
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::OneHot { cards } => cards.iter().sum(),
            Featurizer::Poly2 { cards, cross_fields } => poly2_dim(cards, cross_fields),
            Featurizer::PerArm { inner, n_arms } => inner.dim() * n_arms,
        }
    }

    pub fn active(&self, c: &Candidate) -> Vec<usize> {
        match self {
            Featurizer::OneHot { cards } => one_hot_active(cards, &c.x),
            Featurizer::Poly2 { cards, cross_fields } => poly2_active(cards, cross_fields, &c.x),
            Featurizer::PerArm { inner, n_arms } => {
                let arm = c.arm.min(n_arms - 1);
                let off = arm * inner.dim();
                inner.active(c).into_iter().map(|i| i + off).collect()
            }
        }
    }
}

fn one_hot_active(cards: &[usize], x: &FeatureVector) -> Vec<usize> {
    let mut out = Vec::with_capacity(cards.len());
    let mut off = 0;
    for (&v, &l) in x.active().iter().zip(cards) {
        // unknown slot has no indicator
        if v < l {
            out.push(off + v);
        }
        off += l;
    }
    out
}

fn poly2_active(cards: &[usize], cross: &[usize], x: &FeatureVector) -> Vec<usize> {
    let mut out = one_hot_active(cards, x);
    let act = x.active();
    let mut off: usize = cards.iter().sum();
    for (a, &i) in cross.iter().enumerate() {
        for &j in &cross[a + 1..] {
            if act[i] < cards[i] && act[j] < cards[j] {
                out.push(off + act[i] * cards[j] + act[j]);
            }
            off += cards[i] * cards[j];
        }
    }
    out
}

/// Poly2 expansion over every field of `schema`: one-hots plus pairwise crosses.
pub fn mvt_featurize(schema: &FieldSchema, x: &FeatureVector) -> Vec<usize> {
    let cards = schema.cardinalities();
    let cross: Vec<usize> = (0..cards.len()).collect();
    poly2_active(&cards, &cross, x)
}

pub fn mvt_dim(schema: &FieldSchema) -> usize {
    let cards = schema.cardinalities();
    let cross: Vec<usize> = (0..cards.len()).collect();
    poly2_dim(&cards, &cross)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearRule {
    Ucb { alpha: f64 },
    Thompson { v: f64 },
}

/// Ridge regression on binary features: `A = λI + Σ x xᵀ`, `b = Σ y x`.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    featurizer: Featurizer,
    rule: LinearRule,
    sampling: SamplingMode,
    lambda: f64,
    a: DMatrix<f64>,
    b: DVector<f64>,
    theta: DVector<f64>,
    /// `A⁻¹` for UCB, or upper-triangular `M` with `M Mᵀ = A⁻¹` for Thompson.
    factor: DMatrix<f64>,
    z: Vec<f64>,
    sample: Vec<f64>,
    stamp: Vec<u32>,
    epoch: u32,
}

impl LinearPolicy {
    pub fn new(featurizer: Featurizer, rule: LinearRule, lambda: f64, sampling: SamplingMode) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::Config("ridge lambda must be positive".into()));
        }
        let n = featurizer.dim();
        let mut p = LinearPolicy {
            featurizer,
            rule,
            sampling,
            lambda,
            a: DMatrix::identity(n, n) * lambda,
            b: DVector::zeros(n),
            theta: DVector::zeros(n),
            factor: DMatrix::zeros(0, 0),
            z: vec![0.0; n],
            sample: vec![0.0; n],
            stamp: vec![0; n],
            epoch: 0,
        };
        p.refactor()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn refactor(&mut self) -> Result<()> {
        let n = self.dim();
        let chol = self
            .a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Shape("ridge matrix lost positive definiteness".into()))?;
        self.theta = chol.solve(&self.b);
        self.factor = match self.rule {
            LinearRule::Ucb { .. } => chol.inverse(),
            LinearRule::Thompson { .. } => {
                let l = chol.l();
                let linv = l
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .ok_or_else(|| Error::Shape("singular Cholesky factor".into()))?;
                linv.transpose()
            }
        };
        Ok(())
    }

    fn new_sample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for z in &mut self.z {
            *z = rng.sample(StandardNormal);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
    }

    /// Coordinate `i` of `θ̃ = θ̂ + v M z`, computed on first use per sample.
    fn sampled(&mut self, i: usize, v: f64) -> f64 {
        if self.stamp[i] != self.epoch {
            let n = self.dim();
            let mut acc = 0.0;
            for j in i..n {
                acc += self.factor[(i, j)] * self.z[j];
            }
            self.sample[i] = self.theta[i] + v * acc;
            self.stamp[i] = self.epoch;
        }
        self.sample[i]
    }

    fn begin_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.sampling == SamplingMode::PerBatch {
            self.new_sample(rng);
        }
    }

    fn select<R: Rng + ?Sized>(&mut self, candidates: &[Candidate], rng: &mut R) -> Decision {
        if matches!(self.rule, LinearRule::Thompson { .. }) && self.sampling == SamplingMode::PerRequest {
            self.new_sample(rng);
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for c in candidates {
            if !c.payoff.informative() {
                scores.push(c.payoff.failure);
                continue;
            }
            let idx = self.featurizer.active(c);
            let s = match self.rule {
                LinearRule::Ucb { alpha } => {
                    let mean: f64 = idx.iter().map(|&i| self.theta[i]).sum();
                    let mut w = 0.0;
                    for &i in &idx {
                        for &j in &idx {
                            w += self.factor[(i, j)];
                        }
                    }
                    mean + alpha * w.max(0.0).sqrt()
                }
                LinearRule::Thompson { v } => idx.iter().map(|&i| self.sampled(i, v)).sum(),
            };
            scores.push(c.payoff.expected(s));
        }
        decide(scores)
    }

    fn update(&mut self, observations: &[Observation]) -> Result<()> {
        let mut touched = false;
        for o in observations.iter().filter(|o| o.payoff.informative()) {
            let c = Candidate {
                x: o.x.clone(),
                arm: o.arm,
                payoff: o.payoff,
            };
            let idx = self.featurizer.active(&c);
            let y = o.label();
            for &i in &idx {
                for &j in &idx {
                    self.a[(i, j)] += 1.0;
                }
                self.b[i] += y;
            }
            touched = true;
        }
        if touched {
            self.refactor()?;
            // stale samples must not survive a posterior change
            self.epoch = self.epoch.wrapping_add(1);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// per-arm policies

#[derive(Debug, Clone)]
pub struct EgreedyPolicy {
    pub epsilon: f64,
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl EgreedyPolicy {
    pub fn new(epsilon: f64, n_arms: usize) -> Self {
        EgreedyPolicy {
            epsilon,
            counts: vec![0; n_arms],
            sums: vec![0.0; n_arms],
        }
    }

    /// Empirical mean reward; unplayed arms estimate 0.
    pub fn mean(&self, arm: usize) -> f64 {
        match self.counts.get(arm) {
            Some(&n) if n > 0 => self.sums[arm] / n as f64,
            _ => 0.0,
        }
    }

    pub fn count(&self, arm: usize) -> u64 {
        self.counts.get(arm).copied().unwrap_or(0)
    }

    fn select<R: Rng + ?Sized>(&self, candidates: &[Candidate], rng: &mut R) -> Decision {
        if rng.random::<f64>() < self.epsilon {
            return uniform_decision(candidates.len(), rng);
        }
        decide(candidates.iter().map(|c| self.mean(c.arm)).collect())
    }

    fn update(&mut self, observations: &[Observation]) {
        for o in observations {
            if o.arm >= self.counts.len() {
                self.counts.resize(o.arm + 1, 0);
                self.sums.resize(o.arm + 1, 0.0);
            }
            self.counts[o.arm] += 1;
            self.sums[o.arm] += o.reward;
        }
    }
}

/// Context-free Beta–Bernoulli Thompson sampling with a Beta(1, 50) prior.
#[derive(Debug, Clone)]
pub struct BetaTsPolicy {
    successes: Vec<f64>,
    failures: Vec<f64>,
}

pub const BETA_PRIOR: (f64, f64) = (1.0, 50.0);

impl BetaTsPolicy {
    pub fn new(n_arms: usize) -> Self {
        BetaTsPolicy {
            successes: vec![0.0; n_arms],
            failures: vec![0.0; n_arms],
        }
    }

    fn select<R: Rng + ?Sized>(&self, candidates: &[Candidate], rng: &mut R) -> Result<Decision> {
        let mut scores = Vec::with_capacity(candidates.len());
        for c in candidates {
            if !c.payoff.informative() {
                scores.push(c.payoff.failure);
                continue;
            }
            let s = self.successes.get(c.arm).copied().unwrap_or(0.0);
            let f = self.failures.get(c.arm).copied().unwrap_or(0.0);
            let beta = Beta::new(BETA_PRIOR.0 + s, BETA_PRIOR.1 + f)
                .map_err(|e| Error::Config(format!("beta posterior: {e}")))?;
            scores.push(c.payoff.expected(beta.sample(rng)));
        }
        Ok(decide(scores))
    }

    fn update(&mut self, observations: &[Observation]) {
        for o in observations.iter().filter(|o| o.payoff.informative()) {
            if o.arm >= self.successes.len() {
                self.successes.resize(o.arm + 1, 0.0);
                self.failures.resize(o.arm + 1, 0.0);
            }
            if o.label() == 1.0 {
                self.successes[o.arm] += 1.0;
            } else {
                self.failures[o.arm] += 1.0;
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Policy {
    Neural(Box<NeuralPolicy>),
    Linear(Box<LinearPolicy>),
    Egreedy(EgreedyPolicy),
    BetaTs(BetaTsPolicy),
    Uniform,
    /// Debug-only: reads the environment's expected rewards.
    Oracle,
}

impl Policy {
    pub fn begin_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        match self {
            Policy::Neural(p) => p.begin_batch(),
            Policy::Linear(p) => p.begin_batch(rng),
            _ => {}
        }
    }

    /// Picks a candidate. `expected` is only consulted by [`Policy::Oracle`].
    pub fn select<R: Rng + ?Sized>(
        &mut self,
        candidates: &[Candidate],
        expected: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Decision> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        Ok(match self {
            Policy::Neural(p) => p.select(candidates, rng),
            Policy::Linear(p) => p.select(candidates, rng),
            Policy::Egreedy(p) => p.select(candidates, rng),
            Policy::BetaTs(p) => p.select(candidates, rng)?,
            Policy::Uniform => uniform_decision(candidates.len(), rng),
            Policy::Oracle => {
                let e = expected.ok_or_else(|| Error::Config("oracle policy needs expected rewards".into()))?;
                if e.len() != candidates.len() {
                    return Err(Error::Shape("expected rewards do not match candidates".into()));
                }
                decide(e.to_vec())
            }
        })
    }

    pub fn update<R: Rng + ?Sized>(&mut self, observations: &[Observation], rng: &mut R) -> Result<()> {
        if observations.is_empty() {
            return Ok(());
        }
        match self {
            Policy::Neural(p) => p.update(observations, rng)?,
            Policy::Linear(p) => p.update(observations)?,
            Policy::Egreedy(p) => p.update(observations),
            Policy::BetaTs(p) => p.update(observations),
            Policy::Uniform | Policy::Oracle => {}
        }
        Ok(())
    }

    /// Operators currently in use by neural policies.
    pub fn operators(&self) -> Option<&OperatorSelection> {
        match self {
            Policy::Neural(p) => Some(p.selection()),
            _ => None,
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, Policy::Oracle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OperatorKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn click(x: Vec<usize>, arm: usize) -> Candidate {
        Candidate {
            x: FeatureVector::new(x),
            arm,
            payoff: Payoff::CLICK,
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn uniform_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands: Vec<_> = (0..4).map(|i| click(vec![i], i)).collect();
        let mut counts = [0usize; 4];
        let mut p = Policy::Uniform;
        let n = 100_000;
        for _ in 0..n {
            counts[p.select(&cands, None, &mut rng).unwrap().chosen] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn egreedy_mixture_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_arms = 5;
        let mut e = EgreedyPolicy::new(0.1, n_arms);
        let cands: Vec<_> = (0..n_arms).map(|i| click(vec![i], i)).collect();
        e.update(&[Observation::new(&cands[1], 1.0)]);
        for a in [0, 2, 3, 4] {
            e.update(&[Observation::new(&cands[a], 0.0)]);
        }
        let mut p = Policy::Egreedy(e);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| p.select(&cands, None, &mut rng).unwrap().chosen == 1)
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - (0.9 + 0.1 / n_arms as f64)).abs() < 0.005, "{f}");
    }

    #[test]
    fn empty_candidates_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Policy::Uniform.select(&[], None, &mut rng),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn linucb_single_update_closed_form() {
        let f = Featurizer::OneHot { cards: vec![3] };
        let mut p = LinearPolicy::new(f, LinearRule::Ucb { alpha: 1.0 }, 1.0, SamplingMode::PerRequest).unwrap();
        let c = click(vec![0], 0);
        p.update(&[Observation::new(&c, 1.0)]).unwrap();
        assert_eq!(p.a()[(0, 0)], 2.0);
        assert_eq!(p.a()[(1, 1)], 1.0);
        assert_eq!(p.b()[0], 1.0);
        assert!((p.theta()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_policy_empty_update_is_noop() {
        let f = Featurizer::OneHot { cards: vec![2, 2] };
        let mut p = Policy::Linear(Box::new(
            LinearPolicy::new(f, LinearRule::Thompson { v: 0.25 }, 1.0, SamplingMode::PerRequest).unwrap(),
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.update(&[], &mut rng).unwrap();
        let Policy::Linear(l) = &p else { unreachable!() };
        assert_eq!(l.a(), &DMatrix::identity(4, 4));
    }

    #[test]
    fn lints_sample_covariance() {
        // θ̃ - θ̂ should have covariance v² A⁻¹
        let f = Featurizer::OneHot { cards: vec![2, 2] };
        let mut p = LinearPolicy::new(f, LinearRule::Thompson { v: 0.5 }, 1.0, SamplingMode::PerRequest).unwrap();
        let obs: Vec<_> = [vec![0, 0], vec![0, 1], vec![1, 1], vec![0, 0]]
            .into_iter()
            .map(|x| Observation::new(&click(x, 0), 1.0))
            .collect();
        p.update(&obs).unwrap();
        let a_inv = p.a().clone().try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut cov = [[0.0; 4]; 4];
        for _ in 0..n {
            p.new_sample(&mut rng);
            let d: Vec<f64> = (0..4).map(|i| p.sampled(i, 0.5) - p.theta()[i]).collect();
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += d[i] * d[j] / n as f64;
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                assert!((cov[i][j] - 0.25 * a_inv[(i, j)]).abs() < 0.005);
            }
        }
    }

    #[test]
    fn mvt_featurize_examples() {
        let schema = FieldSchema::with_cardinalities(&[("a", 2), ("b", 2)]).unwrap();
        let idx = mvt_featurize(&schema, &FeatureVector::new(vec![0, 1]));
        // base dims 0 and 3, then cross (0:0, 1:1) = 4 + 0*2 + 1
        assert_eq!(idx, vec![0, 3, 5]);
        assert_eq!(mvt_dim(&schema), 8);
        let synth = FieldSchema::with_cardinalities(&[("t", 4), ("s", 5), ("f", 10), ("b", 2), ("c", 10)]).unwrap();
        // 31 one-hots + 358 crosses
        assert_eq!(mvt_dim(&synth), 389);
    }

    #[test]
    fn mushroom_style_labels() {
        let eat = Candidate {
            x: FeatureVector::new(vec![0]),
            arm: 0,
            payoff: Payoff {
                success: 5.0,
                failure: -35.0,
            },
        };
        assert_eq!(Observation::new(&eat, 5.0).label(), 1.0);
        assert_eq!(Observation::new(&eat, -35.0).label(), 0.0);
        let skip = Candidate {
            payoff: Payoff {
                success: 0.0,
                failure: 0.0,
            },
            ..eat
        };
        assert_eq!(Observation::new(&skip, 0.0).label(), 0.0);
        assert_eq!(eat.payoff.expected(0.5), -15.0);
    }

    fn toy_schema() -> FieldSchema {
        FieldSchema::with_cardinalities(&[("a", 3), ("b", 4), ("c", 2)]).unwrap()
    }

    #[test]
    fn collapsed_thompson_matches_greedy() {
        let schema = toy_schema();
        let cfg = NeuralConfig {
            dim: 3,
            rho_init: -1000.0,
            kl_weight: KlWeight::Fixed(0.0),
            interaction: InteractionMode::Fixed(OperatorKind::Multiply),
            ..NeuralConfig::default()
        };
        let mut ts = NeuralPolicy::new(&schema, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5));
        if let Some(v) = ts.variational_mut() {
            v.config.freeze_rho = true;
        }
        let mut greedy = NeuralPolicy::new(
            &schema,
            NeuralConfig {
                exploration: Exploration::Greedy,
                ..cfg
            },
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let cands: Vec<_> = (0..24).map(|i| click(vec![i % 3, i % 4, i % 2], i)).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for round in 0..5 {
            let a = ts.select(&cands, &mut r1);
            let b = greedy.select(&cands, &mut r2);
            assert_eq!(a, b);
            let obs: Vec<_> = cands
                .iter()
                .enumerate()
                .map(|(i, c)| Observation::new(c, ((i + round) % 3 == 0) as u8 as f64))
                .collect();
            ts.update(&obs, &mut ChaCha8Rng::seed_from_u64(round as u64)).unwrap();
            greedy.update(&obs, &mut ChaCha8Rng::seed_from_u64(round as u64)).unwrap();
        }
    }

    #[test]
    fn posterior_mean_rises_for_always_clicked() {
        let schema = toy_schema();
        let mut ups = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = NeuralPolicy::new(
                &schema,
                NeuralConfig {
                    dim: 4,
                    lr_theta: 1e-2,
                    ..NeuralConfig::default()
                },
                &mut rng,
            );
            let good = click(vec![1, 2, 0], 0);
            let before = p.mean_logit(&good.x);
            let obs: Vec<_> = (0..50).map(|_| Observation::new(&good, 1.0)).collect();
            p.update(&obs, &mut rng).unwrap();
            if p.mean_logit(&good.x) > before {
                ups += 1;
            }
        }
        assert!(ups >= 3);
    }

    #[test]
    fn oracle_picks_best_expected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cands: Vec<_> = (0..3).map(|i| click(vec![i], i)).collect();
        let d = Policy::Oracle.select(&cands, Some(&[0.1, 0.3, 0.2]), &mut rng).unwrap();
        assert_eq!(d.chosen, 1);
        assert!(Policy::Oracle.select(&cands, None, &mut rng).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ridge_matrix_stays_spd(
            lambda in 0.1f64..5.0,
            rows in proptest::collection::vec((0usize..2, 0usize..3, 0u8..2), 1..30),
        ) {
            let cards = vec![2, 3];
            let mut p = LinearPolicy::new(
                Featurizer::OneHot { cards: cards.clone() },
                LinearRule::Thompson { v: 0.5 },
                lambda,
                SamplingMode::PerRequest,
            )
            .unwrap();
            let obs: Vec<Observation> = rows
                .iter()
                .map(|&(a, b, y)| Observation::new(&click(vec![a, b], 0), f64::from(y)))
                .collect();
            let mut policy = Policy::Linear(Box::new(p.clone()));
            policy.update(&obs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            if let Policy::Linear(l) = policy {
                p = *l;
            }
            let mut want = DMatrix::<f64>::identity(5, 5) * lambda;
            for &(a, b, _) in &rows {
                for i in [a, 2 + b] {
                    for j in [a, 2 + b] {
                        want[(i, j)] += 1.0;
                    }
                }
            }
            proptest::prop_assert!((p.a() - &want).abs().max() < 1e-12);
            proptest::prop_assert!(p.a().clone().cholesky().is_some());
            let resid = p.a() * p.theta() - p.b();
            proptest::prop_assert!(resid.abs().max() < 1e-9);
        }
    }

}
