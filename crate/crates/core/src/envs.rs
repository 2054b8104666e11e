//! Reward-generating environments with known expected rewards.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::bandit::{Candidate, Payoff};
use crate::error::{Error, Result};
use crate::features::{Dataset, FeatureVector, Field, FieldSchema};
use crate::model::{probability, ModelLayout, ModelParams, OperatorKind};
use crate::search::OperatorSelection;

// ---------------------------------------------------------------------------
// synthetic creative world

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_products: usize,
    pub candidates_per_product: usize,
    /// Poisson-distributed candidate counts around `candidates_per_product`.
    pub jitter: bool,
    pub elements: Vec<(String, usize)>,
    pub hidden_dim: usize,
    pub embedding_std: f64,
    /// Value of every hidden head weight.
    pub head_scale: f64,
    pub target_ctr: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_products: 167,
            candidates_per_product: 67,
            jitter: false,
            elements: vec![
                ("template".into(), 4),
                ("picture-size".into(), 5),
                ("font".into(), 10),
                ("blur".into(), 2),
                ("color".into(), 10),
            ],
            hidden_dim: 8,
            embedding_std: 1.0,
            head_scale: 0.03,
            target_ctr: 0.0885,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub config: SyntheticConfig,
    pub seed: Option<u64>,
    /// Operators of the hidden model, over (product, elements...) field pairs.
    pub operators: OperatorSelection,
    pub bias: f64,
    pub mean_ctr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub schema: FieldSchema,
    pub candidates: Vec<Vec<FeatureVector>>,
    pub true_ctr: Vec<Vec<f64>>,
    pub meta: WorldMeta,
}

fn synthetic_schema(config: &SyntheticConfig) -> Result<FieldSchema> {
    let mut fields = vec![Field {
        name: "product".into(),
        vocabulary: (0..config.n_products).map(|i| format!("p{i}")).collect(),
    }];
    for (name, card) in &config.elements {
        fields.push(Field {
            name: name.clone(),
            vocabulary: (0..*card).map(|i| i.to_string()).collect(),
        });
    }
    FieldSchema::new(fields)
}

fn mean_ctr(logits: &[Vec<f64>], bias: f64) -> f64 {
    let n: usize = logits.iter().map(Vec::len).sum();
    logits
        .iter()
        .flatten()
        .map(|&z| probability(z + bias))
        .sum::<f64>()
        / n as f64
}

/// Global bias `b` with mean CTR `target`; the mean is increasing in `b`.
fn calibrate_bias(logits: &[Vec<f64>], target: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while mean_ctr(logits, lo) > target {
        lo *= 2.0;
    }
    while mean_ctr(logits, hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ctr(logits, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Builds a world from a hidden operation-aware model with uniformly random
/// per-pair operators, N(0, std²) embeddings and constant heads.
pub fn synth_generate<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<SyntheticWorld> {
    if config.n_products == 0 || config.candidates_per_product == 0 || config.elements.is_empty() {
        return Err(Error::Config("synthetic world needs products, candidates and elements".into()));
    }
    if !(0.0..1.0).contains(&config.target_ctr) || config.target_ctr == 0.0 {
        return Err(Error::Config("target_ctr must be in (0, 1)".into()));
    }
    let schema = synthetic_schema(config)?;
    let layout = ModelLayout::new(schema.cardinalities(), config.hidden_dim, true);
    let n_fields = layout.n_fields();

    let ops = (0..layout.n_pairs())
        .map(|_| OperatorKind::ALL[rng.random_range(0..OperatorKind::ALL.len())])
        .collect();
    let operators = OperatorSelection::from_ops(n_fields, ops)?;
    let mut hidden = ModelParams::zeros(layout);
    let normal = Normal::new(0.0, config.embedding_std)
        .map_err(|e| Error::Config(format!("embedding_std: {e}")))?;
    for v in &mut hidden.embeddings.data {
        *v = normal.sample(rng);
    }
    hidden.set_sum_pooling_heads();
    for h in &mut hidden.heads {
        h.weights.iter_mut().for_each(|w| *w = config.head_scale);
    }

    let cards: Vec<usize> = config.elements.iter().map(|(_, c)| *c).collect();
    let combos: usize = cards.iter().product();
    let mut candidates = Vec::with_capacity(config.n_products);
    let mut logits = Vec::with_capacity(config.n_products);
    for product in 0..config.n_products {
        let k = if config.jitter {
            let p = Poisson::new(config.candidates_per_product as f64)
                .map_err(|e| Error::Config(format!("jitter: {e}")))?;
            (p.sample(rng) as usize).clamp(1, combos)
        } else {
            config.candidates_per_product.min(combos)
        };
        let mut picked = sample_indices(rng, combos, k).into_vec();
        picked.sort_unstable();
        let mut cs = Vec::with_capacity(k);
        let mut zs = Vec::with_capacity(k);
        for combo in picked {
            let mut x = vec![product];
            let mut rest = combo;
            for &c in &cards {
                x.push(rest % c);
                rest /= c;
            }
            let x = FeatureVector::new(x);
            zs.push(crate::model::logit_selected(&x, &operators, hidden.view()));
            cs.push(x);
        }
        candidates.push(cs);
        logits.push(zs);
    }

    let bias = calibrate_bias(&logits, config.target_ctr);
    let true_ctr: Vec<Vec<f64>> = logits
        .iter()
        .map(|zs| zs.iter().map(|&z| probability(z + bias)).collect())
        .collect();
    let mean = mean_ctr(&logits, bias);
    Ok(SyntheticWorld {
        schema,
        candidates,
        true_ctr,
        meta: WorldMeta {
            config: config.clone(),
            seed: None,
            operators,
            bias,
            mean_ctr: mean,
        },
    })
}

impl SyntheticWorld {
    pub fn n_products(&self) -> usize {
        self.candidates.len()
    }

    pub fn n_cells(&self) -> usize {
        self.candidates.iter().map(Vec::len).sum()
    }

    pub fn mean_ctr(&self) -> f64 {
        let n = self.n_cells() as f64;
        self.true_ctr.iter().flatten().sum::<f64>() / n
    }

    /// Best candidate of a product and its CTR.
    pub fn oracle(&self, product: usize) -> (usize, f64) {
        let ctr = &self.true_ctr[product];
        let best = crate::bandit::argmax(ctr);
        (best, ctr[best])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Bernoulli draw for showing `candidate` of `product`.
pub fn synth_step<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    product: usize,
    candidate: usize,
    rng: &mut R,
) -> Result<f64> {
    let ctr = world
        .true_ctr
        .get(product)
        .and_then(|c| c.get(candidate))
        .ok_or(Error::ForeignCandidate { product, candidate })?;
    Ok(if rng.random::<f64>() < *ctr { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// replay bandits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayKind {
    Mushroom,
    Adult,
}

impl ReplayKind {
    pub fn actions(self) -> [&'static str; 2] {
        match self {
            ReplayKind::Mushroom => ["eat", "no-eat"],
            ReplayKind::Adult => [">50K", "<=50K"],
        }
    }

    pub fn payoffs(self) -> [Payoff; 2] {
        match self {
            ReplayKind::Mushroom => [
                Payoff {
                    success: MUSHROOM_EAT_REWARD,
                    failure: MUSHROOM_POISON_REWARD,
                },
                Payoff {
                    success: 0.0,
                    failure: 0.0,
                },
            ],
            ReplayKind::Adult => [Payoff::CLICK, Payoff::CLICK],
        }
    }
}

pub const MUSHROOM_EAT_REWARD: f64 = 5.0;
pub const MUSHROOM_POISON_REWARD: f64 = -35.0;
pub const MUSHROOM_EAT: usize = 0;
pub const MUSHROOM_SKIP: usize = 1;
pub const ADULT_OVER: usize = 0;
pub const ADULT_UNDER: usize = 1;

/// Reward of `action` on a record whose label is `positive`
/// (Mushroom: edible, Adult: income over 50K).
pub fn bandit_step<R: Rng + ?Sized>(kind: ReplayKind, positive: bool, action: usize, rng: &mut R) -> Result<f64> {
    match (kind, action) {
        (ReplayKind::Mushroom, MUSHROOM_EAT) => Ok(if positive || rng.random::<f64>() < 0.5 {
            MUSHROOM_EAT_REWARD
        } else {
            MUSHROOM_POISON_REWARD
        }),
        (ReplayKind::Mushroom, MUSHROOM_SKIP) => Ok(0.0),
        (ReplayKind::Adult, ADULT_OVER) => Ok(positive as u8 as f64),
        (ReplayKind::Adult, ADULT_UNDER) => Ok(!positive as u8 as f64),
        (_, a) => Err(Error::InvalidAction(a)),
    }
}

fn expected_reward(kind: ReplayKind, positive: bool, action: usize) -> f64 {
    match (kind, action) {
        (ReplayKind::Mushroom, MUSHROOM_EAT) if positive => MUSHROOM_EAT_REWARD,
        (ReplayKind::Mushroom, MUSHROOM_EAT) => 0.5 * (MUSHROOM_EAT_REWARD + MUSHROOM_POISON_REWARD),
        (ReplayKind::Mushroom, _) => 0.0,
        (ReplayKind::Adult, ADULT_OVER) => positive as u8 as f64,
        (ReplayKind::Adult, _) => !positive as u8 as f64,
    }
}

/// A labelled dataset turned into a two-action contextual bandit. Candidates
/// are the record's features plus an action field.
#[derive(Debug, Clone)]
pub struct ReplayBandit {
    pub kind: ReplayKind,
    pub schema: FieldSchema,
    labels: Vec<bool>,
    candidates: Vec<Vec<Candidate>>,
    expected: Vec<Vec<f64>>,
}

impl ReplayBandit {
    pub fn new(kind: ReplayKind, dataset: &Dataset) -> Result<Self> {
        if dataset.records.is_empty() {
            return Err(Error::NoRecords);
        }
        let actions = kind.actions();
        let schema = dataset.schema.with_field(Field {
            name: "action".into(),
            vocabulary: actions.iter().map(|s| s.to_string()).collect(),
        })?;
        let payoffs = kind.payoffs();
        let mut candidates = Vec::with_capacity(dataset.records.len());
        let mut expected = Vec::with_capacity(dataset.records.len());
        for r in &dataset.records {
            candidates.push(
                (0..2)
                    .map(|a| Candidate {
                        x: r.x.extended(a),
                        arm: a,
                        payoff: payoffs[a],
                    })
                    .collect(),
            );
            expected.push((0..2).map(|a| expected_reward(kind, r.positive, a)).collect());
        }
        Ok(ReplayBandit {
            kind,
            schema,
            labels: dataset.records.iter().map(|r| r.positive).collect(),
            candidates,
            expected,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, record: usize) -> bool {
        self.labels[record]
    }

    /// Best action and its expected reward.
    pub fn oracle_expected(&self, record: usize) -> (usize, f64) {
        let e = &self.expected[record];
        let best = crate::bandit::argmax(e);
        (best, e[best])
    }
}

// ---------------------------------------------------------------------------

/// Any environment the harness can run; cheap to clone and share.
#[derive(Debug, Clone)]
pub enum Environment {
    Synthetic(Arc<SyntheticEnv>),
    Replay(Arc<ReplayBandit>),
}

/// A synthetic world with its candidate lists materialised.
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    pub world: SyntheticWorld,
    candidates: Vec<Vec<Candidate>>,
}

impl SyntheticEnv {
    pub fn new(world: SyntheticWorld) -> Self {
        let mut arm = 0;
        let candidates = world
            .candidates
            .iter()
            .map(|cs| {
                cs.iter()
                    .map(|x| {
                        let c = Candidate {
                            x: x.clone(),
                            arm,
                            payoff: Payoff::CLICK,
                        };
                        arm += 1;
                        c
                    })
                    .collect()
            })
            .collect();
        SyntheticEnv { world, candidates }
    }
}

impl Environment {
    pub fn schema(&self) -> &FieldSchema {
        match self {
            Environment::Synthetic(s) => &s.world.schema,
            Environment::Replay(r) => &r.schema,
        }
    }

    pub fn n_contexts(&self) -> usize {
        match self {
            Environment::Synthetic(s) => s.world.n_products(),
            Environment::Replay(r) => r.len(),
        }
    }

    pub fn n_arms(&self) -> usize {
        match self {
            Environment::Synthetic(s) => s.world.n_cells(),
            Environment::Replay(_) => 2,
        }
    }

    /// Uniform draw of a product or a record (with replacement).
    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.n_contexts())
    }

    pub fn candidates(&self, ctx: usize) -> &[Candidate] {
        match self {
            Environment::Synthetic(s) => &s.candidates[ctx],
            Environment::Replay(r) => &r.candidates[ctx],
        }
    }

    pub fn expected(&self, ctx: usize) -> &[f64] {
        match self {
            Environment::Synthetic(s) => &s.world.true_ctr[ctx],
            Environment::Replay(r) => &r.expected[ctx],
        }
    }

    pub fn oracle_expected(&self, ctx: usize) -> (usize, f64) {
        match self {
            Environment::Synthetic(s) => s.world.oracle(ctx),
            Environment::Replay(r) => r.oracle_expected(ctx),
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, ctx: usize, candidate: usize, rng: &mut R) -> Result<f64> {
        match self {
            Environment::Synthetic(s) => synth_step(&s.world, ctx, candidate, rng),
            Environment::Replay(r) => {
                if candidate >= 2 {
                    return Err(Error::InvalidAction(candidate));
                }
                bandit_step(r.kind, r.labels[ctx], candidate, rng)
            }
        }
    }

    /// Whether rewards are 0/1 so cumulative reward per trial is a CTR.
    pub fn binary_reward(&self) -> bool {
        match self {
            Environment::Synthetic(_) => true,
            Environment::Replay(r) => r.kind == ReplayKind::Adult,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DatasetRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            n_products: 20,
            candidates_per_product: 15,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn default_world_shape_and_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = synth_generate(&SyntheticConfig::default(), &mut rng).unwrap();
        assert_eq!(w.n_products(), 167);
        assert!(w.candidates.iter().all(|c| c.len() == 67));
        assert_eq!(w.n_cells(), 11_189);
        assert!((w.mean_ctr() - 0.0885).abs() < 0.005);
        assert!(w.true_ctr.iter().flatten().all(|&p| p > 0.0 && p < 1.0));
        for (p, cs) in w.candidates.iter().enumerate() {
            let mut sorted = cs.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), cs.len(), "duplicate candidate for product {p}");
            let (_, best) = w.oracle(p);
            let mean = w.true_ctr[p].iter().sum::<f64>() / cs.len() as f64;
            assert!(best >= mean);
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = synth_generate(&small_config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_generate(&small_config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small_config(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn world_json_round_trip() {
        let w = synth_generate(&small_config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        w.save(&path).unwrap();
        assert_eq!(SyntheticWorld::load(&path).unwrap(), w);
    }

    #[test]
    fn jittered_counts_vary() {
        let cfg = SyntheticConfig {
            jitter: true,
            ..small_config()
        };
        let w = synth_generate(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let lens: Vec<_> = w.candidates.iter().map(Vec::len).collect();
        assert!(lens.iter().any(|&l| l != lens[0]));
        assert!(lens.iter().all(|&l| l >= 1));
    }

    #[test]
    fn synth_step_degenerate_and_foreign() {
        let mut w = synth_generate(&small_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        w.true_ctr[0][0] = 0.0;
        w.true_ctr[0][1] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(synth_step(&w, 0, 0, &mut rng).unwrap(), 0.0);
            assert_eq!(synth_step(&w, 0, 1, &mut rng).unwrap(), 1.0);
        }
        assert!(matches!(
            synth_step(&w, 0, 99, &mut rng),
            Err(Error::ForeignCandidate { product: 0, candidate: 99 })
        ));
    }

    #[test]
    fn synth_step_monte_carlo() {
        let mut w = synth_generate(&small_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        w.true_ctr[1][2] = 0.0885;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let hits: f64 = (0..n).map(|_| synth_step(&w, 1, 2, &mut rng).unwrap()).sum();
        assert!((hits / n as f64 - 0.0885).abs() < 0.003);
    }

    #[test]
    fn mushroom_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = ReplayKind::Mushroom;
        assert_eq!(bandit_step(k, true, MUSHROOM_EAT, &mut rng).unwrap(), 5.0);
        assert_eq!(bandit_step(k, false, MUSHROOM_SKIP, &mut rng).unwrap(), 0.0);
        assert_eq!(bandit_step(k, true, MUSHROOM_SKIP, &mut rng).unwrap(), 0.0);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| bandit_step(k, false, MUSHROOM_EAT, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean + 15.0).abs() < 0.3, "{mean}");
        assert!(bandit_step(k, true, 2, &mut rng).is_err());
    }

    #[test]
    fn adult_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = ReplayKind::Adult;
        assert_eq!(bandit_step(k, true, ADULT_OVER, &mut rng).unwrap(), 1.0);
        assert_eq!(bandit_step(k, true, ADULT_UNDER, &mut rng).unwrap(), 0.0);
        assert_eq!(bandit_step(k, false, ADULT_UNDER, &mut rng).unwrap(), 1.0);
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            name: "toy".into(),
            schema: FieldSchema::with_cardinalities(&[("a", 2)]).unwrap(),
            records: vec![
                DatasetRecord {
                    x: FeatureVector::new(vec![0]),
                    positive: true,
                },
                DatasetRecord {
                    x: FeatureVector::new(vec![1]),
                    positive: false,
                },
            ],
        }
    }

    #[test]
    fn replay_oracle() {
        let m = ReplayBandit::new(ReplayKind::Mushroom, &toy_dataset()).unwrap();
        assert_eq!(m.oracle_expected(0), (MUSHROOM_EAT, 5.0));
        assert_eq!(m.oracle_expected(1), (MUSHROOM_SKIP, 0.0));
        assert_eq!(m.schema.len(), 2);
        let a = ReplayBandit::new(ReplayKind::Adult, &toy_dataset()).unwrap();
        assert_eq!(a.oracle_expected(0), (ADULT_OVER, 1.0));
        assert_eq!(a.oracle_expected(1), (ADULT_UNDER, 1.0));
        let env = Environment::Replay(Arc::new(a));
        assert_eq!(env.candidates(1)[1].x, FeatureVector::new(vec![1, 1]));
    }

    #[test]
    fn replay_contexts_uniform() {
        let env = Environment::Replay(Arc::new(ReplayBandit::new(ReplayKind::Adult, &toy_dataset()).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let ones = (0..n).filter(|_| env.sample_context(&mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }
}
