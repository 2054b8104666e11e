//! Experiment orchestration: the batched feedback protocol, repetitions,
//! metrics and output files.
//!
//! Every (algorithm, repetition) cell runs independently. Within one
//! repetition all algorithms see the same environment and the same stream of
//! contexts; policy and reward randomness come from per-cell seeds derived by
//! hashing the master seed with the cell's name, so results do not depend on
//! execution order or thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandit::{
    Featurizer, EgreedyPolicy, BetaTsPolicy, Exploration, KlWeight, LinearPolicy, LinearRule, NeuralConfig,
    NeuralPolicy, Observation, Policy, SamplingMode,
};
use crate::envs::{Environment, ReplayBandit, ReplayKind, SyntheticConfig, SyntheticEnv, SyntheticWorld};
use crate::error::{Error, Result};
use crate::features::load_dataset;
use crate::model::OperatorKind;
use crate::optim::OptimizerKind;
use crate::search::{InteractionMode, OperatorSelection};

/// Largest feature dimension accepted for dense ridge policies.
pub const MAX_LINEAR_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Autoco,
    /// Search without Thompson sampling (greedy at the point estimate).
    AutocoGreedy,
    /// Search with one shared embedding table per field.
    AutocoNoOae,
    Fm,
    FmTs,
    FmEgreedy,
    MultiplyTs,
    PlusTs,
    MaxTs,
    MinTs,
    ConcatTs,
    Linucb,
    Lints,
    Mvt,
    Egreedy,
    Uniform,
    BetaTs,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: String,
    pub policy: PolicyKind,
    pub epsilon: Option<f64>,
    pub alpha_ucb: Option<f64>,
    pub v: Option<f64>,
    pub lambda: Option<f64>,
    pub sampling: Option<SamplingMode>,
}

impl AlgorithmSpec {
    pub fn new(name: &str, policy: PolicyKind) -> Self {
        AlgorithmSpec {
            name: name.into(),
            policy,
            epsilon: None,
            alpha_ucb: None,
            v: None,
            lambda: None,
            sampling: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Synthetic,
    Mushroom,
    Adult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    /// Raw UCI files or one prepared JSON dataset (replay environments).
    #[serde(default)]
    pub data: Vec<PathBuf>,
    /// A fixed world artifact shared by every repetition (synthetic only).
    #[serde(default)]
    pub world: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub lr_alpha: f64,
    pub lr_theta: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub minibatch: usize,
    pub sigma0: f64,
    pub rho_init: f64,
    /// Omitted: `1 / N` with `N` the replay size.
    pub kl_weight: Option<f64>,
    pub replay_cap: Option<usize>,
    pub sampling: SamplingMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let n = NeuralConfig::default();
        ModelSpec {
            dim: n.dim,
            lr_alpha: n.lr_alpha,
            lr_theta: n.lr_theta,
            optimizer: n.optimizer,
            epochs: n.epochs,
            minibatch: n.minibatch,
            sigma0: n.sigma0,
            rho_init: n.rho_init,
            kl_weight: None,
            replay_cap: None,
            sampling: SamplingMode::PerRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub batches: usize,
    pub trials_per_batch: usize,
    /// Leading trials in which every learning policy chooses uniformly.
    #[serde(default)]
    pub warmup_trials: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    /// Also write every decision to `decisions.csv`.
    #[serde(default)]
    pub log_decisions: bool,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub algorithms: Vec<AlgorithmSpec>,
}

fn default_repetitions() -> usize {
    5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallel() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are resolved against the config file
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() && !p.exists() {
                    let alt = dir.join(&*p);
                    if alt.exists() {
                        *p = alt;
                    }
                }
            };
            cfg.environment.data.iter_mut().for_each(fix);
            if let Some(w) = cfg.environment.world.as_mut() {
                fix(w);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 || self.batches == 0 || self.trials_per_batch == 0 {
            return Err(Error::Config("repetitions, batches and trials_per_batch must be positive".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms".into()));
        }
        let m = &self.model;
        if m.dim == 0 || m.epochs == 0 || m.minibatch == 0 || m.sigma0 <= 0.0 {
            return Err(Error::Config("model dim, epochs, minibatch and sigma0 must be positive".into()));
        }
        let mut names: Vec<&str> = self.algorithms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate algorithm names".into()));
        }
        for a in &self.algorithms {
            if a.name.is_empty() || a.name.contains([',', '"', '\n']) {
                return Err(Error::Config(format!("invalid algorithm name {:?}", a.name)));
            }
            if let Some(e) = a.epsilon {
                if !(0.0..=1.0).contains(&e) {
                    return Err(Error::Config(format!("{}: epsilon must be in [0, 1]", a.name)));
                }
            }
        }
        match self.environment.kind {
            EnvKind::Synthetic => {}
            EnvKind::Mushroom | EnvKind::Adult if self.environment.data.is_empty() => {
                return Err(Error::Config("replay environments need `data` paths".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// seeds

/// Deterministic 64-bit seed from the master seed and a list of labels.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn rng_for(master: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, labels))
}

// ---------------------------------------------------------------------------
// policy construction

fn neural_config(kind: PolicyKind, spec: &AlgorithmSpec, m: &ModelSpec) -> NeuralConfig {
    let mut c = NeuralConfig {
        dim: m.dim,
        lr_alpha: m.lr_alpha,
        lr_theta: m.lr_theta,
        optimizer: m.optimizer,
        epochs: m.epochs,
        minibatch: m.minibatch,
        sigma0: m.sigma0,
        rho_init: m.rho_init,
        kl_weight: m.kl_weight.map_or(KlWeight::Auto, KlWeight::Fixed),
        replay_cap: m.replay_cap,
        sampling: spec.sampling.unwrap_or(m.sampling),
        ..NeuralConfig::default()
    };
    let fixed = |op| InteractionMode::Fixed(op);
    match kind {
        PolicyKind::Autoco => {}
        PolicyKind::AutocoGreedy => c.exploration = Exploration::Greedy,
        PolicyKind::AutocoNoOae => c.operation_aware = false,
        PolicyKind::Fm | PolicyKind::FmTs | PolicyKind::FmEgreedy => {
            c.interaction = fixed(OperatorKind::Multiply);
            c.operation_aware = false;
            c.fm_heads = true;
            c.exploration = match kind {
                PolicyKind::Fm => Exploration::Greedy,
                PolicyKind::FmTs => Exploration::Thompson,
                _ => Exploration::EpsilonGreedy(spec.epsilon.unwrap_or(0.2)),
            };
        }
        PolicyKind::MultiplyTs => c.interaction = fixed(OperatorKind::Multiply),
        PolicyKind::PlusTs => c.interaction = fixed(OperatorKind::Plus),
        PolicyKind::MaxTs => c.interaction = fixed(OperatorKind::Max),
        PolicyKind::MinTs => c.interaction = fixed(OperatorKind::Min),
        PolicyKind::ConcatTs => c.interaction = fixed(OperatorKind::Concat),
        _ => unreachable!("not a neural policy"),
    }
    c
}

fn linear_featurizer(kind: PolicyKind, env: &Environment) -> Result<Featurizer> {
    let cards = env.schema().cardinalities();
    let f = match env {
        Environment::Synthetic(_) => {
            if kind == PolicyKind::Mvt {
                // crosses among creative elements; the product one-hot only shifts scores
                Featurizer::Poly2 {
                    cross_fields: (1..cards.len()).collect(),
                    cards,
                }
            } else {
                Featurizer::OneHot { cards }
            }
        }
        Environment::Replay(_) => {
            let ctx = cards[..cards.len() - 1].to_vec();
            let inner = if kind == PolicyKind::Mvt {
                Featurizer::Poly2 {
                    cross_fields: (0..ctx.len()).collect(),
                    cards: ctx,
                }
            } else {
                Featurizer::OneHot { cards: ctx }
            };
            Featurizer::PerArm {
                inner: Box::new(inner),
                n_arms: env.n_arms(),
            }
        }
    };
    if f.dim() > MAX_LINEAR_DIM {
        return Err(Error::Config(format!(
            "{kind:?}: {} features exceed the dense ridge limit of {MAX_LINEAR_DIM}",
            f.dim()
        )));
    }
    Ok(f)
}

/// Builds the policy for one cell.
pub fn build_policy(
    spec: &AlgorithmSpec,
    model: &ModelSpec,
    env: &Environment,
    rng: &mut ChaCha8Rng,
) -> Result<Policy> {
    use PolicyKind::*;
    let lambda = spec.lambda.unwrap_or(1.0);
    let sampling = spec.sampling.unwrap_or(model.sampling);
    Ok(match spec.policy {
        Autoco | AutocoGreedy | AutocoNoOae | Fm | FmTs | FmEgreedy | MultiplyTs | PlusTs | MaxTs | MinTs
        | ConcatTs => Policy::Neural(Box::new(NeuralPolicy::new(
            env.schema(),
            neural_config(spec.policy, spec, model),
            rng,
        ))),
        Linucb => Policy::Linear(Box::new(LinearPolicy::new(
            linear_featurizer(Linucb, env)?,
            LinearRule::Ucb {
                alpha: spec.alpha_ucb.unwrap_or(1.0),
            },
            lambda,
            sampling,
        )?)),
        Lints | Mvt => Policy::Linear(Box::new(LinearPolicy::new(
            linear_featurizer(spec.policy, env)?,
            LinearRule::Thompson {
                v: spec.v.unwrap_or(0.25),
            },
            lambda,
            sampling,
        )?)),
        Egreedy => Policy::Egreedy(EgreedyPolicy::new(spec.epsilon.unwrap_or(0.1), env.n_arms())),
        BetaTs => Policy::BetaTs(BetaTsPolicy::new(env.n_arms())),
        Uniform => Policy::Uniform,
        Oracle => Policy::Oracle,
    })
}

// ---------------------------------------------------------------------------
// environments

fn load_replay(kind: EnvKind, spec: &EnvironmentSpec) -> Result<ReplayBandit> {
    let (name, rk) = match kind {
        EnvKind::Mushroom => ("mushroom", ReplayKind::Mushroom),
        EnvKind::Adult => ("adult", ReplayKind::Adult),
        EnvKind::Synthetic => unreachable!(),
    };
    let ds = load_dataset(name, &spec.data)?;
    ReplayBandit::new(rk, &ds)
}

/// One environment per repetition. Replay environments are shared; synthetic
/// worlds are regenerated per repetition unless a fixed world is given.
pub fn build_environments(config: &ExperimentConfig) -> Result<Vec<Environment>> {
    let spec = &config.environment;
    match spec.kind {
        EnvKind::Synthetic => {
            if let Some(path) = &spec.world {
                let env = Environment::Synthetic(Arc::new(SyntheticEnv::new(SyntheticWorld::load(path)?)));
                return Ok(vec![env; config.repetitions]);
            }
            (0..config.repetitions)
                .map(|rep| {
                    let seed = derive_seed(config.seed, &["world", &rep.to_string()]);
                    let mut world =
                        crate::envs::synth_generate(&spec.synthetic, &mut ChaCha8Rng::seed_from_u64(seed))?;
                    world.meta.seed = Some(seed);
                    Ok(Environment::Synthetic(Arc::new(SyntheticEnv::new(world))))
                })
                .collect()
        }
        kind => {
            let env = Environment::Replay(Arc::new(load_replay(kind, spec)?));
            Ok(vec![env; config.repetitions])
        }
    }
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub algorithm: String,
    pub repetition: usize,
    pub batch: usize,
    pub trials: u64,
    pub reward_sum: f64,
    pub oracle_expected_sum: f64,
    pub chosen_expected_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub algorithm: String,
    pub repetition: usize,
    pub trial: u64,
    pub context: usize,
    pub candidate: usize,
    pub reward: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub algorithm: String,
    pub repetition: usize,
    pub operators: OperatorSelection,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    /// Algorithm names in config order.
    pub algorithms: Vec<String>,
    pub baseline: Option<String>,
    pub records: Vec<BatchRecord>,
    pub operators: Vec<OperatorRecord>,
    pub decisions: Vec<DecisionRecord>,
    /// Environment-side reward tally per (algorithm, repetition).
    pub reward_tally: Vec<(String, usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and standard error (sample sd / √n; 0 for one value).
pub fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len();
    if n == 0 {
        return MeanStderr {
            mean: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    MeanStderr { mean, stderr }
}

/// Final cumulative totals of one (algorithm, repetition).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellTotals {
    pub trials: u64,
    pub reward: f64,
    pub regret: f64,
}

impl CellTotals {
    pub fn ctr(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.reward / self.trials as f64
        }
    }
}

impl MetricsLog {
    pub fn repetitions(&self) -> usize {
        self.records.iter().map(|r| r.repetition + 1).max().unwrap_or(0)
    }

    pub fn totals(&self, algorithm: &str) -> BTreeMap<usize, CellTotals> {
        let mut out: BTreeMap<usize, CellTotals> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.algorithm == algorithm) {
            let t = out.entry(r.repetition).or_default();
            t.trials += r.trials;
            t.reward += r.reward_sum;
            t.regret += r.oracle_expected_sum - r.chosen_expected_sum;
        }
        out
    }

    pub fn final_ctr(&self, algorithm: &str) -> Vec<f64> {
        self.totals(algorithm).values().map(CellTotals::ctr).collect()
    }

    pub fn final_regret(&self, algorithm: &str) -> Vec<f64> {
        self.totals(algorithm).values().map(|t| t.regret).collect()
    }
}

/// `100 · regret(alg) / regret(baseline)` per repetition, then mean ± stderr.
pub fn relative_regret(log: &MetricsLog, baseline: &str) -> Result<BTreeMap<String, (MeanStderr, Vec<f64>)>> {
    let base = log.totals(baseline);
    if base.is_empty() {
        return Err(Error::Config(format!("baseline {baseline:?} not in log")));
    }
    if base.values().any(|t| t.regret <= 0.0) {
        return Err(Error::ZeroBaselineRegret(baseline.into()));
    }
    let mut out = BTreeMap::new();
    for alg in &log.algorithms {
        let vals: Vec<f64> = log
            .totals(alg)
            .iter()
            .filter_map(|(rep, t)| base.get(rep).map(|b| 100.0 * t.regret / b.regret))
            .collect();
        out.insert(alg.clone(), (mean_stderr(&vals), vals));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// running

struct CellResult {
    records: Vec<BatchRecord>,
    operators: Option<OperatorSelection>,
    decisions: Vec<DecisionRecord>,
    tally: f64,
}

/// Progress callback: (algorithm, repetition, final cumulative CTR, regret).
pub type Progress<'a> = &'a (dyn Fn(&str, usize, CellTotals) + Sync);

fn run_cell(config: &ExperimentConfig, spec: &AlgorithmSpec, rep: usize, env: &Environment) -> Result<CellResult> {
    let rep_s = rep.to_string();
    let mut policy_rng = rng_for(config.seed, &["policy", &spec.name, &rep_s]);
    let mut reward_rng = rng_for(config.seed, &["reward", &spec.name, &rep_s]);
    let mut context_rng = rng_for(config.seed, &["context", &rep_s]);
    let mut policy = build_policy(spec, &config.model, env, &mut policy_rng)?;
    let warmup = if policy.is_oracle() { 0 } else { config.warmup_trials as u64 };

    let mut records = Vec::with_capacity(config.batches);
    let mut decisions = Vec::new();
    let mut tally = 0.0;
    let mut trial: u64 = 0;
    let mut observations = Vec::with_capacity(config.trials_per_batch);
    let mut uniform = Policy::Uniform;
    for batch in 0..config.batches {
        observations.clear();
        policy.begin_batch(&mut policy_rng);
        let (mut reward_sum, mut oracle_sum, mut chosen_sum) = (0.0, 0.0, 0.0);
        for _ in 0..config.trials_per_batch {
            let ctx = env.sample_context(&mut context_rng);
            let cands = env.candidates(ctx);
            let expected = env.expected(ctx);
            let decision = if trial < warmup {
                uniform.select(cands, None, &mut policy_rng)?
            } else {
                policy.select(cands, Some(expected), &mut policy_rng)?
            };
            let k = decision.chosen;
            let reward = env.step(ctx, k, &mut reward_rng)?;
            tally += reward;
            reward_sum += reward;
            oracle_sum += env.oracle_expected(ctx).1;
            chosen_sum += expected[k];
            if config.log_decisions {
                decisions.push(DecisionRecord {
                    algorithm: spec.name.clone(),
                    repetition: rep,
                    trial,
                    context: ctx,
                    candidate: k,
                    reward,
                    score: decision.scores[k],
                });
            }
            observations.push(Observation::new(&cands[k], reward));
            trial += 1;
        }
        policy.update(&observations, &mut policy_rng)?;
        records.push(BatchRecord {
            algorithm: spec.name.clone(),
            repetition: rep,
            batch,
            trials: config.trials_per_batch as u64,
            reward_sum,
            oracle_expected_sum: oracle_sum,
            chosen_expected_sum: chosen_sum,
        });
    }
    Ok(CellResult {
        records,
        operators: policy.operators().cloned(),
        decisions,
        tally,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog> {
    run_experiment_with(config, &|_, _, _| {})
}

/// Runs every cell, in parallel when `config.parallel > 1`, and merges the
/// results in (algorithm, repetition) order.
pub fn run_experiment_with(config: &ExperimentConfig, progress: Progress<'_>) -> Result<MetricsLog> {
    config.validate()?;
    let envs = build_environments(config)?;
    // surface construction errors before any trial runs
    for spec in &config.algorithms {
        build_policy(spec, &config.model, &envs[0], &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let cells: Vec<(usize, usize)> = (0..config.algorithms.len())
        .flat_map(|a| (0..config.repetitions).map(move |r| (a, r)))
        .collect();
    let run = |&(a, r): &(usize, usize)| -> Result<CellResult> {
        let spec = &config.algorithms[a];
        let res = run_cell(config, spec, r, &envs[r])?;
        let mut t = CellTotals::default();
        for b in &res.records {
            t.trials += b.trials;
            t.reward += b.reward_sum;
            t.regret += b.oracle_expected_sum - b.chosen_expected_sum;
        }
        progress(&spec.name, r, t);
        Ok(res)
    };
    let results: Vec<Result<CellResult>> = if config.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };

    let mut log = MetricsLog {
        algorithms: config.algorithms.iter().map(|a| a.name.clone()).collect(),
        baseline: config
            .algorithms
            .iter()
            .find(|a| a.policy == PolicyKind::Uniform)
            .map(|a| a.name.clone()),
        ..MetricsLog::default()
    };
    for (&(a, r), res) in cells.iter().zip(results) {
        let res = res?;
        let name = &config.algorithms[a].name;
        log.records.extend(res.records);
        log.decisions.extend(res.decisions);
        log.reward_tally.push((name.clone(), r, res.tally));
        if let Some(ops) = res.operators {
            log.operators.push(OperatorRecord {
                algorithm: name.clone(),
                repetition: r,
                operators: ops,
            });
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// outputs

pub const BATCH_COLUMNS: [&str; 9] = [
    "algorithm",
    "repetition",
    "batch",
    "trials",
    "reward_sum",
    "oracle_expected_sum",
    "chosen_expected_sum",
    "cum_ctr",
    "cum_regret",
];

pub fn batches_csv(log: &MetricsLog) -> String {
    let mut out = BATCH_COLUMNS.join(",");
    out.push('\n');
    let mut cum: BTreeMap<(&str, usize), (u64, f64, f64)> = BTreeMap::new();
    for r in &log.records {
        let c = cum.entry((&r.algorithm, r.repetition)).or_default();
        c.0 += r.trials;
        c.1 += r.reward_sum;
        c.2 += r.oracle_expected_sum - r.chosen_expected_sum;
        let ctr = if c.0 == 0 { 0.0 } else { c.1 / c.0 as f64 };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.algorithm,
            r.repetition,
            r.batch,
            r.trials,
            r.reward_sum,
            r.oracle_expected_sum,
            r.chosen_expected_sum,
            ctr,
            c.2
        );
    }
    out
}

/// Parses a `batches.csv` back into batch records.
pub fn read_batches_csv(path: impl AsRef<Path>) -> Result<MetricsLog> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != BATCH_COLUMNS {
        return Err(Error::parse(1, "unexpected batches.csv header"));
    }
    let mut log = MetricsLog::default();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .map_err(|_| Error::parse(line, format!("bad number in column {}", BATCH_COLUMNS[k])))
        };
        let int = |k: usize| -> Result<u64> {
            row[k]
                .parse::<u64>()
                .map_err(|_| Error::parse(line, format!("bad integer in column {}", BATCH_COLUMNS[k])))
        };
        let name = row[0].to_string();
        if !log.algorithms.contains(&name) {
            log.algorithms.push(name.clone());
        }
        log.records.push(BatchRecord {
            algorithm: name,
            repetition: int(1)? as usize,
            batch: int(2)? as usize,
            trials: int(3)?,
            reward_sum: num(4)?,
            oracle_expected_sum: num(5)?,
            chosen_expected_sum: num(6)?,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub repetitions: usize,
    pub final_cum_ctr: MeanStderr,
    pub final_cum_regret: MeanStderr,
    pub final_cum_reward: MeanStderr,
    pub relative_regret: Option<MeanStderr>,
    pub per_repetition_ctr: Vec<f64>,
    pub per_repetition_regret: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub operators: Vec<OperatorSelection>,
}

pub fn summarize(log: &MetricsLog) -> BTreeMap<String, AlgorithmSummary> {
    let rel = log
        .baseline
        .as_deref()
        .and_then(|b| relative_regret(log, b).ok());
    log.algorithms
        .iter()
        .map(|alg| {
            let totals = log.totals(alg);
            let ctr: Vec<f64> = totals.values().map(CellTotals::ctr).collect();
            let regret: Vec<f64> = totals.values().map(|t| t.regret).collect();
            let reward: Vec<f64> = totals.values().map(|t| t.reward).collect();
            let s = AlgorithmSummary {
                repetitions: totals.len(),
                final_cum_ctr: mean_stderr(&ctr),
                final_cum_regret: mean_stderr(&regret),
                final_cum_reward: mean_stderr(&reward),
                relative_regret: rel.as_ref().and_then(|m| m.get(alg)).map(|(ms, _)| *ms),
                per_repetition_ctr: ctr,
                per_repetition_regret: regret,
                operators: log
                    .operators
                    .iter()
                    .filter(|o| &o.algorithm == alg)
                    .map(|o| o.operators.clone())
                    .collect(),
            };
            (alg.clone(), s)
        })
        .collect()
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Mean cumulative CTR and regret per batch, averaged over repetitions.
fn mean_curves(log: &MetricsLog, alg: &str) -> (Vec<f64>, Vec<f64>) {
    let mut per_rep: BTreeMap<usize, Vec<&BatchRecord>> = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.algorithm == alg) {
        per_rep.entry(r.repetition).or_default().push(r);
    }
    let n_batches = per_rep.values().map(Vec::len).min().unwrap_or(0);
    let mut ctr = vec![0.0; n_batches];
    let mut regret = vec![0.0; n_batches];
    for recs in per_rep.values() {
        let (mut t, mut rw, mut rg) = (0u64, 0.0, 0.0);
        for (b, r) in recs.iter().take(n_batches).enumerate() {
            t += r.trials;
            rw += r.reward_sum;
            rg += r.oracle_expected_sum - r.chosen_expected_sum;
            ctr[b] += rw / t.max(1) as f64;
            regret[b] += rg;
        }
    }
    let k = per_rep.len().max(1) as f64;
    (ctr.iter().map(|v| v / k).collect(), regret.iter().map(|v| v / k).collect())
}

fn panel(out: &mut String, x0: f64, title: &str, series: &[(&str, Vec<f64>)]) {
    let (w, h, pad) = (420.0, 300.0, 50.0);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let _ = writeln!(
        out,
        r#"<g transform="translate({x0},0)"><text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        w / 2.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{hi:.4}</text>"#, 2.0, pad + 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{lo:.4}</text>"#, 2.0, h - pad);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">batch</text>"#,
        w / 2.0,
        h - pad + 20.0
    );
    for (i, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(b, y)| {
                let px = pad + (w - 2.0 * pad) * if n > 1 { b as f64 / (n - 1) as f64 } else { 0.5 };
                let py = h - pad - (h - 2.0 * pad) * (y - lo) / (hi - lo);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = h + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{pad}" y="{ly}" font-size="11" fill="{color}">{}</text>"#,
            escape(name)
        );
    }
    out.push_str("</g>\n");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Cumulative CTR and regret against batch index, one line per algorithm.
pub fn curves_svg(log: &MetricsLog) -> String {
    let curves: Vec<(&str, (Vec<f64>, Vec<f64>))> =
        log.algorithms.iter().map(|a| (a.as_str(), mean_curves(log, a))).collect();
    let ctr: Vec<(&str, Vec<f64>)> = curves.iter().map(|(a, (c, _))| (*a, c.clone())).collect();
    let regret: Vec<(&str, Vec<f64>)> = curves.iter().map(|(a, (_, r))| (*a, r.clone())).collect();
    let height = 300 + 14 * log.algorithms.len() + 20;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="860" height="{height}" font-family="sans-serif">"#
    );
    out.push('\n');
    panel(&mut out, 0.0, "cumulative CTR", &ctr);
    panel(&mut out, 430.0, "cumulative regret", &regret);
    out.push_str("</svg>\n");
    out
}

fn decisions_csv(log: &MetricsLog) -> String {
    let mut out = String::from("algorithm,repetition,trial,context,candidate,reward,score\n");
    for d in &log.decisions {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.algorithm, d.repetition, d.trial, d.context, d.candidate, d.reward, d.score
        );
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `batches.csv`, `summary.json` and `curves.svg` into `dir`.
pub fn write_outputs(log: &MetricsLog, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let p = dir.join("batches.csv");
    write_file(&p, &batches_csv(log))?;
    written.push(p);
    let p = dir.join("summary.json");
    write_file(&p, &(serde_json::to_string_pretty(&summarize(log))? + "\n"))?;
    written.push(p);
    let p = dir.join("curves.svg");
    write_file(&p, &curves_svg(log))?;
    written.push(p);
    if !log.decisions.is_empty() {
        let p = dir.join("decisions.csv");
        write_file(&p, &decisions_csv(log))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alg: &str, rep: usize, batch: usize, reward: f64, oracle: f64, chosen: f64) -> BatchRecord {
        BatchRecord {
            algorithm: alg.into(),
            repetition: rep,
            batch,
            trials: 10,
            reward_sum: reward,
            oracle_expected_sum: oracle,
            chosen_expected_sum: chosen,
        }
    }

    fn log_of(records: Vec<BatchRecord>) -> MetricsLog {
        let mut algorithms: Vec<String> = Vec::new();
        for r in &records {
            if !algorithms.contains(&r.algorithm) {
                algorithms.push(r.algorithm.clone());
            }
        }
        MetricsLog {
            algorithms,
            baseline: Some("Uniform".into()),
            records,
            ..MetricsLog::default()
        }
    }

    #[test]
    fn mean_stderr_by_hand() {
        let m = mean_stderr(&[2.0, 4.0, 9.0]);
        assert!((m.mean - 5.0).abs() < 1e-12);
        // sd = sqrt(((9 + 1 + 16) / 2)) = sqrt(13)
        assert!((m.stderr - (13.0f64).sqrt() / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_stderr(&[1.5]).stderr, 0.0);
    }

    #[test]
    fn relative_regret_ratios() {
        let log = log_of(vec![
            rec("Uniform", 0, 0, 1.0, 10.0, 6.0),
            rec("Uniform", 1, 0, 1.0, 10.0, 2.0),
            rec("Half", 0, 0, 1.0, 10.0, 8.0),
            rec("Half", 1, 0, 1.0, 10.0, 6.0),
        ]);
        let rel = relative_regret(&log, "Uniform").unwrap();
        assert_eq!(rel["Uniform"].0.mean, 100.0);
        assert_eq!(rel["Uniform"].0.stderr, 0.0);
        assert!((rel["Half"].0.mean - 50.0).abs() < 1e-12);
    }

    #[test]
    fn zero_baseline_regret_is_an_error() {
        let log = log_of(vec![rec("Uniform", 0, 0, 1.0, 5.0, 5.0)]);
        assert!(matches!(relative_regret(&log, "Uniform"), Err(Error::ZeroBaselineRegret(_))));
    }

    #[test]
    fn empty_log_outputs() {
        let log = MetricsLog::default();
        assert_eq!(batches_csv(&log), format!("{}\n", BATCH_COLUMNS.join(",")));
        assert!(summarize(&log).is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&log, dir.path()).unwrap();
        let s = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert_eq!(s.trim(), "{}");
    }

    #[test]
    fn csv_round_trip_and_cumulatives() {
        let log = log_of(vec![
            rec("A", 0, 0, 3.0, 5.0, 4.0),
            rec("A", 0, 1, 5.0, 5.0, 3.5),
            rec("Uniform", 0, 0, 1.0, 5.0, 1.0),
            rec("Uniform", 0, 1, 2.0, 5.0, 1.0),
        ]);
        let text = batches_csv(&log);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "A,0,1,10,5,5,3.5,0.4,2.5");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batches.csv");
        std::fs::write(&p, &text).unwrap();
        let back = read_batches_csv(&p).unwrap();
        assert_eq!(back.records, log.records);
        assert_eq!(batches_csv(&back), text);
    }

    #[test]
    fn seeds_are_label_sensitive() {
        let a = derive_seed(1, &["policy", "AutoCO", "0"]);
        assert_eq!(a, derive_seed(1, &["policy", "AutoCO", "0"]));
        assert_ne!(a, derive_seed(1, &["policy", "AutoCO", "1"]));
        assert_ne!(a, derive_seed(2, &["policy", "AutoCO", "0"]));
        // label boundaries matter
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
    }

    #[test]
    fn config_parsing_and_validation() {
        let text = r#"
seed = 3
batches = 2
trials_per_batch = 5
[environment]
kind = "synthetic"
[environment.synthetic]
n_products = 4
[[algorithms]]
name = "U"
policy = "uniform"
[[algorithms]]
name = "A"
policy = "autoco"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.repetitions, 5);
        assert_eq!(cfg.environment.synthetic.n_products, 4);
        assert_eq!(cfg.environment.synthetic.candidates_per_product, 67);
        assert_eq!(cfg.model.dim, 8);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);

        assert!(ExperimentConfig::from_toml(&text.replace("\"autoco\"", "\"nope\"")).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("batches = 2", "batches = 0")).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("name = \"A\"", "name = \"U\"")).is_err());
        assert!(ExperimentConfig::from_toml(&text.replace("kind = \"synthetic\"", "kind = \"mushroom\"")).is_err());
    }
}
