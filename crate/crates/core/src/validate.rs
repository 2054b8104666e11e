//! Self-check suites: finite-difference gradients, KL against Monte Carlo,
//! and the proximal operators.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayes::{elbo_backward, kl_diag_gaussian, PriorSpec, VariationalParams};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, LabeledExample};
use crate::model::{bce_with_logit, logit_with, softplus, EmbeddingTables, Gradients, ModelLayout, ModelParams, OperatorKind, ParamsRef, NUM_OPERATORS};
use crate::search::{prox_c1, prox_c2, select_ops, ArchWeights, ALPHA_CLIP};

pub const SUITES: [&str; 3] = ["gradients", "kl", "prox"];
pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const KL_TOLERANCE: f64 = 1e-2;
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} value={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let checks = match name {
        "gradients" => gradient_suite(seed, 100),
        "kl" => kl_suite(seed, 20, 1_000_000),
        "prox" => prox_suite(seed, 10_000),
        other => return Err(Error::Config(format!("unknown suite {other:?}"))),
    };
    Ok(SuiteReport {
        suite: name.into(),
        checks,
    })
}

// ---------------------------------------------------------------------------
// gradients

/// A small random instance of the full variational loss.
pub struct GradientInstance {
    pub batch: Vec<LabeledExample>,
    pub alpha: ArchWeights,
    pub vp: VariationalParams,
    pub eps: Vec<f64>,
    pub prior: PriorSpec,
    pub kl_weight: f64,
}

impl GradientInstance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let inst = Self::draw(rng);
            if !inst.near_kink(1e-3) {
                return inst;
            }
        }
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let l = rng.random_range(2..=4);
        let d = rng.random_range(1..=4);
        let rows: Vec<usize> = (0..l).map(|_| rng.random_range(1..=4)).collect();
        let layout = ModelLayout::new(rows.clone(), d, rng.random_bool(0.7));
        let normal = |s: f64, rng: &mut R| s * rng.sample::<f64, _>(StandardNormal);
        let mut mean = ModelParams::zeros(layout);
        for v in &mut mean.embeddings.data {
            *v = normal(0.7, rng);
        }
        for h in &mut mean.heads {
            for w in &mut h.weights {
                *w = normal(1.0, rng);
            }
            h.bias = normal(0.3, rng);
        }
        for w in mean.first_order.weights.iter_mut().flatten() {
            *w = normal(0.3, rng);
        }
        mean.first_order.bias = normal(0.3, rng);
        let e = mean.layout().embedding_len();
        let rho = (0..e).map(|_| rng.random_range(-2.0..1.0)).collect();
        let eps = (0..e).map(|_| normal(1.0, rng)).collect();
        let mut alpha = ArchWeights::uniform(l, 0.0);
        for p in 0..alpha.n_pairs() {
            let mut w = [0.0; NUM_OPERATORS];
            for v in &mut w {
                *v = rng.random_range(0.05..0.95);
            }
            alpha.set(p, w);
        }
        let n = rng.random_range(1..=3);
        let batch = (0..n)
            .map(|_| {
                let x = FeatureVector::new(rows.iter().map(|&r| rng.random_range(0..r)).collect());
                LabeledExample::new(x, rng.random_range(0..2) as f64)
            })
            .collect();
        GradientInstance {
            batch,
            alpha,
            vp: VariationalParams { mean, rho },
            eps,
            prior: PriorSpec {
                sigma0: rng.random_range(0.5..2.0),
            },
            kl_weight: rng.random_range(0.0..0.5),
        }
    }

    fn theta(&self) -> EmbeddingTables {
        let mut t = self.vp.mean.embeddings.clone();
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += softplus(self.vp.rho[i]) * self.eps[i];
        }
        t
    }

    /// MAX/MIN are not differentiable where operands tie.
    fn near_kink(&self, gap: f64) -> bool {
        let theta = self.theta();
        let l = theta.layout.n_fields();
        for ex in &self.batch {
            let a = ex.x.active();
            for i in 0..l {
                for j in (i + 1)..l {
                    for op in [OperatorKind::Max, OperatorKind::Min] {
                        let p = theta.row(i, op, a[i]);
                        let q = theta.row(j, op, a[j]);
                        if p.iter().zip(q).any(|(x, y)| (x - y).abs() < gap) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Forward-only loss: mean BCE at θ = μ + softplus(ρ) ε plus weighted KL.
    pub fn loss(&self) -> f64 {
        let theta = self.theta();
        let view = ParamsRef {
            embeddings: &theta,
            heads: &self.vp.mean.heads,
            first_order: &self.vp.mean.first_order,
        };
        let nll = self
            .batch
            .iter()
            .map(|ex| bce_with_logit(logit_with(&ex.x, &self.alpha, view), ex.y))
            .sum::<f64>()
            / self.batch.len() as f64;
        let kl: f64 = self
            .vp
            .mean
            .embeddings
            .data
            .iter()
            .zip(&self.vp.rho)
            .map(|(&m, &r)| kl_diag_gaussian(m, softplus(r), self.prior.sigma0))
            .sum();
        nll + self.kl_weight * kl
    }

    /// Flat view: μ, ρ, heads, first-order terms, α.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.vp.mean.embeddings.data.clone();
        v.extend_from_slice(&self.vp.rho);
        let rest = self.vp.mean.to_flat();
        v.extend_from_slice(&rest[self.vp.mean.embeddings.data.len()..]);
        v.extend(self.alpha.weights().iter().flatten());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let e = self.vp.rho.len();
        let p = self.vp.mean.layout().param_count();
        let mut params = flat[..e].to_vec();
        params.extend_from_slice(&flat[2 * e..e + p]);
        self.vp.mean.set_flat(&params).expect("congruent layout");
        self.vp.rho.copy_from_slice(&flat[e..2 * e]);
        for (k, w) in flat[e + p..].chunks(NUM_OPERATORS).enumerate() {
            self.alpha.set(k, w.try_into().expect("five weights"));
        }
    }

    /// Analytic gradient in the order of [`GradientInstance::flat`].
    pub fn analytic(&self) -> Vec<f64> {
        let layout = self.vp.layout().clone();
        let mut theta = self.vp.mean.embeddings.clone();
        let mut grads = Gradients::zeros(&layout);
        let mut grad_rho = vec![0.0; self.vp.rho.len()];
        elbo_backward(
            &self.batch,
            &self.alpha,
            &self.vp,
            &self.eps,
            self.prior,
            self.kl_weight,
            &mut theta,
            &mut grads,
            &mut grad_rho,
        );
        let flat = grads.params_flat();
        let e = grad_rho.len();
        let mut v = flat[..e].to_vec();
        v.extend_from_slice(&grad_rho);
        v.extend_from_slice(&flat[e..]);
        v.extend(grads.alpha.iter().flatten());
        v
    }

    /// Central differences over every coordinate.
    pub fn numeric(&self, h: f64) -> Vec<f64> {
        let base = self.flat();
        let mut probe = GradientInstance {
            batch: self.batch.clone(),
            alpha: self.alpha.clone(),
            vp: self.vp.clone(),
            eps: self.eps.clone(),
            prior: self.prior,
            kl_weight: self.kl_weight,
        };
        let mut x = base.clone();
        (0..base.len())
            .map(|i| {
                x[i] = base[i] + h;
                probe.set_flat(&x);
                let up = probe.loss();
                x[i] = base[i] - h;
                probe.set_flat(&x);
                let down = probe.loss();
                x[i] = base[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn gradient_suite(seed: u64, instances: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..instances {
        let inst = GradientInstance::random(&mut rng);
        let err = max_relative_error(&inst.analytic(), &inst.numeric(FD_STEP));
        worst = worst.max(err);
        if err > GRADIENT_TOLERANCE {
            failures += 1;
        }
    }
    vec![
        Check {
            name: format!("fd max rel err ({instances} inst)"),
            value: worst,
            tolerance: GRADIENT_TOLERANCE,
            passed: worst <= GRADIENT_TOLERANCE,
        },
        Check {
            name: "fd failing instances".into(),
            value: failures as f64,
            tolerance: 0.0,
            passed: failures == 0,
        },
    ]
}

// ---------------------------------------------------------------------------
// KL

/// `E_q[log q - log p]` from antithetic pairs of standard normal draws.
pub fn kl_monte_carlo<R: Rng + ?Sized>(mu: f64, sigma: f64, sigma0: f64, samples: usize, rng: &mut R) -> f64 {
    let term = |e: f64| {
        let t = mu + sigma * e;
        let log_q = -0.5 * e * e - sigma.ln();
        let log_p = -0.5 * (t / sigma0).powi(2) - sigma0.ln();
        log_q - log_p
    };
    let pairs = samples.div_ceil(2);
    let mut acc = 0.0;
    for _ in 0..pairs {
        let e: f64 = rng.sample(StandardNormal);
        acc += term(e) + term(-e);
    }
    acc / (2 * pairs) as f64
}

pub fn kl_suite(seed: u64, settings: usize, samples: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..settings {
        let mu = rng.random_range(-1.5..1.5);
        let sigma = rng.random_range(0.05..1.0);
        let sigma0 = rng.random_range(0.5..2.0);
        let mc = kl_monte_carlo(mu, sigma, sigma0, samples, &mut rng);
        worst = worst.max((mc - kl_diag_gaussian(mu, sigma, sigma0)).abs());
    }
    vec![Check {
        name: format!("kl vs mc max abs err ({settings})"),
        value: worst,
        tolerance: KL_TOLERANCE,
        passed: worst <= KL_TOLERANCE,
    }]
}

// ---------------------------------------------------------------------------
// prox

pub fn prox_suite(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c1 = 0;
    let mut c2 = 0;
    let mut sel = 0;
    for _ in 0..cases {
        let mut v = [0.0; NUM_OPERATORS];
        for x in &mut v {
            *x = rng.random_range(-1.0..2.0);
        }
        let clamped = match prox_c2(&v) {
            Ok(c) => c,
            Err(_) => {
                c2 += 1;
                continue;
            }
        };
        if clamped.iter().any(|x| !(ALPHA_CLIP..=1.0 - ALPHA_CLIP).contains(x)) || prox_c2(&clamped).ok() != Some(clamped) {
            c2 += 1;
        }
        let once = prox_c1(&clamped);
        let nonzero = once.iter().filter(|x| **x != 0.0).count();
        let max = clamped.iter().cloned().fold(f64::MIN, f64::max);
        if prox_c1(&once) != once || nonzero != 1 || !once.contains(&max) {
            c1 += 1;
        }
        let mut a = ArchWeights::uniform(2, 0.0);
        a.set(0, clamped);
        let c = rng.random_range(0.01..100.0);
        if select_ops(&a) != select_ops(&a.discretize()) || select_ops(&a) != select_ops(&a.scaled(c)) {
            sel += 1;
        }
    }
    [("prox_c1 idempotent one-hot", c1), ("prox_c2 bounds idempotent", c2), ("select_ops invariance", sel)]
        .into_iter()
        .map(|(name, n)| Check {
            name: name.into(),
            value: n as f64,
            tolerance: 0.0,
            passed: n == 0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(gradient_suite(1, 10).iter().all(|c| c.passed));
        assert!(kl_suite(2, 3, 200_000).iter().all(|c| c.passed));
        assert!(prox_suite(3, 500).iter().all(|c| c.passed));
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = GradientInstance::random(&mut rng);
        let flat = inst.flat();
        assert_eq!(flat.len(), inst.analytic().len());
        let mut other = GradientInstance::random(&mut ChaCha8Rng::seed_from_u64(4));
        other.set_flat(&flat);
        assert_eq!(other.flat(), flat);
        assert_eq!(other.loss(), inst.loss());
    }

    #[test]
    fn broken_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = GradientInstance::random(&mut rng);
        let mut a = inst.analytic();
        a[0] += 1.0;
        assert!(max_relative_error(&a, &inst.numeric(1e-5)) > GRADIENT_TOLERANCE);
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope", 0).is_err());
    }
}
