//! Mean-field Bernoulli variational approximation of the selector posterior.
//!
//! q_φ(z) = ∏ σ(φ_j)^{z_j} (1 − σ(φ_j))^{1−z_j}. The ELBO (up to the
//! data-dependent constant) is maximized by stochastic gradient ascent with
//! the U2G estimator and a cyclical learning rate.

use std::num::NonZeroUsize;

use lru::LruCache;
use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSelector, LogMass, MultiEnvDataset, Prior, PriorKind};
use crate::error::{BipError, Result};
use crate::exact::likelihood_ratio_from_moments;
use crate::mle::DatasetMoments;
use crate::numeric::{log_sigmoid, logit, sigmoid};
use crate::rng::{label, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrMode {
    #[default]
    Triangular,
    Triangular2,
}

/// Units of the optimized objective. `PerObservation` divides the ELBO
/// integrand by the total number of rows, which keeps the gradient scale
/// independent of the sample size; the infeasible penalty is applied in the
/// chosen units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveScale {
    Total,
    #[default]
    PerObservation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViConfig {
    #[serde(alias = "T")]
    pub iterations: usize,
    #[serde(alias = "M")]
    pub samples: usize,
    pub lr_base: f64,
    pub lr_max: f64,
    pub cycle_half: usize,
    pub lr_mode: LrMode,
    pub penalty_value: f64,
    pub kl_analytic_prob: f64,
    pub phi_init: Option<Vec<f64>>,
    pub seed: u64,
    /// Steps between training-ELBO estimates.
    pub elbo_every: usize,
    /// φ is clipped to [−phi_clip, phi_clip] after each update.
    pub phi_clip: f64,
    /// Steps between φ snapshots in the run log; 0 disables them.
    pub snapshot_every: usize,
    pub cache_capacity: usize,
    pub objective_scale: ObjectiveScale,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            samples: 20,
            lr_base: 0.5,
            lr_max: 10.0,
            cycle_half: 500,
            lr_mode: LrMode::Triangular,
            penalty_value: -1.0,
            kl_analytic_prob: 0.5,
            phi_init: None,
            seed: 0,
            elbo_every: 50,
            phi_clip: 15.0,
            snapshot_every: 0,
            cache_capacity: 100_000,
            objective_scale: ObjectiveScale::PerObservation,
        }
    }
}

impl ViConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        let bad = |m: &str| Err(BipError::ConfigInvalid(m.to_string()));
        if self.samples == 0 {
            return bad("samples (M) must be at least 1");
        }
        if !(self.lr_base > 0.0 && self.lr_base <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_base <= lr_max");
        }
        if self.cycle_half == 0 {
            return bad("cycle_half must be positive");
        }
        if !(0.0..=1.0).contains(&self.kl_analytic_prob) {
            return bad("kl_analytic_prob must lie in [0, 1]");
        }
        if !self.penalty_value.is_finite() {
            return bad("penalty_value must be finite");
        }
        if self.elbo_every == 0 || self.cache_capacity == 0 {
            return bad("elbo_every and cache_capacity must be positive");
        }
        if !(self.phi_clip > 0.0) {
            return bad("phi_clip must be positive");
        }
        if let Some(init) = &self.phi_init {
            if init.len() != p {
                return Err(BipError::DimensionMismatch {
                    expected: p,
                    actual: init.len(),
                });
            }
            if init.iter().any(|v| !v.is_finite()) {
                return bad("phi_init must be finite");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub phi: Vec<f64>,
    pub step: usize,
    pub best_phi: Vec<f64>,
    pub best_elbo: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub n_samples: usize,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViLogRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elbo_estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phi_snapshot: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViRun {
    pub state: VariationalState,
    pub log: Vec<ViLogRecord>,
}

/// log q_φ(z)
pub fn log_q(phi: &[f64], z: &FeatureSelector) -> f64 {
    phi.iter()
        .zip(z.bits())
        .map(|(&f, &b)| if b { log_sigmoid(f) } else { log_sigmoid(-f) })
        .sum()
}

/// Default initial logits: 0, or, when the prior caps the cardinality at
/// k < p, logit(min(0.9·k/p, 0.4)) in every coordinate.
pub fn default_phi_init(prior: &Prior) -> Vec<f64> {
    let p = prior.p();
    let cap = match prior.kind() {
        PriorKind::UniformFull => p,
        _ => prior.max_support_cardinality(),
    };
    if cap >= p || p == 0 {
        return vec![0.0; p];
    }
    let rate = (0.9 * cap as f64 / p as f64).min(0.4);
    // an empty-only support still needs a finite start
    let rate = rate.max(1e-6);
    vec![logit(rate); p]
}

/// log Λ̂ evaluations memoized by selector, safe for concurrent use.
pub struct RatioCache {
    inner: Mutex<LruCache<FeatureSelector, f64>>,
}

impl RatioCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).unwrap();
        Self {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything needed to evaluate the stochastic objective repeatedly.
pub struct Objective<'a> {
    moments: DatasetMoments,
    prior: &'a Prior,
    penalty: f64,
    scale: f64,
    cache: RatioCache,
}

impl<'a> Objective<'a> {
    pub fn new(data: &MultiEnvDataset, prior: &'a Prior, penalty: f64, cache_capacity: usize) -> Result<Self> {
        if prior.p() != data.p() {
            return Err(BipError::DimensionMismatch {
                expected: data.p(),
                actual: prior.p(),
            });
        }
        Ok(Self {
            moments: DatasetMoments::new(data),
            prior,
            penalty,
            scale: 1.0,
            cache: RatioCache::new(cache_capacity),
        })
    }

    /// Sets the units of the objective (see [`ObjectiveScale`]).
    pub fn with_scale(mut self, scale: ObjectiveScale) -> Self {
        self.scale = match scale {
            ObjectiveScale::Total => 1.0,
            ObjectiveScale::PerObservation => 1.0 / self.moments.pooled().n() as f64,
        };
        self
    }

    /// Multiplier applied to feasible objective values.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn p(&self) -> usize {
        self.prior.p()
    }

    pub fn prior(&self) -> &Prior {
        self.prior
    }

    pub fn cache(&self) -> &RatioCache {
        &self.cache
    }

    /// log Λ̂(z), cached.
    pub fn log_ratio(&self, z: &FeatureSelector) -> Result<f64> {
        if let Some(&v) = self.cache.inner.lock().get(z) {
            return Ok(v);
        }
        let v = likelihood_ratio_from_moments(&self.moments, z)?.log_ratio;
        self.cache.inner.lock().put(z.clone(), v);
        Ok(v)
    }

    /// log p(z) + log Λ̂(z) − log q_φ(z), or the penalty outside the support.
    pub fn full(&self, z: &FeatureSelector, phi: &[f64]) -> Result<f64> {
        match self.prior.log_mass(z)? {
            LogMass::OutsideSupport => Ok(self.penalty),
            LogMass::Finite(lp) => Ok(self.scale * (lp + self.log_ratio(z)? - log_q(phi, z))),
        }
    }

    /// The reconstruction part alone, with the penalty outside the support.
    pub fn reconstruction(&self, z: &FeatureSelector) -> Result<f64> {
        match self.prior.log_mass(z)? {
            LogMass::OutsideSupport => Ok(self.penalty),
            LogMass::Finite(_) => Ok(self.scale * self.log_ratio(z)?),
        }
    }
}

/// The integrand of the ELBO at one selector.
pub fn stochastic_objective(
    data: &MultiEnvDataset,
    prior: &Prior,
    z: &FeatureSelector,
    phi: &[f64],
    penalty: f64,
) -> Result<f64> {
    Objective::new(data, prior, penalty, 1)?.full(z, phi)
}

/// Antithetic pair (z1, z2) for one uniform draw.
pub fn u2g_pair(phi: &[f64], u: &[f64]) -> (FeatureSelector, FeatureSelector) {
    let (mut a, mut b) = (Vec::with_capacity(phi.len()), Vec::with_capacity(phi.len()));
    for (&f, &uj) in phi.iter().zip(u) {
        let s = sigmoid(f);
        a.push(uj > 1.0 - s);
        b.push(uj < s);
    }
    (FeatureSelector::new(a), FeatureSelector::new(b))
}

/// ½ σ(|φ|) (f1 − f2) (z1 − z2), given the pair and its objective values.
pub fn u2g_combine(phi: &[f64], z1: &FeatureSelector, z2: &FeatureSelector, f1: f64, f2: f64) -> Vec<f64> {
    let diff = f1 - f2;
    phi.iter()
        .enumerate()
        .map(|(j, &f)| {
            let d = z1.get(j) as i32 - z2.get(j) as i32;
            if d == 0 {
                0.0
            } else {
                0.5 * sigmoid(f.abs()) * diff * d as f64
            }
        })
        .collect()
}

fn draw_u<R: Rng>(rng: &mut R, p: usize) -> Vec<f64> {
    (0..p).map(|_| rng.random::<f64>()).collect()
}

/// Single-sample U2G estimate of ∇_φ E_q[f(z)].
pub fn u2g_gradient<F, R>(f: F, phi: &[f64], rng: &mut R) -> Vec<f64>
where
    F: Fn(&FeatureSelector) -> f64,
    R: Rng,
{
    let u = draw_u(rng, phi.len());
    let (z1, z2) = u2g_pair(phi, &u);
    if z1 == z2 {
        return vec![0.0; phi.len()];
    }
    let (f1, f2) = (f(&z1), f(&z2));
    u2g_combine(phi, &z1, &z2, f1, f2)
}

/// ∇_φ KL(q_φ ‖ uniform) = logit(σ)·σ(1 − σ), coordinatewise.
pub fn kl_gradient_analytic(phi: &[f64], prior: &Prior) -> Result<Vec<f64>> {
    if !prior.is_uniform_full() {
        return Err(BipError::PriorNotUniform);
    }
    Ok(phi
        .iter()
        .map(|&f| {
            let s = sigmoid(f);
            // logit(sigmoid(f)) == f up to rounding
            f * s * (1.0 - s)
        })
        .collect())
}

/// Triangular cyclical learning rate at 0-based scheduler step `step`.
pub fn cyclical_lr(step: usize, cfg: &ViConfig) -> f64 {
    // integer arithmetic keeps the schedule exactly periodic
    let h = cfg.cycle_half as i128;
    let s = step as i128;
    let cycle = 1 + s / (2 * h);
    let x = (s - (2 * cycle - 1) * h).abs() as f64 / h as f64;
    let mut amplitude = cfg.lr_max - cfg.lr_base;
    if cfg.lr_mode == LrMode::Triangular2 {
        amplitude /= 2f64.powi((cycle - 1).min(i32::MAX as i128) as i32);
    }
    cfg.lr_base + amplitude * (1.0 - x).max(0.0)
}

/// z ~ q_φ
pub fn sample_q<R: Rng>(phi: &[f64], rng: &mut R) -> FeatureSelector {
    FeatureSelector::new(phi.iter().map(|&f| rng.random::<f64>() < sigmoid(f)).collect())
}

fn estimate_with(obj: &Objective, phi: &[f64], n_samples: usize, rng: &mut ChaCha8Rng) -> Result<ElboEstimate> {
    let zs: Vec<FeatureSelector> = (0..n_samples).map(|_| sample_q(phi, rng)).collect();
    let vals = zs
        .par_iter()
        .map(|z| obj.full(z, phi))
        .collect::<Result<Vec<_>>>()?;
    Ok(ElboEstimate {
        value: vals.iter().sum::<f64>() / n_samples as f64,
        n_samples,
    })
}

/// Monte Carlo ELBO (without the constant term) at φ, in total units.
pub fn estimate_elbo(
    data: &MultiEnvDataset,
    prior: &Prior,
    phi: &[f64],
    n_samples: usize,
    penalty: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ElboEstimate> {
    if n_samples == 0 {
        return Err(BipError::ConfigInvalid("n_samples must be at least 1".into()));
    }
    if phi.len() != prior.p() {
        return Err(BipError::DimensionMismatch {
            expected: prior.p(),
            actual: phi.len(),
        });
    }
    let obj = Objective::new(data, prior, penalty, 4096)?;
    estimate_with(&obj, phi, n_samples, rng)
}

/// Features whose marginal σ(φ_j) strictly exceeds `threshold`.
pub fn variational_mode(phi: &[f64], threshold: f64) -> FeatureSelector {
    FeatureSelector::new(phi.iter().map(|&f| sigmoid(f) > threshold).collect())
}

/// Runs the optimizer and returns only the final state.
pub fn run_vi(data: &MultiEnvDataset, prior: &Prior, cfg: &ViConfig) -> Result<VariationalState> {
    run_vi_logged(data, prior, cfg).map(|r| r.state)
}

/// Runs the optimizer, keeping the per-step log.
pub fn run_vi_logged(data: &MultiEnvDataset, prior: &Prior, cfg: &ViConfig) -> Result<ViRun> {
    cfg.validate(data.p())?;
    let obj = Objective::new(data, prior, cfg.penalty_value, cfg.cache_capacity)?
        .with_scale(cfg.objective_scale);
    run_with_objective(&obj, cfg)
}

/// Optimizer loop over a prepared objective.
pub fn run_with_objective(obj: &Objective, cfg: &ViConfig) -> Result<ViRun> {
    let p = obj.p();
    cfg.validate(p)?;
    let mut phi = cfg
        .phi_init
        .clone()
        .unwrap_or_else(|| default_phi_init(obj.prior()));
    for v in phi.iter_mut() {
        *v = v.clamp(-cfg.phi_clip, cfg.phi_clip);
    }
    let mut grad_rng = stream(cfg.seed, &[label::GRADIENT]);
    let mut elbo_rng = stream(cfg.seed, &[label::ELBO]);
    let analytic_ok = obj.prior().is_uniform_full();

    let init = estimate_with(obj, &phi, cfg.samples, &mut elbo_rng)?;
    let mut best_phi = phi.clone();
    let mut best_elbo = init.value;
    let mut log = vec![ViLogRecord {
        step: 0,
        lr: cyclical_lr(0, cfg),
        elbo_estimate: Some(init.value),
        phi_snapshot: (cfg.snapshot_every > 0).then(|| phi.clone()),
    }];

    for t in 1..=cfg.iterations {
        let lr = cyclical_lr(t - 1, cfg);
        let use_analytic = grad_rng.random::<f64>() < cfg.kl_analytic_prob && analytic_ok;
        let us: Vec<Vec<f64>> = (0..cfg.samples).map(|_| draw_u(&mut grad_rng, p)).collect();
        let estimates = us
            .par_iter()
            .map(|u| {
                let (z1, z2) = u2g_pair(&phi, u);
                if z1 == z2 {
                    return Ok(vec![0.0; p]);
                }
                let (f1, f2) = if use_analytic {
                    (obj.reconstruction(&z1)?, obj.reconstruction(&z2)?)
                } else {
                    (obj.full(&z1, &phi)?, obj.full(&z2, &phi)?)
                };
                Ok(u2g_combine(&phi, &z1, &z2, f1, f2))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; p];
        for g in &estimates {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for a in grad.iter_mut() {
            *a /= cfg.samples as f64;
        }
        if use_analytic {
            let kl = kl_gradient_analytic(&phi, obj.prior())?;
            for (a, k) in grad.iter_mut().zip(kl) {
                *a -= obj.scale() * k;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(BipError::NonFiniteGradient {
                step: t,
                last_good_phi: phi,
            });
        }
        for (v, g) in phi.iter_mut().zip(&grad) {
            *v = (*v + lr * g).clamp(-cfg.phi_clip, cfg.phi_clip);
        }

        let mut rec = ViLogRecord {
            step: t,
            lr,
            elbo_estimate: None,
            phi_snapshot: None,
        };
        if t % cfg.elbo_every == 0 || t == cfg.iterations {
            let est = estimate_with(obj, &phi, cfg.samples, &mut elbo_rng)?;
            if est.value > best_elbo {
                best_elbo = est.value;
                best_phi.clone_from(&phi);
            }
            rec.elbo_estimate = Some(est.value);
        }
        if cfg.snapshot_every > 0 && (t % cfg.snapshot_every == 0 || t == cfg.iterations) {
            rec.phi_snapshot = Some(phi.clone());
        }
        log.push(rec);
    }

    Ok(ViRun {
        state: VariationalState {
            phi,
            step: cfg.iterations,
            best_phi,
            best_elbo,
        },
        log,
    })
}
