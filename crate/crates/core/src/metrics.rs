//! Scores against a known truth and heterogeneity diagnostics.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSelector, LogMass, Prior, DEFAULT_ENUMERATION_CAP};
use crate::error::{BipError, Result};
use crate::exact::PosteriorTable;
use crate::mle::LinearGaussianConditional;
use crate::numeric::{log_sum_exp, normal_log_density, LN_2PI};
use crate::rng::{label, stream};
use crate::synthetic::{conditional_from_joint, true_conditional_params, GroundTruth};

/// Default Monte Carlo draws per environment for μ(z).
pub const DEFAULT_MU_DRAWS: usize = 100_000;
const CHUNK: usize = 4096;

/// (exact, covered): equality, and selected set ⊆ true set.
pub fn score(z_hat: &FeatureSelector, z_star: &FeatureSelector) -> Result<(bool, bool)> {
    if z_hat.len() != z_star.len() {
        return Err(BipError::DimensionMismatch {
            expected: z_star.len(),
            actual: z_hat.len(),
        });
    }
    Ok((z_hat == z_star, z_hat.is_subset_of(z_star)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub z_hat: FeatureSelector,
    pub z_star: FeatureSelector,
    pub exact: bool,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_discovery: f64,
    pub coverage: f64,
    pub per_replicate: Vec<ReplicateScore>,
}

impl EvalReport {
    pub fn from_pairs(pairs: &[(FeatureSelector, FeatureSelector)]) -> Result<Self> {
        let per_replicate = pairs
            .iter()
            .map(|(h, s)| {
                let (exact, covered) = score(h, s)?;
                Ok(ReplicateScore {
                    z_hat: h.clone(),
                    z_star: s.clone(),
                    exact,
                    covered,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_replicate.len().max(1) as f64;
        Ok(Self {
            exact_discovery: per_replicate.iter().filter(|r| r.exact).count() as f64 / n,
            coverage: per_replicate.iter().filter(|r| r.covered).count() as f64 / n,
            per_replicate,
        })
    }
}

/// KL(N(m1, v1) ‖ N(m2, v2))
pub fn gaussian_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> Result<f64> {
    for v in [v1, v2] {
        if !(v > 0.0) {
            return Err(BipError::NonPositiveVariance(v));
        }
    }
    Ok(0.5 * (v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / (2.0 * v2) - 0.5)
}

/// 1 − p̂(z* | D)
pub fn tv_to_dirac(table: &PosteriorTable, z_star: &FeatureSelector) -> Result<f64> {
    table
        .posterior_of(z_star)
        .map(|m| (1.0 - m).clamp(0.0, 1.0))
        .ok_or(BipError::TruthOutsideSupport)
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuEstimate {
    pub value: f64,
    pub se: f64,
}

/// An environment's marginal of x^z and conditional of y | x^z.
struct EnvView {
    mean: DVector<f64>,
    chol: Option<DMatrix<f64>>,
    log_det: f64,
    cond: LinearGaussianConditional,
}

impl EnvView {
    fn new(gt: &GroundTruth, e: usize, z: &FeatureSelector) -> Result<Self> {
        let joint = gt.joint(e);
        let cols = z.indices();
        let k = cols.len();
        let mean = DVector::from_fn(k, |a, _| joint.mean[cols[a]]);
        let (chol, log_det) = if k == 0 {
            (None, 0.0)
        } else {
            let szz = DMatrix::from_fn(k, k, |a, b| joint.cov[(cols[a], cols[b])]);
            let l = Cholesky::new(szz).ok_or(BipError::SingularCovariance(e))?.l();
            let ld = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            (Some(l), ld)
        };
        let cond = conditional_from_joint(&joint, gt.p, z, e)?;
        Ok(Self {
            mean,
            chol,
            log_det,
            cond,
        })
    }

    fn log_marginal(&self, x: &DVector<f64>) -> f64 {
        match &self.chol {
            None => 0.0,
            Some(l) => {
                let r = x - &self.mean;
                let w = l.solve_lower_triangular(&r).unwrap_or(r);
                -0.5 * (x.len() as f64 * LN_2PI + self.log_det + w.norm_squared())
            }
        }
    }

    fn cond_mean(&self, x: &DVector<f64>) -> f64 {
        self.cond.intercept + self.cond.coef.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn selector_key(z: &FeatureSelector) -> Vec<u64> {
    z.bits()
        .chunks(64)
        .map(|c| c.iter().fold(0u64, |acc, &b| acc << 1 | b as u64))
        .chain(std::iter::once(z.len() as u64))
        .collect()
}

/// μ(z): uniform average over `envs` of E_{p_e(x^z, y)}[log p_e(y|x^z) − log g(y|x^z)],
/// where g is the pooled conditional of the environment mixture.
pub fn mu_of_z(
    gt: &GroundTruth,
    z: &FeatureSelector,
    envs: &[usize],
    draws: usize,
    seed: u64,
) -> Result<MuEstimate> {
    if z.len() != gt.p {
        return Err(BipError::DimensionMismatch {
            expected: gt.p,
            actual: z.len(),
        });
    }
    if envs.iter().any(|&e| e >= gt.num_envs()) {
        return Err(BipError::ConfigInvalid("environment index out of range".into()));
    }
    if envs.len() <= 1 {
        return Ok(MuEstimate { value: 0.0, se: 0.0 });
    }
    if draws == 0 {
        return Err(BipError::ConfigInvalid("draws must be positive".into()));
    }
    let views = envs
        .iter()
        .map(|&e| EnvView::new(gt, e, z))
        .collect::<Result<Vec<_>>>()?;
    let key = selector_key(z);
    let k = z.cardinality();
    let chunks = draws.div_ceil(CHUNK);

    let per_env: Vec<(f64, f64)> = (0..views.len())
        .map(|a| {
            let sums: Vec<(f64, f64)> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut path = vec![label::MU, envs[a] as u64, c as u64];
                    path.extend(&key);
                    let mut rng = stream(seed, &path);
                    let m = CHUNK.min(draws - c * CHUNK);
                    let (mut s, mut s2) = (0.0, 0.0);
                    let mut lx = vec![0.0; views.len()];
                    let mut lj = vec![0.0; views.len()];
                    for _ in 0..m {
                        let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let x = match &views[a].chol {
                            None => eps,
                            Some(l) => &views[a].mean + l * eps,
                        };
                        let va = &views[a].cond;
                        let noise: f64 = rng.sample(StandardNormal);
                        let y = views[a].cond_mean(&x) + va.variance.sqrt() * noise;
                        let mut own = 0.0;
                        for (b, v) in views.iter().enumerate() {
                            let ly = normal_log_density(y, v.cond_mean(&x), v.cond.variance);
                            lx[b] = v.log_marginal(&x);
                            lj[b] = lx[b] + ly;
                            if b == a {
                                own = ly;
                            }
                        }
                        let d = own - (log_sum_exp(&lj) - log_sum_exp(&lx));
                        s += d;
                        s2 += d * d;
                    }
                    (s, s2)
                })
                .collect();
            let (s, s2) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
            let n = draws as f64;
            let mean = s / n;
            let var = ((s2 / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0);
            (mean, var)
        })
        .collect();
    let m = per_env.len() as f64;
    let value = per_env.iter().map(|v| v.0).sum::<f64>() / m;
    let se = (per_env.iter().map(|v| v.1 / draws as f64).sum::<f64>()).sqrt() / m;
    Ok(MuEstimate { value, se })
}

/// Best-fitting linear-Gaussian discrepancy μ̄(z): the population analogue
/// of the estimated log ratio per observation. Local conditionals are exact;
/// the pooled model is the single linear-Gaussian regression that best fits
/// the uniform environment mixture, whose residual variance is v̄. The value
/// reduces to ½·mean_e ln(v̄ / v_e).
pub fn mu_bar_of_z(gt: &GroundTruth, z: &FeatureSelector, envs: &[usize]) -> Result<f64> {
    if z.len() != gt.p {
        return Err(BipError::DimensionMismatch {
            expected: gt.p,
            actual: z.len(),
        });
    }
    if envs.iter().any(|&e| e >= gt.num_envs()) {
        return Err(BipError::ConfigInvalid("environment index out of range".into()));
    }
    if envs.len() <= 1 {
        return Ok(0.0);
    }
    let cols = z.indices();
    let k = cols.len();
    // second moments of u = [1, x^z, y] per environment
    let moments: Vec<DMatrix<f64>> = envs
        .iter()
        .map(|&e| {
            let j = gt.joint(e);
            let idx = |a: usize| if a <= k { if a == 0 { None } else { Some(cols[a - 1]) } } else { Some(gt.p) };
            let mean = |a: usize| idx(a).map_or(1.0, |v| j.mean[v]);
            DMatrix::from_fn(k + 2, k + 2, |a, b| {
                let c = match (idx(a), idx(b)) {
                    (Some(u), Some(v)) => j.cov[(u, v)],
                    _ => 0.0,
                };
                c + mean(a) * mean(b)
            })
        })
        .collect();
    let m = moments.iter().fold(DMatrix::zeros(k + 2, k + 2), |acc, x| acc + x) / envs.len() as f64;
    let mxx = m.view((0, 0), (k + 1, k + 1)).into_owned();
    let mxy = m.view((0, k + 1), (k + 1, 1)).into_owned();
    let beta = Cholesky::new(mxx)
        .ok_or(BipError::SingularCovariance(envs[0]))?
        .solve(&mxy);
    let mut w = DVector::zeros(k + 2);
    for a in 0..=k {
        w[a] = -beta[a];
    }
    w[k + 1] = 1.0;
    let v_bar = (&w.transpose() * &m * &w)[(0, 0)];
    let mut total = 0.0;
    for (&e, me) in envs.iter().zip(&moments) {
        let v_e = true_conditional_params(gt, e, z)?.variance;
        let resid = (&w.transpose() * me * &w)[(0, 0)];
        total += 0.5 * (v_bar / v_e).ln() + resid / (2.0 * v_bar) - 0.5;
    }
    Ok((total / envs.len() as f64).max(0.0))
}

/// Which heterogeneity functional a diagnostics run reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Discrepancy {
    /// Closed-form μ̄ against the best-fitting pooled linear model.
    #[default]
    BestFit,
    /// Monte Carlo μ against the exact mixture conditional.
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryDiagnostics {
    pub discrepancy: Discrepancy,
    /// μ(z) keyed by bitstring.
    pub mu: BTreeMap<String, MuEstimate>,
    pub mu_min: f64,
    /// Standard error of the μ estimate attaining the minimum.
    pub mu_min_se: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tv_to_truth: Option<f64>,
}

/// (max_{z≠z*} p(z)/p(z*))·|supp p|
pub fn prior_factor(prior: &Prior, z_star: &FeatureSelector, cap: u128) -> Result<f64> {
    let lp_star = match prior.log_mass(z_star)? {
        LogMass::Finite(v) => v,
        LogMass::OutsideSupport => return Err(BipError::TruthOutsideSupport),
    };
    let support = prior.support(cap)?;
    let mut best = f64::NEG_INFINITY;
    for z in support.iter() {
        if &z == z_star {
            continue;
        }
        if let LogMass::Finite(v) = prior.log_mass(&z)? {
            best = best.max(v);
        }
    }
    if best == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok((best - lp_star + prior.ln_support_size()).exp())
}

/// μ over the whole support, its minimum over z ≠ z*, and R. `draws` and
/// `seed` only matter for the Monte Carlo functional.
pub fn mu_min_and_r(
    gt: &GroundTruth,
    prior: &Prior,
    envs: &[usize],
    discrepancy: Discrepancy,
    draws: usize,
    seed: u64,
) -> Result<TheoryDiagnostics> {
    if prior.p() != gt.p {
        return Err(BipError::DimensionMismatch {
            expected: gt.p,
            actual: prior.p(),
        });
    }
    let r = prior_factor(prior, &gt.z_star, DEFAULT_ENUMERATION_CAP)?;
    let support = prior.support(DEFAULT_ENUMERATION_CAP)?.to_vec();
    let mut mu = BTreeMap::new();
    let (mut mu_min, mut mu_min_se) = (f64::INFINITY, 0.0);
    for z in &support {
        let est = match discrepancy {
            Discrepancy::BestFit => MuEstimate {
                value: mu_bar_of_z(gt, z, envs)?,
                se: 0.0,
            },
            Discrepancy::Mixture => mu_of_z(gt, z, envs, draws, seed)?,
        };
        if z != &gt.z_star && est.value < mu_min {
            mu_min = est.value;
            mu_min_se = est.se;
        }
        mu.insert(z.to_bitstring(), est);
    }
    if !mu_min.is_finite() {
        mu_min = 0.0;
    }
    Ok(TheoryDiagnostics {
        discrepancy,
        mu,
        mu_min,
        mu_min_se,
        r,
        tv_to_truth: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::uq_example_truth;

    fn sel(s: &str) -> FeatureSelector {
        FeatureSelector::from_bitstring(s).unwrap()
    }

    #[test]
    fn scoring_rules() {
        assert_eq!(score(&sel("10"), &sel("10")).unwrap(), (true, true));
        assert_eq!(score(&sel("00"), &sel("10")).unwrap(), (false, true));
        assert_eq!(score(&sel("11"), &sel("10")).unwrap(), (false, false));
        assert!(score(&sel("1"), &sel("10")).is_err());
        let r = EvalReport::from_pairs(&[(sel("10"), sel("10")), (sel("00"), sel("10"))]).unwrap();
        assert_eq!(r.exact_discovery, 0.5);
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let v = gaussian_kl(0.0, 2.0, 0.0, 1.0).unwrap();
        assert!((v - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.1534).abs() < 1e-4);
        assert!(matches!(gaussian_kl(0.0, 0.0, 0.0, 1.0), Err(BipError::NonPositiveVariance(_))));
    }

    #[test]
    fn tv_identity() {
        let t = PosteriorTable::from_log_scores(
            2,
            ["00", "01", "10", "11"].iter().map(|s| (sel(s), 0.0, 0.0)).collect(),
        );
        assert!((tv_to_dirac(&t, &sel("10")).unwrap() - 0.75).abs() < 1e-12);
        let point = PosteriorTable::from_log_scores(1, vec![(sel("1"), 0.0, 0.0)]);
        assert_eq!(tv_to_dirac(&point, &sel("1")).unwrap(), 0.0);
        assert!(matches!(tv_to_dirac(&point, &sel("0")), Err(BipError::TruthOutsideSupport)));
    }

    #[test]
    fn prior_factor_uniform() {
        assert!((prior_factor(&Prior::uniform(3), &sel("101"), 1 << 20).unwrap() - 8.0).abs() < 1e-9);
        assert!(matches!(
            prior_factor(&Prior::max_cardinality(3, 1), &sel("101"), 1 << 20),
            Err(BipError::TruthOutsideSupport)
        ));
    }

    #[test]
    fn mu_vanishes_at_truth_and_single_env() {
        let gt = uq_example_truth(1, 3).unwrap();
        let m = mu_of_z(&gt, &gt.z_star, &[0, 1, 2], 20_000, 1).unwrap();
        assert!(m.value.abs() <= 3.0 * m.se + 1e-9, "{m:?}");
        let single = mu_of_z(&gt, &sel("01"), &[2], 100, 1).unwrap();
        assert_eq!(single.value, 0.0);
    }

    #[test]
    fn mixture_mu_is_reproducible() {
        let gt = uq_example_truth(2, 3).unwrap();
        let a = mu_of_z(&gt, &sel("01"), &[0, 1, 2], 10_000, 4).unwrap();
        let b = mu_of_z(&gt, &sel("01"), &[0, 1, 2], 10_000, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.value > 3.0 * a.se, "{a:?}");
    }

    #[test]
    fn mixture_mu_vanishes_for_separated_environments() {
        // x2's environment marginals barely overlap, so the mixture
        // conditional follows whichever environment owns each x2
        let gt = uq_example_truth(1, 3).unwrap();
        let m = mu_of_z(&gt, &sel("01"), &[0, 1, 2], 5_000, 4).unwrap();
        assert!(m.value.abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn best_fit_mu_example_one() {
        let gt = uq_example_truth(1, 3).unwrap();
        let envs = [0, 1, 2];
        assert!(mu_bar_of_z(&gt, &gt.z_star, &envs).unwrap().abs() < 1e-10);
        let child = mu_bar_of_z(&gt, &sel("01"), &envs).unwrap();
        assert!(child > 0.1, "{child}");
        assert_eq!(mu_bar_of_z(&gt, &sel("01"), &[1]).unwrap(), 0.0);
    }

    #[test]
    fn best_fit_mu_matches_variance_identity() {
        let gt = uq_example_truth(3, 3).unwrap();
        let envs = [0, 1, 2];
        for z in ["00", "01", "11"] {
            let z = sel(z);
            let v = mu_bar_of_z(&gt, &z, &envs).unwrap();
            // pooled residual variance from the mixture, by brute moments
            let local: Vec<f64> = envs
                .iter()
                .map(|&e| crate::synthetic::true_conditional_params(&gt, e, &z).unwrap().variance)
                .collect();
            assert!(v >= 0.0);
            let bound = 0.5 * (local.iter().sum::<f64>() / 3.0).ln() - 0.5 * local.iter().map(|x| x.ln()).sum::<f64>() / 3.0;
            // ½ mean ln(v̄/v_e) is at least the Jensen gap of the local variances
            assert!(v + 1e-12 >= bound, "{v} < {bound}");
        }
    }
}
