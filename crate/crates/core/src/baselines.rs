//! Regression baselines: pooled least squares with two-sided t-tests, keeping
//! the coefficients significant at level α.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{FeatureSelector, MultiEnvDataset};
use crate::error::{BipError, Result};
use crate::mle::MomentStats;

/// Pooled OLS of y on the columns in `candidates` (with intercept). Returns
/// the significant subset, or `None` when the fit is not identifiable
/// (too few rows or a singular design).
pub fn significant_features(
    data: &MultiEnvDataset,
    candidates: &FeatureSelector,
    alpha: f64,
) -> Result<Option<FeatureSelector>> {
    if candidates.len() != data.p() {
        return Err(BipError::DimensionMismatch {
            expected: data.p(),
            actual: candidates.len(),
        });
    }
    let parts: Vec<MomentStats> = data
        .envs()
        .iter()
        .map(|b| MomentStats::from_block(&b.x, &b.y))
        .collect();
    let refs: Vec<&MomentStats> = parts.iter().collect();
    let pooled = MomentStats::combine(&refs);
    let cols = candidates.indices();
    let k = cols.len();
    let n = pooled.n();
    if k == 0 {
        return Ok(Some(FeatureSelector::zeros(data.p())));
    }
    if n <= k + 1 {
        return Ok(None);
    }
    let y = data.p();
    let cross = pooled.cross();
    let sxx = DMatrix::from_fn(k, k, |a, b| cross[(cols[a], cols[b])]);
    let sxy = DVector::from_fn(k, |a, _| cross[(cols[a], y)]);
    let Some(chol) = Cholesky::new(sxx) else {
        return Ok(None);
    };
    let beta = chol.solve(&sxy);
    let rss = (cross[(y, y)] - sxy.dot(&beta)).max(0.0);
    let df = (n - k - 1) as f64;
    let s2 = rss / df;
    let inv = chol.inverse();
    let t_dist = StudentsT::new(0.0, 1.0, df).map_err(|e| BipError::ConfigInvalid(e.to_string()))?;
    let mut out = FeatureSelector::zeros(data.p());
    for (a, &c) in cols.iter().enumerate() {
        let se = (s2 * inv[(a, a)]).sqrt();
        let significant = if se > 0.0 {
            let t = beta[a] / se;
            2.0 * (1.0 - t_dist.cdf(t.abs())) < alpha
        } else {
            beta[a] != 0.0
        };
        if significant {
            out.set(c, true);
        }
    }
    Ok(Some(out))
}

/// Regression on the true invariant features.
pub fn oracle_regression(
    data: &MultiEnvDataset,
    z_star: &FeatureSelector,
    alpha: f64,
) -> Result<Option<FeatureSelector>> {
    significant_features(data, z_star, alpha)
}

/// Regression on all features.
pub fn pooled_regression(data: &MultiEnvDataset, alpha: f64) -> Result<Option<FeatureSelector>> {
    significant_features(data, &FeatureSelector::ones(data.p()), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EnvBlock;

    fn dataset(rows: &[(f64, f64, f64)]) -> MultiEnvDataset {
        let x = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
        let y = DVector::from_fn(rows.len(), |i, _| rows[i].2);
        MultiEnvDataset::new(vec![EnvBlock::new(0, x, y)]).unwrap()
    }

    #[test]
    fn strong_signal_is_kept_and_noise_dropped() {
        // y = 3 x1 with deterministic small wiggle; x2 is unrelated
        let rows: Vec<(f64, f64, f64)> = (0..40)
            .map(|i| {
                let x1 = i as f64 / 10.0;
                let x2 = ((i * 7) % 11) as f64;
                let e = if i % 2 == 0 { 0.05 } else { -0.05 };
                (x1, x2, 3.0 * x1 + e)
            })
            .collect();
        let d = dataset(&rows);
        let sel = pooled_regression(&d, 0.05).unwrap().unwrap();
        assert!(sel.get(0));
        assert!(!sel.get(1));
        let oracle = oracle_regression(&d, &FeatureSelector::from_bitstring("10").unwrap(), 0.05)
            .unwrap()
            .unwrap();
        assert_eq!(oracle.to_string(), "10");
    }

    #[test]
    fn too_few_rows_is_failure() {
        let d = dataset(&[(1.0, 2.0, 3.0), (2.0, 1.0, 0.0), (0.5, 0.5, 1.0)]);
        assert!(pooled_regression(&d, 0.05).unwrap().is_none());
    }

    #[test]
    fn p_value_matches_reference() {
        // t = 2.0 with 10 degrees of freedom: two-sided p ≈ 0.07339
        let t = StudentsT::new(0.0, 1.0, 10.0).unwrap();
        let p = 2.0 * (1.0 - t.cdf(2.0));
        assert!((p - 0.073_388).abs() < 1e-5, "{p}");
    }
}
