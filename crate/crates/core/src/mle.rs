//! Maximum-likelihood linear-Gaussian conditionals y | x^z.
//!
//! Fits run on centered second-moment statistics, so after a single pass over
//! the data every candidate selector costs O(k³) regardless of sample size.
//! Pooled statistics are merged exactly from the per-environment ones.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSelector, MultiEnvDataset};
use crate::error::{BipError, Result};
use crate::numeric::{normal_log_density, LN_2PI};

/// Lower bound applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Eigenvalues of the column-standardized Gram matrix below this fraction of
/// the largest one are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

// A column whose centered sum of squares is this small relative to its raw
// sum of squares is constant and carries no information beyond the intercept.
const CONSTANT_COLUMN_TOLERANCE: f64 = 1e-20;

/// Fitted model y | x^z ~ N(coefᵀx^z + intercept, variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianConditional {
    pub selector: FeatureSelector,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub variance: f64,
}

impl LinearGaussianConditional {
    pub fn mean(&self, x_sub: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x_sub).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Result of a maximum-likelihood fit. `degenerate` marks a rank-deficient
/// design that was resolved by the minimum-norm solution.
#[derive(Clone, Debug, PartialEq)]
pub struct MleFit {
    pub model: LinearGaussianConditional,
    pub degenerate: bool,
}

/// Centered first and second moments of `[x | y]` for one block of rows.
/// Variable index `p` is the outcome.
#[derive(Clone, Debug)]
pub struct MomentStats {
    n: usize,
    mean: Vec<f64>,
    cross: DMatrix<f64>,
}

impl MomentStats {
    pub fn from_block(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let n = y.len();
        let p = x.ncols();
        let mut z = DMatrix::zeros(n, p + 1);
        z.view_mut((0, 0), (n, p)).copy_from(x);
        z.set_column(p, y);
        let mean: Vec<f64> = (0..=p)
            .map(|j| if n == 0 { 0.0 } else { z.column(j).sum() / n as f64 })
            .collect();
        for (j, m) in mean.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(-m);
        }
        let cross = z.tr_mul(&z);
        Self { n, mean, cross }
    }

    /// Exact merge of several blocks (parallel-axis update).
    pub fn combine(parts: &[&MomentStats]) -> Self {
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let d = parts[0].mean.len();
        let n: usize = parts.iter().map(|s| s.n).sum();
        let mean: Vec<f64> = (0..d)
            .map(|j| parts.iter().map(|s| s.n as f64 * s.mean[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cross = DMatrix::zeros(d, d);
        for s in parts {
            cross += &s.cross;
            let delta = DVector::from_iterator(d, s.mean.iter().zip(&mean).map(|(a, b)| a - b));
            cross += (&delta * delta.transpose()) * s.n as f64;
        }
        Self { n, mean, cross }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Column means; the last entry is the outcome.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Centered cross-product matrix of `[x | y]`.
    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    fn outcome(&self) -> usize {
        self.mean.len() - 1
    }

    /// Least-squares fit of the outcome on the selected columns.
    pub fn fit(&self, selector: &FeatureSelector) -> MleFit {
        let cols = selector.indices();
        let k = cols.len();
        let yi = self.outcome();
        let n = self.n as f64;
        let syy = self.cross[(yi, yi)];
        let mut coef = vec![0.0; k];
        let mut degenerate = false;

        let active: Vec<usize> = (0..k)
            .filter(|&a| {
                let c = cols[a];
                let ss = self.cross[(c, c)];
                let raw = ss + n * self.mean[c] * self.mean[c];
                let constant = ss <= 0.0 || ss <= CONSTANT_COLUMN_TOLERANCE * raw;
                degenerate |= constant;
                !constant
            })
            .collect();

        if !active.is_empty() {
            let m = active.len();
            let scale: Vec<f64> = active
                .iter()
                .map(|&a| self.cross[(cols[a], cols[a])].sqrt())
                .collect();
            let gram = DMatrix::from_fn(m, m, |r, c| {
                self.cross[(cols[active[r]], cols[active[c]])] / (scale[r] * scale[c])
            });
            let rhs = DVector::from_fn(m, |r, _| self.cross[(cols[active[r]], yi)] / scale[r]);
            let eig = SymmetricEigen::new(gram);
            let lambda_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            let mut beta = DVector::zeros(m);
            for i in 0..m {
                let lambda = eig.eigenvalues[i];
                if lambda > RANK_TOLERANCE * lambda_max {
                    let u = eig.eigenvectors.column(i);
                    beta += u * (u.dot(&rhs) / lambda);
                } else {
                    degenerate = true;
                }
            }
            for (r, &a) in active.iter().enumerate() {
                coef[a] = beta[r] / scale[r];
            }
        }

        let intercept = self.mean[yi]
            - cols
                .iter()
                .zip(&coef)
                .map(|(&c, b)| b * self.mean[c])
                .sum::<f64>();
        let rss = self.centered_rss(&cols, &coef, syy);
        let variance = (rss / n).max(VARIANCE_FLOOR);
        MleFit {
            model: LinearGaussianConditional {
                selector: selector.clone(),
                coef,
                intercept,
                variance,
            },
            degenerate,
        }
    }

    fn centered_rss(&self, cols: &[usize], coef: &[f64], syy: f64) -> f64 {
        let yi = self.outcome();
        let mut rss = syy;
        for (a, &ca) in cols.iter().enumerate() {
            rss -= 2.0 * coef[a] * self.cross[(ca, yi)];
            for (b, &cb) in cols.iter().enumerate() {
                rss += coef[a] * coef[b] * self.cross[(ca, cb)];
            }
        }
        rss.max(0.0)
    }

    /// Residual sum of squares of `model` on these rows.
    pub fn rss(&self, model: &LinearGaussianConditional) -> f64 {
        let cols = model.selector.indices();
        let yi = self.outcome();
        let offset = self.mean[yi]
            - model.intercept
            - cols
                .iter()
                .zip(&model.coef)
                .map(|(&c, b)| b * self.mean[c])
                .sum::<f64>();
        self.centered_rss(&cols, &model.coef, self.cross[(yi, yi)]) + self.n as f64 * offset * offset
    }

    /// Σᵢ log N(yᵢ | model) over these rows.
    pub fn log_likelihood(&self, model: &LinearGaussianConditional) -> f64 {
        let n = self.n as f64;
        -0.5 * n * (LN_2PI + model.variance.ln()) - self.rss(model) / (2.0 * model.variance)
    }
}

/// Per-environment and pooled moment statistics of a dataset.
#[derive(Clone, Debug)]
pub struct DatasetMoments {
    local: Vec<MomentStats>,
    pooled: MomentStats,
    p: usize,
}

impl DatasetMoments {
    pub fn new(data: &MultiEnvDataset) -> Self {
        let local: Vec<MomentStats> = data
            .envs()
            .iter()
            .map(|b| MomentStats::from_block(&b.x, &b.y))
            .collect();
        let refs: Vec<&MomentStats> = local.iter().collect();
        let pooled = MomentStats::combine(&refs);
        Self {
            local,
            pooled,
            p: data.p(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn num_envs(&self) -> usize {
        self.local.len()
    }

    pub fn local(&self, e: usize) -> &MomentStats {
        &self.local[e]
    }

    pub fn pooled(&self) -> &MomentStats {
        &self.pooled
    }

    fn check(&self, z: &FeatureSelector) -> Result<()> {
        if z.len() != self.p {
            return Err(BipError::DimensionMismatch {
                expected: self.p,
                actual: z.len(),
            });
        }
        Ok(())
    }

    pub fn fit_local(&self, z: &FeatureSelector) -> Result<Vec<MleFit>> {
        self.check(z)?;
        Ok(self.local.iter().map(|s| s.fit(z)).collect())
    }

    pub fn fit_pooled(&self, z: &FeatureSelector) -> Result<MleFit> {
        self.check(z)?;
        Ok(self.pooled.fit(z))
    }
}

/// Maximum-likelihood fit of y on all columns of `x_sub` plus an intercept.
pub fn fit_mle(x_sub: &DMatrix<f64>, y: &DVector<f64>) -> Result<MleFit> {
    if y.is_empty() {
        return Err(BipError::ShapeMismatch("fit_mle needs at least one row".into()));
    }
    if x_sub.nrows() != y.len() {
        return Err(BipError::ShapeMismatch(format!(
            "{} design rows but {} outcomes",
            x_sub.nrows(),
            y.len()
        )));
    }
    let stats = MomentStats::from_block(x_sub, y);
    Ok(stats.fit(&FeatureSelector::ones(x_sub.ncols())))
}

/// log N(y | coefᵀx + intercept, variance) for one row already restricted to
/// the model's selected columns.
pub fn log_density(model: &LinearGaussianConditional, x_row: &[f64], y: f64) -> Result<f64> {
    if x_row.len() != model.coef.len() {
        return Err(BipError::DimensionMismatch {
            expected: model.coef.len(),
            actual: x_row.len(),
        });
    }
    Ok(normal_log_density(y, model.mean(x_row), model.variance))
}

/// One fit per environment on that environment's (x^z, y).
pub fn fit_local_conditionals(data: &MultiEnvDataset, z: &FeatureSelector) -> Result<Vec<MleFit>> {
    if z.len() != data.p() {
        return Err(BipError::DimensionMismatch {
            expected: data.p(),
            actual: z.len(),
        });
    }
    Ok(data
        .envs()
        .iter()
        .map(|b| MomentStats::from_block(&b.x, &b.y).fit(z))
        .collect())
}

/// Fit on the row-concatenation of all environments.
pub fn fit_pooled_conditional(data: &MultiEnvDataset, z: &FeatureSelector) -> Result<MleFit> {
    DatasetMoments::new(data).fit_pooled(z)
}

/// Σᵢ log_density over the rows of (x, y), with x holding all p features.
pub fn sum_log_density(
    model: &LinearGaussianConditional,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> f64 {
    let cols = model.selector.indices();
    let mut row = vec![0.0; cols.len()];
    (0..y.len())
        .map(|i| {
            for (r, &c) in row.iter_mut().zip(&cols) {
                *r = x[(i, c)];
            }
            normal_log_density(y[i], model.mean(&row), model.variance)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EnvBlock;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn exact_linear_fit_hits_floor() {
        let fit = fit_mle(&col(&[1.0, 2.0, 3.0]), &DVector::from_vec(vec![2.0, 4.0, 6.0])).unwrap();
        assert!((fit.model.coef[0] - 2.0).abs() < 1e-12);
        assert!(fit.model.intercept.abs() < 1e-12);
        assert_eq!(fit.model.variance, VARIANCE_FLOOR);
        assert!(!fit.degenerate);
    }

    #[test]
    fn intercept_only() {
        let fit = fit_mle(&DMatrix::zeros(3, 0), &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(fit.model.coef.is_empty());
        assert!((fit.model.intercept - 2.0).abs() < 1e-15);
        assert!((fit.model.variance - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_design_uses_minimum_norm() {
        // duplicated column: any split of the slope fits; minimum norm splits evenly
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 5.0, 5.0]);
        let y = DVector::from_vec(vec![2.0, 4.1, 5.9, 10.0]);
        let fit = fit_mle(&x, &y).unwrap();
        assert!(fit.degenerate);
        assert!((fit.model.coef[0] - fit.model.coef[1]).abs() < 1e-9);
        let single = fit_mle(&col(&[1.0, 2.0, 3.0, 5.0]), &y).unwrap();
        assert!((fit.model.coef[0] * 2.0 - single.model.coef[0]).abs() < 1e-9);
        assert!((fit.model.variance - single.model.variance).abs() < 1e-12);
    }

    #[test]
    fn more_columns_than_rows_does_not_crash() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -2.0, 3.0, 1.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let fit = fit_mle(&x, &y).unwrap();
        assert!(fit.degenerate);
        assert!(fit.model.coef.iter().all(|c| c.is_finite()));
        assert_eq!(fit.model.variance, VARIANCE_FLOOR);
        let one = fit_mle(&x.rows(0, 1).into_owned(), &y.rows(0, 1).into_owned()).unwrap();
        assert!(one.degenerate);
        assert!((one.model.intercept - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_density_values() {
        let sel = |k| FeatureSelector::ones(k);
        let m0 = LinearGaussianConditional {
            selector: sel(0),
            coef: vec![],
            intercept: 0.0,
            variance: 1.0,
        };
        assert!((log_density(&m0, &[], 0.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let m1 = LinearGaussianConditional {
            selector: sel(1),
            coef: vec![1.0],
            intercept: 0.0,
            variance: 1.0,
        };
        assert!((log_density(&m1, &[2.0], 2.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let m2 = LinearGaussianConditional {
            selector: sel(1),
            coef: vec![1.0],
            intercept: 0.5,
            variance: 0.04,
        };
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 0.04).ln();
        assert!((log_density(&m2, &[1.0], 1.5).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.6905).abs() < 1e-4);
        assert!(log_density(&m2, &[1.0, 2.0], 1.5).is_err());
    }

    fn random_env(rng: &mut ChaCha8Rng, id: i64, n: usize, p: usize) -> EnvBlock {
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            x.row(i).iter().enumerate().map(|(j, v)| (j as f64 + 0.5) * v).sum::<f64>()
                + rng.sample::<f64, _>(StandardNormal)
        });
        EnvBlock::new(id, x, y)
    }

    #[test]
    fn moments_log_likelihood_matches_row_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_env(&mut rng, 0, 40, 4);
        let stats = MomentStats::from_block(&b.x, &b.y);
        let z = FeatureSelector::from_bitstring("1011").unwrap();
        let fit = stats.fit(&z);
        let direct = sum_log_density(&fit.model, &b.x, &b.y);
        assert!((stats.log_likelihood(&fit.model) - direct).abs() < 1e-9 * direct.abs());
        // and for a model that is not the MLE on these rows
        let mut other = fit.model.clone();
        other.intercept += 0.3;
        other.coef[1] -= 0.2;
        let direct = sum_log_density(&other, &b.x, &b.y);
        assert!((stats.log_likelihood(&other) - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn pooled_merge_matches_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_env(&mut rng, 0, 30, 3);
        let b = random_env(&mut rng, 1, 17, 3);
        let merged = MomentStats::combine(&[
            &MomentStats::from_block(&a.x, &a.y),
            &MomentStats::from_block(&b.x, &b.y),
        ]);
        let x = DMatrix::from_fn(47, 3, |i, j| if i < 30 { a.x[(i, j)] } else { b.x[(i - 30, j)] });
        let y = DVector::from_fn(47, |i, _| if i < 30 { a.y[i] } else { b.y[i - 30] });
        let direct = MomentStats::from_block(&x, &y);
        assert!((merged.cross.clone() - direct.cross.clone()).abs().max() < 1e-10);
        for j in 0..4 {
            assert!((merged.mean[j] - direct.mean[j]).abs() < 1e-13);
        }
    }

    #[test]
    fn single_environment_pooling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = MultiEnvDataset::new(vec![random_env(&mut rng, 0, 25, 3)]).unwrap();
        let z = FeatureSelector::from_bitstring("110").unwrap();
        let local = fit_local_conditionals(&data, &z).unwrap();
        let pooled = fit_pooled_conditional(&data, &z).unwrap();
        assert_eq!(local[0], pooled);
    }

    #[test]
    fn pooled_mean_of_two_environments() {
        let e0 = EnvBlock::new(0, DMatrix::zeros(4, 1), DVector::from_vec(vec![-1.0, 1.0, -1.0, 1.0]));
        let e1 = EnvBlock::new(1, DMatrix::zeros(4, 1), DVector::from_vec(vec![1.0, 3.0, 1.0, 3.0]));
        let data = MultiEnvDataset::new(vec![e0, e1]).unwrap();
        let fit = fit_pooled_conditional(&data, &FeatureSelector::zeros(1)).unwrap();
        assert!((fit.model.intercept - 1.0).abs() < 1e-15);
        assert!((fit.model.variance - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_environments_fit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_env(&mut rng, 0, 20, 2);
        let mut b = a.clone();
        b.env_id = 1;
        let data = MultiEnvDataset::new(vec![a, b]).unwrap();
        let z = FeatureSelector::ones(2);
        let local = fit_local_conditionals(&data, &z).unwrap();
        let pooled = fit_pooled_conditional(&data, &z).unwrap();
        for j in 0..2 {
            assert!((local[0].model.coef[j] - local[1].model.coef[j]).abs() < 1e-10);
            assert!((local[0].model.coef[j] - pooled.model.coef[j]).abs() < 1e-10);
        }
    }
}
