#![allow(dead_code)]

use bip_core::{EnvBlock, FeatureSelector, MultiEnvDataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian features, y linear in the first feature plus an
/// environment-specific shift in the last feature's mean.
pub fn random_dataset(seed: u64, p: usize, envs: usize, n: usize) -> MultiEnvDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..envs)
        .map(|e| {
            let shift = e as f64 * 0.7;
            let x = DMatrix::from_fn(n, p, |_, j| {
                let z: f64 = rng.sample(StandardNormal);
                z + if j + 1 == p { shift } else { 0.0 }
            });
            let y = DVector::from_fn(n, |i, _| {
                let z: f64 = rng.sample(StandardNormal);
                1.5 * x[(i, 0)] - 0.3 + 0.5 * z
            });
            EnvBlock::new(e as i64, x, y)
        })
        .collect();
    MultiEnvDataset::new(blocks).unwrap()
}

pub fn all_selectors(p: usize) -> Vec<FeatureSelector> {
    (0..1usize << p)
        .map(|m| FeatureSelector::new((0..p).map(|j| m >> (p - 1 - j) & 1 == 1).collect()))
        .collect()
}

/// Gaussian negative log-likelihood minimized over (intercept, coef, log
/// variance) by damped Newton iterations from the origin.
pub fn newton_mle(x: &DMatrix<f64>, y: &DVector<f64>) -> (f64, Vec<f64>, f64) {
    let (n, k) = (x.nrows(), x.ncols());
    let d = k + 2;
    let mut theta = DVector::<f64>::zeros(d);
    let nll = |t: &DVector<f64>| -> f64 {
        let v = t[d - 1].exp();
        let mut rss = 0.0;
        for i in 0..n {
            let mut r = y[i] - t[0];
            for j in 0..k {
                r -= t[j + 1] * x[(i, j)];
            }
            rss += r * r;
        }
        0.5 * n as f64 * t[d - 1] + rss / (2.0 * v)
    };
    for _ in 0..500 {
        let v = theta[d - 1].exp();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut rss = 0.0;
        for i in 0..n {
            let mut row = vec![1.0];
            row.extend((0..k).map(|j| x[(i, j)]));
            let r = y[i] - row.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
            rss += r * r;
            for a in 0..=k {
                g[a] -= r * row[a] / v;
                for b in 0..=k {
                    h[(a, b)] += row[a] * row[b] / v;
                }
                h[(a, d - 1)] += r * row[a] / v;
            }
        }
        g[d - 1] = 0.5 * n as f64 - rss / (2.0 * v);
        h[(d - 1, d - 1)] = rss / (2.0 * v);
        for a in 0..=k {
            h[(d - 1, a)] = h[(a, d - 1)];
        }
        if g.norm() < 1e-11 {
            break;
        }
        // fall back to the positive-definite block when the full Hessian is indefinite
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => {
                let mut hd = h.clone();
                for a in 0..=k {
                    hd[(a, d - 1)] = 0.0;
                    hd[(d - 1, a)] = 0.0;
                }
                hd[(d - 1, d - 1)] = hd[(d - 1, d - 1)].max(0.5 * n as f64);
                hd.cholesky().unwrap().solve(&g)
            }
        };
        let f0 = nll(&theta);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            if nll(&cand) <= f0 || t < 1e-12 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    (theta[0], (1..=k).map(|j| theta[j]).collect(), theta[d - 1].exp())
}
