//! Linear-Gaussian multi-environment data with known invariant features.
//!
//! Variables (p features and the outcome) are arranged in a random order
//! shared by all environments; each is a linear-Gaussian function of the
//! variables before it. The first environment is observational. Every later
//! environment redraws the conditionals of a random subset of features, while
//! the outcome's conditional is never touched, so y | x^{z*} is invariant for
//! z* = the outcome's parents.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EnvBlock, FeatureSelector, MultiEnvDataset};
use crate::error::{BipError, Result};
use crate::mle::{LinearGaussianConditional, VARIANCE_FLOOR};
use crate::rng::{label, stream};

/// A scalar hyperparameter that is either fixed, uniform on an interval, or
/// uniform over a finite set. JSON: `0.5`, `[0.1, 0.2]`, `{"choice": [..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dist {
    Fixed(f64),
    Uniform([f64; 2]),
    Choice { choice: Vec<f64> },
}

impl Dist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Dist::Fixed(v) => *v,
            Dist::Uniform([lo, hi]) => {
                if hi > lo {
                    rng.random_range(*lo..*hi)
                } else {
                    *lo
                }
            }
            Dist::Choice { choice } => choice[rng.random_range(0..choice.len())],
        }
    }

    fn range(&self) -> Option<(f64, f64)> {
        match self {
            Dist::Fixed(v) => Some((*v, *v)),
            Dist::Uniform([lo, hi]) => (lo <= hi).then_some((*lo, *hi)),
            Dist::Choice { choice } => {
                if choice.is_empty() {
                    None
                } else {
                    let lo = choice.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = choice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    Some((lo, hi))
                }
            }
        }
    }
}

/// Coefficient bound derived from an environment's intercept-magnitude mean
/// m: `scale · (m + offset)^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanBound {
    pub offset: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "one_i")]
    pub power: i32,
}

fn one() -> f64 {
    1.0
}

fn one_i() -> i32 {
    1
}

impl MeanBound {
    pub fn eval(&self, m: f64) -> f64 {
        self.scale * (m + self.offset).powi(self.power)
    }
}

/// Per-interventional-environment hyperparameters, each drawn independently
/// for every environment after the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionConfig {
    /// Mean of the intercept magnitude.
    pub m: Dist,
    pub lambda_min: Dist,
    pub lambda_diff: Dist,
    /// Probability of keeping each observational coefficient.
    pub p_change: Dist,
    /// Fraction of features intervened on (intervention strength).
    pub strength: Dist,
    pub lb: MeanBound,
    pub ub: MeanBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub p: usize,
    pub envs: usize,
    pub n: usize,
    pub p_act: Dist,
    pub lb: f64,
    pub ub: f64,
    pub sigma_min_sq: f64,
    pub sigma_max_sq: f64,
    pub p_star_min: usize,
    pub p_star_max: usize,
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BipError::ConfigInvalid(m));
        if self.p == 0 || self.n == 0 || self.envs == 0 {
            return bad("p, n and envs must be positive".into());
        }
        let prob = |name: &str, d: &Dist| -> Result<()> {
            match d.range() {
                Some((lo, hi)) if (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) => Ok(()),
                _ => Err(BipError::ConfigInvalid(format!("{name} must lie in [0, 1]"))),
            }
        };
        prob("p_act", &self.p_act)?;
        prob("intervention.p_change", &self.intervention.p_change)?;
        prob("intervention.strength", &self.intervention.strength)?;
        for (name, d) in [
            ("intervention.m", &self.intervention.m),
            ("intervention.lambda_min", &self.intervention.lambda_min),
            ("intervention.lambda_diff", &self.intervention.lambda_diff),
        ] {
            if d.range().is_none() {
                return bad(format!("{name} has an empty range"));
            }
        }
        if !(self.lb <= self.ub) {
            return bad("lb must not exceed ub".into());
        }
        if !(self.sigma_min_sq > 0.0 && self.sigma_min_sq <= self.sigma_max_sq) {
            return bad("need 0 < sigma_min_sq <= sigma_max_sq".into());
        }
        if self.p_star_min > self.p_star_max || self.p_star_min > self.p {
            return bad(format!(
                "no outcome position satisfies p_star_min={} p_star_max={} with p={}",
                self.p_star_min, self.p_star_max, self.p
            ));
        }
        Ok(())
    }

    /// Replaces the intervention strength with a fixed fraction.
    pub fn with_strength(mut self, strength: f64) -> Self {
        self.intervention.strength = Dist::Fixed(strength);
        self
    }
}

/// Names of the shipped presets.
pub const PRESETS: &[&str] = &["appendix-c1-p3", "appendix-c3-p10", "appendix-c3-p450"];

/// Shipped parameter sets. `envs`, `n` and `seed` are placeholders meant
/// to be overridden.
pub fn preset(name: &str) -> Option<SynthConfig> {
    let common_int = |lb: MeanBound, ub: MeanBound, m: Dist, p_change: Dist, strength: Dist| {
        InterventionConfig {
            m,
            lambda_min: Dist::Uniform([0.1, 0.2]),
            lambda_diff: Dist::Uniform([0.1, 0.5]),
            p_change,
            strength,
            lb,
            ub,
        }
    };
    match name {
        "appendix-c1-p3" => Some(SynthConfig {
            p: 3,
            envs: 5,
            n: 200,
            p_act: Dist::Fixed(1.0),
            lb: 0.5,
            ub: 2.0,
            sigma_min_sq: 0.1,
            sigma_max_sq: 0.2,
            p_star_min: 1,
            p_star_max: 3,
            intervention: common_int(
                MeanBound { offset: 0.01, scale: 1.0, power: 2 },
                MeanBound { offset: 0.5, scale: 1.0, power: 2 },
                Dist::Uniform([0.0, 1.0]),
                Dist::Fixed(1.0),
                Dist::Fixed(1.0),
            ),
            seed: 0,
        }),
        "appendix-c3-p10" => Some(SynthConfig {
            p: 10,
            envs: 20,
            n: 500,
            p_act: Dist::Choice { choice: vec![0.6, 0.7, 0.8, 0.9] },
            lb: 1.0,
            ub: 2.1,
            sigma_min_sq: 0.1,
            sigma_max_sq: 0.2,
            p_star_min: 1,
            p_star_max: 5,
            intervention: common_int(
                MeanBound { offset: 0.01, scale: 2.0, power: 1 },
                MeanBound { offset: 0.5, scale: 2.0, power: 1 },
                Dist::Uniform([0.0, 1.0]),
                Dist::Uniform([0.1, 0.3]),
                Dist::Uniform([0.5, 1.0]),
            ),
            seed: 0,
        }),
        "appendix-c3-p450" => Some(SynthConfig {
            p: 450,
            envs: 20,
            n: 500,
            p_act: Dist::Choice { choice: vec![0.1, 0.15, 0.2, 0.25] },
            lb: 1.0,
            ub: 2.1,
            sigma_min_sq: 0.1,
            sigma_max_sq: 0.2,
            p_star_min: 1,
            p_star_max: 10,
            intervention: common_int(
                MeanBound { offset: 0.01, scale: 1.0, power: 1 },
                MeanBound { offset: 0.01, scale: 1.5, power: 1 },
                Dist::Uniform([0.0, 0.4]),
                Dist::Uniform([0.1, 0.3]),
                Dist::Uniform([0.5, 1.0]),
            ),
            seed: 0,
        }),
        _ => None,
    }
}

/// Structural conditional of one variable given everything before it in the
/// causal order. `coef[j]` multiplies the variable at position `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub var: usize,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    /// Nodes in causal order.
    pub nodes: Vec<NodeParams>,
}

/// Known generating process. Variable indices are 0-based; index `p` is the
/// outcome. `permutation[i]` is the variable at causal position `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p: usize,
    pub z_star: FeatureSelector,
    pub permutation: Vec<usize>,
    /// Per environment, the features whose conditionals were redrawn.
    pub intervened_sets: Vec<Vec<usize>>,
    pub env_params: Vec<EnvParams>,
}

/// Mean and covariance of (x, y) under one environment, variable-indexed.
#[derive(Clone, Debug)]
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GroundTruth {
    pub fn num_envs(&self) -> usize {
        self.env_params.len()
    }

    /// Causal position of the outcome (0-based) = number of its predecessors.
    pub fn outcome_position(&self) -> usize {
        self.permutation.iter().position(|&v| v == self.p).unwrap_or(self.p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.p + 1;
        let mut seen = vec![false; d];
        if self.permutation.len() != d || self.z_star.len() != self.p {
            return Err(BipError::ConfigInvalid("ground truth dimensions disagree".into()));
        }
        for &v in &self.permutation {
            if v >= d || seen[v] {
                return Err(BipError::ConfigInvalid("permutation is not a permutation".into()));
            }
            seen[v] = true;
        }
        if self.env_params.is_empty() {
            return Err(BipError::ConfigInvalid("ground truth has no environments".into()));
        }
        for env in &self.env_params {
            if env.nodes.len() != d {
                return Err(BipError::ConfigInvalid("environment node count disagrees".into()));
            }
            for (i, node) in env.nodes.iter().enumerate() {
                if node.var != self.permutation[i] || node.coef.len() != i || !(node.variance > 0.0)
                {
                    return Err(BipError::ConfigInvalid(format!(
                        "node at position {i} is inconsistent with the permutation"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact joint Gaussian of environment `e`.
    pub fn joint(&self, e: usize) -> JointGaussian {
        let d = self.p + 1;
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        let nodes = &self.env_params[e].nodes;
        for (i, node) in nodes.iter().enumerate() {
            let v = node.var;
            let mut m = node.intercept;
            for (j, &a) in node.coef.iter().enumerate() {
                m += a * mean[nodes[j].var];
            }
            mean[v] = m;
            // Cov(v, w) for every earlier w, then Var(v)
            for node_w in &nodes[..i] {
                let w = node_w.var;
                let c: f64 = node
                    .coef
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| a * cov[(nodes[j].var, w)])
                    .sum();
                cov[(v, w)] = c;
                cov[(w, v)] = c;
            }
            let var: f64 = node
                .coef
                .iter()
                .enumerate()
                .map(|(j, &a)| a * cov[(nodes[j].var, v)])
                .sum::<f64>()
                + node.variance;
            cov[(v, v)] = var;
        }
        JointGaussian { mean, cov }
    }

    /// Draws `n` rows per environment by ancestral sampling. Each
    /// (environment, variable) pair has its own noise stream.
    pub fn sample(&self, n: usize, seed: u64) -> Result<MultiEnvDataset> {
        let p = self.p;
        let blocks = (0..self.num_envs())
            .map(|e| {
                let nodes = &self.env_params[e].nodes;
                let mut values = DMatrix::<f64>::zeros(n, p + 1);
                for (i, node) in nodes.iter().enumerate() {
                    let mut rng = stream(seed, &[label::NOISE, e as u64, node.var as u64]);
                    let sd = node.variance.sqrt();
                    for r in 0..n {
                        let mut v = node.intercept;
                        for (j, &a) in node.coef.iter().enumerate() {
                            if a != 0.0 {
                                v += a * values[(r, nodes[j].var)];
                            }
                        }
                        let eps: f64 = rng.sample(StandardNormal);
                        values[(r, node.var)] = v + sd * eps;
                        let _ = i;
                    }
                }
                let x = values.columns(0, p).into_owned();
                let y = values.column(p).into_owned();
                EnvBlock::new(e as i64, x, y)
            })
            .collect();
        MultiEnvDataset::new(blocks)
    }
}

fn signed(rng: &mut ChaCha8Rng, magnitude: f64) -> f64 {
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Number of intervened features for a strength fraction: nearest integer,
/// at least one whenever the fraction is positive.
pub fn intervened_count(strength: f64, p: usize) -> usize {
    if strength <= 0.0 {
        return 0;
    }
    ((strength * p as f64).round() as usize).clamp(1, p)
}

/// Draws a ground truth and a dataset from `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<(MultiEnvDataset, GroundTruth)> {
    let gt = generate_truth(cfg)?;
    let data = gt.sample(cfg.n, cfg.seed)?;
    Ok((data, gt))
}

/// Draws only the generating process.
pub fn generate_truth(cfg: &SynthConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let p = cfg.p;
    let mut rng = stream(cfg.seed, &[label::STRUCTURE]);

    let mut permutation: Vec<usize> = (0..=p).collect();
    loop {
        permutation.shuffle(&mut rng);
        let pos = permutation.iter().position(|&v| v == p).unwrap();
        if cfg.p_star_min <= pos && pos <= cfg.p_star_max {
            break;
        }
    }
    let y_pos = permutation.iter().position(|&v| v == p).unwrap();
    let p_act = cfg.p_act.sample(&mut rng);

    // observational environment
    let mut prng = stream(cfg.seed, &[label::PARAMS, 0]);
    let observational: Vec<NodeParams> = permutation
        .iter()
        .enumerate()
        .map(|(i, &var)| {
            let intercept: f64 = prng.sample(StandardNormal);
            let variance = uniform(&mut prng, cfg.sigma_min_sq, cfg.sigma_max_sq);
            let coef = (0..i)
                .map(|_| {
                    if var == p || prng.random_bool(p_act) {
                        let mag = uniform(&mut prng, cfg.lb, cfg.ub);
                        signed(&mut prng, mag)
                    } else {
                        0.0
                    }
                })
                .collect();
            NodeParams {
                var,
                coef,
                intercept,
                variance,
            }
        })
        .collect();

    let z_star = FeatureSelector::from_indices(p, &permutation[..y_pos]);

    let mut env_params = vec![EnvParams {
        nodes: observational.clone(),
    }];
    let mut intervened_sets = vec![Vec::new()];
    for e in 1..cfg.envs {
        let mut prng = stream(cfg.seed, &[label::PARAMS, e as u64]);
        let ic = &cfg.intervention;
        let m = ic.m.sample(&mut prng);
        let lambda_min = ic.lambda_min.sample(&mut prng);
        let lambda_diff = ic.lambda_diff.sample(&mut prng);
        let p_keep = ic.p_change.sample(&mut prng);
        let strength = ic.strength.sample(&mut prng);
        let (lb_e, ub_e) = (ic.lb.eval(m), ic.ub.eval(m));
        let k = intervened_count(strength, p);
        let mut targets: Vec<usize> = index::sample(&mut prng, p, k).into_vec();
        targets.sort_unstable();
        let mut nodes = observational.clone();
        for node in nodes.iter_mut().filter(|nd| targets.binary_search(&nd.var).is_ok()) {
            let draw: f64 = Normal::new(m, 1.0).unwrap().sample(&mut prng);
            node.intercept = signed(&mut prng, draw.abs());
            let lambda = uniform(&mut prng, lambda_min, lambda_min + lambda_diff);
            node.variance *= lambda * lambda;
            for c in node.coef.iter_mut() {
                if !prng.random_bool(p_keep) {
                    *c = if prng.random_bool(p_act) {
                        let mag = uniform(&mut prng, lb_e, ub_e);
                        signed(&mut prng, mag)
                    } else {
                        0.0
                    };
                }
            }
        }
        env_params.push(EnvParams { nodes });
        intervened_sets.push(targets);
    }

    Ok(GroundTruth {
        p,
        z_star,
        permutation,
        intervened_sets,
        env_params,
    })
}

fn node(var: usize, coef: &[f64], intercept: f64, variance: f64) -> NodeParams {
    NodeParams {
        var,
        coef: coef.to_vec(),
        intercept,
        variance,
    }
}

/// Ground truth of one of the three fixed two-feature processes with
/// multiple invariant sets under two environments. `envs` keeps the first
/// two or all three environments.
pub fn uq_example_truth(id: u32, envs: usize) -> Result<GroundTruth> {
    if !(1..=3).contains(&envs) {
        return Err(BipError::ConfigInvalid(format!(
            "example processes have 1 to 3 environments, requested {envs}"
        )));
    }
    const V: f64 = 0.01;
    let x1_means = [0.0, 2.0, 5.0];
    let (permutation, all): (Vec<usize>, Vec<Vec<NodeParams>>) = match id {
        // x1 -> y -> x2; the third environment adds x1 -> x2
        1 => (
            vec![0, 2, 1],
            (0..3)
                .map(|e| {
                    let x2 = if e < 2 {
                        node(1, &[0.0, 1.0], 0.1, V)
                    } else {
                        node(1, &[1.0, 1.0], 0.1, V)
                    };
                    vec![node(0, &[], x1_means[e], V), node(2, &[1.0], 0.5, V), x2]
                })
                .collect(),
        ),
        // x1, x2 independent parents of y; x2's mean flips in the third
        2 => (
            vec![0, 1, 2],
            (0..3)
                .map(|e| {
                    let x2_mean = if e < 2 { 0.5 } else { -0.5 };
                    vec![
                        node(0, &[], x1_means[e], V),
                        node(1, &[0.0], x2_mean, V),
                        node(2, &[1.0, 1.0], 0.1, V),
                    ]
                })
                .collect(),
        ),
        // x1 -> y, x1 -> x2 with environment-specific slope; y -> x2 only in the third
        3 => (
            vec![0, 2, 1],
            (0..3)
                .map(|e| {
                    let x2 = match e {
                        0 => node(1, &[1.0, 0.0], 0.1, V),
                        1 => node(1, &[-2.0, 0.0], 0.1, V),
                        _ => node(1, &[1.0, 1.0], 0.0, V),
                    };
                    vec![node(0, &[], x1_means[e], V), node(2, &[1.0], 0.5, V), x2]
                })
                .collect(),
        ),
        other => return Err(BipError::UnknownExample(other)),
    };
    let env_params: Vec<EnvParams> = all
        .into_iter()
        .take(envs)
        .map(|nodes| EnvParams { nodes })
        .collect();
    let intervened_sets = env_params
        .iter()
        .map(|env| {
            let mut changed: Vec<usize> = env
                .nodes
                .iter()
                .zip(&env_params[0].nodes)
                .filter(|(a, b)| a != b)
                .map(|(a, _)| a.var)
                .collect();
            changed.sort_unstable();
            changed
        })
        .collect();
    let y_pos = permutation.iter().position(|&v| v == 2).unwrap();
    Ok(GroundTruth {
        p: 2,
        z_star: FeatureSelector::from_indices(2, &permutation[..y_pos]),
        permutation,
        intervened_sets,
        env_params,
    })
}

/// Draws `n` rows per environment from a fixed example process.
pub fn uq_example(id: u32, envs: usize, n: usize, seed: u64) -> Result<(MultiEnvDataset, GroundTruth)> {
    if n == 0 {
        return Err(BipError::ConfigInvalid("n must be positive".into()));
    }
    let gt = uq_example_truth(id, envs)?;
    let data = gt.sample(n, seed)?;
    Ok((data, gt))
}

/// Gaussian conditional of y | x^z under environment `e`, from the exact
/// joint by Schur complement.
pub fn true_conditional_params(
    gt: &GroundTruth,
    e: usize,
    z: &FeatureSelector,
) -> Result<LinearGaussianConditional> {
    conditional_from_joint(&gt.joint(e), gt.p, z, e)
}

pub(crate) fn conditional_from_joint(
    joint: &JointGaussian,
    p: usize,
    z: &FeatureSelector,
    e: usize,
) -> Result<LinearGaussianConditional> {
    if z.len() != p {
        return Err(BipError::DimensionMismatch {
            expected: p,
            actual: z.len(),
        });
    }
    let cols = z.indices();
    let k = cols.len();
    let syy = joint.cov[(p, p)];
    if k == 0 {
        return Ok(LinearGaussianConditional {
            selector: z.clone(),
            coef: vec![],
            intercept: joint.mean[p],
            variance: syy.max(VARIANCE_FLOOR),
        });
    }
    let szz = DMatrix::from_fn(k, k, |a, b| joint.cov[(cols[a], cols[b])]);
    let szy = DVector::from_fn(k, |a, _| joint.cov[(cols[a], p)]);
    let chol = Cholesky::new(szz).ok_or(BipError::SingularCovariance(e))?;
    let coef = chol.solve(&szy);
    let intercept =
        joint.mean[p] - cols.iter().zip(coef.iter()).map(|(&c, b)| b * joint.mean[c]).sum::<f64>();
    let variance = (syy - szy.dot(&coef)).max(VARIANCE_FLOOR);
    Ok(LinearGaussianConditional {
        selector: z.clone(),
        coef: coef.iter().copied().collect(),
        intercept,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            envs: 4,
            n: 50,
            seed,
            ..preset("appendix-c1-p3").unwrap()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (d1, g1) = generate(&cfg(11)).unwrap();
        let (d2, g2) = generate(&cfg(11)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
        let (d3, _) = generate(&cfg(12)).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn outcome_position_respects_bounds() {
        for seed in 0..200 {
            let c = SynthConfig {
                p: 10,
                p_star_min: 2,
                p_star_max: 4,
                ..cfg(seed)
            };
            let gt = generate_truth(&c).unwrap();
            let pos = gt.outcome_position();
            // 1-based position q satisfies p*_min < q <= p*_max + 1
            assert!(2 < pos + 1 && pos < 4 + 1, "pos {pos}");
            assert_eq!(gt.z_star.cardinality(), pos);
            gt.validate().unwrap();
        }
    }

    #[test]
    fn outcome_conditional_never_intervened() {
        for seed in 0..50 {
            let gt = generate_truth(&cfg(seed)).unwrap();
            let pos = gt.outcome_position();
            let first = &gt.env_params[0].nodes[pos];
            for env in &gt.env_params {
                assert_eq!(&env.nodes[pos], first);
            }
            assert!(first.coef.iter().all(|&c| c != 0.0));
        }
    }

    #[test]
    fn zero_strength_means_no_heterogeneity() {
        let c = cfg(3).with_strength(0.0);
        let gt = generate_truth(&c).unwrap();
        for env in &gt.env_params {
            assert_eq!(env, &gt.env_params[0]);
        }
        assert!(gt.intervened_sets.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn intervened_count_rounding() {
        assert_eq!(intervened_count(0.33, 3), 1);
        assert_eq!(intervened_count(0.67, 3), 2);
        assert_eq!(intervened_count(1.0, 3), 3);
        assert_eq!(intervened_count(0.01, 3), 1);
        assert_eq!(intervened_count(0.0, 3), 0);
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = cfg(0);
        c.lb = 3.0;
        assert!(matches!(generate(&c), Err(BipError::ConfigInvalid(_))));
        let mut c = cfg(0);
        c.p_act = Dist::Fixed(1.5);
        assert!(generate(&c).is_err());
        let mut c = cfg(0);
        c.p_star_min = 4;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn example_truths() {
        assert_eq!(uq_example_truth(1, 3).unwrap().z_star.to_string(), "10");
        assert_eq!(uq_example_truth(2, 3).unwrap().z_star.to_string(), "11");
        assert_eq!(uq_example_truth(3, 2).unwrap().z_star.to_string(), "10");
        assert!(matches!(uq_example_truth(4, 3), Err(BipError::UnknownExample(4))));
        let gt = uq_example_truth(1, 3).unwrap();
        assert_eq!(gt.intervened_sets, vec![vec![], vec![0], vec![0, 1]]);
    }

    #[test]
    fn parent_conditional_is_structural() {
        let gt = generate_truth(&cfg(5)).unwrap();
        let pos = gt.outcome_position();
        let yn = &gt.env_params[2].nodes[pos];
        let fit = true_conditional_params(&gt, 2, &gt.z_star).unwrap();
        assert!((fit.variance - yn.variance).abs() < 1e-10);
        assert!((fit.intercept - yn.intercept).abs() < 1e-9);
        // coefficients are reported in feature-index order
        for (a, &var) in gt.permutation[..pos].iter().enumerate() {
            let idx = gt.z_star.indices().iter().position(|&c| c == var).unwrap();
            assert!((fit.coef[idx] - yn.coef[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_selector_gives_marginal() {
        let gt = uq_example_truth(1, 3).unwrap();
        let m = true_conditional_params(&gt, 1, &FeatureSelector::zeros(2)).unwrap();
        // y = x1 + 0.5 + noise with x1 ~ N(2, 0.01)
        assert!((m.intercept - 2.5).abs() < 1e-12);
        assert!((m.variance - 0.02).abs() < 1e-12);
    }

    #[test]
    fn sidecar_json_roundtrip() {
        let gt = generate_truth(&cfg(9)).unwrap();
        let json = serde_json::to_string(&gt).unwrap();
        let back: GroundTruth = serde_json::from_str(&json).unwrap();
        assert_eq!(gt, back);
        assert!(json.contains("\"z_star\""));
        assert!(json.contains("\"intervened_sets\""));
    }

    #[test]
    fn dist_json_forms() {
        let d: Dist = serde_json::from_str("0.5").unwrap();
        assert_eq!(d, Dist::Fixed(0.5));
        let d: Dist = serde_json::from_str("[0.1, 0.2]").unwrap();
        assert_eq!(d, Dist::Uniform([0.1, 0.2]));
        let d: Dist = serde_json::from_str("{\"choice\": [1, 2]}").unwrap();
        assert_eq!(d, Dist::Choice { choice: vec![1.0, 2.0] });
    }
}
