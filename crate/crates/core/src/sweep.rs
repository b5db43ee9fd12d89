//! Grid runs over (n, E, strength) on synthetic data, aggregated per method.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{oracle_regression, pooled_regression};
use crate::data::FeatureSelector;
use crate::error::{BipError, Result};
use crate::exact::{exact_posterior, posterior_mode};
use crate::io::PriorSpec;
use crate::metrics::score;
use crate::rng::{derive_seed, label};
use crate::synthetic::{generate, preset, SynthConfig};
use crate::vi::{run_vi, variational_mode, ViConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Vi,
    OracleRegression,
    PooledRegression,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Vi => "vi",
            Method::OracleRegression => "oracle-regression",
            Method::PooledRegression => "pooled-regression",
        }
    }
}

fn default_threshold() -> f64 {
    0.5
}

fn default_alpha() -> f64 {
    0.05
}

fn default_prior() -> PriorSpec {
    PriorSpec::Uniform
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Name of a shipped generator preset; alternatively give `synth`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Overrides the generator's feature count.
    #[serde(default)]
    pub p: Option<usize>,
    pub n: Vec<usize>,
    pub envs: Vec<usize>,
    pub strength: Vec<f64>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    #[serde(default = "default_prior")]
    pub prior: PriorSpec,
    #[serde(default)]
    pub vi: ViConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl SweepConfig {
    pub fn base(&self) -> Result<SynthConfig> {
        let mut base = match (&self.preset, &self.synth) {
            (Some(name), None) => preset(name)
                .ok_or_else(|| BipError::ConfigInvalid(format!("unknown preset {name:?}")))?,
            (None, Some(s)) => s.clone(),
            _ => {
                return Err(BipError::ConfigInvalid(
                    "give exactly one of preset and synth".into(),
                ))
            }
        };
        if let Some(p) = self.p {
            base.p = p;
            base.p_star_max = base.p_star_max.min(p);
            base.p_star_min = base.p_star_min.min(base.p_star_max);
        }
        Ok(base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BipError::ConfigInvalid(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.n.is_empty() || self.envs.is_empty() || self.strength.is_empty() {
            return bad("n, envs and strength must each list at least one value");
        }
        if self.replicates == 0 {
            return bad("replicates must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        let base = self.base()?;
        for &n in &self.n {
            for &e in &self.envs {
                for &s in &self.strength {
                    SynthConfig { n, envs: e, ..base.clone() }.with_strength(s).validate()?;
                }
            }
        }
        self.vi.validate(base.p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: usize,
    pub n: usize,
    #[serde(rename = "E")]
    pub envs: usize,
    pub strength: f64,
    pub method: String,
    /// Over non-failed replicates; empty when all failed.
    pub exact_rate: Option<f64>,
    pub coverage: Option<f64>,
    pub failed: usize,
}

fn estimate(
    method: Method,
    cfg: &SweepConfig,
    data: &crate::data::MultiEnvDataset,
    z_star: &FeatureSelector,
    vi_seed: u64,
) -> Result<Option<FeatureSelector>> {
    match method {
        Method::Exact => {
            let prior = cfg.prior.build(data.p())?;
            Ok(posterior_mode(&exact_posterior(data, &prior)?))
        }
        Method::Vi => {
            let prior = cfg.prior.build(data.p())?;
            let vc = ViConfig { seed: vi_seed, ..cfg.vi.clone() };
            let st = run_vi(data, &prior, &vc)?;
            Ok(Some(variational_mode(&st.best_phi, cfg.threshold)))
        }
        Method::OracleRegression => oracle_regression(data, z_star, cfg.alpha),
        Method::PooledRegression => pooled_regression(data, cfg.alpha),
    }
}

/// Runs the grid. Replicate seeds are split from `seed` by grid coordinates,
/// so the output does not depend on scheduling.
pub fn run_sweep(cfg: &SweepConfig, seed: u64) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let base = cfg.base()?;
    let mut cells = Vec::new();
    for &n in &cfg.n {
        for &e in &cfg.envs {
            for (si, &s) in cfg.strength.iter().enumerate() {
                cells.push((n, e, si, s));
            }
        }
    }
    let mut rows = Vec::new();
    for &(n, e, si, s) in &cells {
        // per replicate: one outcome per method, None on failure
        let outcomes: Vec<Vec<Option<(bool, bool)>>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let rs = derive_seed(seed, &[label::REPLICATE, n as u64, e as u64, si as u64, r as u64]);
                let sc = SynthConfig { n, envs: e, seed: rs, ..base.clone() }.with_strength(s);
                let Ok((data, gt)) = generate(&sc) else {
                    return vec![None; cfg.methods.len()];
                };
                cfg.methods
                    .iter()
                    .map(|&m| match estimate(m, cfg, &data, &gt.z_star, derive_seed(rs, &[label::GRADIENT])) {
                        Ok(Some(z)) => score(&z, &gt.z_star).ok(),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        for (mi, m) in cfg.methods.iter().enumerate() {
            let ok: Vec<(bool, bool)> = outcomes.iter().filter_map(|o| o[mi]).collect();
            let k = ok.len() as f64;
            let rate = |f: fn(&(bool, bool)) -> bool| {
                (!ok.is_empty()).then(|| ok.iter().filter(|x| f(x)).count() as f64 / k)
            };
            rows.push(SweepRow {
                p: base.p,
                n,
                envs: e,
                strength: s,
                method: m.name().to_string(),
                exact_rate: rate(|x| x.0),
                coverage: rate(|x| x.1),
                failed: cfg.replicates - ok.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
