//! Exact posterior over invariant feature selectors by enumerating the prior
//! support and scoring each candidate with its pooled-versus-local
//! likelihood ratio.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSelector, LogMass, MultiEnvDataset, Prior, DEFAULT_ENUMERATION_CAP};
use crate::error::{BipError, Result};
use crate::mle::DatasetMoments;
use crate::numeric::log_sum_exp;

/// log Λ̂(z) together with its per-environment terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatioReport {
    pub z: FeatureSelector,
    /// Σ_e Σ_i [log ĝ(y_ei | x_ei^z) − log p̂_e(y_ei | x_ei^z)]
    pub log_ratio: f64,
    pub per_env_log_ratio: Vec<f64>,
    pub env_sizes: Vec<usize>,
    /// Environments (by index) whose local design was rank deficient.
    pub degenerate_envs: Vec<usize>,
    pub pooled_degenerate: bool,
}

/// Likelihood ratio for `z` using precomputed moments.
pub fn likelihood_ratio_from_moments(
    moments: &DatasetMoments,
    z: &FeatureSelector,
) -> Result<LikelihoodRatioReport> {
    let pooled = moments.fit_pooled(z)?;
    let local = moments.fit_local(z)?;
    let per_env: Vec<f64> = local
        .iter()
        .enumerate()
        .map(|(e, fit)| {
            let stats = moments.local(e);
            stats.log_likelihood(&pooled.model) - stats.log_likelihood(&fit.model)
        })
        .collect();
    Ok(LikelihoodRatioReport {
        z: z.clone(),
        log_ratio: per_env.iter().sum(),
        env_sizes: (0..moments.num_envs()).map(|e| moments.local(e).n()).collect(),
        degenerate_envs: local
            .iter()
            .enumerate()
            .filter_map(|(e, f)| f.degenerate.then_some(e))
            .collect(),
        pooled_degenerate: pooled.degenerate,
        per_env_log_ratio: per_env,
    })
}

/// log Λ̂(z) for one candidate selector.
pub fn log_likelihood_ratio(
    data: &MultiEnvDataset,
    z: &FeatureSelector,
) -> Result<LikelihoodRatioReport> {
    likelihood_ratio_from_moments(&DatasetMoments::new(data), z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub z: FeatureSelector,
    pub log_prior: f64,
    pub log_ratio: f64,
    pub log_unnormalized: f64,
    pub posterior: f64,
}

/// Normalized exact posterior, one entry per supported selector in
/// enumeration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub p: usize,
    pub entries: Vec<PosteriorEntry>,
    pub log_normalizer: f64,
}

impl PosteriorTable {
    /// Builds a table from unnormalized log scores.
    pub fn from_log_scores(p: usize, scored: Vec<(FeatureSelector, f64, f64)>) -> Self {
        let lu: Vec<f64> = scored.iter().map(|(_, lp, lr)| lp + lr).collect();
        let log_normalizer = log_sum_exp(&lu);
        let entries = scored
            .into_iter()
            .zip(lu)
            .map(|((z, log_prior, log_ratio), log_unnormalized)| PosteriorEntry {
                z,
                log_prior,
                log_ratio,
                log_unnormalized,
                posterior: (log_unnormalized - log_normalizer).exp(),
            })
            .collect();
        Self {
            p,
            entries,
            log_normalizer,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn posterior_of(&self, z: &FeatureSelector) -> Option<f64> {
        self.entries
            .binary_search_by(|e| e.z.cmp(z))
            .ok()
            .map(|i| self.entries[i].posterior)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["z_bits", "log_unnormalized", "posterior"])?;
        for e in &self.entries {
            w.write_record([
                e.z.to_bitstring(),
                e.log_unnormalized.to_string(),
                e.posterior.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `z_bits,log_unnormalized,posterior` export back.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(BipError::Parse(format!("expected 3 columns, got {}", rec.len())));
            }
            let z = FeatureSelector::from_bitstring(&rec[0])?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| BipError::Parse(format!("{s:?}: {e}")))
            };
            let lu = num(&rec[1])?;
            entries.push(PosteriorEntry {
                z,
                log_prior: f64::NAN,
                log_ratio: f64::NAN,
                log_unnormalized: lu,
                posterior: num(&rec[2])?,
            });
        }
        let p = entries.first().map(|e| e.z.len()).unwrap_or(0);
        let lu: Vec<f64> = entries.iter().map(|e| e.log_unnormalized).collect();
        Ok(Self {
            p,
            log_normalizer: log_sum_exp(&lu),
            entries,
        })
    }
}

/// Exact posterior with the default enumeration cap.
pub fn exact_posterior(data: &MultiEnvDataset, prior: &Prior) -> Result<PosteriorTable> {
    exact_posterior_with_cap(data, prior, DEFAULT_ENUMERATION_CAP)
}

/// Exact posterior, refusing supports larger than `cap`. Candidates are
/// scored on the current rayon pool; the result does not depend on its size.
pub fn exact_posterior_with_cap(
    data: &MultiEnvDataset,
    prior: &Prior,
    cap: u128,
) -> Result<PosteriorTable> {
    if prior.p() != data.p() {
        return Err(BipError::DimensionMismatch {
            expected: data.p(),
            actual: prior.p(),
        });
    }
    let support = prior.support(cap)?;
    let moments = DatasetMoments::new(data);
    let len = support.len() as u64;
    let scored = (0..len)
        .into_par_iter()
        .map(|i| {
            let z = support.get(i as u128);
            let log_prior = match prior.log_mass(&z)? {
                LogMass::Finite(v) => v,
                LogMass::OutsideSupport => unreachable!("support enumerates supported selectors"),
            };
            let report = likelihood_ratio_from_moments(&moments, &z)?;
            Ok((z, log_prior, report.log_ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorTable::from_log_scores(data.p(), scored))
}

/// Highest-posterior selector; ties go to the earliest in enumeration order.
pub fn posterior_mode(table: &PosteriorTable) -> Option<FeatureSelector> {
    let mut best: Option<&PosteriorEntry> = None;
    for e in &table.entries {
        if best.is_none_or(|b| e.posterior > b.posterior) {
            best = Some(e);
        }
    }
    best.map(|e| e.z.clone())
}

/// Posterior probability that each feature is included.
pub fn marginal_inclusion(table: &PosteriorTable) -> Vec<f64> {
    let mut out = vec![0.0; table.p];
    for e in &table.entries {
        for j in e.z.indices() {
            out[j] += e.posterior;
        }
    }
    out
}
