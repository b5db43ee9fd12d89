//! Domain types shared by every other module: feature selectors, priors over
//! selectors, and validated multi-environment datasets.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{BipError, Result};

/// Default refusal threshold for support enumeration: 2^25 candidates.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 25;

/// Binary inclusion vector over the `p` features.
///
/// Ordering is lexicographic with index 0 most significant, which is also the
/// normative enumeration order of every support.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureSelector {
    bits: Vec<bool>,
}

impl FeatureSelector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            bits: vec![false; p],
        }
    }

    pub fn ones(p: usize) -> Self {
        Self {
            bits: vec![true; p],
        }
    }

    pub fn from_indices(p: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; p];
        for &j in indices {
            bits[j] = true;
        }
        Self { bits }
    }

    /// Parses a string of `0`/`1` characters, index 0 leftmost.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(BipError::Parse(format!(
                    "invalid selector character {other:?} in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bits })
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// ‖z‖₀
    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn set(&mut self, j: usize, value: bool) {
        self.bits[j] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Indices of selected features in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True when every selected feature is also selected in `other`.
    pub fn is_subset_of(&self, other: &FeatureSelector) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Columns of `x` where the bit is set (x^z).
    pub fn select_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.select_columns(self.indices().iter())
    }

    /// Columns of `x` where the bit is clear (x^{-z}).
    pub fn complement_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.select_columns(self.complement().indices().iter())
    }

    /// Applies a feature relabelling: output bit `perm[j]` takes input bit `j`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut bits = vec![false; self.len()];
        for (j, &b) in self.bits.iter().enumerate() {
            bits[perm[j]] = b;
        }
        Self { bits }
    }
}

impl fmt::Display for FeatureSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl FromStr for FeatureSelector {
    type Err = BipError;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_bitstring(s)
    }
}

impl Serialize for FeatureSelector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for FeatureSelector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        FeatureSelector::from_bitstring(&s).map_err(serde::de::Error::custom)
    }
}

/// Log prior mass of a selector. Outside the support the mass is a dedicated
/// variant rather than an IEEE infinity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogMass {
    Finite(f64),
    OutsideSupport,
}

impl LogMass {
    pub fn finite(self) -> Option<f64> {
        match self {
            LogMass::Finite(v) => Some(v),
            LogMass::OutsideSupport => None,
        }
    }

    pub fn is_supported(self) -> bool {
        matches!(self, LogMass::Finite(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorKind {
    UniformFull,
    UniformMaxCardinality(usize),
    ExplicitTable(Vec<(FeatureSelector, f64)>),
}

/// Prior distribution over selectors in {0,1}^p.
#[derive(Clone, Debug)]
pub struct Prior {
    p: usize,
    kind: PriorKind,
    // log of the normalizing constant (support size for the uniform kinds,
    // total weight for explicit tables)
    log_norm: f64,
}

impl Prior {
    pub fn uniform(p: usize) -> Self {
        Self {
            p,
            kind: PriorKind::UniformFull,
            log_norm: p as f64 * std::f64::consts::LN_2,
        }
    }

    pub fn max_cardinality(p: usize, p_max: usize) -> Self {
        let k = p_max.min(p);
        Self {
            p,
            kind: PriorKind::UniformMaxCardinality(p_max),
            log_norm: ln_binomial_prefix_sum(p, k),
        }
    }

    /// Explicit weighted table. Weights must be positive and finite; entries
    /// are stored in enumeration order.
    pub fn table(p: usize, entries: Vec<(FeatureSelector, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(BipError::InvalidPrior("empty table".into()));
        }
        let mut entries = entries;
        for (z, w) in &entries {
            if z.len() != p {
                return Err(BipError::DimensionMismatch {
                    expected: p,
                    actual: z.len(),
                });
            }
            if !(w.is_finite() && *w > 0.0) {
                return Err(BipError::InvalidPrior(format!(
                    "weight {w} for {z} is not positive and finite"
                )));
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(BipError::InvalidPrior("duplicate selector in table".into()));
        }
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        Ok(Self {
            p,
            kind: PriorKind::ExplicitTable(entries),
            log_norm: total.ln(),
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> &PriorKind {
        &self.kind
    }

    /// Uniform over all of {0,1}^p, including a cardinality bound no smaller than p.
    pub fn is_uniform_full(&self) -> bool {
        match self.kind {
            PriorKind::UniformFull => true,
            PriorKind::UniformMaxCardinality(k) => k >= self.p,
            PriorKind::ExplicitTable(_) => false,
        }
    }

    pub fn log_mass(&self, z: &FeatureSelector) -> Result<LogMass> {
        if z.len() != self.p {
            return Err(BipError::DimensionMismatch {
                expected: self.p,
                actual: z.len(),
            });
        }
        Ok(match &self.kind {
            PriorKind::UniformFull => LogMass::Finite(-self.log_norm),
            PriorKind::UniformMaxCardinality(k) => {
                if z.cardinality() <= *k {
                    LogMass::Finite(-self.log_norm)
                } else {
                    LogMass::OutsideSupport
                }
            }
            PriorKind::ExplicitTable(entries) => {
                match entries.binary_search_by(|(s, _)| s.cmp(z)) {
                    Ok(i) => LogMass::Finite(entries[i].1.ln() - self.log_norm),
                    Err(_) => LogMass::OutsideSupport,
                }
            }
        })
    }

    /// Number of supported selectors, saturating at `u128::MAX`.
    pub fn support_size(&self) -> u128 {
        match &self.kind {
            PriorKind::UniformFull => binomial_prefix_sum(self.p, self.p),
            PriorKind::UniformMaxCardinality(k) => binomial_prefix_sum(self.p, (*k).min(self.p)),
            PriorKind::ExplicitTable(entries) => entries.len() as u128,
        }
    }

    /// Natural log of the support size, accurate even when the count overflows.
    pub fn ln_support_size(&self) -> f64 {
        match &self.kind {
            PriorKind::UniformFull | PriorKind::UniformMaxCardinality(_) => self.log_norm,
            PriorKind::ExplicitTable(entries) => (entries.len() as f64).ln(),
        }
    }

    /// Largest cardinality of any supported selector.
    pub fn max_support_cardinality(&self) -> usize {
        match &self.kind {
            PriorKind::UniformFull => self.p,
            PriorKind::UniformMaxCardinality(k) => (*k).min(self.p),
            PriorKind::ExplicitTable(entries) => {
                entries.iter().map(|(z, _)| z.cardinality()).max().unwrap_or(0)
            }
        }
    }

    /// Random-access view of the support, refusing supports above `cap`.
    pub fn support(&self, cap: u128) -> Result<Support> {
        let size = self.support_size();
        if size > cap {
            let shown = if size == u128::MAX {
                format!("more than {}", u128::MAX)
            } else {
                size.to_string()
            };
            return Err(BipError::SupportTooLarge { size: shown, cap });
        }
        Ok(match &self.kind {
            PriorKind::UniformFull => Support::bounded(self.p, self.p),
            PriorKind::UniformMaxCardinality(k) => Support::bounded(self.p, (*k).min(self.p)),
            PriorKind::ExplicitTable(entries) => Support::Table(
                entries.iter().map(|(z, _)| z.clone()).collect(),
            ),
        })
    }
}

/// Log-mass of `z` under `prior`.
pub fn prior_log_mass(prior: &Prior, z: &FeatureSelector) -> Result<LogMass> {
    prior.log_mass(z)
}

/// Supported selectors of `prior` in lexicographic order, with the default cap.
pub fn enumerate_support(prior: &Prior, p: usize) -> Result<impl Iterator<Item = FeatureSelector>> {
    if prior.p() != p {
        return Err(BipError::DimensionMismatch {
            expected: prior.p(),
            actual: p,
        });
    }
    let support = prior.support(DEFAULT_ENUMERATION_CAP)?;
    Ok(support.into_iter())
}

/// Enumerable prior support with random access by rank, so that disjoint
/// index ranges can be consumed by separate workers.
#[derive(Clone, Debug)]
pub enum Support {
    /// All selectors of length `p` with cardinality at most `max_card`.
    Bounded {
        p: usize,
        max_card: usize,
        // completions[r][w]: number of length-r suffixes with weight <= w
        completions: Vec<Vec<u128>>,
    },
    Table(Vec<FeatureSelector>),
}

impl Support {
    fn bounded(p: usize, max_card: usize) -> Self {
        let mut completions = vec![vec![0u128; max_card + 1]; p + 1];
        for w in 0..=max_card {
            completions[0][w] = 1;
        }
        for r in 1..=p {
            completions[r][0] = 1;
            for w in 1..=max_card {
                completions[r][w] =
                    completions[r - 1][w].saturating_add(completions[r - 1][w - 1]);
            }
        }
        Support::Bounded {
            p,
            max_card,
            completions,
        }
    }

    pub fn len(&self) -> u128 {
        match self {
            Support::Bounded {
                p,
                max_card,
                completions,
            } => completions[*p][*max_card],
            Support::Table(t) => t.len() as u128,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Selector at lexicographic rank `index`.
    pub fn get(&self, index: u128) -> FeatureSelector {
        match self {
            Support::Bounded {
                p,
                max_card,
                completions,
            } => {
                let mut bits = vec![false; *p];
                let mut rest = index;
                let mut budget = *max_card;
                for (j, bit) in bits.iter_mut().enumerate() {
                    if budget == 0 {
                        break;
                    }
                    let with_zero = completions[*p - j - 1][budget];
                    if rest >= with_zero {
                        rest -= with_zero;
                        *bit = true;
                        budget -= 1;
                    }
                }
                FeatureSelector::new(bits)
            }
            Support::Table(t) => t[index as usize].clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureSelector> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<FeatureSelector> {
        self.iter().collect()
    }
}

impl IntoIterator for Support {
    type Item = FeatureSelector;
    type IntoIter = Box<dyn Iterator<Item = FeatureSelector>>;

    fn into_iter(self) -> Self::IntoIter {
        let len = self.len();
        Box::new((0..len).map(move |i| self.get(i)))
    }
}

fn binomial_prefix_sum(p: usize, k: usize) -> u128 {
    let mut total: u128 = 0;
    let mut c: u128 = 1;
    let k = k.min(p);
    for i in 0..=k {
        total = total.saturating_add(c);
        if i == k {
            break;
        }
        // C(p, i+1) = C(p, i) * (p - i) / (i + 1); exact in integers
        c = match c.checked_mul((p - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    total
}

/// ln Σ_{i ≤ k} C(p, i), computed in log space.
fn ln_binomial_prefix_sum(p: usize, k: usize) -> f64 {
    let mut terms = Vec::with_capacity(k + 1);
    let mut ln_c = 0.0;
    for i in 0..=k.min(p) {
        terms.push(ln_c);
        if i < p {
            ln_c += ((p - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    crate::numeric::log_sum_exp(&terms)
}

/// Observations from one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvBlock {
    pub env_id: i64,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl EnvBlock {
    pub fn new(env_id: i64, x: DMatrix<f64>, y: DVector<f64>) -> Self {
        Self { env_id, x, y }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Feature/outcome observations grouped by environment. Environments are
/// indexed 0..E-1 in first-appearance order; the original labels are kept in
/// each block's `env_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEnvDataset {
    envs: Vec<EnvBlock>,
    p: usize,
}

impl MultiEnvDataset {
    pub fn new(envs: Vec<EnvBlock>) -> Result<Self> {
        validate_dataset(envs)
    }

    pub fn envs(&self) -> &[EnvBlock] {
        &self.envs
    }

    pub fn env(&self, e: usize) -> &EnvBlock {
        &self.envs[e]
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn total_rows(&self) -> usize {
        self.envs.iter().map(EnvBlock::n).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.envs.iter().map(EnvBlock::n).collect()
    }

    /// Keeps only the listed environments (by internal index), in the given order.
    pub fn subset(&self, envs: &[usize]) -> Result<Self> {
        validate_dataset(envs.iter().map(|&e| self.envs[e].clone()).collect())
    }

    /// Reorders feature columns: new column `perm[j]` holds old column `j`.
    pub fn permute_features(&self, perm: &[usize]) -> Result<Self> {
        let mut inverse = vec![0; perm.len()];
        for (j, &k) in perm.iter().enumerate() {
            inverse[k] = j;
        }
        validate_dataset(
            self.envs
                .iter()
                .map(|b| EnvBlock::new(b.env_id, b.x.select_columns(inverse.iter()), b.y.clone()))
                .collect(),
        )
    }

    pub fn into_envs(self) -> Vec<EnvBlock> {
        self.envs
    }
}

/// Checks every dataset invariant and returns the validated dataset.
pub fn validate_dataset(envs: Vec<EnvBlock>) -> Result<MultiEnvDataset> {
    let first = envs.first().ok_or(BipError::NoEnvironments)?;
    let p = first.x.ncols();
    if p == 0 {
        return Err(BipError::ShapeMismatch("dataset has zero features".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for block in &envs {
        if !seen.insert(block.env_id) {
            return Err(BipError::ShapeMismatch(format!(
                "environment label {} appears twice",
                block.env_id
            )));
        }
        if block.x.ncols() != p {
            return Err(BipError::ShapeMismatch(format!(
                "environment {} has {} features, expected {p}",
                block.env_id,
                block.x.ncols()
            )));
        }
        if block.x.nrows() != block.y.len() {
            return Err(BipError::ShapeMismatch(format!(
                "environment {} has {} feature rows but {} outcomes",
                block.env_id,
                block.x.nrows(),
                block.y.len()
            )));
        }
        if block.y.is_empty() {
            return Err(BipError::EmptyEnvironment(block.env_id));
        }
        for i in 0..block.n() {
            if !block.y[i].is_finite() {
                return Err(BipError::NonFiniteValue {
                    env: block.env_id,
                    row: i,
                    column: "y".into(),
                });
            }
            for j in 0..p {
                if !block.x[(i, j)].is_finite() {
                    return Err(BipError::NonFiniteValue {
                        env: block.env_id,
                        row: i,
                        column: format!("x{}", j + 1),
                    });
                }
            }
        }
    }
    Ok(MultiEnvDataset { envs, p })
}
