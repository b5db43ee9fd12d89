//! Dataset files.
//!
//! A single CSV with header `env,y,x1,...,xp`, or a directory holding one CSV
//! per environment (header `y,x1,...,xp`) whose filename stem is the
//! environment label.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use serde::{Deserialize, Serialize};

use crate::data::{validate_dataset, EnvBlock, FeatureSelector, MultiEnvDataset, Prior};
use crate::error::{BipError, Result};

fn parse_num<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse::<T>()
        .map_err(|e| BipError::Parse(format!("line {line}: bad {what} {s:?}: {e}")))
}

fn block_from_rows(env_id: i64, rows: Vec<(f64, Vec<f64>)>, p: usize) -> EnvBlock {
    let n = rows.len();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i].1[j]);
    let y = DVector::from_fn(n, |i, _| rows[i].0);
    EnvBlock::new(env_id, x, y)
}

/// Parses the single-file layout. Environments keep first-appearance order.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<MultiEnvDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "env" || &headers[1] != "y" {
        return Err(BipError::Parse(format!(
            "expected header env,y,x1,...,xp; got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let p = headers.len() - 2;
    let mut order: Vec<i64> = Vec::new();
    let mut groups: HashMap<i64, Vec<(f64, Vec<f64>)>> = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != p + 2 {
            return Err(BipError::ShapeMismatch(format!(
                "line {line}: expected {} fields, found {}",
                p + 2,
                rec.len()
            )));
        }
        let env: i64 = parse_num(&rec[0], line, "environment label")?;
        let y: f64 = parse_num(&rec[1], line, "outcome")?;
        let x = (0..p)
            .map(|j| parse_num::<f64>(&rec[j + 2], line, "feature"))
            .collect::<Result<Vec<_>>>()?;
        groups
            .entry(env)
            .or_insert_with(|| {
                order.push(env);
                Vec::new()
            })
            .push((y, x));
    }
    let blocks = order
        .into_iter()
        .map(|env| block_from_rows(env, groups.remove(&env).unwrap_or_default(), p))
        .collect();
    validate_dataset(blocks)
}

fn read_env_file(path: &Path, env_id: i64) -> Result<EnvBlock> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "y" {
        return Err(BipError::Parse(format!(
            "{}: expected header y,x1,...,xp",
            path.display()
        )));
    }
    let p = headers.len() - 1;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != p + 1 {
            return Err(BipError::ShapeMismatch(format!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                p + 1,
                rec.len()
            )));
        }
        let y = parse_num(&rec[0], line, "outcome")?;
        let x = (0..p)
            .map(|j| parse_num::<f64>(&rec[j + 1], line, "feature"))
            .collect::<Result<Vec<_>>>()?;
        rows.push((y, x));
    }
    Ok(block_from_rows(env_id, rows, p))
}

/// Parses the directory layout; environments are ordered by label.
pub fn read_dataset_dir(dir: &Path) -> Result<MultiEnvDataset> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| BipError::Parse(format!("bad file name {}", path.display())))?;
        let label: i64 = stem.parse().map_err(|_| {
            BipError::Parse(format!("file stem {stem:?} is not an integer environment label"))
        })?;
        files.push((label, path));
    }
    files.sort_by_key(|(label, _)| *label);
    let blocks = files
        .iter()
        .map(|(label, path)| read_env_file(path, *label))
        .collect::<Result<Vec<_>>>()?;
    validate_dataset(blocks)
}

/// Reads either layout depending on whether `path` is a directory.
pub fn read_dataset(path: &Path) -> Result<MultiEnvDataset> {
    if path.is_dir() {
        read_dataset_dir(path)
    } else {
        read_dataset_csv(fs::File::open(path)?)
    }
}

pub fn write_dataset_csv<W: Write>(data: &MultiEnvDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["env".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(data.p() + 2);
    for block in data.envs() {
        for i in 0..block.n() {
            rec.clear();
            rec.push(block.env_id.to_string());
            rec.push(block.y[i].to_string());
            rec.extend((0..data.p()).map(|j| block.x[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Textual prior choice: `uniform`, `max:K`, or `table:PATH` where PATH is
/// a CSV with header `z_bits,weight`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PriorSpec {
    Uniform,
    MaxCardinality(usize),
    Table(std::path::PathBuf),
}

impl std::str::FromStr for PriorSpec {
    type Err = BipError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "uniform" {
            return Ok(Self::Uniform);
        }
        if let Some(k) = s.strip_prefix("max:") {
            return k
                .parse()
                .map(Self::MaxCardinality)
                .map_err(|_| BipError::ConfigInvalid(format!("bad cardinality bound in {s:?}")));
        }
        if let Some(path) = s.strip_prefix("table:") {
            return Ok(Self::Table(path.into()));
        }
        Err(BipError::ConfigInvalid(format!(
            "prior must be uniform, max:K or table:PATH; got {s:?}"
        )))
    }
}

impl TryFrom<String> for PriorSpec {
    type Error = BipError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PriorSpec> for String {
    fn from(p: PriorSpec) -> String {
        match p {
            PriorSpec::Uniform => "uniform".into(),
            PriorSpec::MaxCardinality(k) => format!("max:{k}"),
            PriorSpec::Table(path) => format!("table:{}", path.display()),
        }
    }
}

impl PriorSpec {
    pub fn build(&self, p: usize) -> Result<Prior> {
        match self {
            Self::Uniform => Ok(Prior::uniform(p)),
            Self::MaxCardinality(k) => Ok(Prior::max_cardinality(p, *k)),
            Self::Table(path) => read_prior_table(fs::File::open(path)?, p),
        }
    }
}

/// Parses a `z_bits,weight` table.
pub fn read_prior_table<R: Read>(input: R, p: usize) -> Result<Prior> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "z_bits" || &headers[1] != "weight" {
        return Err(BipError::Parse("prior table header must be z_bits,weight".into()));
    }
    let mut entries = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let z = FeatureSelector::from_bitstring(&rec[0])?;
        let w: f64 = parse_num(&rec[1], line, "weight")?;
        entries.push((z, w));
    }
    Prior::table(p, entries)
}
