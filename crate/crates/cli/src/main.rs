//! `bip`: simulate multi-environment data, fit invariant-feature posteriors
//! and score them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use bip_core::exact::{exact_posterior_with_cap, marginal_inclusion, posterior_mode, PosteriorTable};
use bip_core::io::{read_dataset, write_dataset_csv, PriorSpec};
use bip_core::metrics::{mu_min_and_r, score, tv_to_dirac, Discrepancy, DEFAULT_MU_DRAWS};
use bip_core::synthetic::{generate, preset, uq_example, GroundTruth, SynthConfig, PRESETS};
use bip_core::sweep::{run_sweep, write_sweep_csv, SweepConfig};
use bip_core::vi::{run_vi_logged, variational_mode, ViConfig};
use bip_core::{BipError, FeatureSelector, DEFAULT_ENUMERATION_CAP};

const CONFIG_VERSION: u64 = 1;
const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Parser)]
#[command(name = "bip", version, about = "Bayesian invariant prediction")]
struct Cli {
    /// Master seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and its ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Exact posterior by enumerating the prior support.
    FitExact(FitExactArgs),
    /// Variational posterior.
    FitVi(FitViArgs),
    /// Grid of synthetic runs aggregated per method.
    Sweep(SweepArgs),
    /// Heterogeneity diagnostics of a ground truth.
    Theory(TheoryArgs),
    /// Score selections against a ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON config with `version: 1`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name (appendix-c1-p3, appendix-c3-p10, appendix-c3-p450, uq-example1..3).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
}

#[derive(Args)]
struct FitExactArgs {
    /// Dataset CSV or directory of per-environment CSVs.
    dataset: PathBuf,
    #[arg(long, default_value = "uniform")]
    prior: String,
    /// Largest support size to enumerate.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: u128,
}

#[derive(Args)]
struct FitViArgs {
    dataset: PathBuf,
    /// JSON config with `version: 1` and optimizer settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "uniform")]
    prior: String,
    /// Overrides the number of iterations.
    #[arg(long = "iterations")]
    iterations: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Ground-truth JSON written by `simulate`.
    truth: PathBuf,
    #[arg(long, default_value = "uniform")]
    prior: String,
    /// Comma-separated environment indices (default: all).
    #[arg(long, value_delimiter = ',')]
    envs: Option<Vec<usize>>,
    /// Monte Carlo draws per environment for the mixture functional.
    #[arg(long, default_value_t = DEFAULT_MU_DRAWS)]
    samples: usize,
    #[arg(long, value_parser = parse_discrepancy, default_value = "best-fit")]
    discrepancy: Discrepancy,
    /// Posterior CSV to report the TV distance to the truth.
    #[arg(long)]
    posterior: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Selections JSON from `fit-vi`, a posterior CSV, or a bitstring.
    selection: String,
    #[arg(long)]
    truth: PathBuf,
}

fn parse_discrepancy(s: &str) -> Result<Discrepancy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("expected best-fit or mixture, got {s:?}"))
}

struct Failure {
    code: u8,
    message: String,
}

impl From<BipError> for Failure {
    fn from(e: BipError) -> Self {
        let code = match &e {
            BipError::Io(_) => 3,
            BipError::Csv(c) if c.is_io_error() => 3,
            BipError::SupportTooLarge { .. } => 4,
            BipError::NonFiniteGradient { .. }
            | BipError::SingularCovariance(_)
            | BipError::NonPositiveVariance(_) => 5,
            _ => 2,
        };
        let mut message = e.to_string();
        if code == 4 {
            message.push_str("; use fit-vi for large supports");
        }
        Failure { code, message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        BipError::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        BipError::Json(e).into()
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Reads a versioned JSON config into `T`, rejecting unknown keys.
fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| config_error(format!("{}: config must be a JSON object", path.display())))?;
    match obj.remove("version") {
        None => return Err(config_error(format!("{}: missing field `version`", path.display()))),
        Some(v) if v.as_u64() == Some(CONFIG_VERSION) => {}
        Some(v) => {
            return Err(config_error(format!(
                "{}: unsupported version {v}, expected {CONFIG_VERSION}",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<bip_core::MultiEnvDataset> {
    if !path.exists() {
        return Err(Failure {
            code: 3,
            message: format!("{}: no such file or directory", path.display()),
        });
    }
    Ok(read_dataset(path)?)
}

fn parse_prior(spec: &str, p: usize) -> CliResult<bip_core::Prior> {
    Ok(spec.parse::<PriorSpec>()?.build(p)?)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    synth: Option<SynthConfig>,
    #[serde(default)]
    envs: Option<usize>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    p: Option<usize>,
    #[serde(default)]
    strength: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> CliResult<()> {
    let cfg: SimulateConfig = match &args.config {
        Some(path) => load_config(path)?,
        None => SimulateConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let envs = args.envs.or(cfg.envs);
    let n = args.n.or(cfg.n);
    let strength = args.strength.or(cfg.strength);
    let p = args.p.or(cfg.p);
    let name = args.preset.clone().or(cfg.preset.clone());

    let (data, gt) = match (name.as_deref(), cfg.synth) {
        (Some(name), _) if name.starts_with("uq-example") => {
            let id: u32 = name["uq-example".len()..]
                .parse()
                .map_err(|_| config_error(format!("unknown preset {name:?}")))?;
            uq_example(id, envs.unwrap_or(3), n.unwrap_or(200), seed)?
        }
        (Some(name), None) => {
            let mut base = preset(name).ok_or_else(|| {
                config_error(format!(
                    "unknown preset {name:?}; known: {}, uq-example1, uq-example2, uq-example3",
                    PRESETS.join(", ")
                ))
            })?;
            if let Some(p) = p {
                base.p = p;
                base.p_star_max = base.p_star_max.min(p);
                base.p_star_min = base.p_star_min.min(base.p_star_max);
            }
            base.envs = envs.unwrap_or(base.envs);
            base.n = n.unwrap_or(base.n);
            base.seed = seed;
            if let Some(s) = strength {
                base = base.with_strength(s);
            }
            generate(&base)?
        }
        (None, Some(mut synth)) => {
            synth.envs = envs.unwrap_or(synth.envs);
            synth.n = n.unwrap_or(synth.n);
            synth.p = p.unwrap_or(synth.p);
            synth.seed = cli.seed.unwrap_or(synth.seed);
            if let Some(s) = strength {
                synth = synth.with_strength(s);
            }
            generate(&synth)?
        }
        (Some(_), Some(_)) => return Err(config_error("give either a preset or synth, not both")),
        (None, None) => return Err(config_error("missing field `preset` (or `synth`)")),
    };

    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let mut f = create_file(&dir.join("dataset.csv"))?;
    write_dataset_csv(&data, &mut f)?;
    f.flush()?;
    write_json(&dir.join("truth.json"), &gt)?;

    let fractions: Vec<String> = gt
        .intervened_sets
        .iter()
        .map(|s| format!("{:.2}", s.len() as f64 / gt.p as f64))
        .collect();
    println!(
        "p={} E={} n={} |z*|={} z*={} intervened fractions=[{}]",
        gt.p,
        data.num_envs(),
        data.env(0).n(),
        gt.z_star.cardinality(),
        gt.z_star,
        fractions.join(", ")
    );
    Ok(())
}

fn cmd_fit_exact(cli: &Cli, args: &FitExactArgs) -> CliResult<()> {
    let data = load_dataset(&args.dataset)?;
    let prior = parse_prior(&args.prior, data.p())?;
    let table = exact_posterior_with_cap(&data, &prior, args.cap)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("posterior.csv"));
    let mut f = create_file(&out)?;
    table.write_csv(&mut f)?;
    f.flush()?;
    if let Some(mode) = posterior_mode(&table) {
        let mass = table.posterior_of(&mode).unwrap_or(0.0);
        println!("mode {mode} posterior {mass:.6}");
    }
    let marg: Vec<String> = marginal_inclusion(&table).iter().map(|m| format!("{m:.4}")).collect();
    println!("marginal inclusion [{}]", marg.join(", "));
    Ok(())
}

#[derive(Serialize)]
struct PhiFile<'a> {
    phi: &'a [f64],
    best_phi: &'a [f64],
    best_elbo: f64,
    step: usize,
}

fn cmd_fit_vi(cli: &Cli, args: &FitViArgs) -> CliResult<()> {
    let data = load_dataset(&args.dataset)?;
    let prior = parse_prior(&args.prior, data.p())?;
    let mut cfg: ViConfig = match &args.config {
        Some(path) => load_config(path)?,
        None => ViConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.iterations {
        cfg.iterations = t;
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let run = match run_vi_logged(&data, &prior, &cfg) {
        Ok(run) => run,
        Err(BipError::NonFiniteGradient { step, last_good_phi }) => {
            write_json(&dir.join("last_good_phi.json"), &last_good_phi)?;
            return Err(BipError::NonFiniteGradient { step, last_good_phi }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut log = create_file(&dir.join("log.jsonl"))?;
    for rec in &run.log {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    let st = &run.state;
    write_json(
        &dir.join("phi.json"),
        &PhiFile {
            phi: &st.phi,
            best_phi: &st.best_phi,
            best_elbo: st.best_elbo,
            step: st.step,
        },
    )?;
    let selections: BTreeMap<String, FeatureSelector> = THRESHOLDS
        .iter()
        .map(|&t| (format!("{t:.1}"), variational_mode(&st.best_phi, t)))
        .collect();
    write_json(&dir.join("selections.json"), &selections)?;
    println!("best elbo {:.6} selection@0.5 {}", st.best_elbo, selections["0.5"]);
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> CliResult<()> {
    let cfg: SweepConfig = load_config(&args.config)?;
    let rows = run_sweep(&cfg, cli.seed.unwrap_or(0))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let mut f = create_file(&out)?;
    write_sweep_csv(&rows, &mut f)?;
    f.flush()?;
    println!("{} rows written to {}", rows.len(), out.display());
    Ok(())
}

fn read_truth(path: &Path) -> CliResult<GroundTruth> {
    let gt: GroundTruth = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    gt.validate()?;
    Ok(gt)
}

fn cmd_theory(cli: &Cli, args: &TheoryArgs) -> CliResult<()> {
    let gt = read_truth(&args.truth)?;
    let prior = parse_prior(&args.prior, gt.p)?;
    let envs = args
        .envs
        .clone()
        .unwrap_or_else(|| (0..gt.num_envs()).collect());
    let mut diag = mu_min_and_r(
        &gt,
        &prior,
        &envs,
        args.discrepancy,
        args.samples,
        cli.seed.unwrap_or(0),
    )?;
    if let Some(path) = &args.posterior {
        let table = PosteriorTable::read_csv(fs::File::open(path)?)?;
        diag.tv_to_truth = Some(tv_to_dirac(&table, &gt.z_star)?);
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("theory.json"));
    write_json(&out, &diag)?;
    println!("mu_min {:.6} (se {:.2e}) R {}", diag.mu_min, diag.mu_min_se, diag.r);
    Ok(())
}

#[derive(Serialize)]
struct Scored {
    z_hat: FeatureSelector,
    exact: bool,
    covered: bool,
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> CliResult<()> {
    let gt = read_truth(&args.truth)?;
    let path = Path::new(&args.selection);
    let selections: BTreeMap<String, FeatureSelector> = if path.is_file() {
        let text = fs::read_to_string(path)?;
        if let Ok(map) = serde_json::from_str::<BTreeMap<String, FeatureSelector>>(&text) {
            map
        } else if let Ok(z) = serde_json::from_str::<FeatureSelector>(&text) {
            BTreeMap::from([("selection".to_string(), z)])
        } else {
            let table = PosteriorTable::read_csv(text.as_bytes())?;
            let mode = posterior_mode(&table).ok_or_else(|| config_error("empty posterior table"))?;
            BTreeMap::from([("mode".to_string(), mode)])
        }
    } else {
        BTreeMap::from([("selection".to_string(), args.selection.parse::<FeatureSelector>()?)])
    };
    let mut report = BTreeMap::new();
    for (k, z) in selections {
        let (exact, covered) = score(&z, &gt.z_star)?;
        println!("{k}: {z} exact={exact} covered={covered}");
        report.insert(k, Scored { z_hat: z, exact, covered });
    }
    if let Some(out) = &cli.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::FitExact(a) => cmd_fit_exact(cli, a),
        Command::FitVi(a) => cmd_fit_vi(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Theory(a) => cmd_theory(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(5);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
