//! Command-line front end. Every command resolves its settings into a
//! serializable [`Command`], writes its outputs into one directory and
//! records a manifest from which the run can be replayed.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{DesignSet, Variant};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, summarize, GibbsConfig, Init};
use crate::ifgls::{ifgls_fit, IfglsConfig, VarianceStep};
use crate::mlik::{chib_log_marglik, posterior_model_probs, ChibConfig};
use crate::model::AttTable;
use crate::panel::{load_panel, split_training, validate, write_panel, PanelDataset, PanelSchema};
use crate::priors::{default_prior, student_t_prior, training_prior, PriorSpec, TrainingConfig};
use crate::rng::derive_seed;
use crate::sim::{
    application_dgp, generate_dataset, run_replications, small_sample_dgp, table1_dgp, table1_prept_dgp,
    DgpConfig, Estimator, SimConfig,
};

pub const OUT_DIR_ENV: &str = "STAGDID_OUT_DIR";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "stagdid", version, about = "Staggered difference-in-differences: Gibbs sampling, marginal likelihood and IFGLS")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Posterior draws and ATT summaries.
    Fit(FitArgs),
    /// Iterated feasible GLS with delta-method intervals.
    Ifgls(IfglsArgs),
    /// Marginal likelihoods of the full and pre-trend-restricted models.
    Compare(CompareArgs),
    /// Replication study on a built-in data-generating process.
    Simulate(SimulateArgs),
    /// Stratified training/estimation split.
    Split(SplitArgs),
    /// Writes a synthetic panel from a built-in data-generating process.
    Generate(GenerateArgs),
    /// Re-runs the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    Default,
    Trained,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Full,
    PrePt,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::PrePt => Variant::PrePt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// Long-format panel CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "unit")]
    pub unit_col: String,
    #[arg(long, default_value = "period")]
    pub period_col: String,
    #[arg(long, default_value = "outcome")]
    pub outcome_col: String,
    #[arg(long, default_value = "first_treat")]
    pub first_treat_col: String,
    /// Covariate columns; default: every column starting with `cov_`.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Optional 0/1 treatment column checked against first_treat.
    #[arg(long)]
    pub treated_col: Option<String>,
    /// Cohorts at or below this size draw a warning.
    #[arg(long, default_value_t = crate::panel::DEFAULT_MIN_COHORT)]
    pub min_cohort: usize,
}

impl InputArgs {
    fn schema(&self) -> PanelSchema {
        PanelSchema {
            unit: self.unit_col.clone(),
            period: self.period_col.clone(),
            outcome: self.outcome_col.clone(),
            first_treat: self.first_treat_col.clone(),
            covariates: self.covariates.clone(),
            treated: self.treated_col.clone(),
            ..PanelSchema::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ChainArgs {
    /// Retained draws.
    #[arg(long, default_value_t = 2000)]
    pub draws: usize,
    #[arg(long, default_value_t = 500)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ChainArgs {
    fn gibbs(&self, variant: Variant) -> GibbsConfig {
        GibbsConfig {
            draws: self.draws,
            burnin: self.burnin,
            thin: self.thin,
            seed: self.seed,
            variant,
            init: Init::PriorMean,
            fixed: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PriorArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub prior_regime: RegimeArg,
    /// Student-t degrees of freedom.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Student-t scale hyperparameter.
    #[arg(long, default_value_t = 1.0)]
    pub xi: f64,
    /// Prior JSON file; overrides the regime.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Share of every cohort used to train the prior.
    #[arg(long, default_value_t = 0.15)]
    pub training_fraction: f64,
    /// Factor applied to training posterior variances.
    #[arg(long, default_value_t = 10.0)]
    pub inflation: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OutArgs {
    #[arg(long, env = OUT_DIR_ENV, default_value = "stagdid-out")]
    pub out: PathBuf,
    /// Also write interval endpoints per (cohort, period, kind) for plotting.
    #[arg(long)]
    pub emit_plot_data: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IfglsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    /// Convergence tolerance; `inf` gives one feasible-GLS pass.
    #[arg(long, default_value_t = 1e-8)]
    #[serde(with = "extended_f64")]
    pub tol: f64,
    /// Variance components from the BLUPs alone instead of the EM update.
    #[arg(long)]
    pub plugin_variances: bool,
    /// Plain fixed-point iteration without squared extrapolation.
    #[arg(long)]
    pub no_accelerate: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

/// JSON has no infinity; store non-finite values as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Prior probabilities of (full, pre-pt); equal when omitted.
    #[arg(long, value_delimiter = ',')]
    pub prior_model_probs: Option<Vec<f64>>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpArg {
    /// Pre-treatment parallel trends fail.
    Table1,
    /// Pre-treatment parallel trends hold.
    Table1Prept,
    /// Equal small groups.
    Small,
    /// Cohort sizes 309/20/40/131.
    Application,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    Bayes,
    BayesPrept,
    BayesMl,
    BayesT,
    Ifgls,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DgpArgs {
    #[arg(long, value_enum, default_value = "table1")]
    pub dgp: DgpArg,
    /// Units (ignored by `small` and `application`).
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Units per group for `small`.
    #[arg(long, default_value_t = 6)]
    pub per_group: usize,
}

impl DgpArgs {
    fn config(&self, seed: u64) -> DgpConfig {
        match self.dgp {
            DgpArg::Table1 => table1_dgp(self.n, seed),
            DgpArg::Table1Prept => table1_prept_dgp(self.n, seed),
            DgpArg::Small => small_sample_dgp(self.per_group, seed),
            DgpArg::Application => application_dgp(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, default_value_t = 100)]
    pub replications: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["bayes", "ifgls"])]
    pub estimators: Vec<EstimatorArg>,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub xi: f64,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 300)]
    pub burnin: usize,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    #[serde(skip, default)]
    pub jobs: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0.15)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// First calendar period; periods are labelled from here on.
    #[arg(long, default_value_t = 1)]
    pub first_period: i64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    /// sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects outputs and warnings of one run, then writes the manifest.
struct Run {
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

impl Run {
    fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Run {
            dir: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn table(&mut self, table: &AttTable, estimator: &str, plot: bool) -> Result<()> {
        let p = self.path("att.csv");
        table.save_csv(&p)?;
        if plot {
            let p = self.path("plot_data.csv");
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            table.write_plot_data(f, estimator)?;
        }
        Ok(())
    }

    fn finish(mut self, command: &Command) -> Result<PathBuf> {
        let manifest = Manifest {
            tool: "stagdid".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.clone(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: self.outputs.clone(),
            warnings: self.warnings.clone(),
        };
        let p = self.dir.join(MANIFEST);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

fn load_checked(input: &InputArgs, run: &mut Run) -> Result<PanelDataset> {
    run.input(&input.data)?;
    let data = load_panel(&input.data, &input.schema())?;
    let report = validate(&data, input.min_cohort);
    for issue in report.warnings() {
        run.warnings.push(format!("{}: {}", issue.code, issue.message));
    }
    if let Some(e) = report.errors().next() {
        return Err(Error::Identification(format!("{}: {}", e.code, e.message)));
    }
    Ok(data)
}

/// Prior and estimation panel for the chosen regime; the trained regime
/// spends a stratified share of the panel on the prior.
fn resolve_prior(
    args: &PriorArgs,
    chain: &ChainArgs,
    data: PanelDataset,
    run: &mut Run,
) -> Result<(PriorSpec, PanelDataset)> {
    if let Some(path) = &args.prior {
        run.input(path)?;
        let p = PriorSpec::load_json(path)?;
        p.check_against(&data)?;
        return Ok((p, data));
    }
    let (t, d_w) = (data.n_periods(), data.d_w());
    match args.prior_regime {
        RegimeArg::Default => Ok((default_prior(t, d_w, data.cohorts()), data)),
        RegimeArg::StudentT => Ok((student_t_prior(t, d_w, data.cohorts(), args.rho, args.xi)?, data)),
        RegimeArg::Trained => {
            let (train, est) = split_training(&data, args.training_fraction, chain.seed)?;
            let cfg = TrainingConfig {
                inflation: args.inflation,
                gibbs: GibbsConfig {
                    seed: derive_seed(chain.seed, 7),
                    ..chain.gibbs(Variant::Full)
                },
                ..TrainingConfig::default()
            };
            let base = default_prior(t, d_w, data.cohorts());
            Ok((training_prior(&train, &base, &cfg)?, est))
        }
    }
}

fn cmd_fit(a: &FitArgs, cmd: &Command) -> Result<String> {
    let mut run = Run::new(&a.out.out)?;
    let data = load_checked(&a.input, &mut run)?;
    let (prior, data) = resolve_prior(&a.prior, &a.chain, data, &mut run)?;
    let design = DesignSet::for_panel(&data)?;
    let draws = run_chain(&data, &design, &prior, &a.chain.gibbs(a.variant.into()))?;
    let table = summarize(&draws, &design);
    let name = format!("bayes-{}", Variant::from(a.variant).name());
    run.table(&table, &name, a.out.emit_plot_data)?;
    let csv = run.path("draws.csv");
    let meta = run.path("draws.json");
    draws.save(&data, &csv, &meta)?;
    let p = run.path("prior.json");
    prior.save_json(&p)?;
    run.finish(cmd)?;
    Ok(table.render())
}

fn cmd_ifgls(a: &IfglsArgs, cmd: &Command) -> Result<String> {
    let mut run = Run::new(&a.out.out)?;
    let data = load_checked(&a.input, &mut run)?;
    let design = DesignSet::for_panel(&data)?;
    let cfg = IfglsConfig {
        variant: a.variant.into(),
        variance_step: if a.plugin_variances { VarianceStep::Plugin } else { VarianceStep::Em },
        max_iter: a.max_iter,
        tol: a.tol,
        accelerate: !a.no_accelerate,
        ..IfglsConfig::default()
    };
    let fit = ifgls_fit(&data, &design, &cfg)?;
    if !fit.converged {
        run.warnings.push(format!("no convergence after {} iterations", fit.iterations));
    }
    let name = format!("ifgls-{}", cfg.variant.name());
    run.table(&fit.att, &name, a.out.emit_plot_data)?;
    run.write("ifgls.json", &serde_json::to_string_pretty(&fit)?)?;
    run.finish(cmd)?;
    Ok(format!(
        "{}converged: {} after {} iterations\n",
        fit.att.render(),
        fit.converged,
        fit.iterations
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub variants: Vec<String>,
    pub log_marglik: Vec<f64>,
    /// log ML(full) − log ML(pre_pt).
    pub log_ml_gap: f64,
    pub prior_model_probs: Vec<f64>,
    pub posterior_model_probs: Vec<f64>,
    pub details: Vec<crate::mlik::MarglikResult>,
}

fn cmd_compare(a: &CompareArgs, cmd: &Command) -> Result<String> {
    let mut run = Run::new(&a.out.out)?;
    let data = load_checked(&a.input, &mut run)?;
    let (prior, data) = resolve_prior(&a.prior, &a.chain, data, &mut run)?;
    let design = DesignSet::for_panel(&data)?;
    let variants = [Variant::Full, Variant::PrePt];
    let details = variants
        .iter()
        .map(|&v| chib_log_marglik(&data, &design, &prior, &ChibConfig::new(a.chain.gibbs(v))))
        .collect::<Result<Vec<_>>>()?;
    let lml: Vec<f64> = details.iter().map(|d| d.log_marglik).collect();
    let priors = a.prior_model_probs.clone().unwrap_or_else(|| vec![0.5, 0.5]);
    if priors.len() != 2 {
        return Err(Error::Config(format!("--prior-model-probs needs 2 values, got {}", priors.len())));
    }
    let post = posterior_model_probs(&lml, Some(&priors))?;
    let report = CompareReport {
        variants: variants.iter().map(|v| v.name().to_string()).collect(),
        log_marglik: lml.clone(),
        log_ml_gap: lml[0] - lml[1],
        prior_model_probs: priors,
        posterior_model_probs: post.clone(),
        details,
    };
    run.write("compare.json", &serde_json::to_string_pretty(&report)?)?;
    run.finish(cmd)?;
    let mut s = format!("{:<8} {:>14} {:>12}\n", "variant", "log ML", "post. prob");
    for (k, v) in report.variants.iter().enumerate() {
        s.push_str(&format!("{v:<8} {:>14.4} {:>12.4}\n", lml[k], post[k]));
    }
    s.push_str(&format!("log ML gap (full - pre_pt): {:.4}\n", report.log_ml_gap));
    Ok(s)
}

fn cmd_simulate(a: &SimulateArgs, cmd: &Command) -> Result<String> {
    let mut run = Run::new(&a.out.out)?;
    let estimators = a
        .estimators
        .iter()
        .map(|e| match e {
            EstimatorArg::Bayes => Estimator::Bayes,
            EstimatorArg::BayesPrept => Estimator::BayesPrePt,
            EstimatorArg::BayesMl => Estimator::BayesMl,
            EstimatorArg::BayesT => Estimator::BayesT { rho: a.rho, xi: a.xi },
            EstimatorArg::Ifgls => Estimator::Ifgls,
        })
        .collect();
    let cfg = SimConfig {
        dgp: a.dgp.config(a.base_seed),
        estimators,
        replications: a.replications,
        base_seed: a.base_seed,
        gibbs: GibbsConfig {
            draws: a.draws,
            burnin: a.burnin,
            ..GibbsConfig::default()
        },
        ifgls: IfglsConfig::default(),
        jobs: a.jobs,
    };
    let report = run_replications(&cfg)?;
    let csv = run.path("simulation.csv");
    let json = run.path("simulation.json");
    report.save(&csv, &json)?;
    for m in &report.metrics {
        if m.failures > 0 {
            run.warnings.push(format!("{}: {} failed replications", m.estimator, m.failures));
        }
    }
    run.finish(cmd)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    eprintln!("simulation runtime: {:.1} s", report.runtime_secs);
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

fn cmd_split(a: &SplitArgs, cmd: &Command) -> Result<String> {
    let mut run = Run::new(&a.out.out)?;
    let data = load_checked(&a.input, &mut run)?;
    let (train, est) = split_training(&data, a.fraction, a.seed)?;
    let p = run.path("training.csv");
    write_panel(&train, &p)?;
    let p = run.path("estimation.csv");
    write_panel(&est, &p)?;
    run.finish(cmd)?;
    Ok(format!("training units: {}\nestimation units: {}\n", train.n(), est.n()))
}

fn cmd_generate(a: &GenerateArgs, cmd: &Command) -> Result<String> {
    let mut run = Run::new(&a.out.out)?;
    let data = generate_dataset(&a.dgp.config(a.seed))?;
    let periods = (0..data.n_periods() as i64).map(|k| a.first_period + k).collect();
    let data = data
        .clone()
        .with_labels(data.unit_ids().to_vec(), periods, data.covariate_names().to_vec())?;
    let p = run.path("panel.csv");
    write_panel(&data, &p)?;
    run.finish(cmd)?;
    Ok(format!("{} units, {} periods\n", data.n(), data.n_periods()))
}

fn cmd_replay(a: &ReplayArgs) -> Result<String> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for (path, digest) in &manifest.inputs {
        let now = sha256_file(Path::new(path))?;
        if &now != digest {
            return Err(Error::Malformed(format!("input {path} changed since the recorded run")));
        }
    }
    let mut command = manifest.command;
    if let Some(out) = &a.out {
        match &mut command {
            Command::Fit(x) => x.out.out = out.clone(),
            Command::Ifgls(x) => x.out.out = out.clone(),
            Command::Compare(x) => x.out.out = out.clone(),
            Command::Simulate(x) => x.out.out = out.clone(),
            Command::Split(x) => x.out.out = out.clone(),
            Command::Generate(x) => x.out.out = out.clone(),
            Command::Replay(_) => return Err(Error::Malformed("a manifest cannot record a replay".into())),
        }
    }
    run(&command)
}

/// Runs one command and returns the text for standard output.
pub fn run(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Fit(a) => cmd_fit(a, cmd),
        Command::Ifgls(a) => cmd_ifgls(a, cmd),
        Command::Compare(a) => cmd_compare(a, cmd),
        Command::Simulate(a) => cmd_simulate(a, cmd),
        Command::Split(a) => cmd_split(a, cmd),
        Command::Generate(a) => cmd_generate(a, cmd),
        Command::Replay(a) => cmd_replay(a),
    }
}

pub const EXIT_ESTIMATION: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_ESTIMATION
    }
}

/// Machine-readable error report.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": {
            "code": e.code(),
            "message": e.to_string(),
            "exit_code": exit_code(e),
        }
    })
    .to_string()
}
