//! The `learncert` pipeline: data generation, crafting, surrogate training,
//! certification, recovery attacks, validation and reporting. Every
//! subcommand records what it read and wrote in `<out>/manifest.json`.

pub mod config;
pub mod manifest;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use learncert::attacks::{recovery_curve, validate_certificate, RecoveryConfig, RecoveryMode, ShiftPlacement};
use learncert::certify::{certify_learnability, CertRequest, CertTable, Certificate, Column};
use learncert::data::{apply_perturbation, make_blobs};
use learncert::nn::{self, ModelSpec};
use learncert::pue::{craft_run, train_offline_surrogate, CraftConfig, CraftMode};
use learncert::smoothing::{sample_accuracies, SmoothingConfig};
use learncert::{io, rng};

use config::{read_toml, DataFile, StageFile};
use manifest::StageBuilder;

/// Exit code for bad input, configuration or usage.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for divergence or non-convergence.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "learncert", version, about = "Certified learnability of perturbed datasets")]
pub struct Cli {
    /// Master seed; every stage derives its own seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/test blob benchmark.
    GenData(GenDataArgs),
    /// Craft class-wise noise and its surrogate.
    Craft(CraftArgs),
    /// Fit an offline surrogate on already perturbed data.
    TrainSurrogate(TrainSurrogateArgs),
    /// Certify (q, eta)-learnability of a surrogate.
    Certify(CertifyArgs),
    /// Run the projected fine-tuning attack over a list of radii.
    Recover(RecoverArgs),
    /// Check a certificate against shifted and smoothed weights.
    Validate(ValidateArgs),
    /// Merge certificates into a table and an optional plot.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML blob description.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// Architecture, e.g. `64-128-10:relu`.
    #[arg(long, default_value = "mlp:64-128-10:relu")]
    pub model: String,
}

impl ModelArg {
    fn spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::parse(&self.model)?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Emn,
    #[value(name = "pue-b")]
    PueB,
    Pue,
}

impl From<ModeArg> for CraftMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Emn => CraftMode::Emn,
            ModeArg::PueB => CraftMode::PueB,
            ModeArg::Pue => CraftMode::Pue,
        }
    }
}

#[derive(Debug, Args)]
pub struct CraftArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Weight-noise draws per noise update (PUE-1, PUE-10, ...).
    #[arg(long, default_value_t = 10)]
    pub u_perturb: usize,
    /// Training dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    /// Optional TOML with training and crafting settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSurrogateArgs {
    /// Clean training dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Noise file to apply before training.
    #[arg(long)]
    pub delta: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub surrogate: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    /// Evaluation dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.9)]
    pub q: f64,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Comma-separated radii.
    #[arg(long, value_delimiter = ',', required = true)]
    pub eta: Vec<f64>,
    /// Confidence for the generalization addend.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Domain sample size for the generalization addend (defaults to the
    /// evaluation set size).
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Column name in the emitted table.
    #[arg(long, default_value = "surrogate")]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RecoverModeArg {
    Generalized,
    #[value(name = "best-case", alias = "best_case")]
    BestCase,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long)]
    pub surrogate: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    /// Clean training data available to the attacker.
    #[arg(long)]
    pub train: PathBuf,
    /// Clean evaluation data.
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated, strictly increasing radii.
    #[arg(long, value_delimiter = ',', required = true)]
    pub eta: Vec<f64>,
    #[arg(long, value_enum, default_value = "generalized")]
    pub mode: RecoverModeArg,
    #[arg(long, default_value_t = RecoveryConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = RecoveryConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = RecoveryConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clean_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub surrogate: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Certificate JSON to check.
    #[arg(long)]
    pub cert: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub m: usize,
    /// Draw the shift inside the ball instead of on its boundary.
    #[arg(long)]
    pub interior: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `NAME=PATH[,PATH...]`; a directory stands for every certificate JSON
    /// in it. Repeat once per method.
    #[arg(long = "column", value_name = "NAME=PATHS")]
    pub columns: Vec<String>,
    /// `NAME=VALUE` accuracy offset (in [0, 1] units) for a column.
    #[arg(long = "offset", value_name = "NAME=VALUE")]
    pub offsets: Vec<String>,
    #[arg(long)]
    pub allow_mixed: bool,
    /// Also draw `plot.svg` from the table.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Marks a failure that should exit with [`EXIT_NUMERIC`].
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<learncert::Error>() {
            if e.is_numeric() {
                return EXIT_NUMERIC;
            }
        }
    }
    EXIT_USAGE
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(&a, seed),
        Command::Craft(a) => craft(&a, seed),
        Command::TrainSurrogate(a) => train_surrogate(&a, seed),
        Command::Certify(a) => certify(&a, seed),
        Command::Recover(a) => recover(&a, seed),
        Command::Validate(a) => validate(&a, seed),
        Command::Report(a) => report(&a, seed),
    }
}

/// Parses arguments, runs and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<learncert::data::LabeledDataset> {
    io::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_surrogate(path: &Path, spec: &ModelSpec) -> Result<nn::ParamVector> {
    io::load_params(path, spec).with_context(|| format!("loading surrogate {} as {spec}", path.display()))
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    let file: DataFile = read_toml(Some(&a.spec))?;
    let spec = file.blob_spec(rng::derive_seed(seed, "gen-data"));
    let (train, test) = make_blobs(&spec)?;
    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("gen-data", &a.out);
    stage.config("blobs", &spec).input("spec", &a.spec)?;
    stage.write("dataset", "train", &io::encode_dataset(&train))?;
    stage.write("dataset", "test", &io::encode_dataset(&test))?;
    stage.finish(seed)?;
    println!("wrote {} train and {} test samples ({})", train.len(), test.len(), spec.domain_id());
    Ok(())
}

fn craft(a: &CraftArgs, seed: u64) -> Result<()> {
    let file: StageFile = read_toml(a.config.as_deref())?;
    let spec = a.model.spec()?;
    let data = load_dataset(&a.data)?;
    let stage_seed = rng::derive_seed(seed, "craft");
    let cfg = file.craft_config(CraftConfig {
        mode: a.mode.into(),
        u_perturb: a.u_perturb,
        seed: stage_seed,
        ..CraftConfig::default()
    });
    let tc = file.train_config(stage_seed);
    let result = craft_run(&data, &spec, &cfg, &tc)?;

    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("craft", &a.out);
    stage.config("model", &spec.canonical()).config("craft", &cfg).config("train", &tc).input("dataset", &a.data)?;
    stage.write("perturbation", "delta", &io::encode_perturbation(&result.delta, data.domain_hash()))?;
    stage.write("parameters", "surrogate", &io::encode_params(&result.theta, &spec)?)?;
    stage.write("history", "history.json", result.history.to_json().as_bytes())?;
    stage.finish(seed)?;

    let h = &result.history;
    println!("{}: final perturbed-validation error {:.4} after {} rounds", h.label, h.final_validation_error, h.rounds.len());
    if !h.converged {
        return Err(NumericFailure(format!(
            "{} did not reach stop error {} in {} rounds; history written",
            h.label, cfg.stop_error, cfg.max_rounds
        ))
        .into());
    }
    Ok(())
}

fn train_surrogate(a: &TrainSurrogateArgs, seed: u64) -> Result<()> {
    let file: StageFile = read_toml(a.config.as_deref())?;
    let spec = a.model.spec()?;
    let data = load_dataset(&a.data)?;
    let delta = io::load_perturbation_for(&a.delta, &data).with_context(|| format!("loading {}", a.delta.display()))?;
    let poisoned = apply_perturbation(&data, &delta)?;
    let cfg = file.offline_config();
    let tc = file.train_config(rng::derive_seed(seed, "train-surrogate"));
    let off = train_offline_surrogate(&poisoned, &spec, &cfg, &tc)?;

    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("train-surrogate", &a.out);
    stage.config("model", &spec.canonical()).config("offline", &cfg).config("train", &tc);
    stage.input("dataset", &a.data)?.input("perturbation", &a.delta)?;
    stage.write("parameters", "surrogate", &io::encode_params(&off.theta, &spec)?)?;
    stage.finish(seed)?;
    println!(
        "offline surrogate: {} epochs, training error {:.4} (noisy {:.4})",
        off.epochs,
        off.train_error,
        off.noisy_train_error.unwrap_or(off.train_error)
    );
    Ok(())
}

/// `0.1` -> `0.1`, printed without trailing noise so file names stay stable.
fn eta_label(eta: f64) -> String {
    let s = format!("{eta:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn certify(a: &CertifyArgs, seed: u64) -> Result<()> {
    let spec = a.model.spec()?;
    let theta = load_surrogate(&a.surrogate, &spec)?;
    let data = load_dataset(&a.data)?;
    let smoothing = SmoothingConfig { sigma: a.sigma, n: a.n, seed: rng::derive_seed(seed, "certify") };
    let samples = sample_accuracies(&theta, &spec, &data, &smoothing)?;

    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("certify", &a.out);
    stage
        .config("model", &spec.canonical())
        .config("smoothing", &smoothing)
        .config("q", &a.q)
        .config("alpha", &a.alpha)
        .config("eta", &a.eta)
        .config("beta", &a.beta)
        .config("test_n", &a.test_n)
        .config("method", &a.method);
    stage.input("parameters", &a.surrogate)?.input("dataset", &a.data)?;
    stage.write("samples", "samples.txt", samples.to_text().as_bytes())?;

    let mut certs = Vec::new();
    for &eta in &a.eta {
        let mut cert = certify_learnability(&samples, &CertRequest { q: a.q, eta, alpha: a.alpha })?;
        if let Some(beta) = a.beta {
            cert = cert.with_generalization(a.test_n.unwrap_or(data.len()), beta)?;
        }
        stage.write("certificate", &format!("cert-eta-{}.json", eta_label(eta)), cert.to_json().as_bytes())?;
        match cert.bound {
            Some(t) => println!("eta {}: bound {t:.4} (k = {})", eta_label(eta), cert.k.unwrap_or(0)),
            None => println!("eta {}: abstain", eta_label(eta)),
        }
        certs.push(cert);
    }
    let table = CertTable::new(vec![Column { method: a.method.clone(), certificates: certs, offset: None }], false)?;
    stage.write("table", "table.csv", table.to_csv().as_bytes())?;
    stage.finish(seed)?;
    Ok(())
}

fn recover(a: &RecoverArgs, seed: u64) -> Result<()> {
    let spec = a.model.spec()?;
    let theta = load_surrogate(&a.surrogate, &spec)?;
    let train = load_dataset(&a.train)?;
    let test = load_dataset(&a.test)?;
    let cfg = RecoveryConfig {
        eta_budget: 0.0,
        learning_rate: a.lr,
        steps: a.steps,
        batch_size: a.batch_size,
        clean_fraction: a.clean_fraction,
        seed: rng::derive_seed(seed, "recover"),
    };
    let mode = match a.mode {
        RecoverModeArg::Generalized => RecoveryMode::Generalized,
        RecoverModeArg::BestCase => RecoveryMode::BestCase,
    };
    let curve = recovery_curve(&theta, &spec, &train, &test, &a.eta, mode, &cfg)?;

    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("recover", &a.out);
    stage.config("model", &spec.canonical()).config("recovery", &cfg).config("mode", &mode.as_str()).config("eta", &a.eta);
    stage.input("parameters", &a.surrogate)?.input("dataset", &a.train)?.input("dataset", &a.test)?;
    stage.write("recovery-curve", "recovery.csv", curve.to_csv().as_bytes())?;
    stage.finish(seed)?;
    for (eta, acc) in &curve.points {
        println!("eta {}: recovered accuracy {acc:.4}", eta_label(*eta));
    }
    Ok(())
}

fn validate(a: &ValidateArgs, seed: u64) -> Result<()> {
    let spec = a.model.spec()?;
    let theta = load_surrogate(&a.surrogate, &spec)?;
    let data = load_dataset(&a.data)?;
    let text = fs::read_to_string(&a.cert).with_context(|| format!("reading {}", a.cert.display()))?;
    let cert = Certificate::from_json(&text)?;
    let placement = if a.interior { ShiftPlacement::Interior } else { ShiftPlacement::Boundary };
    let report = validate_certificate(&theta, &spec, &data, &cert, a.m, rng::derive_seed(seed, "validate"), placement)?;

    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("validate", &a.out);
    stage.config("model", &spec.canonical()).config("m", &a.m).config("placement", &placement);
    stage.input("parameters", &a.surrogate)?.input("dataset", &a.data)?.input("certificate", &a.cert)?;
    stage.write("validation", "validation.json", report.to_json().as_bytes())?;
    stage.finish(seed)?;
    println!(
        "violation rate {:.4} over {} trials (tolerance {:.4})",
        report.violation_rate,
        report.m_trials,
        report.tolerance()
    );
    Ok(())
}

fn split_pair<'a>(s: &'a str, flag: &str) -> Result<(&'a str, &'a str)> {
    s.split_once('=').filter(|(n, v)| !n.is_empty() && !v.is_empty()).ok_or_else(|| anyhow!("--{flag} expects NAME=VALUE, got {s:?}"))
}

fn certificate_paths(spec: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let p = PathBuf::from(part);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(&p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("cert") && n.ends_with(".json")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn report(a: &ReportArgs, seed: u64) -> Result<()> {
    if a.columns.is_empty() {
        bail!("no certificates given; pass at least one --column NAME=PATHS");
    }
    let mut offsets = std::collections::BTreeMap::new();
    for o in &a.offsets {
        let (name, value) = split_pair(o, "offset")?;
        let v: f64 = value.parse().with_context(|| format!("offset {value:?} is not a number"))?;
        offsets.insert(name.to_string(), v);
    }
    out_dir(&a.out)?;
    let mut stage = StageBuilder::new("report", &a.out);
    let mut columns = Vec::new();
    for c in &a.columns {
        let (name, paths) = split_pair(c, "column")?;
        let mut certificates = Vec::new();
        for p in certificate_paths(paths)? {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            certificates.push(Certificate::from_json(&text).with_context(|| format!("parsing {}", p.display()))?);
            stage.input("certificate", &p)?;
        }
        columns.push(Column { method: name.to_string(), certificates, offset: offsets.remove(name) });
    }
    if let Some(name) = offsets.keys().next() {
        bail!("offset given for unknown column {name:?}");
    }
    let table = CertTable::new(columns, a.allow_mixed)?;
    let csv = table.to_csv();
    stage.config("columns", &a.columns).config("offsets", &a.offsets).config("allow_mixed", &a.allow_mixed);
    stage.write("table", "table.csv", csv.as_bytes())?;
    if a.svg {
        stage.write("plot", "plot.svg", svg::svg_from_csv(&csv)?.as_bytes())?;
    }
    stage.finish(seed)?;
    print!("{csv}");
    Ok(())
}
