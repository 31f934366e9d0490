//! Command-line front end: `dataset | train | attack | sweep | verify`.
//!
//! Every subcommand resolves a [`RunConfig`] (JSON file, then flags on top),
//! prints it, and writes it to the output directory as `config.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::attacks::AttackFamily;
use crate::classifier::{self, CleanMetrics};
use crate::config::RunConfig;
use crate::dataset::{self, generate_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, SweepResult, TargetChoice};
use crate::net::{Architecture, ModelParams};
use crate::verify::{self, CheckOutcome};

pub const PARAMS_FILE: &str = "params.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CLEAN_FILE: &str = "clean.json";

#[derive(Debug, Parser)]
#[command(name = "viap", version, about = "Multi-view universal adversarial perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the multi-view dataset.
    Dataset(RunArgs),
    /// Train the victim classifier.
    Train(RunArgs),
    /// Attack every object of a dataset with one family per budget.
    Attack(RunArgs),
    /// Dataset, training and the full family x epsilon sweep with reports.
    Sweep(RunArgs),
    /// Run the built-in invariant checks.
    Verify(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed for dataset, training and attacks (default 7).
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Comma-separated budgets on the 0-255 scale.
    #[arg(long, value_name = "CSV", value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Iterations of BIM and VIAP.
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
    /// Comma-separated attack families (fgsm, fgsm-t, bim, bim-t, viap, viap-t).
    #[arg(long, value_name = "NAME", value_delimiter = ',')]
    pub family: Option<Vec<String>>,
    /// Target label for targeted families, or `random`.
    #[arg(long, value_name = "LABEL|random")]
    pub target: Option<String>,
    /// Output directory (default `out`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Use step = epsilon in BIM and VIAP.
    #[arg(long)]
    pub literal_eq_step: bool,
    /// Existing dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Existing params file.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
}

impl RunArgs {
    /// Loads the config file (or defaults), applies flags, and resolves.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = &self.eps {
            c.sweep.epsilons = e.clone();
        }
        if let Some(n) = self.iters {
            c.sweep.iterations = n;
        }
        if let Some(names) = &self.family {
            c.sweep.families = names
                .iter()
                .map(|n| AttackFamily::parse(n.trim()))
                .collect::<Result<_>>()?;
        }
        if let Some(t) = &self.target {
            c.sweep.target = parse_target(t)?;
        }
        if self.literal_eq_step {
            c.sweep.literal_step = true;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.jobs.is_some() {
            c.jobs = self.jobs;
        }
        if self.data.is_some() {
            c.data_dir = self.data.clone();
        }
        if self.model.is_some() {
            c.model = self.model.clone();
        }
        c.resolve()
    }
}

pub fn parse_target(s: &str) -> Result<TargetChoice> {
    if s.eq_ignore_ascii_case("random") {
        return Ok(TargetChoice::Random);
    }
    s.parse()
        .map(TargetChoice::Fixed)
        .map_err(|_| Error::invalid(format!("target must be a label or 'random', got '{s}'")))
}

fn out_dir(config: &RunConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn load_or_generate(config: &RunConfig) -> Result<Dataset> {
    match &config.data_dir {
        Some(dir) => Dataset::load(dir),
        None => generate_dataset(&config.dataset),
    }
}

fn architecture(dataset: &Dataset) -> Architecture {
    let [h, w, c] = dataset.image_shape();
    Architecture::standard(h, w, c, dataset.num_classes())
}

fn clean_json(train: CleanMetrics, test: CleanMetrics) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&json!({ "train": train, "test": test }))?;
    s.push('\n');
    Ok(s)
}

/// Generates (or re-saves) the dataset into the output directory.
pub fn cmd_dataset(config: &RunConfig) -> Result<Dataset> {
    let out = out_dir(config);
    let d = generate_dataset(&config.dataset)?;
    d.save(&out)?;
    config.echo(&out)?;
    Ok(d)
}

/// Trains from a fresh seeded initialization and writes the weights, the
/// per-epoch log and the clean metrics.
pub fn train_model(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<ModelParams> {
    let train_views = dataset.split(Split::Train);
    let test_views = dataset.split(Split::Test);
    let init = classifier::init_params_for(architecture(dataset), &train_views, config.seed)?;
    let (params, log) = classifier::train(&init, &train_views, Some(&test_views), &config.train)?;
    fs::create_dir_all(out)?;
    params.save(&out.join(PARAMS_FILE))?;
    fs::write(out.join(TRAIN_LOG_FILE), classifier::log_csv(&log))?;
    let train = classifier::evaluate_clean(&params, &train_views)?;
    let test = if test_views.is_empty() {
        CleanMetrics {
            accuracy: f64::NAN,
            mean_true_softmax: f64::NAN,
        }
    } else {
        classifier::evaluate_clean(&params, &test_views)?
    };
    fs::write(out.join(CLEAN_FILE), clean_json(train, test)?)?;
    Ok(params)
}

pub fn cmd_train(config: &RunConfig) -> Result<ModelParams> {
    let out = out_dir(config);
    let d = load_or_generate(config)?;
    let params = train_model(config, &d, &out)?;
    config.echo(&out)?;
    Ok(params)
}

/// Runs each configured family at each budget, writing per-view scores,
/// every attacked image, and the VIAP perturbations.
pub fn cmd_attack(config: &RunConfig) -> Result<Vec<eval::AttackRun>> {
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| Error::invalid("attack needs a trained model (--model)"))?;
    let params = ModelParams::load(model)?;
    let d = load_or_generate(config)?;
    let out = out_dir(config);
    let images = out.join("images");
    let deltas = out.join("perturbations");
    fs::create_dir_all(&images)?;
    let mut csv = String::from("family,epsilon,view,split,label,target,tracked,predicted\n");
    let mut runs = Vec::new();
    for &family in &config.sweep.families {
        for &eps in &config.sweep.epsilons {
            let run = eval::attack_dataset(&params, &d, family, eps, &config.sweep)?;
            for (s, img) in run.scores.iter().zip(&run.images) {
                let target = s.target.map(|t| t.to_string()).unwrap_or_default();
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{:e},{}",
                    family.name(),
                    eps,
                    s.view,
                    s.split.name(),
                    s.label,
                    target,
                    s.tracked,
                    s.predicted
                )
                .unwrap();
                dataset::write_ppm(&images.join(format!("{}_{}_{}.ppm", family.name(), eps, s.view)), img)?;
            }
            if !run.perturbations.is_empty() {
                fs::create_dir_all(&deltas)?;
                for (object, p) in &run.perturbations {
                    p.save(&deltas.join(format!("{}_{}_o{:03}.bin", family.name(), eps, object)))?;
                }
            }
            runs.push(run);
        }
    }
    fs::write(out.join("attack.csv"), csv)?;
    config.echo(&out)?;
    Ok(runs)
}

/// The whole protocol: dataset, model (trained unless `model` is given),
/// sweep and reports.
pub fn cmd_sweep(config: &RunConfig) -> Result<SweepResult> {
    let out = out_dir(config);
    let d = load_or_generate(config)?;
    let params = match &config.model {
        Some(p) => ModelParams::load(p)?,
        None => train_model(config, &d, &out)?,
    };
    let result = eval::confidence_sweep(&params, &d, &config.sweep)?;
    eval::emit_report(&result, &out)?;
    config.echo(&out)?;
    Ok(result)
}

pub fn cmd_verify(config: &RunConfig) -> Result<Vec<CheckOutcome>> {
    verify::run_all(config.seed)
}

/// Process exit code for an error kind.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Json(_) => 2,
        Error::CleanGate { .. } => 3,
        _ => 1,
    }
}

/// Machine-readable error line written to stderr on failure.
pub fn error_json(e: &Error) -> String {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

/// Exit code returned when `verify` finds a failing check.
pub const VERIFY_FAILED: i32 = 4;

fn run_command(cli: &Cli) -> Result<i32> {
    let args = match &cli.command {
        Command::Dataset(a) | Command::Train(a) | Command::Attack(a) | Command::Sweep(a) | Command::Verify(a) => a,
    };
    let config = args.resolve()?;
    if let Some(n) = config.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("cannot size thread pool: {e}")))?;
    }
    print!("{}", config.to_json()?);
    match &cli.command {
        Command::Dataset(_) => {
            let d = cmd_dataset(&config)?;
            eprintln!("wrote {} views to {}", d.views.len(), out_dir(&config).display());
        }
        Command::Train(_) => {
            cmd_train(&config)?;
            let clean = fs::read_to_string(out_dir(&config).join(CLEAN_FILE))?;
            eprint!("clean metrics: {clean}");
        }
        Command::Attack(_) => {
            for run in cmd_attack(&config)? {
                let n = run.scores.len().max(1) as f64;
                let mean = run.scores.iter().map(|s| s.tracked).sum::<f64>() / n;
                eprintln!(
                    "{} eps {}: mean tracked softmax {mean:.4e}",
                    run.family.name(),
                    run.epsilon
                );
            }
        }
        Command::Sweep(_) => {
            let r = cmd_sweep(&config)?;
            eprintln!(
                "sweep: {} cells, report in {}",
                r.cells.len(),
                out_dir(&config).display()
            );
        }
        Command::Verify(_) => {
            let checks = cmd_verify(&config)?;
            let mut failed = false;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed |= !c.passed;
            }
            if failed {
                return Ok(VERIFY_FAILED);
            }
        }
    }
    Ok(0)
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match run_command(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
