//! Command-line frontend for the fluxsolve toolkit.
//!
//! Subcommands cover the full workflow: `gen-data` writes the closed-form
//! dataset splits, `train` fits the learned-flux model, `eval` scores a
//! trained checkpoint or a classical scheme on a split, `converge` runs the
//! grid-refinement study, and `propcheck` executes the structural property
//! suite.
//!
//! Every command is deterministic for a fixed seed and configuration.
//! Commands that write artifacts place exactly one `manifest.json` in the
//! output directory recording the resolved configuration, seeds, input
//! content hashes, output names and wall time.
//!
//! Exit codes: 0 success, 1 property failure (a check or training gate did
//! not hold), 2 configuration error, 3 artifact corruption (a file parsed
//! but failed validation).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fluxsolve_core::data::{generate_dataset, DatasetConfig, SplitData};
use fluxsolve_core::fvm::{assess_convergence, convergence_study, ConvergenceCheck, Scheme};
use fluxsolve_core::metrics::{csv_report, evaluate, Predictor};
use fluxsolve_core::model::{FluxModel, ModelConfig, SolverKind};
use fluxsolve_core::propcheck::{all_passed, run_all, CaseCounts, InjectedBreak};
use fluxsolve_core::train::{train, training_csv, TrainConfig, TrainError};

/// Exit codes 1–3; clap itself exits 2 on usage errors.
const EXIT_PROPERTY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CORRUPT: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn property(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_PROPERTY,
            message: message.into(),
        }
    }

    fn corrupt(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_CORRUPT,
            message: message.into(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fluxsolve",
    version,
    about = "Locally conservative transport solvers: datasets, training, evaluation, \
             convergence studies and property checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the closed-form convection–diffusion dataset splits.
    GenData(GenDataArgs),
    /// Train the learned-flux model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a classical scheme on a dataset split.
    Eval(EvalArgs),
    /// Grid-refinement study of a classical scheme.
    Converge(ConvergeArgs),
    /// Run the structural property checks.
    Propcheck(PropcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Master seed; per-sample seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_train: usize,
    #[arg(long, default_value_t = 10)]
    n_val: usize,
    #[arg(long, default_value_t = 10)]
    n_test: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing train.json and val.json.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, logs and report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seed for parameter initialization and the epoch shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time integrator: `explicit` or `bb:N` (N fixed-point iterations).
    #[arg(long, default_value = "explicit")]
    solver: String,
    /// Number of consecutive states encoded together.
    #[arg(long, default_value_t = 1)]
    bundle: usize,
    /// Width of the encoded feature space.
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PredictorArg {
    /// Path to a trained checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Classical scheme: central, upwind or blended.
    #[arg(long)]
    fvm: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    predictor: PredictorArg,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics files.
    #[arg(long)]
    out: PathBuf,
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct ConvergeArgs {
    /// Classical scheme: central, upwind or blended.
    #[arg(long, default_value = "blended")]
    scheme: String,
    /// Comma-separated cell counts.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50,100")]
    resolutions: Vec<usize>,
    /// Optional output directory for the CSV table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PropcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the number of randomized cases per check.
    #[arg(long)]
    probes: Option<usize>,
    /// Inject a deliberate defect to demonstrate detection
    /// (`unshared-vertex-mlp`).
    #[arg(long)]
    inject_break: Option<String>,
}

/// Written once per artifact directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    /// Content hashes (SHA-256, hex) of every input file read.
    input_hashes: BTreeMap<String, String>,
    /// Files written to the artifact directory, manifest excluded.
    outputs: Vec<String>,
    wall_s: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("hex formatting");
    }
    out
}

/// Collects files for one artifact directory and writes them (plus the
/// manifest) together at the end of the command.
struct ArtifactDir {
    dir: PathBuf,
    files: Vec<(String, String)>,
    input_hashes: BTreeMap<String, String>,
    started: Instant,
}

impl ArtifactDir {
    fn new(dir: &Path) -> Result<ArtifactDir, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| {
            Failure::config(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        Ok(ArtifactDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            input_hashes: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn stage(&mut self, name: &str, content: String) {
        self.files.push((name.to_string(), content));
    }

    fn note_input(&mut self, path: &Path, bytes: &[u8]) {
        self.input_hashes
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    fn commit(
        self,
        command: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
    ) -> Result<(), Failure> {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seeds,
            input_hashes: self.input_hashes,
            outputs: self.files.iter().map(|(n, _)| n.clone()).collect(),
            wall_s: self.started.elapsed().as_secs_f64(),
        };
        let manifest_text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Failure::config(format!("manifest serialization failed: {e}")))?;
        for (name, content) in &self.files {
            write_text(&self.dir.join(name), content)?;
        }
        write_text(&self.dir.join("manifest.json"), &manifest_text)?;
        Ok(())
    }
}

fn write_text(path: &Path, content: &str) -> Result<(), Failure> {
    let mut data = content.to_string();
    if !data.ends_with('\n') {
        data.push('\n');
    }
    std::fs::write(path, data)
        .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn read_input(dir: &mut ArtifactDir, path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    dir.note_input(path, &bytes);
    String::from_utf8(bytes)
        .map_err(|_| Failure::corrupt(format!("{} is not UTF-8", path.display())))
}

/// A file that exists and parses structurally but fails validation is
/// corrupt; a file that cannot be read at all is a configuration problem.
fn load_split(dir: &mut ArtifactDir, path: &Path) -> Result<SplitData, Failure> {
    let text = read_input(dir, path)?;
    SplitData::from_json(&text)
        .map_err(|e| Failure::corrupt(format!("{} failed validation: {e}", path.display())))
}

fn load_checkpoint(dir: &mut ArtifactDir, path: &Path) -> Result<FluxModel, Failure> {
    let text = read_input(dir, path)?;
    FluxModel::from_json(&text)
        .map_err(|e| Failure::corrupt(format!("{} failed validation: {e}", path.display())))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    if args.n_train == 0 || args.n_val == 0 || args.n_test == 0 {
        return Err(Failure::config(
            "every split needs at least one sample (use --n-train/--n-val/--n-test ≥ 1)",
        ));
    }
    let mut artifact = ArtifactDir::new(&args.out)?;
    let config = DatasetConfig {
        n_train: args.n_train,
        n_val: args.n_val,
        n_test: args.n_test,
        seed: args.seed,
    };
    let bundle = generate_dataset(config).map_err(|e| Failure::config(e.to_string()))?;
    for (name, split) in [
        ("train.json", &bundle.train),
        ("val.json", &bundle.val),
        ("test.json", &bundle.test),
    ] {
        let text = split
            .to_json()
            .map_err(|e| Failure::config(e.to_string()))?;
        artifact.stage(name, text);
    }
    let snapshot = serde_json::json!({
        "n_train": args.n_train,
        "n_val": args.n_val,
        "n_test": args.n_test,
        "seed": args.seed,
    });
    artifact.commit("gen-data", snapshot, vec![args.seed])?;
    println!(
        "wrote {}/{{train,val,test}}.json ({}+{}+{} samples)",
        args.out.display(),
        args.n_train,
        args.n_val,
        args.n_test
    );
    Ok(())
}

fn map_train_error(e: TrainError) -> Failure {
    match e {
        TrainError::NotLearning { .. }
        | TrainError::PipelineMismatch { .. }
        | TrainError::NonFiniteLoss { .. }
        | TrainError::DecoderDrift { .. } => Failure::property(e.to_string()),
        TrainError::EmptyTrainSplit | TrainError::ValidationSplitEmpty => {
            Failure::corrupt(e.to_string())
        }
        other => Failure::config(other.to_string()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let solver: SolverKind = args
        .solver
        .parse()
        .map_err(|e: String| Failure::config(e))?;
    let mut artifact = ArtifactDir::new(&args.out)?;
    let train_split = load_split(&mut artifact, &args.data.join("train.json"))?;
    let val_split = load_split(&mut artifact, &args.data.join("val.json"))?;
    let model_config = ModelConfig {
        encoded_dim: args.width,
        bundle: args.bundle,
        solver,
        u_ref: train_split.u_ref,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        model: model_config,
        model_seed: args.seed,
        shuffle_seed: args.seed,
        epochs: args.epochs,
        lr: args.lr,
    };
    let (model, report) = train(&config, &train_split, &val_split).map_err(map_train_error)?;
    artifact.stage(
        "checkpoint.json",
        model
            .to_json()
            .map_err(|e| Failure::config(e.to_string()))?,
    );
    artifact.stage("train_log.csv", training_csv(&report.logs));
    artifact.stage(
        "report.json",
        serde_json::to_string_pretty(&report).map_err(|e| Failure::config(e.to_string()))?,
    );
    let snapshot = serde_json::to_value(config).map_err(|e| Failure::config(e.to_string()))?;
    artifact.commit("train", snapshot, vec![args.seed])?;
    println!(
        "trained {} epochs (lr {}), best validation MSE {:.6e} at epoch {}",
        report.logs.len(),
        report.lr_used,
        report.best_val_mse,
        report.best_epoch
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    if !matches!(args.split.as_str(), "train" | "val" | "test") {
        return Err(Failure::config(format!(
            "unknown split '{}' (expected train, val or test)",
            args.split
        )));
    }
    let mut artifact = ArtifactDir::new(&args.out)?;
    let split_path = args.data.join(format!("{}.json", args.split));
    let split = load_split(&mut artifact, &split_path)?;

    let loaded_model;
    let predictor = match (&args.predictor.model, &args.predictor.fvm) {
        (Some(path), None) => {
            loaded_model = load_checkpoint(&mut artifact, path)?;
            Predictor::Model(&loaded_model)
        }
        (None, Some(scheme)) => {
            let scheme: Scheme = scheme.parse().map_err(|e: String| Failure::config(e))?;
            Predictor::Fvm(scheme)
        }
        _ => unreachable!("clap enforces exactly one of --model/--fvm"),
    };
    let summary =
        evaluate(&predictor, &split, &args.split).map_err(|e| Failure::config(e.to_string()))?;
    let csv = csv_report(std::slice::from_ref(&summary));
    print!("{csv}");
    artifact.stage("metrics.csv", csv);
    artifact.stage(
        "metrics.json",
        serde_json::to_string_pretty(&summary).map_err(|e| Failure::config(e.to_string()))?,
    );
    let snapshot = serde_json::json!({
        "method": summary.method,
        "split": args.split,
        "data": args.data.display().to_string(),
    });
    artifact.commit("eval", snapshot, vec![])?;
    Ok(())
}

fn convergence_csv(rows: &[fluxsolve_core::fvm::ConvergenceRow]) -> String {
    let mut out = String::from("n_cells,dx,rmse\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{}", row.n_cells, row.dx, row.rmse);
    }
    out
}

fn cmd_converge(args: ConvergeArgs) -> Result<(), Failure> {
    let scheme: Scheme = args
        .scheme
        .parse()
        .map_err(|e: String| Failure::config(e))?;
    if args.resolutions.is_empty() {
        return Err(Failure::config("need at least one resolution"));
    }
    let rows =
        convergence_study(scheme, &args.resolutions).map_err(|e| Failure::config(e.to_string()))?;
    let csv = convergence_csv(&rows);
    print!("{csv}");
    match assess_convergence(&rows) {
        ConvergenceCheck::MatchesReference { max_rel_dev } => {
            eprintln!(
                "reference table matched (max deviation {:.1}%)",
                max_rel_dev * 100.0
            );
        }
        ConvergenceCheck::RefinementOnly { slope, .. } => {
            eprintln!("refinement verified (log-log slope {slope:.2})");
        }
        ConvergenceCheck::Failed { reason, .. } => {
            eprintln!("note: {reason}");
        }
    }
    if let Some(out) = &args.out {
        let mut artifact = ArtifactDir::new(out)?;
        artifact.stage("convergence.csv", csv);
        let snapshot = serde_json::json!({
            "scheme": scheme.to_string(),
            "resolutions": args.resolutions,
        });
        artifact.commit("converge", snapshot, vec![])?;
    }
    Ok(())
}

fn cmd_propcheck(args: PropcheckArgs) -> Result<(), Failure> {
    let inject = match &args.inject_break {
        None => None,
        Some(name) => Some(
            name.parse::<InjectedBreak>()
                .map_err(|e| Failure::config(e.to_string()))?,
        ),
    };
    let cases = args
        .probes
        .map_or_else(CaseCounts::default, CaseCounts::uniform);
    let outcomes = run_all(args.seed, cases, inject).map_err(|e| Failure::config(e.to_string()))?;
    for outcome in &outcomes {
        println!("{outcome}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if all_passed(&outcomes) {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure::property(format!(
            "{failed} of {} checks failed",
            outcomes.len()
        )))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Converge(args) => cmd_converge(args),
        Command::Propcheck(args) => cmd_propcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
