//! Command-line front end.
//!
//! Exit codes: 0 success, 2 malformed input, 3 domain invariant violated,
//! 4 verification failure, 5 non-finite values during training.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::grpo::TabularPolicy;
use crate::maze::{rollout, write_trajectories_jsonl, Maze, MazeError, MazeSpec};
use crate::oracle::{
    summarize, verify_anti_mlr_batch, verify_theorem1_batch, verify_theorem2_batch, BatchSummary, Theorem1Config,
    Theorem2Config, VerificationReport,
};
use crate::prob::ProbError;
use crate::seeds::{derive_seed, Stream};
use crate::trainer::{run_experiment, run_regime_with_accuracy, ExperimentConfig, TrainError};
use crate::waterfill::{delta_j_decomposition, waterfill_update, StateInstance, WaterfillError, DEFAULT_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "latent-grpo",
    version,
    about = "Water-filling solver, verifiers and maze latent-learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one instance and print the result as JSON.
    ///
    /// Exit 2 on malformed input, 3 when pi_ref has a zero entry.
    Waterfill {
        /// JSON file with pi_ref, pi_prop, eps and optional u_star, beta.
        instance: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Run verification batches.
    ///
    /// Exit 4 when any instance of a comonotone population fails a gating
    /// check. Anti-comonotone controls never affect the exit code.
    Verify {
        #[arg(long, value_enum, default_value_t = TheoremArg::All)]
        theorem: TheoremArg,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 2)]
        min_vocab: usize,
        #[arg(long, default_value_t = 64)]
        max_vocab: usize,
        /// Directory for reports.jsonl and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one regime and write metrics.csv and policy.json.
    ///
    /// Exit 2 on a malformed config, 5 on non-finite values.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all four regimes over the configured seeds and write comparison.json.
    ///
    /// Exit 2 on a malformed config, 5 on non-finite values.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample trajectories and write them as JSON lines.
    ///
    /// Exit 2 on malformed maze or policy files.
    Export {
        /// Maze spec JSON; the default maze when absent.
        #[arg(long)]
        maze: Option<PathBuf>,
        /// Policy JSON written by `train`; uniform when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TheoremArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<WaterfillError> for CliError {
    fn from(e: WaterfillError) -> Self {
        let code = match &e {
            WaterfillError::Distribution { source: ProbError::BelowFloor { .. }, .. } => EXIT_INVARIANT,
            WaterfillError::Distribution { .. }
            | WaterfillError::Length { .. }
            | WaterfillError::TooSmall(_)
            | WaterfillError::Eps(_)
            | WaterfillError::Beta(_)
            | WaterfillError::Tolerance(_) => EXIT_INPUT,
            WaterfillError::Internal(_) => EXIT_NUMERIC,
            _ => EXIT_INVARIANT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<MazeError> for CliError {
    fn from(e: MazeError) -> Self {
        let code = match e {
            MazeError::Probabilities(_) => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Maze(m) => m.into(),
            TrainError::NonFinite { .. } | TrainError::Grpo(_) => Self { code: EXIT_NUMERIC, message: e.to_string() },
            other => Self::input(other.to_string()),
        }
    }
}

/// Waterfill input document. Probability fields are parsed as raw numbers so
/// that validation errors can name the offending field.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaterfillInput {
    pi_ref: Vec<f64>,
    pi_prop: Vec<f64>,
    eps: f64,
    #[serde(default)]
    u_star: Option<Vec<f64>>,
    #[serde(default)]
    beta: Option<f64>,
}

/// KL strength used when the instance file omits it. It does not affect `π*`.
const DEFAULT_BETA: f64 = 0.01;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn cmd_waterfill(instance: &Path, tol: f64, stdout: &mut dyn Write) -> Result<(), CliError> {
    let input: WaterfillInput = read_json(instance)?;
    let inst = StateInstance::from_vecs(
        input.pi_ref,
        input.pi_prop,
        input.u_star,
        input.eps,
        input.beta.unwrap_or(DEFAULT_BETA),
    )?;
    let result = waterfill_update(&inst, tol)?;
    let mut doc = serde_json::to_value(&result)?;
    if inst.u_star().is_some() {
        doc["delta_j"] = serde_json::to_value(delta_j_decomposition(&result, &inst)?)?;
    }
    serde_json::to_writer_pretty(&mut *stdout, &doc)?;
    writeln!(stdout)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerifySummary {
    seeds: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    theorem1: Option<BatchSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    anti_mlr_control: Option<BatchSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theorem2: Option<BatchSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theorem2_refinement: Option<Vec<serde_json::Value>>,
    passed: bool,
}

pub fn cmd_verify(
    theorem: TheoremArg,
    seeds: u64,
    min_vocab: usize,
    max_vocab: usize,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    if min_vocab < 2 || max_vocab < min_vocab {
        return Err(CliError::input(format!("vocabulary range {min_vocab}..={max_vocab} is invalid")));
    }
    let seed_list: Vec<u64> = (0..seeds).collect();
    let mut reports: Vec<VerificationReport> = Vec::new();
    let mut summary = VerifySummary {
        seeds,
        theorem1: None,
        anti_mlr_control: None,
        theorem2: None,
        theorem2_refinement: None,
        passed: true,
    };
    let oracle_err = |e: crate::oracle::OracleError| CliError { code: EXIT_INVARIANT, message: e.to_string() };

    if matches!(theorem, TheoremArg::One | TheoremArg::All) {
        let config = Theorem1Config { vocab_min: min_vocab, vocab_max: max_vocab, ..Theorem1Config::default() };
        let t1 = verify_theorem1_batch(&seed_list, &config).map_err(oracle_err)?;
        let control = verify_anti_mlr_batch(&seed_list, &config).map_err(oracle_err)?;
        let s = summarize(&t1);
        summary.passed &= s.failed == 0;
        summary.theorem1 = Some(s);
        summary.anti_mlr_control = Some(summarize(&control));
        reports.extend(t1);
        reports.extend(control);
    }
    if matches!(theorem, TheoremArg::Two | TheoremArg::All) {
        let t2 = verify_theorem2_batch(&seed_list, &Theorem2Config::default()).map_err(oracle_err)?;
        let s = summarize(&t2);
        summary.passed &= s.failed == 0;
        summary.theorem2 = Some(s);
        summary.theorem2_refinement = Some(
            t2.iter()
                .map(|r| json!({ "instance_id": r.instance_id, "resolutions": r.resolutions, "refinement": r.refinement }))
                .collect(),
        );
        reports.extend(t2);
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut lines = BufWriter::new(File::create(dir.join("reports.jsonl"))?);
        for r in &reports {
            serde_json::to_writer(&mut lines, r)?;
            lines.write_all(b"\n")?;
        }
        lines.flush()?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    serde_json::to_writer_pretty(&mut *stdout, &summary)?;
    writeln!(stdout)?;
    if !summary.passed {
        return Err(CliError {
            code: EXIT_VERIFICATION,
            message: "verification failed on a comonotone population".into(),
        });
    }
    Ok(())
}

fn load_experiment(config: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = match config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn cmd_train(config: Option<&Path>, out: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_experiment(config)?;
    let maze = Maze::from_spec(&cfg.maze)?;
    let run = run_regime_with_accuracy(&maze, &cfg.train)?;
    fs::create_dir_all(out)?;
    run.metrics.write_csv(BufWriter::new(File::create(out.join("metrics.csv"))?))?;
    write_json(&out.join("policy.json"), &run.policy)?;
    let first = run.metrics.records.first().map_or(f64::NAN, |r| r.goal_rate);
    let last = run.metrics.final_goal_rate().unwrap_or(f64::NAN);
    writeln!(stdout, "{}: goal_rate {first:.3} -> {last:.3}", cfg.train.regime.as_str())?;
    Ok(())
}

pub fn cmd_compare(config: Option<&Path>, out: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_experiment(config)?;
    let report = run_experiment(&cfg)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("comparison.json"), &report)?;
    let rows: Vec<String> =
        report.regimes.iter().map(|r| format!("{} {:.3}", r.regime.as_str(), r.goal_rate.median)).collect();
    writeln!(stdout, "median final goal_rate: base {:.3}, {}", report.base.median, rows.join(", "))?;
    Ok(())
}

pub fn cmd_export(
    maze: Option<&Path>,
    policy: Option<&Path>,
    episodes: u64,
    seed: u64,
    out: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let spec: MazeSpec = match maze {
        Some(path) => read_json(path)?,
        None => MazeSpec::default(),
    };
    let maze = Maze::from_spec(&spec)?;
    let policy: TabularPolicy = match policy {
        Some(path) => read_json(path)?,
        None => TabularPolicy::uniform(crate::maze::Action::COUNT).map_err(|e| CliError::input(e.to_string()))?,
    };
    let trajectories = (0..episodes)
        .map(|e| rollout(&maze, &policy, derive_seed(seed, Stream::Rollout, e)))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_trajectories_jsonl(BufWriter::new(File::create(out)?), &trajectories)?;
    let reached = trajectories.iter().filter(|t| t.reached_goal).count();
    writeln!(stdout, "wrote {episodes} trajectories ({reached} reached the goal) to {}", out.display())?;
    Ok(())
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Waterfill { instance, tol } => cmd_waterfill(&instance, tol, stdout),
        Command::Verify { theorem, seeds, min_vocab, max_vocab, out } => {
            cmd_verify(theorem, seeds, min_vocab, max_vocab, out.as_deref(), stdout)
        }
        Command::Train { config, out } => cmd_train(config.as_deref(), &out, stdout),
        Command::Compare { config, out } => cmd_compare(config.as_deref(), &out, stdout),
        Command::Export { maze, policy, episodes, seed, out } => {
            cmd_export(maze.as_deref(), policy.as_deref(), episodes, seed, &out, stdout)
        }
    }
}

/// Parses `args`, runs the command and returns the exit code. Diagnostics go
/// to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
