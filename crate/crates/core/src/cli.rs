//! Command-line front end: data generation, prediction, closed-loop control and
//! excitation diagnostics, each driven by one TOML config.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::controller::{run_closed_loop, MpcProblem};
use crate::error::{Error, Result};
use crate::hankel::{build_gram, pe_rank, pe_trace_score, TrajectoryData};
use crate::io::{load_table, load_trajectory, write_trajectory};
use crate::kernels::{Factor, KernelSpec};
use crate::plants::simulate;
use crate::predictor::{predict, PredictionProblem};

#[derive(Debug, Parser)]
#[command(name = "kdeepc", version, about = "Kernelized data-driven prediction and predictive control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `io.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the configured plant under its excitation and write a trajectory CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict future outputs of a query and write `t,y_pred..,y_true..`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run receding-horizon control against the configured plant and write the log.
    Control {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report persistent-excitation diagnostics of a data set.
    CheckPe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Argument(_)
            | Error::Config(_)
            | Error::InsufficientData { .. }
            | Error::UnsupportedEmbedding(_) => 1,
            Error::NumericOverflow { .. }
            | Error::SolverFailure(_)
            | Error::NotInBehavior { .. }
            | Error::Infeasible(_)
            | Error::Divergence { .. }
            | Error::Generation { .. } => 2,
            Error::Io(_) | Error::Csv(_) => 4,
        };
        CommandError { code, message: e.to_string() }
    }
}

pub const EXIT_PE_FAILURE: i32 = 3;

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = common.seed {
        cfg.io.seed = seed;
    }
    Ok(cfg)
}

fn path_or(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or [io] section)")))
}

fn create(path: &Path) -> Result<File> {
    Ok(File::create(path)?)
}

fn load_data(cfg: &ExperimentConfig, flag: &Option<PathBuf>) -> Result<TrajectoryData> {
    let path = path_or(flag, &cfg.io.data, "data")?;
    let data = load_trajectory(&path, cfg.plant.model.dt)?;
    if data.n_u() != cfg.plant.model.n_u() || data.n_y() != cfg.plant.model.n_y() {
        return Err(Error::Config("data dimensions do not match the plant".into()));
    }
    Ok(data)
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> std::result::Result<(), CommandError> {
    match cli.command {
        Command::GenData { common, out: path } => gen_data(&load_config(&common)?, &path, out)?,
        Command::Predict { common, data, query, out: path } => {
            predict_cmd(&load_config(&common)?, &data, &query, &path, out)?
        }
        Command::Control { common, data, out: path } => control(&load_config(&common)?, &data, &path, out)?,
        Command::CheckPe { common, data } => {
            let rank_ok = check_pe(&load_config(&common)?, &data, out)?;
            if !rank_ok {
                return Err(CommandError {
                    code: EXIT_PE_FAILURE,
                    message: "input is not persistently exciting of the required order".into(),
                });
            }
        }
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, path: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let path = path_or(path, &cfg.io.out, "output")?;
    let plant = &cfg.plant.model;
    let u = cfg.excitation()?.signal(plant.n_u())?;
    let (data, _) = simulate(plant, &cfg.x0(), &u, cfg.noise.measurement_std, cfg.io.seed)?;
    write_trajectory(&data, create(&path)?)?;
    writeln!(out, "wrote {}: T = {}, n_u = {}, n_y = {}, dt = {}", path.display(), data.len(), data.n_u(), data.n_y(), data.dt())?;
    Ok(())
}

fn predict_cmd(
    cfg: &ExperimentConfig,
    data: &Option<PathBuf>,
    query: &Option<PathBuf>,
    path: &Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let started = Instant::now();
    let data = load_data(cfg, data)?;
    let query = load_table(&path_or(query, &cfg.io.query, "query")?)?;
    let path = path_or(path, &cfg.io.out, "output")?;
    let (t_m, t_p) = (cfg.problem.t_m, cfg.problem.t_p);
    let (nu, ny) = (data.n_u(), data.n_y());
    if query.len() != t_m + t_p || query.n_u != nu || query.n_y != ny {
        return Err(Error::Config(format!("query must have {} rows with {nu} inputs and {ny} outputs", t_m + t_p)));
    }
    let y_init = query
        .outputs(0..t_m)
        .ok_or_else(|| Error::Config(format!("query must supply outputs for its first {t_m} rows")))?;
    let truth = query.outputs(t_m..t_m + t_p);
    let gram = build_gram(data, t_m + t_p, cfg.kernel.input.clone(), cfg.kernel.output.clone(), cfg.noise.model.clone())?;
    let problem = PredictionProblem::new(
        &gram,
        t_m,
        t_p,
        query.u[..t_m * nu].to_vec(),
        y_init,
        query.u[t_m * nu..].to_vec(),
    )?;
    let result = predict(&problem, &cfg.solver.settings(cfg.io.seed))?;

    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=ny).map(|i| format!("y_pred{i}")));
    if truth.is_some() {
        header.extend((1..=ny).map(|i| format!("y_true{i}")));
    }
    w.write_record(&header)?;
    for k in 0..t_p {
        let mut rec = vec![query.t[t_m + k].to_string()];
        rec.extend(result.y_pred[k * ny..(k + 1) * ny].iter().map(f64::to_string));
        if let Some(t) = &truth {
            rec.extend(t[k * ny..(k + 1) * ny].iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    writeln!(out, "wrote {}", path.display())?;
    writeln!(out, "residual: {:.6e} (k(v,v) = {:.6e})", result.residual, result.self_kernel)?;
    if let Some(t) = &truth {
        let mse = t.iter().zip(&result.y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64;
        writeln!(out, "rmse: {:.6e}", mse.sqrt())?;
    }
    writeln!(
        out,
        "iterations: {} (starts {}, failed {}, converged {})",
        result.report.iterations, result.report.restarts_used, result.report.failed_starts, result.report.converged
    )?;
    writeln!(out, "wall time: {:.3} s", started.elapsed().as_secs_f64())?;
    Ok(())
}

fn control(cfg: &ExperimentConfig, data: &Option<PathBuf>, path: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg, data)?;
    let path = path_or(path, &cfg.io.out, "output")?;
    let (nu, ny) = (data.n_u(), data.n_y());
    let reference =
        cfg.problem.reference.as_ref().ok_or_else(|| Error::Config("problem.reference is required for control".into()))?;
    let (y_ref, count) = reference.samples(ny)?;
    let steps = cfg.problem.steps.unwrap_or(count);
    let gram = build_gram(data, cfg.problem.depth(), cfg.kernel.input.clone(), cfg.kernel.output.clone(), cfg.noise.model.clone())?;
    let problem = MpcProblem {
        gram,
        t_ini: cfg.problem.t_m,
        n_h: cfg.problem.t_p,
        cost: cfg.problem.stage_cost(nu, ny)?,
        y_ref,
        u_box: cfg.problem.u_box.clone(),
        y_box: cfg.problem.y_box.clone(),
        settings: cfg.solver.mpc_settings(cfg.io.seed),
    };
    let log = run_closed_loop(&problem, &cfg.plant.model, &cfg.x0(), steps)?;
    log.write_csv(create(&path)?)?;
    let s = log.summary();
    let uncertified = log.rows.iter().filter(|r| !r.certified).count();
    writeln!(out, "wrote {} ({} steps)", path.display(), log.rows.len())?;
    writeln!(out, "mean |y - y_ref| over final quarter: {:.6}", s.final_quarter_error)?;
    writeln!(out, "max overshoot: {:.6}", s.max_overshoot)?;
    writeln!(out, "mean solve time: {:.1} ms", s.mean_solve_ms)?;
    if uncertified > 0 {
        writeln!(out, "steps with uncertified plans: {uncertified}")?;
    }
    Ok(())
}

fn is_linear(spec: &KernelSpec) -> bool {
    matches!(spec.terms(), [t] if t.factors == [Factor::Linear])
}

/// Prints the diagnostics; returns `false` when a linear input kernel shows a
/// rank below `L · n_u`.
fn check_pe(cfg: &ExperimentConfig, data: &Option<PathBuf>, out: &mut dyn Write) -> Result<bool> {
    let data = load_data(cfg, data)?;
    let depth = cfg.problem.depth();
    let (rank, sv) = pe_rank(&data, depth, &cfg.kernel.input)?;
    let score = pe_trace_score(&data, depth, &cfg.kernel.input)?;
    let required = depth * data.n_u();
    writeln!(out, "window depth L: {depth}")?;
    writeln!(out, "columns: {}", sv.len())?;
    writeln!(out, "pe rank: {rank}")?;
    let tail: Vec<String> = sv.iter().skip(rank.saturating_sub(3)).take(6).map(|v| format!("{v:.3e}")).collect();
    writeln!(out, "singular values around the rank: [{}]", tail.join(", "))?;
    writeln!(out, "trace score: {score:.6}")?;
    writeln!(out, "required rank for a linear kernel (L * n_u): {required}")?;
    let ok = !is_linear(&cfg.kernel.input) || rank >= required;
    if !ok {
        writeln!(out, "persistent excitation check failed: rank {rank} < {required}")?;
    }
    Ok(ok)
}
