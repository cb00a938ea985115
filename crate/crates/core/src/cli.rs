//! Batch experiment runner behind the `pda` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Algorithm, ExperimentConfig};
use crate::data::{
    fmt_f64, gen_circles, gen_teacher_data, save_csv, TeacherActivation, TeacherKind, TeacherSpec,
};
use crate::error::{PdaError, Result};
use crate::estimator::MetricsRecord;
use crate::model::ParticleEnsemble;
use crate::pda::{noisy_sgd_run, pda_run, RunOutput};
use crate::rng::{self, Domain};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str =
    "t,cum_inner,train_risk,test_risk,test_01,second_moment,entropy,objective,wall_ms";

#[derive(Debug, Parser)]
#[command(name = "pda", version, about = "Particle dual averaging experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output root; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset CSV.
    GenData(GenDataArgs),
    /// Fit the log-log slope of the objective gap in a metrics file.
    RateFit {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        burn_in: f64,
        /// Subtracted from the minimum objective to form the floor.
        #[arg(long, default_value_t = 1e-6)]
        margin: f64,
        /// Use this floor instead of `min - margin`.
        #[arg(long)]
        floor: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Teacher,
    Circles,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input dimension (teacher only).
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    #[arg(long, default_value = "single-index")]
    pub teacher_kind: String,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value = "tanh")]
    pub activation: String,
    #[arg(long)]
    pub sparsity: Option<usize>,
    /// Label noise (teacher) or positional jitter (circles).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub factor: f64,
}

/// Process exit code for an error: 2 for invalid input, 3 for runtime
/// divergence, 4 for I/O failures.
pub fn exit_code(err: &PdaError) -> i32 {
    match err {
        PdaError::InvalidConfig(_)
        | PdaError::Malformed { .. }
        | PdaError::DimensionMismatch { .. }
        | PdaError::InvalidLabel(_)
        | PdaError::IndexOutOfRange { .. }
        | PdaError::InsufficientSamples(_)
        | PdaError::Degenerate(_) => 2,
        PdaError::Divergence { .. } | PdaError::NonFinite(_) | PdaError::DataExhausted(_) => 3,
        PdaError::Io(_) => 4,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(&config, out.as_deref()).map(|dirs| {
            for d in dirs {
                println!("{}", d.display());
            }
        }),
        Command::GenData(args) => cmd_gen_data(&args),
        Command::RateFit {
            metrics,
            burn_in,
            margin,
            floor,
        } => {
            let rule = match floor {
                Some(v) => FloorRule::Fixed(v),
                None => FloorRule::MinMinusMargin(margin),
            };
            cmd_rate_fit(&metrics, burn_in, rule).map(|slope| println!("{slope:.6}"))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    name: &'a str,
    algorithm: Algorithm,
    seed: u64,
    outer_steps: usize,
    particles: usize,
    output_index: usize,
    final_t: usize,
    final_objective: Option<f64>,
    final_train_risk: f64,
    final_test_risk: Option<f64>,
    final_test_01: Option<f64>,
    rate_fit_slope: Option<f64>,
    total_inner_steps: usize,
}

/// Execute every replicate of the experiment; returns the directories written.
pub fn cmd_run(config_path: &Path, out_override: Option<&Path>) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let base_dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_root = out_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let exp_dir = out_root.join(&cfg.name);
    let seeds = cfg.replicate_seeds();
    let dirs: Vec<PathBuf> = if seeds.len() == 1 {
        vec![exp_dir.clone()]
    } else {
        seeds
            .iter()
            .map(|s| exp_dir.join(format!("seed_{s}")))
            .collect()
    };
    seeds
        .par_iter()
        .zip(dirs.par_iter())
        .map(|(&seed, dir)| run_replicate(&cfg, seed, &base_dir, dir))
        .collect::<Result<Vec<()>>>()?;
    Ok(dirs)
}

fn run_replicate(cfg: &ExperimentConfig, seed: u64, base_dir: &Path, dir: &Path) -> Result<()> {
    let mut run = cfg.run.clone();
    run.seed = seed;
    let data = cfg.build_data(run.data_seed(), base_dir)?;
    let output: RunOutput = match cfg.algorithm {
        Algorithm::Pda => pda_run(&run, &data)?,
        Algorithm::NoisySgd => noisy_sgd_run(&run, &data)?,
    };
    fs::create_dir_all(dir)?;
    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &output.metrics)?;
    if cfg.write_snapshots {
        for snap in &output.snapshots {
            write_ensemble_csv(
                &dir.join(format!("ensemble_t{}.csv", snap.t)),
                &snap.ensemble,
            )?;
        }
    }
    let rate_fit_slope = match &cfg.rate_fit {
        Some(rf) => {
            let (ts, objs) = objective_series(&output.metrics);
            Some(rate_fit(
                &ts,
                &objs,
                rf.burn_in,
                FloorRule::MinMinusMargin(rf.floor_margin),
            )?)
        }
        None => None,
    };
    let last = output
        .metrics
        .last()
        .expect("metrics include the final iterate");
    let summary = Summary {
        name: &cfg.name,
        algorithm: cfg.algorithm,
        seed,
        outer_steps: run.outer_steps,
        particles: run.particles,
        output_index: output.output_index,
        final_t: last.t,
        final_objective: last.objective_est,
        final_train_risk: last.train_risk,
        final_test_risk: last.test_risk,
        final_test_01: last.test_zero_one,
        rate_fit_slope,
        total_inner_steps: last.cumulative_inner_steps,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn metrics_to_csv(rows: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.cumulative_inner_steps,
            fmt_f64(r.train_risk),
            opt(r.test_risk),
            opt(r.test_zero_one),
            fmt_f64(r.second_moment),
            opt(r.entropy_est),
            opt(r.objective_est),
            r.wall_ms.map(|w| w.to_string()).unwrap_or_default(),
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_to_csv(rows))?;
    Ok(())
}

/// Parse a metrics file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    parse_metrics_csv(&text, &path.display().to_string())
}

pub fn parse_metrics_csv(text: &str, origin: &str) -> Result<Vec<MetricsRecord>> {
    let malformed = |reason: String| PdaError::Malformed {
        path: origin.to_string(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        Some(h) => return Err(malformed(format!("unexpected header {h:?}"))),
        None => return Err(malformed("missing header".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(malformed(format!(
                "line {}: expected 9 fields, got {}",
                n + 2,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| malformed(format!("line {}: cannot parse {s:?}", n + 2)))
            }
        };
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| malformed(format!("line {}: cannot parse {s:?}", n + 2)))
        };
        rows.push(MetricsRecord {
            t: int(f[0])?,
            cumulative_inner_steps: int(f[1])?,
            train_risk: num(f[2])?.unwrap_or(f64::NAN),
            test_risk: num(f[3])?,
            test_zero_one: num(f[4])?,
            second_moment: num(f[5])?.unwrap_or(f64::NAN),
            entropy_est: num(f[6])?,
            objective_est: num(f[7])?,
            wall_ms: num(f[8])?.map(|v| v as u64),
        });
    }
    Ok(rows)
}

pub fn write_ensemble_csv(path: &Path, ens: &ParticleEnsemble) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (1..=ens.dim()).map(|j| format!("theta{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in ens.view().rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// `(t, objective)` pairs with a recorded objective.
pub fn objective_series(rows: &[MetricsRecord]) -> (Vec<f64>, Vec<f64>) {
    rows.iter()
        .filter_map(|r| r.objective_est.map(|o| (r.t as f64, o)))
        .unzip()
}

/// How the objective floor is chosen for the rate fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloorRule {
    /// Minimum of the fitted window minus a margin.
    MinMinusMargin(f64),
    Fixed(f64),
}

/// Least-squares slope of `log(objective - floor)` against `log t` over the
/// rows left after dropping the first `burn_in` fraction.
pub fn rate_fit(ts: &[f64], objs: &[f64], burn_in: f64, floor: FloorRule) -> Result<f64> {
    if ts.len() != objs.len() {
        return Err(PdaError::DimensionMismatch {
            expected: ts.len(),
            got: objs.len(),
        });
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(PdaError::InvalidConfig(
            "burn-in fraction must lie in [0, 1)".into(),
        ));
    }
    let skip = (burn_in * ts.len() as f64).floor() as usize;
    let (ts, objs) = (&ts[skip..], &objs[skip..]);
    if ts.len() < 10 {
        return Err(PdaError::InsufficientSamples(format!(
            "rate fit needs at least 10 rows after burn-in, got {}",
            ts.len()
        )));
    }
    let floor = match floor {
        FloorRule::Fixed(v) => v,
        FloorRule::MinMinusMargin(margin) => {
            objs.iter().copied().fold(f64::INFINITY, f64::min) - margin
        }
    };
    let mut xs = Vec::with_capacity(ts.len());
    let mut ys = Vec::with_capacity(ts.len());
    for (&t, &o) in ts.iter().zip(objs) {
        let gap = o - floor;
        if !(gap > 0.0) || !(t > 0.0) {
            return Err(PdaError::Degenerate(format!(
                "objective gap must be positive, got {gap} at t = {t}"
            )));
        }
        xs.push(t.ln());
        ys.push(gap.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(PdaError::Degenerate("all t values are equal".into()));
    }
    Ok(sxy / sxx)
}

pub fn cmd_rate_fit(metrics_csv: &Path, burn_in: f64, floor: FloorRule) -> Result<f64> {
    let rows = read_metrics_csv(metrics_csv)?;
    let (ts, objs) = objective_series(&rows);
    rate_fit(&ts, &objs, burn_in, floor)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut rng = rng::stream(args.seed, Domain::Data, 0, 0);
    let ds = match args.kind {
        GenKind::Circles => gen_circles(args.n, args.factor, args.noise.unwrap_or(0.05), &mut rng)?,
        GenKind::Teacher => {
            let kind = match args.teacher_kind.as_str() {
                "single-index" | "single_index" => TeacherKind::SingleIndex,
                "multi-index" | "multi_index" => TeacherKind::MultiIndex,
                "linear" => TeacherKind::Linear,
                other => {
                    return Err(PdaError::InvalidConfig(format!(
                        "unknown teacher kind {other:?}"
                    )))
                }
            };
            let activation = match args.activation.as_str() {
                "tanh" => TeacherActivation::Tanh,
                "sign" => TeacherActivation::Sign,
                other => {
                    return Err(PdaError::InvalidConfig(format!(
                        "unknown teacher activation {other:?}"
                    )))
                }
            };
            let spec = TeacherSpec {
                kind,
                m: args.m,
                activation,
                sparsity: args.sparsity,
                noise_std: args.noise.unwrap_or(0.0),
            };
            gen_teacher_data(&spec, args.n, args.d, &mut rng)?
        }
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_csv(&args.out, &ds)
}
