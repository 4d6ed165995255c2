//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use cso_core::diagnostics::Regularity;
use cso_core::linear_mdp::{
    generate_linear_mdp_with, BellmanProblem, FeatureBasis, GeneratorOptions, DEFAULT_DISCOUNT,
    DEFAULT_FEATURE_RMS, DEFAULT_POLICY_SMOOTHING,
};
use cso_core::uplift::{make_uplift_problem, UpliftInstance, DEFAULT_NOISE_STD, DEFAULT_N_X};
use cso_core::verify::{verify_problem, VerifyLevel, VerifyOptions};

use crate::config::{RunConfig, DEFAULT_FEATURE_DIM, DEFAULT_HUBER_DELTA, DEFAULT_REWARD_SCALE};
use crate::run::{execute, write_report, write_trace, RunReport};
use crate::{CliResult, Failure};

#[derive(Debug, Parser)]
#[command(
    name = "cso",
    version,
    about = "Single time-scale stochastic subgradient method for conditional stochastic optimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random linear MDP instance.
    GenMdp(GenMdpArgs),
    /// Generate a random uplift instance.
    GenUplift(GenUpliftArgs),
    /// Run the solver from a config file.
    Run(RunArgs),
    /// Run the numerical verification suite on a fresh or given instance.
    Verify(VerifyArgs),
    /// Run one config over several seeds in parallel.
    Sweep(SweepArgs),
    /// Print a reference run config.
    ExampleConfig(ExampleConfigArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Simplex,
    Whitened,
}

#[derive(Debug, Args)]
pub struct MdpShape {
    #[arg(long, default_value_t = 100)]
    pub states: usize,
    #[arg(long, default_value_t = 50)]
    pub actions: usize,
    /// Feature dimension; defaults to min(10, states × actions).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
    pub discount: f64,
    /// Target norm of the exact solution β*.
    #[arg(long, default_value_t = DEFAULT_REWARD_SCALE)]
    pub reward_scale: f64,
    #[arg(long, value_enum, default_value_t = BasisArg::Whitened)]
    pub basis: BasisArg,
    /// Root-mean-square feature norm of the whitened basis.
    #[arg(long, default_value_t = DEFAULT_FEATURE_RMS)]
    pub feature_rms: f64,
    /// Keep the reward component along the stationary mean feature.
    #[arg(long)]
    pub no_center: bool,
    #[arg(long, default_value_t = DEFAULT_POLICY_SMOOTHING)]
    pub policy_smoothing: f64,
}

impl MdpShape {
    pub fn dim(&self) -> usize {
        self.dim
            .unwrap_or_else(|| DEFAULT_FEATURE_DIM.min(self.states.saturating_mul(self.actions)))
    }

    pub fn options(&self) -> GeneratorOptions {
        GeneratorOptions {
            basis: match self.basis {
                BasisArg::Simplex => FeatureBasis::Simplex,
                BasisArg::Whitened => FeatureBasis::Whitened {
                    feature_rms: self.feature_rms,
                },
            },
            center_rewards: !self.no_center,
            discount: self.discount,
            policy_smoothing: self.policy_smoothing,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenMdpArgs {
    #[command(flatten)]
    pub shape: MdpShape,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenUpliftArgs {
    #[arg(long, default_value_t = DEFAULT_N_X)]
    pub n_x: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_trace` from the config.
    #[arg(long)]
    pub out_trace: Option<PathBuf>,
    /// Overrides `out_report` from the config.
    #[arg(long)]
    pub out_report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProblemArg {
    Mdp,
    Uplift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Quick,
    Default,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = ProblemArg::Mdp)]
    pub problem: ProblemArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LevelArg::Default)]
    pub level: LevelArg,
    /// Verify this instance file instead of generating one.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Shift the `f` subgradient by this amount to exercise the
    /// derivative check.
    #[arg(long)]
    pub inject_fault: Option<f64>,
    #[command(flatten)]
    pub shape: MdpShape,
    #[arg(long, default_value_t = DEFAULT_N_X)]
    pub n_x: usize,
    #[arg(long, default_value_t = DEFAULT_HUBER_DELTA)]
    pub huber_delta: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Number of seeds; run `i` adds `i` to the solver and generator seeds.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExampleConfigArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenMdp(a) => gen_mdp(&a),
        Command::GenUplift(a) => gen_uplift(&a),
        Command::Run(a) => run_command(&a),
        Command::Verify(a) => verify(&a),
        Command::Sweep(a) => sweep(&a),
        Command::ExampleConfig(a) => {
            let text = serde_json::to_string_pretty(&RunConfig::reference_mdp(a.seed))
                .map_err(Failure::usage)?;
            println!("{text}");
            Ok(())
        }
    }
}

pub fn gen_mdp(args: &GenMdpArgs) -> CliResult<()> {
    let s = &args.shape;
    let instance = generate_linear_mdp_with(
        s.states,
        s.actions,
        s.dim(),
        args.seed,
        s.reward_scale,
        &s.options(),
    )
    .map_err(Failure::usage)?;
    instance.write(&args.out).map_err(|e| {
        Failure::usage(anyhow!(e).context(format!("writing {}", args.out.display())))
    })?;
    let problem = BellmanProblem::from_instance(&instance, DEFAULT_HUBER_DELTA, 1.0, 1.0)
        .map_err(Failure::usage)?;
    let beta = problem.exact_solution().map_err(Failure::numerical)?;
    println!("wrote {}", args.out.display());
    println!("beta* norm: {:.6e}", beta.norm());
    match Regularity::of(&problem) {
        Ok(r) => println!(
            "Gram eigenvalues: min {:.6e}, max {:.6e}",
            r.gram.min, r.gram.max
        ),
        Err(e) => println!("Gram eigenvalues: unavailable ({e})"),
    }
    Ok(())
}

pub fn gen_uplift(args: &GenUpliftArgs) -> CliResult<()> {
    let instance =
        UpliftInstance::generate(args.n_x, args.noise_std, args.seed).map_err(Failure::usage)?;
    instance.write(&args.out).map_err(|e| {
        Failure::usage(anyhow!(e).context(format!("writing {}", args.out.display())))
    })?;
    println!("wrote {}", args.out.display());
    println!("uplift norm: {:.6e}", instance.uplift_vector().norm());
    Ok(())
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn print_summary(report: &RunReport) {
    let show = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4e}"));
    println!(
        "{}: {} iterations, seed {}",
        report.problem, report.iterations, report.seed
    );
    println!(
        "ratios final/initial: exact_Q {}, exact_G {}, test dir_theta_norm {}, beta error {}",
        show(report.ratios.exact_q),
        show(report.ratios.exact_g),
        show(report.ratios.test_dir_theta_norm),
        show(report.ratios.beta_error)
    );
    println!(
        "tracking gain {} vs threshold {} (exceeds: {}); theorem48 bound {} (condition: {})",
        report.tracking_gain,
        show(report.gamma_threshold),
        report
            .gain_exceeds_threshold
            .map_or("n/a".into(), |b| b.to_string()),
        show(report.theorem48_gamma_bound),
        report
            .theorem48_condition
            .map_or("n/a".into(), |b| b.to_string()),
    );
}

pub fn run_command(args: &RunArgs) -> CliResult<()> {
    let config = RunConfig::read(&args.config).map_err(Failure::usage)?;
    let base = config_dir(&args.config);
    let trace_path = args
        .out_trace
        .clone()
        .or_else(|| config.out_trace.as_ref().map(|p| base.join(p)));
    let report_path = args
        .out_report
        .clone()
        .or_else(|| config.out_report.as_ref().map(|p| base.join(p)));
    let outcome = execute(&config, &base, trace_path.as_deref())?;
    if let Some(path) = &trace_path {
        write_trace(&outcome.trace, path).map_err(Failure::usage)?;
        info!("trace written to {}", path.display());
    }
    if let Some(path) = &report_path {
        write_report(&outcome.report, path).map_err(Failure::usage)?;
        info!("report written to {}", path.display());
    }
    print_summary(&outcome.report);
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> CliResult<()> {
    let level = match args.level {
        LevelArg::Quick => VerifyLevel::Quick,
        LevelArg::Default => VerifyLevel::Default,
    };
    let mut options = VerifyOptions::new(level, args.seed);
    options.inject_fault = args.inject_fault;
    let started = std::time::Instant::now();
    let report = match args.problem {
        ProblemArg::Mdp => {
            let instance = match &args.instance {
                Some(path) => cso_core::linear_mdp::MdpInstance::read(path)
                    .with_context(|| format!("loading {}", path.display()))
                    .map_err(Failure::usage)?,
                None => {
                    let s = &args.shape;
                    generate_linear_mdp_with(
                        s.states,
                        s.actions,
                        s.dim(),
                        args.seed,
                        s.reward_scale,
                        &s.options(),
                    )
                    .map_err(Failure::usage)?
                }
            };
            let problem = BellmanProblem::from_instance(
                &instance,
                args.huber_delta,
                options.scales.beta,
                options.scales.theta,
            )
            .map_err(Failure::usage)?;
            verify_problem(&problem, &options)
        }
        ProblemArg::Uplift => {
            let instance = match &args.instance {
                Some(path) => UpliftInstance::read(path)
                    .with_context(|| format!("loading {}", path.display()))
                    .map_err(Failure::usage)?,
                None => UpliftInstance::generate(args.n_x, DEFAULT_NOISE_STD, args.seed)
                    .map_err(Failure::usage)?,
            };
            let problem = make_uplift_problem(
                instance,
                args.huber_delta,
                options.scales.beta,
                options.scales.theta,
            )
            .map_err(Failure::usage)?;
            verify_problem(&problem, &options)
        }
    }
    .map_err(Failure::numerical)?;
    print!("{report}");
    info!("verification took {:.2} s", started.elapsed().as_secs_f64());
    if report.passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Failure::verification(anyhow!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

/// One line of the sweep summary.
#[derive(Debug, Serialize)]
struct SweepEntry {
    index: u64,
    seed: u64,
    status: String,
    report: Option<RunReport>,
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let config = RunConfig::read(&args.config).map_err(Failure::usage)?;
    let base = config_dir(&args.config);
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))
        .map_err(Failure::usage)?;
    let work = |i: u64| -> SweepEntry {
        let mut c = config.clone();
        c.problem = c.problem.with_seed_offset(i);
        c.solver.seed = c.solver.seed.wrapping_add(i);
        let trace_path = args.out_dir.join(format!("trace_{i:03}.csv"));
        let result = execute(&c, &base, Some(&trace_path)).and_then(|outcome| {
            write_trace(&outcome.trace, &trace_path).map_err(Failure::usage)?;
            let report_path = args.out_dir.join(format!("report_{i:03}.json"));
            write_report(&outcome.report, &report_path).map_err(Failure::usage)?;
            Ok(outcome.report)
        });
        let (status, report) = match result {
            Ok(r) => ("ok".to_string(), Some(r)),
            Err(f) => (format!("failed: {f}"), None),
        };
        SweepEntry {
            index: i,
            seed: c.solver.seed,
            status,
            report,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(Failure::usage)?;
    let entries: Vec<SweepEntry> =
        pool.install(|| (0..args.seeds).into_par_iter().map(work).collect());

    let mut columns: [Vec<f64>; 4] = Default::default();
    for e in &entries {
        match &e.report {
            Some(r) => {
                let values = [
                    r.ratios.exact_q,
                    r.ratios.exact_g,
                    r.ratios.test_dir_theta_norm,
                    r.ratios.beta_error,
                ];
                for (col, v) in columns.iter_mut().zip(values) {
                    col.extend(v);
                }
            }
            None => println!("run {}: {}", e.index, e.status),
        }
    }
    let names = ["exact_Q", "exact_G", "test dir_theta_norm", "beta error"];
    for (name, col) in names.iter().zip(columns.iter_mut()) {
        if let Some(m) = median(col) {
            println!(
                "median final/initial {name}: {m:.4e} over {} runs",
                col.len()
            );
        }
    }
    let summary = serde_json::to_string_pretty(&entries).map_err(Failure::usage)?;
    let summary_path = args.out_dir.join("summary.json");
    std::fs::write(&summary_path, summary + "\n")
        .with_context(|| format!("writing {}", summary_path.display()))
        .map_err(Failure::usage)?;
    let failed = entries.iter().filter(|e| e.report.is_none()).count();
    if failed > 0 {
        return Err(Failure::numerical(anyhow!(
            "{failed} of {} runs failed",
            entries.len()
        )));
    }
    Ok(())
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}
