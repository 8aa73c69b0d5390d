//! Command-line harness emitting CSV benchmark artifacts: convergence
//! orders, stability maps, gradient-regime comparisons, Brownian-source
//! benchmarks and a 2-D CNF density grid.

mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradflow::Error;

#[derive(Parser, Debug)]
#[command(
    name = "gradflow",
    about = "Differentiable differential-equation solver benchmarks",
    version
)]
pub struct Cli {
    /// Plain `key = value` config file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<String>,

    /// Solver name (euler, heun, midpoint, rk4, dopri5, reversible_heun, alf;
    /// SDE commands also accept euler_maruyama, stratonovich_heun, milstein,
    /// reversible_heun_sde).
    #[arg(long, global = true)]
    pub solver: Option<String>,

    /// Named test problem (linear_decay, rotation, gbm_ito, gbm_strat,
    /// ou_timedep, value_and_integral_cde).
    #[arg(long, global = true)]
    pub problem: Option<String>,

    #[arg(long, global = true)]
    pub rtol: Option<f64>,

    #[arg(long, global = true)]
    pub atol: Option<f64>,

    #[arg(long, global = true)]
    pub dt: Option<f64>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Number of Monte-Carlo paths.
    #[arg(long, global = true)]
    pub paths: Option<usize>,

    /// Output CSV path; stdout when omitted.
    #[arg(long, global = true)]
    pub output: Option<String>,

    /// Suppress the timestamp header line so identical invocations produce
    /// byte-identical files.
    #[arg(long, global = true, default_value_t = false)]
    pub reproducible: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fixed-step refinement study against a problem's closed form.
    Convergence {
        /// Comma-separated step sizes; default 2^-3 .. 2^-8.
        #[arg(long)]
        dts: Option<String>,
    },
    /// Boundedness map of the solver over a grid of complex lambda*dt.
    Stability {
        /// Grid as re_min:re_max:im_min:im_max:n_per_axis.
        #[arg(long, default_value = "-2:2:-2:2:21")]
        grid: String,
        /// Steps per probe.
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        /// Boundedness threshold B: bounded iff sup |y| <= B |y0|.
        #[arg(long, default_value_t = 10.0)]
        bound: f64,
    },
    /// Gradient-regime comparison against finite differences and DtO replay.
    Gradcheck {
        /// Comma-separated regimes; default all.
        #[arg(long)]
        regimes: Option<String>,
    },
    /// Brownian-source benchmark: operation counts and increment statistics.
    Brownian {
        /// Source: path, tree or interval.
        #[arg(long, default_value = "interval")]
        source: String,
        /// Number of queries.
        #[arg(long, default_value_t = 10_000)]
        queries: usize,
        /// Access pattern: forward, backward or random.
        #[arg(long, default_value = "forward")]
        pattern: String,
        /// Issue the dyadic prebuild before the sweep (interval source).
        #[arg(long, default_value_t = false)]
        prebuild: bool,
        /// LRU capacity for the interval source.
        #[arg(long, default_value_t = gradflow::brownian::DEFAULT_CACHE_CAPACITY)]
        cache_capacity: usize,
    },
    /// Log-density grid of a 2-d toy flow.
    Cnf2d {
        /// Flow field: zero, contract or swirl.
        #[arg(long, default_value = "contract")]
        flow: String,
        /// Flow strength.
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        /// Grid points per axis.
        #[arg(long, default_value_t = 41)]
        grid: usize,
        /// Half-width of the grid.
        #[arg(long, default_value_t = 4.0)]
        extent: f64,
        /// Divergence evaluation: exact or hutchinson.
        #[arg(long, default_value = "exact")]
        trace: String,
        /// Probe count for the Hutchinson estimator.
        #[arg(long, default_value_t = 1)]
        trace_samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Contract(_) | Error::Unsupported(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
