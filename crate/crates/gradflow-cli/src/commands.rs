//! Subcommand implementations.

use gradflow::adjoint::{
    dto_backprop, forward_sensitivity, otd_checkpointed_backprop, otd_interpolated_backprop,
    otd_ode_backprop, NormMode,
};
use gradflow::brownian::{BrownianInterval, BrownianPath, Seed, VirtualBrownianTree};
use gradflow::density::{cnf_logprob, std_normal_logdensity, EpsDist, TraceMode};
use gradflow::field::AnalyticField;
use gradflow::ode::{integrate, ControllerConfig};
use gradflow::problems::{
    convergence_study, linear_decay, rotation, stability_probe, ValueIntegralCde, ODE_SOLVER_NAMES,
    PROBLEM_NAMES,
};
use gradflow::real::max_rel_err;
use gradflow::reversible::{
    dto_replay_backprop, reversible_backprop, run_forward, Alf, RevHeun,
    ReversibleBackpropOptions,
};
use gradflow::tableau::ButcherTableau;
use gradflow::{Error, Result, VectorField};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::config::FileConfig;
use crate::output::{fmt, CsvWriter};
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::empty(),
    };
    let reproducible = cfg.get_reproducible(cli.reproducible);
    let output = cfg.get_output(&cli.output);
    let seed = cfg.get_u64("seed", cli.seed, 0)?;
    match &cli.command {
        Command::Convergence { dts } => {
            cmd_convergence(&cli, &cfg, dts.clone(), reproducible, output.as_deref())
        }
        Command::Stability { grid, steps, bound } => cmd_stability(
            &cli,
            &cfg,
            grid,
            *steps,
            *bound,
            reproducible,
            output.as_deref(),
        ),
        Command::Gradcheck { regimes } => cmd_gradcheck(
            &cli,
            &cfg,
            regimes.clone(),
            seed,
            reproducible,
            output.as_deref(),
        ),
        Command::Brownian {
            source,
            queries,
            pattern,
            prebuild,
            cache_capacity,
        } => cmd_brownian(
            source,
            *queries,
            pattern,
            *prebuild,
            *cache_capacity,
            seed,
            reproducible,
            output.as_deref(),
        ),
        Command::Cnf2d {
            flow,
            rate,
            grid,
            extent,
            trace,
            trace_samples,
        } => cmd_cnf2d(
            &cli,
            &cfg,
            flow,
            *rate,
            *grid,
            *extent,
            trace,
            *trace_samples,
            seed,
            reproducible,
            output.as_deref(),
        ),
    }
}

fn ode_problem_by_name(name: &str) -> Result<gradflow::problems::OdeProblem<f64>> {
    match name {
        "linear_decay" => Ok(linear_decay()),
        "rotation" => Ok(rotation()),
        other => Err(Error::Config(format!(
            "problem '{other}' is not a closed-form ODE problem here (valid: {})",
            PROBLEM_NAMES.join(", ")
        ))),
    }
}

// ---------------------------------------------------------------------------
// convergence
// ---------------------------------------------------------------------------

fn cmd_convergence(
    cli: &Cli,
    cfg: &FileConfig,
    dts_arg: Option<String>,
    reproducible: bool,
    output: Option<&str>,
) -> Result<()> {
    let solver = cfg.get_str("solver", &cli.solver, "dopri5");
    if !ODE_SOLVER_NAMES.contains(&solver.as_str()) {
        return Err(Error::Config(format!(
            "unknown solver '{solver}' (valid: {})",
            ODE_SOLVER_NAMES.join(", ")
        )));
    }
    let problem = cfg.get_str("problem", &cli.problem, "linear_decay");
    let prob = ode_problem_by_name(&problem)?;
    let dts: Vec<f64> = match dts_arg {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad dt '{s}'")))
            })
            .collect::<Result<_>>()?,
        None => (3..=8).map(|k| 2f64.powi(-k)).collect(),
    };
    let (errs, slope) = convergence_study(&solver, &prob, &dts)?;
    let mut w = CsvWriter::new(&["dt", "max_abs_error", "slope"], reproducible);
    for (dt, err) in dts.iter().zip(&errs) {
        w.row(&[fmt(*dt), fmt(*err), String::new()]);
    }
    w.row(&[String::new(), String::new(), fmt(slope)]);
    w.finish(output)
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_stability(
    cli: &Cli,
    cfg: &FileConfig,
    grid: &str,
    steps: usize,
    bound: f64,
    reproducible: bool,
    output: Option<&str>,
) -> Result<()> {
    let solver = cfg.get_str("solver", &cli.solver, "reversible_heun");
    if !ODE_SOLVER_NAMES.contains(&solver.as_str()) {
        return Err(Error::Config(format!(
            "unknown solver '{solver}' (valid: {})",
            ODE_SOLVER_NAMES.join(", ")
        )));
    }
    let parts: Vec<&str> = grid.split(':').collect();
    if parts.len() != 5 {
        return Err(Error::Config(
            "grid must be re_min:re_max:im_min:im_max:n".into(),
        ));
    }
    let nums: Vec<f64> = parts[..4]
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad grid bound '{s}'")))
        })
        .collect::<Result<_>>()?;
    let n: usize = parts[4]
        .parse()
        .map_err(|_| Error::Config(format!("bad grid count '{}'", parts[4])))?;
    if n < 2 {
        return Err(Error::Config("grid needs at least 2 points per axis".into()));
    }
    let mut w = CsvWriter::new(&["re", "im", "bounded"], reproducible);
    for i in 0..n {
        let re = nums[0] + (nums[1] - nums[0]) * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let im = nums[2] + (nums[3] - nums[2]) * j as f64 / (n - 1) as f64;
            let run = stability_probe::<f64>(&solver, re, im, steps, bound)?;
            w.row(&[
                fmt(re),
                fmt(im),
                if run.bounded { "1" } else { "0" }.to_string(),
            ]);
        }
    }
    w.finish(output)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub const GRADCHECK_REGIMES: &[&str] = &[
    "dto",
    "otd",
    "otd_interpolated",
    "otd_checkpointed",
    "reversible",
    "alf",
    "forward_sens",
    "otd_rms_full",
    "otd_seminorm",
];

struct GradRow {
    regime: &'static str,
    rel_err_vs_fd: f64,
    rel_err_vs_dto: f64,
    steps_fwd: usize,
    steps_bwd: usize,
    peak_records: usize,
}

/// Runs every requested gradient regime on one problem with the loss
/// L = sum(y(T)) and compares against central finite differences of the loss
/// and against the matching discretise-then-optimise gradients.
pub fn gradcheck_rows(
    problem: &str,
    regimes: &[String],
    rtol: f64,
    atol: f64,
    dt: f64,
) -> Result<Vec<(String, f64, f64, usize, usize, usize)>> {
    // The CDE problem routes through its reduced ODE.
    let (field, y0, t0, t1, rebuild): (
        Box<dyn VectorField<f64>>,
        Vec<f64>,
        f64,
        f64,
        Box<dyn Fn(&[f64]) -> Result<Box<dyn VectorField<f64>>>>,
    ) = if problem == "value_and_integral_cde" {
        let prob = ValueIntegralCde::<f64>::new(2.0, 201);
        let cde = prob.reduced(
            gradflow::paths::Scheme::HermiteCubicBd,
            gradflow::paths::KnotRule::STime,
        )?;
        let prob2 = ValueIntegralCde::<f64>::new(2.0, 201);
        (
            Box::new(cde),
            prob.y0(),
            0.0,
            2.0,
            Box::new(move |p: &[f64]| {
                Ok(Box::new(prob2.reduced_with_params(
                    gradflow::paths::Scheme::HermiteCubicBd,
                    gradflow::paths::KnotRule::STime,
                    p,
                )?) as Box<dyn VectorField<f64>>)
            }),
        )
    } else {
        let prob = ode_problem_by_name(problem)?;
        let rebuild = prob.rebuild;
        (
            prob.field,
            prob.y0,
            prob.t0,
            prob.t1,
            Box::new(move |p: &[f64]| Ok(rebuild(p))),
        )
    };
    let tab = ButcherTableau::dopri5();
    let cfg = ControllerConfig::with_tols(rtol, atol);
    let d = y0.len();
    let m = field.params_dim();

    // Forward solve for the DtO reference.
    let forward = integrate(field.as_ref(), &y0, t0, t1, &tab, &cfg, None, &[], &[])?;
    let y_t = forward.terminal().to_vec();
    let t_end = *forward.ts.last().unwrap();
    let cot = vec![1.0; d];
    let (dto_dy0, dto_dth) = dto_backprop(&forward, field.as_ref(), &tab, &[(t_end, cot.clone())])?;

    // Finite differences of the loss.
    let loss = |f: &dyn VectorField<f64>, y0: &[f64]| -> Result<f64> {
        let s = integrate(f, y0, t0, t1, &tab, &cfg, None, &[], &[])?;
        Ok(s.terminal().iter().sum())
    };
    let h = 1e-6;
    let mut fd_dy0 = vec![0.0; d];
    for j in 0..d {
        let mut yp = y0.clone();
        let mut ym = y0.clone();
        yp[j] += h;
        ym[j] -= h;
        fd_dy0[j] = (loss(field.as_ref(), &yp)? - loss(field.as_ref(), &ym)?) / (2.0 * h);
    }
    let theta = field.params();
    let mut fd_dth = vec![0.0; m];
    for j in 0..m {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[j] += h;
        tm[j] -= h;
        let fp = loss(rebuild(&tp)?.as_ref(), &y0)?;
        let fm = loss(rebuild(&tm)?.as_ref(), &y0)?;
        fd_dth[j] = (fp - fm) / (2.0 * h);
    }
    let vs_fd = |dy0: &[f64], dth: &[f64]| -> f64 {
        max_rel_err(dy0, &fd_dy0).max(max_rel_err(dth, &fd_dth))
    };
    let vs_dto = |dy0: &[f64], dth: &[f64]| -> f64 {
        max_rel_err(dy0, &dto_dy0).max(max_rel_err(dth, &dto_dth))
    };

    let fwd_steps = forward.n_accepted + forward.n_rejected;
    let mut rows: Vec<GradRow> = Vec::new();
    for regime in regimes {
        match regime.as_str() {
            "dto" => rows.push(GradRow {
                regime: "dto",
                rel_err_vs_fd: vs_fd(&dto_dy0, &dto_dth),
                rel_err_vs_dto: 0.0,
                steps_fwd: fwd_steps,
                steps_bwd: forward.step_records.len(),
                peak_records: forward.step_records.len(),
            }),
            "otd" | "otd_rms_full" | "otd_seminorm" => {
                let norm = if regime == "otd_seminorm" {
                    NormMode::AdjointSeminorm { include_y: true }
                } else {
                    NormMode::RmsFull
                };
                let r = otd_ode_backprop(
                    field.as_ref(),
                    &y_t,
                    t_end,
                    t0,
                    &cot,
                    &tab,
                    &cfg,
                    norm,
                    &[],
                )?;
                rows.push(GradRow {
                    regime: match regime.as_str() {
                        "otd" => "otd",
                        "otd_rms_full" => "otd_rms_full",
                        _ => "otd_seminorm",
                    },
                    rel_err_vs_fd: vs_fd(&r.dl_dy0, &r.dl_dtheta),
                    rel_err_vs_dto: vs_dto(&r.dl_dy0, &r.dl_dtheta),
                    steps_fwd: fwd_steps,
                    steps_bwd: r.n_accepted + r.n_rejected,
                    peak_records: 1,
                });
            }
            "otd_interpolated" => {
                let n_knots = 33;
                let save: Vec<f64> = (1..n_knots)
                    .map(|k| t0 + (t_end - t0) * k as f64 / n_knots as f64)
                    .collect();
                let fsol =
                    integrate(field.as_ref(), &y0, t0, t1, &tab, &cfg, None, &[], &save)?;
                let knots: Vec<(f64, Vec<f64>)> = fsol
                    .ts
                    .iter()
                    .zip(&fsol.ys)
                    .map(|(&t, y)| (t, y.clone()))
                    .collect();
                let r = otd_interpolated_backprop(
                    field.as_ref(),
                    &knots,
                    &cot,
                    &tab,
                    &cfg,
                    NormMode::RmsFull,
                )?;
                rows.push(GradRow {
                    regime: "otd_interpolated",
                    rel_err_vs_fd: vs_fd(&r.dl_dy0, &r.dl_dtheta),
                    rel_err_vs_dto: vs_dto(&r.dl_dy0, &r.dl_dtheta),
                    steps_fwd: fsol.n_accepted + fsol.n_rejected,
                    steps_bwd: r.n_accepted + r.n_rejected,
                    peak_records: knots.len(),
                });
            }
            "otd_checkpointed" => {
                let n_ckpt = 8;
                let save: Vec<f64> = (1..n_ckpt)
                    .map(|k| t0 + (t_end - t0) * k as f64 / n_ckpt as f64)
                    .collect();
                let fsol =
                    integrate(field.as_ref(), &y0, t0, t1, &tab, &cfg, None, &[], &save)?;
                let ckpts: Vec<(f64, Vec<f64>)> = fsol
                    .ts
                    .iter()
                    .zip(&fsol.ys)
                    .map(|(&t, y)| (t, y.clone()))
                    .collect();
                let r = otd_checkpointed_backprop(
                    field.as_ref(),
                    &ckpts,
                    &cot,
                    &tab,
                    &cfg,
                    NormMode::RmsFull,
                )?;
                rows.push(GradRow {
                    regime: "otd_checkpointed",
                    rel_err_vs_fd: vs_fd(&r.dl_dy0, &r.dl_dtheta),
                    rel_err_vs_dto: vs_dto(&r.dl_dy0, &r.dl_dtheta),
                    steps_fwd: fsol.n_accepted + fsol.n_rejected,
                    steps_bwd: r.n_accepted + r.n_rejected,
                    peak_records: ckpts.len(),
                });
            }
            "reversible" | "alf" => {
                let n = ((t1 - t0) / dt).round().max(1.0) as usize;
                let h_step = (t1 - t0) / n as f64;
                let schedule = vec![h_step; n];
                let (dy0, dth, dto_dy0_own, dto_dth_own) = if regime == "reversible" {
                    let states = run_forward(&RevHeun, field.as_ref(), t0, &y0, &schedule)?;
                    let (a, b) = reversible_backprop(
                        &RevHeun,
                        field.as_ref(),
                        states.last().unwrap(),
                        &schedule,
                        &cot,
                        &ReversibleBackpropOptions::default(),
                    )?;
                    let (c, dd) =
                        dto_replay_backprop(&RevHeun, field.as_ref(), &states, &schedule, &cot)?;
                    (a, b, c, dd)
                } else {
                    let states = run_forward(&Alf, field.as_ref(), t0, &y0, &schedule)?;
                    let (a, b) = reversible_backprop(
                        &Alf,
                        field.as_ref(),
                        states.last().unwrap(),
                        &schedule,
                        &cot,
                        &ReversibleBackpropOptions::default(),
                    )?;
                    let (c, dd) =
                        dto_replay_backprop(&Alf, field.as_ref(), &states, &schedule, &cot)?;
                    (a, b, c, dd)
                };
                // The reversible discretisation differs from the adaptive
                // forward pass, so its FD reference uses its own solve.
                rows.push(GradRow {
                    regime: if regime == "reversible" {
                        "reversible"
                    } else {
                        "alf"
                    },
                    rel_err_vs_fd: vs_fd(&dy0, &dth),
                    rel_err_vs_dto: max_rel_err(&dy0, &dto_dy0_own)
                        .max(max_rel_err(&dth, &dto_dth_own)),
                    steps_fwd: n,
                    steps_bwd: n,
                    peak_records: 1,
                });
            }
            "forward_sens" => {
                let (j_y, j_th) = forward_sensitivity(field.as_ref(), &y0, t0, t1, &tab, &cfg)?;
                let mut dy0 = vec![0.0; d];
                for col in 0..d {
                    for (row, jr) in j_y.iter().enumerate() {
                        let _ = row;
                        dy0[col] += jr[col];
                    }
                }
                let mut dth = vec![0.0; m];
                for col in 0..m {
                    for jr in &j_th {
                        dth[col] += jr[col];
                    }
                }
                rows.push(GradRow {
                    regime: "forward_sens",
                    rel_err_vs_fd: vs_fd(&dy0, &dth),
                    rel_err_vs_dto: vs_dto(&dy0, &dth),
                    steps_fwd: fwd_steps,
                    steps_bwd: 0,
                    peak_records: 1,
                });
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown regime '{other}' (valid: {})",
                    GRADCHECK_REGIMES.join(", ")
                )))
            }
        }
    }
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.regime.to_string(),
                r.rel_err_vs_fd,
                r.rel_err_vs_dto,
                r.steps_fwd,
                r.steps_bwd,
                r.peak_records,
            )
        })
        .collect())
}

fn cmd_gradcheck(
    cli: &Cli,
    cfg: &FileConfig,
    regimes_arg: Option<String>,
    _seed: u64,
    reproducible: bool,
    output: Option<&str>,
) -> Result<()> {
    let problem = cfg.get_str("problem", &cli.problem, "linear_decay");
    let rtol = cfg.get_f64("rtol", cli.rtol, 1e-8)?;
    let atol = cfg.get_f64("atol", cli.atol, 1e-10)?;
    let dt = cfg.get_f64("dt", cli.dt, 0.01)?;
    let regimes: Vec<String> = match regimes_arg {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => GRADCHECK_REGIMES.iter().map(|s| s.to_string()).collect(),
    };
    let rows = gradcheck_rows(&problem, &regimes, rtol, atol, dt)?;
    let mut w = CsvWriter::new(
        &[
            "regime",
            "rel_err_vs_fd",
            "rel_err_vs_dto",
            "steps_fwd",
            "steps_bwd",
            "peak_records",
        ],
        reproducible,
    );
    for (regime, fd, dto, sf, sb, pk) in rows {
        w.row(&[
            regime,
            fmt(fd),
            fmt(dto),
            sf.to_string(),
            sb.to_string(),
            pk.to_string(),
        ]);
    }
    w.finish(output)
}

// ---------------------------------------------------------------------------
// brownian
// ---------------------------------------------------------------------------

/// Shuffles indices deterministically (Fisher-Yates over a counter stream).
fn shuffled_indices(n: usize, seed: Seed) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let r = (seed.normal(i as u64).abs() * 1e9) as usize % (i + 1);
        idx.swap(i, r);
    }
    idx
}

pub struct BrownianBenchResult {
    pub wall_ops: u64,
    pub cache_hits: Option<u64>,
    pub p_mean: f64,
    pub p_variance: f64,
}

/// Runs an access-pattern benchmark against one source, returning operation
/// counts and p-values for the increment statistics.
pub fn brownian_bench(
    source_name: &str,
    n_queries: usize,
    pattern: &str,
    prebuild: bool,
    cache_capacity: usize,
    seed_value: u64,
) -> Result<BrownianBenchResult> {
    let seed = Seed::from_u64(seed_value);
    let horizon = 1.0f64;
    let h = horizon / n_queries as f64;
    let order: Vec<usize> = match pattern {
        "forward" => (0..n_queries).collect(),
        "backward" => (0..n_queries).rev().collect(),
        "random" => shuffled_indices(n_queries, seed.child(999)),
        other => {
            return Err(Error::Config(format!(
                "unknown pattern '{other}' (valid: forward, backward, random)"
            )))
        }
    };
    let bounds = |j: usize| (j as f64 * h, (j + 1) as f64 * h);
    let mut zs: Vec<f64> = Vec::with_capacity(n_queries);
    let (wall_ops, cache_hits) = match source_name {
        "interval" => {
            let mut bi =
                BrownianInterval::<f64>::with_cache_capacity(seed, 1, horizon, cache_capacity)?;
            if prebuild {
                bi.prebuild_dyadic(h, cache_capacity)?;
            }
            bi.reset_stats();
            for &j in &order {
                let (s, t) = bounds(j);
                let w = bi.query(s, t)?;
                zs.push(w[0] / h.sqrt());
            }
            (
                bi.stats.sample_resolutions + bi.stats.traverse_visits,
                Some(bi.stats.cache_hits),
            )
        }
        "path" => {
            let mut bp = BrownianPath::<f64>::new(seed, 1, horizon)?;
            for &j in &order {
                let (s, t) = bounds(j);
                let w = bp.query(s, t)?;
                zs.push(w[0] / h.sqrt());
            }
            ((bp.n_points() as u64).saturating_sub(2), None)
        }
        "tree" => {
            let tree = VirtualBrownianTree::<f64>::new(seed, 1, horizon, 1e-7)?;
            let mut levels = 0u64;
            for &j in &order {
                let (s, t) = bounds(j);
                let (_, ws, l1) = tree.query_instrumented(s)?;
                let (_, wt, l2) = tree.query_instrumented(t)?;
                levels += l1 + l2;
                zs.push((wt[0] - ws[0]) / h.sqrt());
            }
            (levels, None)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown source '{other}' (valid: path, tree, interval)"
            )))
        }
    };
    // Increment statistics: the normalised increments of a disjoint
    // partition are i.i.d. standard normals.
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let sumsq: f64 = zs.iter().map(|z| z * z).sum();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_mean = 2.0 * (1.0 - normal.cdf((mean * n.sqrt()).abs()));
    let chi = ChiSquared::new(n).expect("valid dof");
    let cdf = chi.cdf(sumsq);
    let p_variance = 2.0 * cdf.min(1.0 - cdf);
    Ok(BrownianBenchResult {
        wall_ops,
        cache_hits,
        p_mean,
        p_variance,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_brownian(
    source: &str,
    queries: usize,
    pattern: &str,
    prebuild: bool,
    cache_capacity: usize,
    seed: u64,
    reproducible: bool,
    output: Option<&str>,
) -> Result<()> {
    if queries == 0 {
        return Err(Error::Config("need at least one query".into()));
    }
    let r = brownian_bench(source, queries, pattern, prebuild, cache_capacity, seed)?;
    let mut w = CsvWriter::new(
        &[
            "source",
            "pattern",
            "wall_ops",
            "cache_hits",
            "p_mean",
            "p_variance",
        ],
        reproducible,
    );
    w.row(&[
        source.to_string(),
        pattern.to_string(),
        r.wall_ops.to_string(),
        r.cache_hits.map(|c| c.to_string()).unwrap_or_default(),
        fmt(r.p_mean),
        fmt(r.p_variance),
    ]);
    w.finish(output)
}

// ---------------------------------------------------------------------------
// cnf2d
// ---------------------------------------------------------------------------

fn flow_field(name: &str, rate: f64) -> Result<AnalyticField<f64>> {
    match name {
        "zero" => Ok(AnalyticField::new(
            gradflow::FieldSpec {
                dim_in: 2,
                dim_out: 2,
                time_dependent: false,
                params_dim: 0,
            },
            vec![],
            |_t, _y, _p| vec![0.0, 0.0],
            |_t, _y, _p| vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            None,
        )),
        "contract" => Ok(AnalyticField::new(
            gradflow::FieldSpec {
                dim_in: 2,
                dim_out: 2,
                time_dependent: false,
                params_dim: 0,
            },
            vec![],
            move |_t, y: &[f64], _p| vec![-rate * y[0], -rate * y[1]],
            move |_t, _y, _p| vec![vec![-rate, 0.0], vec![0.0, -rate]],
            None,
        )),
        "swirl" => Ok(AnalyticField::new(
            gradflow::FieldSpec {
                dim_in: 2,
                dim_out: 2,
                time_dependent: false,
                params_dim: 0,
            },
            vec![],
            move |_t, y: &[f64], _p| vec![-rate * y[0] - y[1], y[0] - rate * y[1]],
            move |_t, _y, _p| vec![vec![-rate, -1.0], vec![1.0, -rate]],
            None,
        )),
        other => Err(Error::Config(format!(
            "unknown flow '{other}' (valid: zero, contract, swirl)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_cnf2d(
    cli: &Cli,
    cfg: &FileConfig,
    flow: &str,
    rate: f64,
    grid: usize,
    extent: f64,
    trace: &str,
    trace_samples: usize,
    seed: u64,
    reproducible: bool,
    output: Option<&str>,
) -> Result<()> {
    if grid < 2 || extent <= 0.0 {
        return Err(Error::Config("need grid >= 2 and extent > 0".into()));
    }
    let field = flow_field(flow, rate)?;
    let mode = match trace {
        "exact" => TraceMode::Exact,
        "hutchinson" => TraceMode::hutchinson(
            EpsDist::Rademacher,
            trace_samples,
            Seed::from_u64(seed),
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown trace mode '{other}' (valid: exact, hutchinson)"
            )))
        }
    };
    let tab = ButcherTableau::dopri5();
    let rtol = cfg.get_f64("rtol", cli.rtol, 1e-7)?;
    let atol = cfg.get_f64("atol", cli.atol, 1e-9)?;
    let solver_cfg = ControllerConfig::with_tols(rtol, atol);
    let mut w = CsvWriter::new(&["x", "y", "logp"], reproducible);
    for i in 0..grid {
        let x = -extent + 2.0 * extent * i as f64 / (grid - 1) as f64;
        for j in 0..grid {
            let y = -extent + 2.0 * extent * j as f64 / (grid - 1) as f64;
            let lp = cnf_logprob(
                &field,
                &std_normal_logdensity,
                &[x, y],
                0.0,
                1.0,
                &tab,
                &solver_cfg,
                &mode,
            )?;
            w.row(&[fmt(x), fmt(y), fmt(lp)]);
        }
    }
    w.finish(output)
}
