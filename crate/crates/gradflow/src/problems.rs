//! Named test problems with closed-form solutions, shared by the benchmark
//! commands and the acceptance suite.

use crate::brownian::BrownianSource;
use crate::error::{Error, Result};
use crate::field::{AnalyticField, FieldSpec, VectorField};
use crate::paths::{augment_series, build_interpolation, cde_to_ode, CdeOde, KnotRule, Scheme, TimeSeries};
use crate::real::Real;
use crate::sde::{NoiseKind, SdeField};

pub const PROBLEM_NAMES: &[&str] = &[
    "linear_decay",
    "rotation",
    "gbm_ito",
    "gbm_strat",
    "ou_timedep",
    "value_and_integral_cde",
];

// ---------------------------------------------------------------------------
// ODE problems
// ---------------------------------------------------------------------------

/// An ODE test problem: a parametrised field, an initial condition, and an
/// optional closed-form solution.
pub struct OdeProblem<T: Real> {
    pub name: &'static str,
    pub y0: Vec<T>,
    pub t0: T,
    pub t1: T,
    pub field: Box<dyn VectorField<T>>,
    pub exact: Option<Box<dyn Fn(T) -> Vec<T> + Send + Sync>>,
    /// Rebuilds the field with substituted parameters, for finite-difference
    /// oracles over theta.
    pub rebuild: Box<dyn Fn(&[T]) -> Box<dyn VectorField<T>> + Send + Sync>,
}

/// dy/dt = lambda y with lambda = -1, y0 = 1 on [0, 1]; theta = [lambda].
pub fn linear_decay<T: Real>() -> OdeProblem<T> {
    let lambda = -T::one();
    OdeProblem {
        name: "linear_decay",
        y0: vec![T::one()],
        t0: T::zero(),
        t1: T::one(),
        field: Box::new(AnalyticField::linear_scalar(lambda, 1)),
        exact: Some(Box::new(move |t: T| vec![(lambda * t).exp()])),
        rebuild: Box::new(|p: &[T]| Box::new(AnalyticField::linear_scalar(p[0], 1))),
    }
}

/// Planar rotation dy/dt = omega (y2, -y1) with omega = 1 on [0, 5];
/// theta = [omega].
pub fn rotation<T: Real>() -> OdeProblem<T> {
    let omega = T::one();
    OdeProblem {
        name: "rotation",
        y0: vec![T::one(), T::zero()],
        t0: T::zero(),
        t1: T::c(5.0),
        field: Box::new(AnalyticField::rotation(omega)),
        exact: Some(Box::new(move |t: T| {
            let a = omega * t;
            vec![a.cos(), -a.sin()]
        })),
        rebuild: Box::new(|p: &[T]| Box::new(AnalyticField::rotation(p[0]))),
    }
}

// ---------------------------------------------------------------------------
// SDE problems
// ---------------------------------------------------------------------------

type ExactPathwise<T> =
    Box<dyn Fn(T, &mut dyn BrownianSource<T>) -> Result<Vec<T>> + Send + Sync>;

/// An SDE test problem with a pathwise reference solution. The reference map
/// may query the Brownian source (the Brownian Interval's exact additivity
/// keeps those queries consistent with the solver's increments).
pub struct SdeProblem<T: Real> {
    pub name: &'static str,
    pub y0: Vec<T>,
    pub horizon: T,
    pub field: SdeField<T>,
    /// Reference solution the measured stepper should converge to.
    pub exact: ExactPathwise<T>,
    /// True when the diffusion is independent of y.
    pub additive: bool,
}

fn gbm_field<T: Real>(a: T, b: T) -> SdeField<T> {
    let drift = AnalyticField::new(
        FieldSpec {
            dim_in: 1,
            dim_out: 1,
            time_dependent: false,
            params_dim: 1,
        },
        vec![a],
        |_t, y, p| vec![p[0] * y[0]],
        |_t, _y, p| vec![vec![p[0]]],
        Some(Box::new(|_t, y: &[T], _p: &[T]| vec![vec![y[0]]])),
    );
    let diffusion = AnalyticField::new(
        FieldSpec {
            dim_in: 1,
            dim_out: 1,
            time_dependent: false,
            params_dim: 1,
        },
        vec![b],
        |_t, y, p| vec![p[0] * y[0]],
        |_t, _y, p| vec![vec![p[0]]],
        Some(Box::new(|_t, y: &[T], _p: &[T]| vec![vec![y[0]]])),
    );
    SdeField::new(Box::new(drift), Box::new(diffusion), NoiseKind::Scalar, 1)
        .expect("valid scalar-noise field")
}

/// Geometric Brownian motion dy = a y dt + b y dW in the Ito sense:
/// y(T) = y0 exp((a - b^2/2) T + b W(T)).
pub fn gbm_ito<T: Real>() -> SdeProblem<T> {
    let (a, b) = (T::c(0.7), T::c(0.9));
    SdeProblem {
        name: "gbm_ito",
        y0: vec![T::one()],
        horizon: T::one(),
        field: gbm_field(a, b),
        exact: Box::new(move |t1, source| {
            let w = source.increment(T::zero(), t1)?;
            Ok(vec![((a - T::half() * b * b) * t1 + b * w[0]).exp()])
        }),
        additive: false,
    }
}

/// The same field read as a Stratonovich SDE dy = a y dt + b y o dW:
/// y(T) = y0 exp(a T + b W(T)).
pub fn gbm_strat<T: Real>() -> SdeProblem<T> {
    let (a, b) = (T::c(0.7), T::c(0.9));
    SdeProblem {
        name: "gbm_strat",
        y0: vec![T::one()],
        horizon: T::one(),
        field: gbm_field(a, b),
        exact: Box::new(move |t1, source| {
            let w = source.increment(T::zero(), t1)?;
            Ok(vec![(a * t1 + b * w[0]).exp()])
        }),
        additive: false,
    }
}

/// A dyadic grid over [0, t1] built by repeated midpoint refinement, so the
/// points coincide exactly with Brownian-Interval node boundaries.
pub fn dyadic_grid<T: Real>(t1: T, levels: u32) -> Vec<T> {
    let mut pts = vec![T::zero(), t1];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(pts.len() * 2 - 1);
        for w in pts.windows(2) {
            next.push(w[0]);
            next.push(w[0] + (w[1] - w[0]) * T::half());
        }
        next.push(t1);
        pts = next;
    }
    pts
}

/// Time-dependent Ornstein-Uhlenbeck dy = (sin t - y) dt + sigma dW
/// (additive noise; Ito and Stratonovich coincide).
///
/// The pathwise reference evaluates the stochastic convolution
/// sigma int e^{s-T} dW(s) by its conditional expectation given the
/// increments on a fine dyadic grid; the residual is O(grid step) in RMS and
/// far below the measured solver errors.
pub fn ou_timedep<T: Real>() -> SdeProblem<T> {
    let sigma = T::c(0.4);
    let ref_levels = 11; // 2^11 grid cells for the reference convolution
    let drift = AnalyticField::new(
        FieldSpec {
            dim_in: 1,
            dim_out: 1,
            time_dependent: true,
            params_dim: 0,
        },
        vec![],
        |t: T, y, _p| vec![t.sin() - y[0]],
        |_t, _y, _p| vec![vec![-T::one()]],
        None,
    );
    let diffusion = AnalyticField::new(
        FieldSpec {
            dim_in: 1,
            dim_out: 1,
            time_dependent: false,
            params_dim: 0,
        },
        vec![],
        move |_t, _y, _p| vec![sigma],
        |_t, _y, _p| vec![vec![T::zero()]],
        None,
    );
    let field = SdeField::new(Box::new(drift), Box::new(diffusion), NoiseKind::Additive, 1)
        .expect("valid additive field");
    SdeProblem {
        name: "ou_timedep",
        y0: vec![T::one()],
        horizon: T::one(),
        field,
        exact: Box::new(move |t1, source| {
            let y0 = T::one();
            // Deterministic part: e^{-T} y0 + (sin T - cos T + e^{-T}) / 2.
            let det = (-t1).exp() * y0 + T::half() * (t1.sin() - t1.cos() + (-t1).exp());
            // Stochastic part, conditionally on the fine-grid increments:
            // sigma e^{-T} sum_j dW_j (e^{t_{j+1}} - e^{t_j}) / h_j.
            let grid = dyadic_grid(t1, ref_levels);
            let mut conv = T::zero();
            for w in grid.windows(2) {
                let dw = source.increment(w[0], w[1])?;
                let h = w[1] - w[0];
                conv += dw[0] * (w[1].exp() - w[0].exp()) / h;
            }
            Ok(vec![det + sigma * (-t1).exp() * conv])
        }),
        additive: true,
    }
}

// ---------------------------------------------------------------------------
// CDE problems
// ---------------------------------------------------------------------------

/// The value-and-integral CDE: f(y) = [[0, p1], [p2 y1, 0]] driven by the
/// control (t, sin t), so y(T) = (sin T, int_0^T sin). theta = (p1, p2)
/// starts at (1, 1).
pub struct ValueIntegralCde<T: Real> {
    pub t1: T,
    pub n_samples: usize,
}

impl<T: Real> ValueIntegralCde<T> {
    pub fn new(t1: T, n_samples: usize) -> Self {
        Self { t1, n_samples }
    }

    /// The raw series: one data channel sin(t) sampled uniformly.
    pub fn series(&self) -> TimeSeries<T> {
        let n = self.n_samples;
        let ts: Vec<T> = (0..n)
            .map(|j| self.t1 * T::from_usize(j).unwrap() / T::from_usize(n - 1).unwrap())
            .collect();
        let xs: Vec<Vec<T>> = ts.iter().map(|&t| vec![t.sin()]).collect();
        TimeSeries::new(ts, xs, vec!["x".into()]).expect("valid series")
    }

    /// The matrix-valued field with parameters (p1, p2).
    pub fn matrix_field(&self, params: &[T]) -> Box<dyn VectorField<T>> {
        let p = [params[0], params[1]];
        Box::new(AnalyticField::new(
            FieldSpec {
                dim_in: 2,
                dim_out: 4,
                time_dependent: false,
                params_dim: 2,
            },
            p.to_vec(),
            |_t, y, p| vec![T::zero(), p[0], p[1] * y[0], T::zero()],
            |_t, _y, p| {
                vec![
                    vec![T::zero(), T::zero()],
                    vec![T::zero(), T::zero()],
                    vec![p[1], T::zero()],
                    vec![T::zero(), T::zero()],
                ]
            },
            Some(Box::new(|_t, y: &[T], _p: &[T]| {
                vec![
                    vec![T::zero(), T::zero()],
                    vec![T::one(), T::zero()],
                    vec![T::zero(), y[0]],
                    vec![T::zero(), T::zero()],
                ]
            })),
        ))
    }

    /// Reduces to an ODE with the given scheme/knot rule and unit parameters.
    pub fn reduced(&self, scheme: Scheme, knot_rule: KnotRule) -> Result<CdeOde<T>> {
        self.reduced_with_params(scheme, knot_rule, &[T::one(), T::one()])
    }

    pub fn reduced_with_params(
        &self,
        scheme: Scheme,
        knot_rule: KnotRule,
        params: &[T],
    ) -> Result<CdeOde<T>> {
        let series = self.series();
        let augmented = augment_series(&series, true, false);
        let path = build_interpolation(&augmented, scheme, knot_rule)?;
        cde_to_ode(self.matrix_field(params), path)
    }

    pub fn y0(&self) -> Vec<T> {
        vec![T::zero(), T::zero()]
    }

    /// Exact terminal value (sin T, 1 - cos T) of the continuous problem.
    pub fn exact_terminal(&self) -> Vec<T> {
        vec![self.t1.sin(), T::one() - self.t1.cos()]
    }
}

// ---------------------------------------------------------------------------
// Solver probes shared by the benchmark commands and the acceptance suite
// ---------------------------------------------------------------------------

pub const ODE_SOLVER_NAMES: &[&str] = &[
    "euler",
    "heun",
    "midpoint",
    "rk4",
    "dopri5",
    "reversible_heun",
    "alf",
];

/// Terminal state of a fixed-step solve with a named ODE solver (one of
/// [`ODE_SOLVER_NAMES`]).
pub fn ode_solve_fixed<T: Real>(
    solver: &str,
    field: &dyn VectorField<T>,
    y0: &[T],
    t0: T,
    t1: T,
    dt: T,
) -> Result<Vec<T>> {
    use crate::ode::{integrate, ControllerConfig};
    use crate::reversible::{alf_step, revheun_step, AlfState, RevHeunState};
    use crate::tableau::ButcherTableau;
    match solver {
        "reversible_heun" => {
            let mut s = RevHeunState::init(field, t0, y0)?;
            step_to_end(t0, t1, dt, |h| {
                s = revheun_step(field, &s, h)?.0;
                Ok(())
            })?;
            Ok(s.y)
        }
        "alf" => {
            let mut s = AlfState::init(field, t0, y0)?;
            step_to_end(t0, t1, dt, |h| {
                s = alf_step(field, &s, h)?.0;
                Ok(())
            })?;
            Ok(s.y)
        }
        name => {
            let tab = ButcherTableau::by_name(name)?;
            let sol = integrate(
                field,
                y0,
                t0,
                t1,
                &tab,
                &ControllerConfig::default(),
                Some(dt),
                &[],
                &[],
            )?;
            Ok(sol.terminal().to_vec())
        }
    }
}

fn step_to_end<T: Real>(t0: T, t1: T, dt: T, mut step: impl FnMut(T) -> Result<()>) -> Result<()> {
    let span = t1 - t0;
    let n = (span / dt).round().max(T::one());
    let n_steps = n.as_f64() as usize;
    let h = span / T::from_usize(n_steps).unwrap();
    for _ in 0..n_steps {
        step(h)?;
    }
    Ok(())
}

/// Fixed-step refinement study of a named solver against a problem's closed
/// form: per-dt terminal errors plus the fitted log-log slope.
pub fn convergence_study<T: Real>(
    solver: &str,
    prob: &OdeProblem<T>,
    dts: &[T],
) -> Result<(Vec<T>, T)> {
    let exact = prob
        .exact
        .as_ref()
        .ok_or_else(|| Error::Config(format!("problem {} has no closed form", prob.name)))?;
    let y_true = exact(prob.t1);
    let mut errs = Vec::with_capacity(dts.len());
    for &dt in dts {
        let y = ode_solve_fixed(solver, prob.field.as_ref(), &prob.y0, prob.t0, prob.t1, dt)?;
        let err = y
            .iter()
            .zip(&y_true)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max);
        errs.push(err);
    }
    let slope = crate::ode::loglog_slope(dts, &errs);
    Ok((errs, slope))
}

/// Outcome of a linear stability probe at lambda dt = z.
#[derive(Debug, Clone, Copy)]
pub struct StabilityRun<T> {
    /// sup |y_n| over the whole run stayed within `bound` * |y0|.
    pub bounded: bool,
    pub sup_norm: T,
    /// First step at which |y_n| exceeded 1e6 * |y0|, if any.
    pub first_exceed_1e6: Option<usize>,
}

/// Runs a named solver on the Dahlquist test equation with complex
/// lambda dt = re + i im, realised as the 2-d real rotation-scaling system
/// y' = [[re, -im], [im, re]] y with dt = 1, from y0 = (1, 0).
pub fn stability_probe<T: Real>(
    solver: &str,
    re: T,
    im: T,
    n_steps: usize,
    bound: T,
) -> Result<StabilityRun<T>> {
    use crate::ode::rk_step;
    use crate::reversible::{alf_step, revheun_step, AlfState, RevHeunState};
    use crate::tableau::ButcherTableau;
    let field = AnalyticField::new(
        FieldSpec {
            dim_in: 2,
            dim_out: 2,
            time_dependent: false,
            params_dim: 0,
        },
        vec![],
        move |_t, y: &[T], _p| vec![re * y[0] - im * y[1], im * y[0] + re * y[1]],
        move |_t, _y, _p| vec![vec![re, -im], vec![im, re]],
        None,
    );
    let y0 = [T::one(), T::zero()];
    let dt = T::one();
    let give_up = T::c(1e9);
    let mut sup = T::one();
    let mut first_exceed = None;
    let mut record = |n: usize, y: &[T]| -> bool {
        let norm = crate::real::norm2(y);
        sup = sup.max(norm);
        if first_exceed.is_none() && norm > T::c(1e6) {
            first_exceed = Some(n);
        }
        norm > give_up || !norm.is_finite()
    };
    match solver {
        "reversible_heun" => {
            let mut s = RevHeunState::init(&field, T::zero(), &y0)?;
            for n in 1..=n_steps {
                s = match revheun_step(&field, &s, dt) {
                    Ok((next, _)) => next,
                    Err(Error::StepFailure { .. }) => {
                        return Ok(StabilityRun {
                            bounded: false,
                            sup_norm: T::infinity(),
                            first_exceed_1e6: first_exceed.or(Some(n)),
                        })
                    }
                    Err(e) => return Err(e),
                };
                if record(n, &s.y) {
                    break;
                }
            }
        }
        "alf" => {
            let mut s = AlfState::init(&field, T::zero(), &y0)?;
            for n in 1..=n_steps {
                s = match alf_step(&field, &s, dt) {
                    Ok((next, _)) => next,
                    Err(Error::StepFailure { .. }) => {
                        return Ok(StabilityRun {
                            bounded: false,
                            sup_norm: T::infinity(),
                            first_exceed_1e6: first_exceed.or(Some(n)),
                        })
                    }
                    Err(e) => return Err(e),
                };
                if record(n, &s.y) {
                    break;
                }
            }
        }
        name => {
            let tab = ButcherTableau::by_name(name)?;
            let mut y = y0.to_vec();
            for n in 1..=n_steps {
                y = match rk_step(&tab, &field, T::zero(), &y, dt) {
                    Ok(step) => step.y_next,
                    Err(Error::StepFailure { .. }) => {
                        return Ok(StabilityRun {
                            bounded: false,
                            sup_norm: T::infinity(),
                            first_exceed_1e6: first_exceed.or(Some(n)),
                        })
                    }
                    Err(e) => return Err(e),
                };
                if record(n, &y) {
                    break;
                }
            }
        }
    }
    Ok(StabilityRun {
        bounded: sup <= bound,
        sup_norm: sup,
        first_exceed_1e6: first_exceed,
    })
}

/// A constant row [1, 0, ..., 0]: driving it with (t, x...) computes the
/// elapsed time, the worked "length" example.
pub fn length_cde_field<T: Real>(d_x: usize) -> Box<dyn VectorField<T>> {
    Box::new(AnalyticField::new(
        FieldSpec {
            dim_in: 1,
            dim_out: d_x,
            time_dependent: false,
            params_dim: 0,
        },
        vec![],
        move |_t, _y, _p| {
            let mut row = vec![T::zero(); d_x];
            row[0] = T::one();
            row
        },
        move |_t, _y, _p| vec![vec![T::zero()]; d_x],
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate, ControllerConfig};
    use crate::tableau::ButcherTableau;

    #[test]
    fn ode_problem_exact_solutions_satisfy_their_fields() {
        for prob in [linear_decay::<f64>(), rotation::<f64>()] {
            let exact = prob.exact.as_ref().unwrap();
            let h = 1e-6;
            for &t in &[0.1, 0.5, 1.0] {
                let y = exact(t);
                let dy: Vec<f64> = exact(t + h)
                    .iter()
                    .zip(&exact(t - h))
                    .map(|(a, b)| (a - b) / (2.0 * h))
                    .collect();
                let f = prob.field.eval(t, &y).unwrap();
                for (a, b) in dy.iter().zip(&f) {
                    assert!((a - b).abs() < 1e-6, "{}: {a} vs {b}", prob.name);
                }
            }
        }
    }

    #[test]
    fn value_and_integral_reproduces_closed_form() {
        let prob = ValueIntegralCde::<f64>::new(2.0, 801);
        let cde = prob.reduced(Scheme::Linear, KnotRule::STime).unwrap();
        let jumps: Vec<f64> = cde.jumps().to_vec();
        let sol = integrate(
            &cde,
            &prob.y0(),
            0.0,
            2.0,
            &ButcherTableau::dopri5(),
            &ControllerConfig::with_tols(1e-8, 1e-10),
            Some(0.01),
            &jumps,
            &[],
        )
        .unwrap();
        let exact = prob.exact_terminal();
        assert!((sol.terminal()[0] - exact[0]).abs() < 1e-4);
        assert!((sol.terminal()[1] - exact[1]).abs() < 1e-4);
    }

    #[test]
    fn length_computation_y_of_n_is_n() {
        // Regularly sampled zero signal over t = 0..n: the length CDE
        // computes y(n) = n through the time channel.
        let n = 10usize;
        let ts: Vec<f64> = (0..=n).map(|j| j as f64).collect();
        let xs: Vec<Vec<f64>> = ts.iter().map(|_| vec![0.0]).collect();
        let series = TimeSeries::new(ts, xs, vec!["x".into()]).unwrap();
        let augmented = augment_series(&series, true, false);
        let path = build_interpolation(&augmented, Scheme::Linear, KnotRule::STime).unwrap();
        let cde = cde_to_ode(length_cde_field(2), path).unwrap();
        let sol = integrate(
            &cde,
            &[0.0],
            0.0,
            n as f64,
            &ButcherTableau::rk4(),
            &ControllerConfig::default(),
            Some(0.5),
            &[],
            &[],
        )
        .unwrap();
        assert!((sol.terminal()[0] - n as f64).abs() < 1e-10);
    }

    #[test]
    fn dyadic_grid_is_exact_midpoints() {
        let g = dyadic_grid(1.0f64, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[4], 0.5);
        assert_eq!(g[2], 0.25);
    }
}
