//! Explicit Runge-Kutta stepping with fixed and adaptive step-size control,
//! jump-aware integration, and the hypersolver step/residual formulas.

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::real::{all_finite, Real};
use crate::tableau::ButcherTableau;

// ---------------------------------------------------------------------------
// Step-size controller
// ---------------------------------------------------------------------------

/// Which (semi)norm the error ratio uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorNorm {
    /// RMS over all channels.
    RmsFull,
    /// RMS over channels `lo..hi` only; the rest carry no error weight.
    /// Backward adjoint solves use this to ignore the parameter-gradient
    /// channels, which satisfy an integral rather than an ODE.
    RmsSlice { lo: usize, hi: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct ControllerConfig<T> {
    pub rtol: T,
    pub atol: T,
    pub safety: T,
    pub ifactor: T,
    pub dfactor: T,
    pub norm: ErrorNorm,
    pub max_steps: usize,
}

impl<T: Real> Default for ControllerConfig<T> {
    fn default() -> Self {
        Self {
            rtol: T::c(1e-3),
            atol: T::c(1e-6),
            safety: T::c(0.9),
            ifactor: T::c(10.0),
            dfactor: T::c(0.2),
            norm: ErrorNorm::RmsFull,
            max_steps: 100_000,
        }
    }
}

impl<T: Real> ControllerConfig<T> {
    pub fn with_tols(rtol: f64, atol: f64) -> Self {
        Self {
            rtol: T::c(rtol),
            atol: T::c(atol),
            ..Self::default()
        }
    }
}

/// Error ratio r = ||y_err / SCALE|| with SCALE = atol + rtol * max(|y_prev|,
/// |y_cand|) elementwise. A step is acceptable when r <= 1.
pub fn error_ratio<T: Real>(
    y_prev: &[T],
    y_cand: &[T],
    y_err: &[T],
    cfg: &ControllerConfig<T>,
) -> T {
    assert_eq!(y_prev.len(), y_cand.len());
    assert_eq!(y_prev.len(), y_err.len());
    let (lo, hi) = match cfg.norm {
        ErrorNorm::RmsFull => (0, y_prev.len()),
        ErrorNorm::RmsSlice { lo, hi } => (lo, hi.min(y_prev.len())),
    };
    if hi <= lo {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in lo..hi {
        let scale = cfg.atol + cfg.rtol * y_prev[i].abs().max(y_cand[i].abs());
        let q = y_err[i] / scale;
        acc += q * q;
    }
    (acc / T::from_usize(hi - lo).unwrap()).sqrt()
}

/// Multiplicative step-size factor clamp(safety * r^(-1/order), dfactor,
/// ifactor); r = 0 clamps to ifactor. The result is treated as a constant for
/// all gradient purposes.
pub fn next_dt_factor<T: Real>(r: T, order: u32, cfg: &ControllerConfig<T>) -> T {
    if r <= T::zero() {
        return cfg.ifactor;
    }
    let factor = cfg.safety * r.powf(-T::one() / T::from_u32(order).unwrap());
    factor.max(cfg.dfactor).min(cfg.ifactor)
}

// ---------------------------------------------------------------------------
// Single explicit RK step
// ---------------------------------------------------------------------------

/// Output of one explicit Runge-Kutta step. The stages are returned so the
/// step can be replayed in reverse during backpropagation.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub y_next: Vec<T>,
    pub y_err: Option<Vec<T>>,
    pub stages: Vec<Vec<T>>,
}

/// One step of the tableau: k_i = f(t + c_i dt, y + dt sum_{j<i} a_ij k_j),
/// y_next = y + dt sum b_i k_i. Negative dt gives a backward-in-time step.
pub fn rk_step<T: Real>(
    tab: &ButcherTableau<T>,
    field: &dyn VectorField<T>,
    t: T,
    y: &[T],
    dt: T,
) -> Result<StepResult<T>> {
    rk_step_nudged(tab, field, t, y, dt, false, false)
}

/// As [`rk_step`], but with stage times at the step boundaries shifted a few
/// ulps into the step's interior. Used when a boundary sits on a declared
/// vector-field jump: the field's one-sided convention there would otherwise
/// leak the neighbouring segment's values into this step's stages.
fn rk_step_nudged<T: Real>(
    tab: &ButcherTableau<T>,
    field: &dyn VectorField<T>,
    t: T,
    y: &[T],
    dt: T,
    nudge_start: bool,
    nudge_end: bool,
) -> Result<StepResult<T>> {
    if dt == T::zero() {
        return Err(Error::Contract("rk_step: dt must be nonzero".into()));
    }
    let t_end = t + dt;
    let nudge = |boundary: T| T::epsilon() * T::c(8.0) * boundary.abs().max(T::one());
    let stage_time = |ci: T| -> T {
        let s = t + ci * dt;
        if nudge_end && s == t_end {
            return t_end - dt.signum() * nudge(t_end);
        }
        if nudge_start && s == t {
            return t + dt.signum() * nudge(t);
        }
        s
    };
    let d = y.len();
    let s = tab.stages();
    let mut stages: Vec<Vec<T>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut yi = y.to_vec();
        for (j, k) in stages.iter().enumerate() {
            let aij = tab.a[i][j];
            if aij != T::zero() {
                for q in 0..d {
                    yi[q] += dt * aij * k[q];
                }
            }
        }
        if !all_finite(&yi) {
            return Err(Error::StepFailure {
                t: t.as_f64(),
                evals: i,
            });
        }
        let k = field.eval(stage_time(tab.c[i]), &yi)?;
        if !all_finite(&k) {
            return Err(Error::StepFailure {
                t: t.as_f64(),
                evals: i + 1,
            });
        }
        stages.push(k);
    }
    let mut y_next = y.to_vec();
    for (i, k) in stages.iter().enumerate() {
        for q in 0..d {
            y_next[q] += dt * tab.b[i] * k[q];
        }
    }
    if !all_finite(&y_next) {
        return Err(Error::StepFailure {
            t: t.as_f64(),
            evals: s,
        });
    }
    let y_err = tab.b_embedded.as_ref().map(|be| {
        let mut err = vec![T::zero(); d];
        for (i, k) in stages.iter().enumerate() {
            let w = tab.b[i] - be[i];
            for q in 0..d {
                err[q] += dt * w * k[q];
            }
        }
        err
    });
    Ok(StepResult {
        y_next,
        y_err,
        stages,
    })
}

// ---------------------------------------------------------------------------
// Solution
// ---------------------------------------------------------------------------

/// One accepted step: the time, step size and state at the step start.
/// Rejected steps are not recorded; they carry no gradient.
#[derive(Debug, Clone)]
pub struct StepRecord<T> {
    pub t: T,
    pub dt: T,
    pub y: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Solution<T> {
    /// Saved times: t0, the requested save points and t1, in solve direction.
    pub ts: Vec<T>,
    pub ys: Vec<Vec<T>>,
    pub step_records: Vec<StepRecord<T>>,
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_fev: usize,
}

impl<T: Real> Solution<T> {
    pub fn terminal(&self) -> &[T] {
        self.ys.last().expect("solution has at least one state")
    }
}

// ---------------------------------------------------------------------------
// Initial step heuristic (Hairer, Norsett & Wanner, II.4)
// ---------------------------------------------------------------------------

fn initial_dt<T: Real>(
    field: &dyn VectorField<T>,
    t0: T,
    y0: &[T],
    direction: T,
    span: T,
    order: u32,
    cfg: &ControllerConfig<T>,
    n_fev: &mut usize,
) -> Result<T> {
    let scale: Vec<T> = y0
        .iter()
        .map(|&v| cfg.atol + cfg.rtol * v.abs())
        .collect();
    let f0 = field.eval(t0, y0)?;
    *n_fev += 1;
    let wrms = |v: &[T]| -> T {
        let n = T::from_usize(v.len()).unwrap();
        (v.iter()
            .zip(&scale)
            .map(|(&x, &s)| (x / s) * (x / s))
            .sum::<T>()
            / n)
            .sqrt()
    };
    let d0 = wrms(y0);
    let d1 = wrms(&f0);
    let tiny = T::c(1e-5);
    let mut h0 = if d0 < tiny || d1 < tiny {
        T::c(1e-6)
    } else {
        T::c(0.01) * d0 / d1
    };
    h0 = h0.min(span.abs());
    let y1: Vec<T> = y0
        .iter()
        .zip(&f0)
        .map(|(&y, &f)| y + direction * h0 * f)
        .collect();
    let f1 = field.eval(t0 + direction * h0, &y1)?;
    *n_fev += 1;
    let df: Vec<T> = f1.iter().zip(&f0).map(|(&a, &b)| a - b).collect();
    let d2 = wrms(&df) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= T::c(1e-15) {
        (h0 * T::c(1e-3)).max(T::c(1e-6))
    } else {
        (T::c(0.01) / dmax).powf(T::one() / T::from_u32(order + 1).unwrap())
    };
    Ok((T::c(100.0) * h0).min(h1).min(span.abs()))
}

// ---------------------------------------------------------------------------
// Integration loop
// ---------------------------------------------------------------------------

const MAX_CONSECUTIVE_FAILURES: usize = 25;

/// Integrates the field from t0 to t1 (either direction).
///
/// With `fixed_dt` every finite step is accepted; otherwise the embedded
/// error estimate drives accept/reject with the textbook controller. Every
/// jump point and save point is hit exactly by clipping dt. Jump points mark
/// time discontinuities of the vector field: the solver steps directly to
/// them instead of letting error control resolve the kink.
#[allow(clippy::too_many_arguments)]
pub fn integrate<T: Real>(
    field: &dyn VectorField<T>,
    y0: &[T],
    t0: T,
    t1: T,
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    fixed_dt: Option<T>,
    jumps: &[T],
    save_ts: &[T],
) -> Result<Solution<T>> {
    if t0 == t1 {
        return Err(Error::Contract("integrate: t0 must differ from t1".into()));
    }
    if !all_finite(y0) {
        return Err(Error::NumericInput("integrate: y0 has non-finite entries".into()));
    }
    if fixed_dt.is_none() && tab.b_embedded.is_none() {
        return Err(Error::Config(format!(
            "tableau of order {} has no embedded error weights; adaptive stepping needs one (pass fixed_dt)",
            tab.order
        )));
    }
    if let Some(h) = fixed_dt {
        if h <= T::zero() {
            return Err(Error::Config("integrate: fixed_dt must be > 0".into()));
        }
    }
    let direction = if t1 > t0 { T::one() } else { -T::one() };
    let (lo, hi) = (t0.min(t1), t0.max(t1));
    for &p in jumps.iter().chain(save_ts) {
        if p < lo || p > hi {
            return Err(Error::Contract(format!(
                "integrate: event time {p} outside [{lo}, {hi}]"
            )));
        }
    }

    // Targets the solve must land on exactly, in solve direction.
    let mut targets: Vec<T> = Vec::with_capacity(jumps.len() + save_ts.len() + 1);
    targets.extend(jumps.iter().copied());
    targets.extend(save_ts.iter().copied());
    targets.push(t1);
    targets.retain(|&p| (p - t0) * direction > T::zero());
    targets.sort_by(|a, b| {
        (*a * direction)
            .partial_cmp(&(*b * direction))
            .expect("finite targets")
    });
    targets.dedup();
    let is_save = |p: T| -> bool { p == t1 || save_ts.contains(&p) };

    let mut sol = Solution {
        ts: vec![t0],
        ys: vec![y0.to_vec()],
        step_records: Vec::new(),
        n_accepted: 0,
        n_rejected: 0,
        n_fev: 0,
    };
    if save_ts.contains(&t0) {
        // t0 is always recorded once; a save request there is already served.
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut target_idx = 0usize;
    let span = t1 - t0;
    let mut dt_mag = match fixed_dt {
        Some(h) => h,
        None => initial_dt(field, t0, y0, direction, span, tab.order, cfg, &mut sol.n_fev)?,
    };
    let mut consecutive_failures = 0usize;

    while target_idx < targets.len() {
        if sol.n_accepted + sol.n_rejected >= cfg.max_steps {
            return Err(Error::StepBudget {
                used: sol.n_accepted + sol.n_rejected,
                max_steps: cfg.max_steps,
                t0: t0.as_f64(),
                t1: t1.as_f64(),
            });
        }
        let target = targets[target_idx];
        let remaining = (target - t) * direction;
        // Land exactly on the target when the proposed step reaches (or
        // nearly reaches) it.
        let hitting = dt_mag >= remaining * (T::one() - T::c(1e-9));
        let dt = if hitting {
            target - t
        } else {
            direction * dt_mag
        };
        // Keep boundary stages inside the smooth segment: a step starting or
        // ending on a jump would otherwise evaluate the neighbouring segment
        // there, whichever one-sided convention the field uses.
        let nudge_end = hitting && jumps.contains(&target);
        let nudge_start = jumps.contains(&t);

        let step = match rk_step_nudged(tab, field, t, &y, dt, nudge_start, nudge_end) {
            Ok(s) => {
                sol.n_fev += s.stages.len();
                s
            }
            Err(Error::StepFailure { evals, .. }) => {
                sol.n_fev += evals;
                sol.n_rejected += 1;
                consecutive_failures += 1;
                if consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::BlowUp {
                        t: t.as_f64(),
                        detail: format!("{consecutive_failures} consecutive non-finite steps"),
                    });
                }
                if fixed_dt.is_some() {
                    return Err(Error::BlowUp {
                        t: t.as_f64(),
                        detail: "non-finite step under fixed step size".into(),
                    });
                }
                dt_mag *= cfg.dfactor;
                continue;
            }
            Err(e) => return Err(e),
        };
        consecutive_failures = 0;

        let accept = if fixed_dt.is_some() {
            true
        } else {
            let y_err = step.y_err.as_ref().expect("embedded weights checked");
            let r = error_ratio(&y, &step.y_next, y_err, cfg);
            let factor = next_dt_factor(r, tab.order, cfg);
            dt_mag *= factor;
            r <= T::one()
        };

        if accept {
            sol.step_records.push(StepRecord {
                t,
                dt,
                y: y.clone(),
            });
            sol.n_accepted += 1;
            y = step.y_next;
            if hitting {
                t = target;
                if is_save(target) {
                    sol.ts.push(t);
                    sol.ys.push(y.clone());
                }
                target_idx += 1;
            } else {
                t = t + dt;
            }
        } else {
            sol.n_rejected += 1;
        }
    }
    Ok(sol)
}

/// Convenience wrapper returning only the terminal state.
pub fn integrate_terminal<T: Real>(
    field: &dyn VectorField<T>,
    y0: &[T],
    t0: T,
    t1: T,
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    fixed_dt: Option<T>,
) -> Result<Vec<T>> {
    let sol = integrate(field, y0, t0, t1, tab, cfg, fixed_dt, &[], &[])?;
    Ok(sol.ys.into_iter().last().unwrap())
}

// ---------------------------------------------------------------------------
// Hypersolvers
// ---------------------------------------------------------------------------

/// One hypersolver step y + psi(t, y) dt + g(t, y, dt) dt^(q+1), where psi is
/// the base tableau's update rule and g is a learnt correction taking the
/// concatenated input [y, dt].
pub fn hypersolver_step<T: Real>(
    base: &ButcherTableau<T>,
    correction: &dyn VectorField<T>,
    field: &dyn VectorField<T>,
    t: T,
    y: &[T],
    dt: T,
    q: u32,
) -> Result<Vec<T>> {
    if q != base.order {
        return Err(Error::Contract(format!(
            "hypersolver_step: q = {q} does not match base order {}",
            base.order
        )));
    }
    if correction.dim_in() != y.len() + 1 || correction.dim_out() != y.len() {
        return Err(Error::Contract(
            "hypersolver_step: correction must map (y, dt) to the state dimension".into(),
        ));
    }
    let step = rk_step(base, field, t, y, dt)?;
    let mut input = y.to_vec();
    input.push(dt);
    let g = correction.eval(t, &input)?;
    let dt_pow = dt.powi(q as i32 + 1);
    Ok(step
        .y_next
        .iter()
        .zip(&g)
        .map(|(&yn, &gi)| yn + gi * dt_pow)
        .collect())
}

/// The hypersolver training target R = (y_true - y_prev - psi(t, y_prev) dt)
/// / dt^(q+1): the residual a learnt correction would have to match.
pub fn hypersolver_residual<T: Real>(
    y_prev: &[T],
    y_next_true: &[T],
    t: T,
    dt: T,
    base: &ButcherTableau<T>,
    field: &dyn VectorField<T>,
    q: u32,
) -> Result<Vec<T>> {
    if dt == T::zero() {
        return Err(Error::Contract("hypersolver_residual: dt must be nonzero".into()));
    }
    let step = rk_step(base, field, t, y_prev, dt)?;
    let dt_pow = dt.powi(q as i32 + 1);
    Ok(y_next_true
        .iter()
        .zip(&step.y_next)
        .map(|(&yt, &yb)| (yt - yb) / dt_pow)
        .collect())
}

/// Least-squares slope of log(err) against log(dt); the refinement-study
/// workhorse for convergence-order measurements.
pub fn loglog_slope<T: Real>(dts: &[T], errs: &[T]) -> T {
    assert_eq!(dts.len(), errs.len());
    let pts: Vec<(T, T)> = dts
        .iter()
        .zip(errs)
        .filter(|(_, &e)| e > T::zero())
        .map(|(&h, &e)| (h.ln(), e.ln()))
        .collect();
    let n = T::from_usize(pts.len()).unwrap();
    let mx = pts.iter().map(|p| p.0).sum::<T>() / n;
    let my = pts.iter().map(|p| p.1).sum::<T>() / n;
    let mut num = T::zero();
    let mut den = T::zero();
    for (x, y) in pts {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticField;

    fn decay() -> AnalyticField<f64> {
        AnalyticField::linear_scalar(-1.0, 1)
    }

    #[test]
    fn euler_step_hand_value() {
        let tab = ButcherTableau::euler();
        let s = rk_step(&tab, &decay(), 0.0, &[1.0], 0.5).unwrap();
        assert_eq!(s.y_next, vec![0.5]);
        assert!(s.y_err.is_none());
        assert_eq!(s.stages.len(), 1);
    }

    #[test]
    fn heun_step_symbolic_expansion() {
        // One Heun step on y' = lambda y is 1 + lh + (lh)^2/2.
        let lambda = -0.73f64;
        let h = 0.31f64;
        let tab = ButcherTableau::heun();
        let f = AnalyticField::linear_scalar(lambda, 1);
        let s = rk_step(&tab, &f, 0.0, &[1.0], h).unwrap();
        let lh = lambda * h;
        assert!((s.y_next[0] - (1.0 + lh + lh * lh / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn dopri5_error_estimate_is_order_five() {
        let tab = ButcherTableau::dopri5();
        let f = AnalyticField::linear_scalar(-1.0, 1);
        let dts: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
        let errs: Vec<f64> = dts
            .iter()
            .map(|&h| {
                let s = rk_step(&tab, &f, 0.0, &[1.0], h).unwrap();
                s.y_err.unwrap()[0].abs()
            })
            .collect();
        let slope = loglog_slope(&dts, &errs);
        assert!((slope - 5.0).abs() < 0.5, "slope {slope}");
    }

    #[test]
    fn error_ratio_hand_values() {
        let cfg = ControllerConfig::<f64>::default();
        // y_err exactly at SCALE -> r = 1.
        let y = [1.0, 1.0];
        let scale = cfg.atol + cfg.rtol;
        assert!((error_ratio(&y, &y, &[scale, scale], &cfg) - 1.0).abs() < 1e-12);
        // Zero error -> r = 0.
        assert_eq!(error_ratio(&y, &y, &[0.0, 0.0], &cfg), 0.0);
        // Hand evaluation of the formula.
        let r = error_ratio(&y, &y, &[1e-3, 1e-3], &cfg);
        assert!((r - 1e-3 / 1.001e-3).abs() < 1e-9, "r = {r}");
    }

    #[test]
    fn next_dt_factor_hand_values() {
        let cfg = ControllerConfig::<f64>::default();
        assert!((next_dt_factor(1.0, 5, &cfg) - 0.9).abs() < 1e-15);
        assert_eq!(next_dt_factor(0.0, 5, &cfg), 10.0);
        assert!((next_dt_factor(32.0, 5, &cfg) - 0.45).abs() < 1e-12);
        // Huge ratio clamps at dfactor.
        assert_eq!(next_dt_factor(1e12, 1, &cfg), 0.2);
    }

    #[test]
    fn integrate_linear_decay_default_tolerances() {
        let exact = (-1.0f64).exp();
        // At the default tolerances the textbook controller crosses [0, 1]
        // in two steps and lands within ~1.5e-4 of e^{-1} (scipy's RK45 with
        // the same controller gives 2.1e-4 here).
        let sol = integrate(
            &decay(),
            &[1.0],
            0.0,
            1.0,
            &ButcherTableau::dopri5(),
            &ControllerConfig::default(),
            None,
            &[],
            &[],
        )
        .unwrap();
        assert!((sol.terminal()[0] - exact).abs() < 2.5e-4);
        assert!(sol.n_accepted > 0);
        // Modest tightening brings it below 1e-4.
        let sol = integrate(
            &decay(),
            &[1.0],
            0.0,
            1.0,
            &ButcherTableau::dopri5(),
            &ControllerConfig::with_tols(3e-4, 1e-6),
            None,
            &[],
            &[],
        )
        .unwrap();
        assert!((sol.terminal()[0] - exact).abs() < 1e-4);
    }

    #[test]
    fn declared_jump_matches_chained_solves() {
        // Field with a time discontinuity at t = 0.5, declared to the solver.
        let f = AnalyticField::parameter_free(
            1,
            1,
            |t, y| {
                let rate: f64 = if t < 0.5 { -1.0 } else { -3.0 };
                vec![rate * y[0]]
            },
            |t, _y| {
                let rate: f64 = if t < 0.5 { -1.0 } else { -3.0 };
                vec![vec![rate]]
            },
        );
        // Reference: chain the two smooth segment restrictions.
        let seg1 = AnalyticField::linear_scalar(-1.0, 1);
        let seg2 = AnalyticField::linear_scalar(-3.0, 1);
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::default();
        let joint = integrate(&f, &[1.0], 0.0, 1.0, &tab, &cfg, Some(0.05), &[0.5], &[]).unwrap();
        let first = integrate(&seg1, &[1.0], 0.0, 0.5, &tab, &cfg, Some(0.05), &[], &[]).unwrap();
        let second = integrate(
            &seg2,
            first.terminal(),
            0.5,
            1.0,
            &tab,
            &cfg,
            Some(0.05),
            &[],
            &[],
        )
        .unwrap();
        assert!((joint.terminal()[0] - second.terminal()[0]).abs() <= 1e-12);
    }

    #[test]
    fn fixed_dt_step_count_is_exact() {
        let sol = integrate(
            &decay(),
            &[1.0],
            0.0,
            1.0,
            &ButcherTableau::rk4(),
            &ControllerConfig::default(),
            Some(0.1),
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(sol.n_accepted, 10);
        assert_eq!(sol.n_rejected, 0);
        assert_eq!(sol.n_fev, 4 * 10);
        assert_eq!(*sol.ts.last().unwrap(), 1.0);
    }

    #[test]
    fn save_points_are_hit_exactly() {
        let sol = integrate(
            &decay(),
            &[1.0],
            0.0,
            1.0,
            &ButcherTableau::dopri5(),
            &ControllerConfig::with_tols(1e-9, 1e-12),
            None,
            &[],
            &[0.25, 0.5, 0.75],
        )
        .unwrap();
        assert_eq!(sol.ts, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        for (&t, y) in sol.ts.iter().zip(&sol.ys) {
            assert!((y[0] - (-t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_time_round_trip_is_truncation_order() {
        let tab = ButcherTableau::rk4();
        let cfg = ControllerConfig::default();
        let dt = 0.05;
        let fwd = integrate(&decay(), &[1.0], 0.0, 1.0, &tab, &cfg, Some(dt), &[], &[]).unwrap();
        let back = integrate(
            &decay(),
            fwd.terminal(),
            1.0,
            0.0,
            &tab,
            &cfg,
            Some(dt),
            &[],
            &[],
        )
        .unwrap();
        let drift = (back.terminal()[0] - 1.0).abs();
        // Returns near y0 at the method's truncation order, but not exactly.
        assert!(drift < 10.0 * dt.powi(4), "drift {drift}");
        assert!(drift > 1e-13, "unexpectedly exact round trip: {drift}");
    }

    #[test]
    fn step_accounting_counts_rejections() {
        // lambda = -40 forces rejections at loose tolerance.
        let stiff = AnalyticField::linear_scalar(-40.0, 1);
        let tab = ButcherTableau::dopri5();
        let sol = integrate(
            &stiff,
            &[1.0],
            0.0,
            1.0,
            &tab,
            &ControllerConfig::default(),
            None,
            &[],
            &[],
        )
        .unwrap();
        assert!(sol.n_rejected > 0);
        // Two extra evaluations come from the initial step-size heuristic.
        assert_eq!(
            sol.n_fev,
            tab.stages() * (sol.n_accepted + sol.n_rejected) + 2
        );
    }

    #[test]
    fn order_sweep_euler_and_rk4() {
        for (tab, order) in [
            (ButcherTableau::euler(), 1.0),
            (ButcherTableau::rk4(), 4.0),
        ] {
            let dts: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
            let errs: Vec<f64> = dts
                .iter()
                .map(|&h| {
                    let sol = integrate(
                        &decay(),
                        &[1.0],
                        0.0,
                        1.0,
                        &tab,
                        &ControllerConfig::default(),
                        Some(h),
                        &[],
                        &[],
                    )
                    .unwrap();
                    (sol.terminal()[0] - (-1.0f64).exp()).abs()
                })
                .collect();
            let slope = loglog_slope(&dts, &errs);
            assert!(
                (slope - order).abs() < 0.5,
                "tableau order {order}: slope {slope}"
            );
        }
    }

    #[test]
    fn adaptive_without_embedded_weights_is_config_error() {
        let r = integrate(
            &decay(),
            &[1.0],
            0.0,
            1.0,
            &ButcherTableau::rk4(),
            &ControllerConfig::default(),
            None,
            &[],
            &[],
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn step_budget_error() {
        let cfg = ControllerConfig::<f64> {
            max_steps: 3,
            ..Default::default()
        };
        let r = integrate(
            &decay(),
            &[1.0],
            0.0,
            1.0,
            &ButcherTableau::dopri5(),
            &cfg,
            Some(1e-3),
            &[],
            &[],
        );
        assert!(matches!(r, Err(Error::StepBudget { .. })));
    }

    #[test]
    fn blow_up_is_reported() {
        // y' = y^2 from y0 = 1 blows up at t = 1.
        let f = AnalyticField::parameter_free(
            1,
            1,
            |_t, y| vec![y[0] * y[0]],
            |_t, y| vec![vec![2.0 * y[0]]],
        );
        let r = integrate(
            &f,
            &[1.0],
            0.0,
            2.0,
            &ButcherTableau::dopri5(),
            &ControllerConfig::default(),
            None,
            &[],
            &[],
        );
        assert!(matches!(
            r,
            Err(Error::BlowUp { .. }) | Err(Error::StepBudget { .. })
        ));
    }

    #[test]
    fn hypersolver_zero_correction_matches_base() {
        let zero = crate::field::Mlp::<f64>::init(&[2, 1], crate::field::Activation::Tanh, 0, 0.0)
            .unwrap();
        let tab = ButcherTableau::euler();
        let y = [0.8];
        let base = rk_step(&tab, &decay(), 0.0, &y, 0.1).unwrap();
        let hyper = hypersolver_step(&tab, &zero, &decay(), 0.0, &y, 0.1, 1).unwrap();
        assert_eq!(hyper, base.y_next);
    }

    #[test]
    fn hypersolver_euler_constant_correction_hand_expansion() {
        let c = 0.37;
        let correction = AnalyticField::parameter_free(
            2,
            1,
            move |_t, _in| vec![c],
            |_t, _in| vec![vec![0.0, 0.0]],
        );
        let y = [0.8];
        let dt = 0.05;
        let out = hypersolver_step(
            &ButcherTableau::euler(),
            &correction,
            &decay(),
            0.0,
            &y,
            dt,
            1,
        )
        .unwrap();
        let expected = y[0] + (-y[0]) * dt + c * dt * dt;
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn hypersolver_correction_vanishes_faster_than_base() {
        let c = 1.0;
        let correction = AnalyticField::parameter_free(
            2,
            1,
            move |_t, _in| vec![c],
            |_t, _in| vec![vec![0.0, 0.0]],
        );
        let y = [1.0];
        let mut prev_ratio = f64::INFINITY;
        for k in 1..6 {
            let dt = 2f64.powi(-k);
            let base = rk_step(&ButcherTableau::euler(), &decay(), 0.0, &y, dt)
                .unwrap()
                .y_next[0];
            let hyper = hypersolver_step(
                &ButcherTableau::euler(),
                &correction,
                &decay(),
                0.0,
                &y,
                dt,
                1,
            )
            .unwrap()[0];
            let ratio = (hyper - base).abs() / (base - y[0]).abs();
            assert!(ratio < prev_ratio);
            prev_ratio = ratio;
        }
        assert!(prev_ratio < 0.05);
    }

    #[test]
    fn hypersolver_residual_examples() {
        let tab = ButcherTableau::euler();
        let f = decay();
        // Exact base step -> zero residual.
        let y = [1.0];
        let dt = 0.25;
        let base = rk_step(&tab, &f, 0.0, &y, dt).unwrap().y_next;
        let r = hypersolver_residual(&y, &base, 0.0, dt, &tab, &f, 1).unwrap();
        assert_eq!(r, vec![0.0]);
        // Taylor limit: R -> lambda^2/2 as dt -> 0 for the true solution.
        let lambda = -1.0f64;
        for &dt in &[0.1, 0.05, 0.025] {
            let y_true = [(lambda * dt).exp()];
            let r = hypersolver_residual(&y, &y_true, 0.0, dt, &tab, &f, 1).unwrap();
            assert!(
                (r[0] - lambda * lambda / 2.0).abs() < dt,
                "dt {dt}: residual {}",
                r[0]
            );
        }
        // Halving dt leaves the residual approximately invariant.
        let r1 = hypersolver_residual(&y, &[(0.1f64 * lambda).exp()], 0.0, 0.1, &tab, &f, 1)
            .unwrap()[0];
        let r2 = hypersolver_residual(&y, &[(0.05f64 * lambda).exp()], 0.0, 0.05, &tab, &f, 1)
            .unwrap()[0];
        assert!((r1 - r2).abs() / r1.abs() < 0.05);
    }
}
