//! Backpropagation through differential-equation solves.
//!
//! Three regimes are provided:
//!
//! * discretise-then-optimise ([`dto_backprop`]): replay the solver's
//!   accepted steps in reverse and chain-rule through their arithmetic —
//!   exact for the discretised model;
//! * optimise-then-discretise ([`otd_ode_backprop`] and friends): solve the
//!   continuous adjoint equations backward in time, optionally with
//!   interpolated or checkpointed forward values, for ODEs, CDEs and
//!   Stratonovich SDEs;
//! * forward sensitivity ([`forward_sensitivity`]): carry the full Jacobians
//!   forward.
//!
//! The backward adjoint state is stacked as [y, a_y, a_theta]. The a_theta
//! block satisfies an integral rather than an ODE, which is why the adjoint
//! seminorm excludes it from step-size control.

use crate::brownian::BrownianSource;
use crate::error::{Error, Result};
use crate::field::{FieldSpec, VectorField};
use crate::ode::{integrate, rk_step, ControllerConfig, ErrorNorm, Solution};
use crate::paths::CdeOde;
use crate::real::Real;
use crate::sde::{SdeField, SdeStepper};
use crate::tableau::ButcherTableau;

// ---------------------------------------------------------------------------
// Options and layout
// ---------------------------------------------------------------------------

/// Error norm for the backward adjoint solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    RmsFull,
    /// RMS over the y and a_y blocks only (a_theta is merely an integral).
    /// Setting `include_y: false` also drops the y block.
    AdjointSeminorm { include_y: bool },
}

impl NormMode {
    fn to_error_norm(self, d: usize) -> ErrorNorm {
        match self {
            NormMode::RmsFull => ErrorNorm::RmsFull,
            NormMode::AdjointSeminorm { include_y: true } => ErrorNorm::RmsSlice { lo: 0, hi: 2 * d },
            NormMode::AdjointSeminorm { include_y: false } => {
                ErrorNorm::RmsSlice { lo: d, hi: 2 * d }
            }
        }
    }
}

/// Layout of the stacked adjoint state [y, a_y, a_theta].
#[derive(Debug, Clone, Copy)]
pub struct StackedLayout {
    pub d: usize,
    pub m: usize,
}

impl StackedLayout {
    pub fn len(&self) -> usize {
        2 * self.d + self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A stacked adjoint state, split into named views.
#[derive(Debug, Clone)]
pub struct AdjointState<T> {
    pub t: T,
    pub y: Vec<T>,
    pub a_y: Vec<T>,
    pub a_theta: Vec<T>,
}

impl<T: Real> AdjointState<T> {
    /// Terminal condition: a_theta starts at zero.
    pub fn terminal(t: T, y: &[T], dl_dy: &[T], m: usize) -> Self {
        Self {
            t,
            y: y.to_vec(),
            a_y: dl_dy.to_vec(),
            a_theta: vec![T::zero(); m],
        }
    }

    pub fn pack(&self) -> Vec<T> {
        let mut z = self.y.clone();
        z.extend_from_slice(&self.a_y);
        z.extend_from_slice(&self.a_theta);
        z
    }

    pub fn unpack(t: T, z: &[T], layout: StackedLayout) -> Self {
        Self {
            t,
            y: z[..layout.d].to_vec(),
            a_y: z[layout.d..2 * layout.d].to_vec(),
            a_theta: z[2 * layout.d..].to_vec(),
        }
    }
}

/// RMS seminorm over the y and a_y slices of a stacked state; the a_theta
/// slice never contributes. With `include_y: false` only a_y contributes.
pub fn adjoint_seminorm<T: Real>(state: &[T], layout: StackedLayout, include_y: bool) -> T {
    let (lo, hi) = if include_y {
        (0, 2 * layout.d)
    } else {
        (layout.d, 2 * layout.d)
    };
    crate::real::rms(&state[lo..hi])
}

// ---------------------------------------------------------------------------
// Discretise-then-optimise replay
// ---------------------------------------------------------------------------

/// Backpropagates through the recorded accepted steps of a forward solve.
///
/// `cotangents` holds (time, dL/dy at that time) pairs; each time must be a
/// boundary of the recorded discretisation (a save point or t0/t1). Step
/// sizes are treated as constants, and rejected steps carry no gradient.
pub fn dto_backprop<T: Real>(
    sol: &Solution<T>,
    field: &dyn VectorField<T>,
    tab: &ButcherTableau<T>,
    cotangents: &[(T, Vec<T>)],
) -> Result<(Vec<T>, Vec<T>)> {
    if sol.step_records.is_empty() {
        return Err(Error::Contract(
            "dto_backprop: solution has no step records".into(),
        ));
    }
    let d = sol.step_records[0].y.len();
    let m = field.params_dim();
    let t0 = sol.step_records[0].t;
    // Boundary times: the start of each subsequent record, then the final
    // solution time (records store exact landing times).
    let n = sol.step_records.len();
    let mut boundaries = Vec::with_capacity(n);
    for rec in sol.step_records.iter().skip(1) {
        boundaries.push(rec.t);
    }
    boundaries.push(*sol.ts.last().expect("non-empty solution"));

    let mut used = vec![false; cotangents.len()];
    let mut g = vec![T::zero(); d];
    let mut theta_grad = vec![T::zero(); m];
    for idx in (0..n).rev() {
        let t_end = boundaries[idx];
        for (ci, (ct, cv)) in cotangents.iter().enumerate() {
            if !used[ci] && *ct == t_end {
                if cv.len() != d {
                    return Err(Error::Contract(
                        "dto_backprop: cotangent length mismatch".into(),
                    ));
                }
                for (gi, &ci_v) in g.iter_mut().zip(cv) {
                    *gi += ci_v;
                }
                used[ci] = true;
            }
        }
        let rec = &sol.step_records[idx];
        pull_back_rk_step(field, tab, rec.t, &rec.y, rec.dt, &mut g, &mut theta_grad)?;
    }
    for (ci, (ct, cv)) in cotangents.iter().enumerate() {
        if !used[ci] {
            if *ct == t0 {
                for (gi, &v) in g.iter_mut().zip(cv) {
                    *gi += v;
                }
            } else {
                return Err(Error::Contract(format!(
                    "dto_backprop: cotangent time {ct} matches no recorded boundary"
                )));
            }
        }
    }
    Ok((g, theta_grad))
}

/// Chain rule through one explicit RK step, recomputing its stages.
/// `g` enters as dL/dy_next and leaves as dL/dy; theta gradients accumulate.
fn pull_back_rk_step<T: Real>(
    field: &dyn VectorField<T>,
    tab: &ButcherTableau<T>,
    t: T,
    y: &[T],
    dt: T,
    g: &mut Vec<T>,
    theta_grad: &mut [T],
) -> Result<()> {
    let step = rk_step(tab, field, t, y, dt)?;
    let s = tab.stages();
    let d = y.len();
    // Stage states u_i = y + dt sum_{j<i} a_ij k_j.
    let mut stage_states = Vec::with_capacity(s);
    for i in 0..s {
        let mut u = y.to_vec();
        for (j, k) in step.stages.iter().enumerate().take(i) {
            let a = tab.a[i][j];
            if a != T::zero() {
                for q in 0..d {
                    u[q] += dt * a * k[q];
                }
            }
        }
        stage_states.push(u);
    }
    // m_l = J_l^T lambda_l with lambda_l = dt (b_l g + sum_{q>l} a_ql m_q).
    let mut m_vecs: Vec<Vec<T>> = vec![Vec::new(); s];
    let mut g_new = g.clone();
    for l in (0..s).rev() {
        let mut lambda = vec![T::zero(); d];
        for q in 0..d {
            lambda[q] = dt * tab.b[l] * g[q];
        }
        for q_stage in l + 1..s {
            let a = tab.a[q_stage][l];
            if a != T::zero() {
                for q in 0..d {
                    lambda[q] += dt * a * m_vecs[q_stage][q];
                }
            }
        }
        let pull = field.vjp(t + tab.c[l] * dt, &stage_states[l], &lambda)?;
        for (tg, &p) in theta_grad.iter_mut().zip(&pull.grad_params) {
            *tg += p;
        }
        for q in 0..d {
            g_new[q] += pull.grad_y[q];
        }
        m_vecs[l] = pull.grad_y;
    }
    *g = g_new;
    Ok(())
}

// ---------------------------------------------------------------------------
// Continuous adjoints (optimise-then-discretise)
// ---------------------------------------------------------------------------

/// The stacked backward system [y, a_y, a_theta] for an ODE: y follows f,
/// a_y follows -a_y^T df/dy, a_theta follows -a_y^T df/dtheta.
struct StackedAdjointField<'a, T: Real> {
    field: &'a dyn VectorField<T>,
    layout: StackedLayout,
}

impl<T: Real> VectorField<T> for StackedAdjointField<'_, T> {
    fn spec(&self) -> FieldSpec {
        FieldSpec {
            dim_in: self.layout.len(),
            dim_out: self.layout.len(),
            time_dependent: true,
            params_dim: 0,
        }
    }

    fn eval(&self, t: T, z: &[T]) -> Result<Vec<T>> {
        let d = self.layout.d;
        let y = &z[..d];
        let a_y = &z[d..2 * d];
        let f = self.field.eval(t, y)?;
        let pull = self.field.vjp(t, y, a_y)?;
        let mut out = f;
        out.extend(pull.grad_y.iter().map(|&v| -v));
        out.extend(pull.grad_params.iter().map(|&v| -v));
        Ok(out)
    }

    fn vjp(&self, _t: T, _y: &[T], _c: &[T]) -> Result<crate::field::VjpResult<T>> {
        Err(Error::Unsupported("stacked adjoint field has no vjp".into()))
    }

    fn jvp(&self, _t: T, _y: &[T], _v: &[T]) -> Result<Vec<T>> {
        Err(Error::Unsupported("stacked adjoint field has no jvp".into()))
    }
}

/// Result of a continuous-adjoint backward solve.
#[derive(Debug, Clone)]
pub struct OtdResult<T> {
    pub dl_dy0: Vec<T>,
    pub dl_dtheta: Vec<T>,
    /// y(t0) as reconstructed by the backward solve (drifts from the true
    /// initial state by the solver's truncation error).
    pub y0_reconstructed: Vec<T>,
    /// Backward-pass step counters, for norm-mode comparisons.
    pub n_accepted: usize,
    pub n_rejected: usize,
}

/// Solves the continuous adjoint equations backward from (y_T, dL/dy_T, 0),
/// re-integrating y alongside. `jumps` marks vector-field time
/// discontinuities the backward solver must step to exactly.
#[allow(clippy::too_many_arguments)]
pub fn otd_ode_backprop<T: Real>(
    field: &dyn VectorField<T>,
    y_terminal: &[T],
    t_terminal: T,
    t0: T,
    dl_dy_terminal: &[T],
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    norm_mode: NormMode,
    jumps: &[T],
) -> Result<OtdResult<T>> {
    let layout = StackedLayout {
        d: y_terminal.len(),
        m: field.params_dim(),
    };
    let stacked = StackedAdjointField { field, layout };
    let z_terminal =
        AdjointState::terminal(t_terminal, y_terminal, dl_dy_terminal, layout.m).pack();
    let mut cfg = *cfg;
    cfg.norm = norm_mode.to_error_norm(layout.d);
    let sol = integrate(
        &stacked,
        &z_terminal,
        t_terminal,
        t0,
        tab,
        &cfg,
        None,
        jumps,
        &[],
    )?;
    let z0 = sol.terminal();
    let state = AdjointState::unpack(t0, z0, layout);
    Ok(OtdResult {
        dl_dy0: state.a_y,
        dl_dtheta: state.a_theta,
        y0_reconstructed: state.y,
        n_accepted: sol.n_accepted,
        n_rejected: sol.n_rejected,
    })
}

// ---------------------------------------------------------------------------
// Interpolated adjoints
// ---------------------------------------------------------------------------

/// Cubic Hermite interpolant of recorded (t, y, dy/dt) knots.
struct HermiteTrajectory<T> {
    ts: Vec<T>,
    ys: Vec<Vec<T>>,
    slopes: Vec<Vec<T>>,
}

impl<T: Real> HermiteTrajectory<T> {
    fn new(field: &dyn VectorField<T>, knots: &[(T, Vec<T>)]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Contract(
                "interpolated adjoint: need at least two knots".into(),
            ));
        }
        let mut ts = Vec::with_capacity(knots.len());
        let mut ys = Vec::with_capacity(knots.len());
        let mut slopes = Vec::with_capacity(knots.len());
        for (t, y) in knots {
            ts.push(*t);
            slopes.push(field.eval(*t, y)?);
            ys.push(y.clone());
        }
        if !(ts.windows(2).all(|w| w[0] < w[1]) || ts.windows(2).all(|w| w[0] > w[1])) {
            return Err(Error::Contract(
                "interpolated adjoint: knot times must be monotone".into(),
            ));
        }
        if ts[0] > ts[ts.len() - 1] {
            ts.reverse();
            ys.reverse();
            slopes.reverse();
        }
        Ok(Self { ts, ys, slopes })
    }

    fn eval(&self, t: T) -> Result<Vec<T>> {
        let n = self.ts.len();
        if t < self.ts[0] || t > self.ts[n - 1] {
            return Err(Error::Contract(format!(
                "interpolated adjoint: query {t} outside knot range [{}, {}]",
                self.ts[0],
                self.ts[n - 1]
            )));
        }
        let idx = self.ts.partition_point(|&k| k <= t).saturating_sub(1).min(n - 2);
        let (t0, t1) = (self.ts[idx], self.ts[idx + 1]);
        let h = t1 - t0;
        let u = (t - t0) / h;
        // Standard Hermite basis.
        let h00 = (T::one() + T::two() * u) * (T::one() - u) * (T::one() - u);
        let h10 = u * (T::one() - u) * (T::one() - u);
        let h01 = u * u * (T::c(3.0) - T::two() * u);
        let h11 = u * u * (u - T::one());
        let d = self.ys[0].len();
        let mut out = vec![T::zero(); d];
        for q in 0..d {
            out[q] = h00 * self.ys[idx][q]
                + h10 * h * self.slopes[idx][q]
                + h01 * self.ys[idx + 1][q]
                + h11 * h * self.slopes[idx + 1][q];
        }
        Ok(out)
    }
}

/// The (a_y, a_theta) backward system with y supplied by an interpolant.
struct InterpolatedAdjointField<'a, T: Real> {
    field: &'a dyn VectorField<T>,
    trajectory: &'a HermiteTrajectory<T>,
    d: usize,
    m: usize,
}

impl<T: Real> VectorField<T> for InterpolatedAdjointField<'_, T> {
    fn spec(&self) -> FieldSpec {
        FieldSpec {
            dim_in: self.d + self.m,
            dim_out: self.d + self.m,
            time_dependent: true,
            params_dim: 0,
        }
    }

    fn eval(&self, t: T, z: &[T]) -> Result<Vec<T>> {
        let a_y = &z[..self.d];
        let y = self.trajectory.eval(t)?;
        let pull = self.field.vjp(t, &y, a_y)?;
        let mut out: Vec<T> = pull.grad_y.iter().map(|&v| -v).collect();
        out.extend(pull.grad_params.iter().map(|&v| -v));
        Ok(out)
    }

    fn vjp(&self, _t: T, _y: &[T], _c: &[T]) -> Result<crate::field::VjpResult<T>> {
        Err(Error::Unsupported("interpolated adjoint field has no vjp".into()))
    }

    fn jvp(&self, _t: T, _y: &[T], _v: &[T]) -> Result<Vec<T>> {
        Err(Error::Unsupported("interpolated adjoint field has no jvp".into()))
    }
}

/// Continuous adjoint with y(t) taken from a cubic Hermite interpolation of
/// recorded forward knots (values plus f-slopes), instead of re-integrating
/// y backward. The backward solve then shares the forward pass's stability.
pub fn otd_interpolated_backprop<T: Real>(
    field: &dyn VectorField<T>,
    knots: &[(T, Vec<T>)],
    dl_dy_terminal: &[T],
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    norm_mode: NormMode,
) -> Result<OtdResult<T>> {
    let trajectory = HermiteTrajectory::new(field, knots)?;
    let d = dl_dy_terminal.len();
    let m = field.params_dim();
    let t0 = trajectory.ts[0];
    let t_terminal = *trajectory.ts.last().unwrap();
    let stacked = InterpolatedAdjointField {
        field,
        trajectory: &trajectory,
        d,
        m,
    };
    let mut z_terminal = dl_dy_terminal.to_vec();
    z_terminal.extend(vec![T::zero(); m]);
    let mut cfg = *cfg;
    // The stacked state here is (a_y, a_theta): the seminorm keeps a_y only.
    cfg.norm = match norm_mode {
        NormMode::RmsFull => ErrorNorm::RmsFull,
        NormMode::AdjointSeminorm { .. } => ErrorNorm::RmsSlice { lo: 0, hi: d },
    };
    let sol = integrate(
        &stacked,
        &z_terminal,
        t_terminal,
        t0,
        tab,
        &cfg,
        None,
        &[],
        &[],
    )?;
    let z0 = sol.terminal();
    Ok(OtdResult {
        dl_dy0: z0[..d].to_vec(),
        dl_dtheta: z0[d..].to_vec(),
        y0_reconstructed: trajectory.ys[0].clone(),
        n_accepted: sol.n_accepted,
        n_rejected: sol.n_rejected,
    })
}

// ---------------------------------------------------------------------------
// Checkpointed adjoints
// ---------------------------------------------------------------------------

/// Result of [`otd_checkpointed_backprop`]: gradients plus the largest
/// y-reconstruction residual against the stored checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointedResult<T> {
    pub dl_dy0: Vec<T>,
    pub dl_dtheta: Vec<T>,
    pub max_y_residual: T,
    pub n_accepted: usize,
    pub n_rejected: usize,
}

/// Continuous adjoint with the backward y restarted from stored forward
/// checkpoints, resetting accumulated truncation drift segment by segment.
/// Checkpoints must include t0 and the terminal time and be time-ordered.
#[allow(clippy::too_many_arguments)]
pub fn otd_checkpointed_backprop<T: Real>(
    field: &dyn VectorField<T>,
    checkpoints: &[(T, Vec<T>)],
    dl_dy_terminal: &[T],
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    norm_mode: NormMode,
) -> Result<CheckpointedResult<T>> {
    if checkpoints.len() < 2 {
        return Err(Error::Contract(
            "checkpointed adjoint: need at least (t0, y0) and (T, yT)".into(),
        ));
    }
    if !checkpoints.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(Error::Contract(
            "checkpointed adjoint: checkpoints must be strictly time-ordered".into(),
        ));
    }
    let d = dl_dy_terminal.len();
    let m = field.params_dim();
    let mut a_y = dl_dy_terminal.to_vec();
    let mut a_theta = vec![T::zero(); m];
    let mut max_res = T::zero();
    let mut n_acc = 0;
    let mut n_rej = 0;
    for seg in (0..checkpoints.len() - 1).rev() {
        let (t_hi, ref y_hi) = checkpoints[seg + 1];
        let (t_lo, ref y_lo) = checkpoints[seg];
        let layout = StackedLayout { d, m };
        let stacked = StackedAdjointField { field, layout };
        let mut z = y_hi.clone();
        z.extend_from_slice(&a_y);
        z.extend_from_slice(&a_theta);
        let mut cfg_seg = *cfg;
        cfg_seg.norm = norm_mode.to_error_norm(d);
        let sol = integrate(&stacked, &z, t_hi, t_lo, tab, &cfg_seg, None, &[], &[])?;
        n_acc += sol.n_accepted;
        n_rej += sol.n_rejected;
        let z0 = sol.terminal();
        let res = crate::real::max_rel_err(&z0[..d], y_lo);
        max_res = max_res.max(res);
        a_y = z0[d..2 * d].to_vec();
        a_theta = z0[2 * d..].to_vec();
    }
    Ok(CheckpointedResult {
        dl_dy0: a_y,
        dl_dtheta: a_theta,
        max_y_residual: max_res,
        n_accepted: n_acc,
        n_rejected: n_rej,
    })
}

// ---------------------------------------------------------------------------
// CDE adjoints
// ---------------------------------------------------------------------------

/// Continuous adjoint for a CDE dy = f(y) dx: reduces the backwards-in-time
/// linear CDE da = -a^T (df/dy) dx to an ODE through dx/dt and solves it
/// stacked with y. The path's knots are declared as jumps automatically.
#[allow(clippy::too_many_arguments)]
pub fn otd_cde_backprop<T: Real>(
    cde: &CdeOde<T>,
    y_terminal: &[T],
    t_terminal: T,
    t0: T,
    dl_dy_terminal: &[T],
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    norm_mode: NormMode,
) -> Result<OtdResult<T>> {
    let (lo, hi) = (t0.min(t_terminal), t0.max(t_terminal));
    let jumps: Vec<T> = cde
        .jumps()
        .iter()
        .copied()
        .filter(|&p| p > lo && p < hi)
        .collect();
    otd_ode_backprop(
        cde,
        y_terminal,
        t_terminal,
        t0,
        dl_dy_terminal,
        tab,
        cfg,
        norm_mode,
        &jumps,
    )
}

// ---------------------------------------------------------------------------
// SDE adjoints
// ---------------------------------------------------------------------------

/// Continuous adjoint for a Stratonovich SDE: the stacked (y, a_y, a_theta)
/// system is itself a Stratonovich SDE, solved backward with Heun's method
/// using the identical noise increments served by the forward pass's source.
#[allow(clippy::too_many_arguments)]
pub fn otd_sde_backprop<T: Real>(
    f: &SdeField<T>,
    source: &mut dyn BrownianSource<T>,
    y_terminal: &[T],
    dl_dy_terminal: &[T],
    n_steps: usize,
    stepper: SdeStepper,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    match stepper {
        SdeStepper::StratonovichHeun => {}
        other => {
            return Err(Error::Unsupported(format!(
                "otd_sde_backprop supports the Stratonovich Heun stepper only \
                 (got {other:?}); Ito steppers would need a double correction"
            )))
        }
    }
    if n_steps == 0 {
        return Err(Error::Contract("otd_sde_backprop: need n_steps >= 1".into()));
    }
    let d = f.dim_y;
    let m = f.drift.params_dim();
    let m_sig = f.diffusion.params_dim();
    if m_sig != 0 && m_sig != m {
        return Err(Error::Contract(
            "otd_sde_backprop: drift and diffusion must share the parameter layout \
             (or the diffusion be parameter-free)"
                .into(),
        ));
    }
    let t1 = source.horizon();
    let dt = t1 / T::from_usize(n_steps).unwrap();

    // Backward drift and diffusion-times-increment for the stacked state.
    let drift_eval = |t: T, z: &[T]| -> Result<Vec<T>> {
        let y = &z[..d];
        let a_y = &z[d..2 * d];
        let mu = f.drift.eval(t, y)?;
        let pull = f.drift.vjp(t, y, a_y)?;
        let mut out = mu;
        out.extend(pull.grad_y.iter().map(|&v| -v));
        out.extend(pull.grad_params.iter().map(|&v| -v));
        Ok(out)
    };
    let noise_eval = |t: T, z: &[T], dw: &[T]| -> Result<Vec<T>> {
        let y = &z[..d];
        let a_y = &z[d..2 * d];
        let sigma = f.diffusion.eval(t, y)?;
        let mut out = f.sigma_matvec(&sigma, dw);
        // Cotangent on the diffusion output representing a_y^T d(sigma dW).
        let cot = match f.noise_kind {
            crate::sde::NoiseKind::Diagonal => {
                a_y.iter().zip(dw).map(|(&a, &w)| a * w).collect::<Vec<T>>()
            }
            crate::sde::NoiseKind::Scalar => a_y.iter().map(|&a| a * dw[0]).collect(),
            crate::sde::NoiseKind::General | crate::sde::NoiseKind::Additive => {
                let mut c = vec![T::zero(); d * f.dim_w];
                for i in 0..d {
                    for k in 0..f.dim_w {
                        c[i * f.dim_w + k] = a_y[i] * dw[k];
                    }
                }
                c
            }
        };
        let pull = f.diffusion.vjp(t, y, &cot)?;
        out.extend(pull.grad_y.iter().map(|&v| -v));
        if m_sig == 0 {
            out.extend(std::iter::repeat(T::zero()).take(m));
        } else {
            out.extend(pull.grad_params.iter().map(|&v| -v));
        }
        Ok(out)
    };

    let mut z = y_terminal.to_vec();
    z.extend_from_slice(dl_dy_terminal);
    z.extend(vec![T::zero(); m]);
    let width = 2 * d + m;
    for j in (0..n_steps).rev() {
        let t_hi = if j + 1 == n_steps {
            t1
        } else {
            T::from_usize(j + 1).unwrap() * dt
        };
        let t_lo = T::from_usize(j).unwrap() * dt;
        let h = t_hi - t_lo;
        let dw = source.increment(t_lo, t_hi)?;
        // Heun, backward in time: the same increments with reversed sign of
        // the time step.
        let mu0 = drift_eval(t_hi, &z)?;
        let n0 = noise_eval(t_hi, &z, &dw)?;
        let mut pred = vec![T::zero(); width];
        for q in 0..width {
            pred[q] = z[q] - mu0[q] * h - n0[q];
        }
        let mu1 = drift_eval(t_lo, &pred)?;
        let n1 = noise_eval(t_lo, &pred, &dw)?;
        for q in 0..width {
            z[q] = z[q] - T::half() * (mu0[q] + mu1[q]) * h - T::half() * (n0[q] + n1[q]);
        }
    }
    Ok((
        z[d..2 * d].to_vec(),
        z[2 * d..].to_vec(),
        z[..d].to_vec(),
    ))
}

// ---------------------------------------------------------------------------
// Forward sensitivity
// ---------------------------------------------------------------------------

/// Carries J_y = dy/dy0 and J_theta = dy/dtheta forward alongside y:
/// dJ_y/dt = (df/dy) J_y from the identity, dJ_theta/dt = (df/dy) J_theta +
/// df/dtheta from zero. Suitable when d * m is small.
struct SensitivityField<'a, T: Real> {
    field: &'a dyn VectorField<T>,
    d: usize,
    m: usize,
}

impl<T: Real> SensitivityField<'_, T> {
    fn width(&self) -> usize {
        self.d + self.d * self.d + self.d * self.m
    }
}

impl<T: Real> VectorField<T> for SensitivityField<'_, T> {
    fn spec(&self) -> FieldSpec {
        FieldSpec {
            dim_in: self.width(),
            dim_out: self.width(),
            time_dependent: true,
            params_dim: 0,
        }
    }

    fn eval(&self, t: T, z: &[T]) -> Result<Vec<T>> {
        let (d, m) = (self.d, self.m);
        let y = &z[..d];
        let mut out = self.field.eval(t, y)?;
        // J_y columns evolve by jvp; layout is column-major blocks.
        for col in 0..d {
            let tangent: Vec<T> = (0..d).map(|row| z[d + col * d + row]).collect();
            let dj = self.field.jvp(t, y, &tangent)?;
            out.extend(dj);
        }
        if m > 0 {
            // df/dtheta rows via unit-cotangent vjps.
            let mut df_dtheta = vec![vec![T::zero(); m]; d];
            for row in 0..d {
                let mut cot = vec![T::zero(); d];
                cot[row] = T::one();
                df_dtheta[row] = self.field.vjp(t, y, &cot)?.grad_params;
            }
            for col in 0..m {
                let tangent: Vec<T> = (0..d).map(|row| z[d + d * d + col * d + row]).collect();
                let dj = self.field.jvp(t, y, &tangent)?;
                for row in 0..d {
                    out.push(dj[row] + df_dtheta[row][col]);
                }
            }
        }
        Ok(out)
    }

    fn vjp(&self, _t: T, _y: &[T], _c: &[T]) -> Result<crate::field::VjpResult<T>> {
        Err(Error::Unsupported("sensitivity field has no vjp".into()))
    }

    fn jvp(&self, _t: T, _y: &[T], _v: &[T]) -> Result<Vec<T>> {
        Err(Error::Unsupported("sensitivity field has no jvp".into()))
    }
}

/// Forward sensitivities (J_y, J_theta) at t1, as row-major matrices
/// d x d and d x m. At t1 = t0 they are the identity and zero.
pub fn forward_sensitivity<T: Real>(
    field: &dyn VectorField<T>,
    y0: &[T],
    t0: T,
    t1: T,
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let d = y0.len();
    let m = field.params_dim();
    let identity = |i: usize, j: usize| if i == j { T::one() } else { T::zero() };
    if t0 == t1 {
        let j_y = (0..d)
            .map(|i| (0..d).map(|j| identity(i, j)).collect())
            .collect();
        let j_theta = vec![vec![T::zero(); m]; d];
        return Ok((j_y, j_theta));
    }
    let wrapper = SensitivityField { field, d, m };
    let mut z = y0.to_vec();
    for col in 0..d {
        for row in 0..d {
            z.push(identity(row, col));
        }
    }
    z.extend(vec![T::zero(); d * m]);
    let sol = integrate(&wrapper, &z, t0, t1, tab, cfg, None, &[], &[])?;
    let zt = sol.terminal();
    let mut j_y = vec![vec![T::zero(); d]; d];
    for col in 0..d {
        for row in 0..d {
            j_y[row][col] = zt[d + col * d + row];
        }
    }
    let mut j_theta = vec![vec![T::zero(); m]; d];
    for col in 0..m {
        for row in 0..d {
            j_theta[row][col] = zt[d + d * d + col * d + row];
        }
    }
    Ok((j_y, j_theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Activation, AnalyticField, Mlp};
    use crate::ode::integrate;
    use crate::real::max_rel_err;

    fn decay(lambda: f64) -> AnalyticField<f64> {
        AnalyticField::linear_scalar(lambda, 1)
    }

    #[test]
    fn dto_one_euler_step_hand_jacobian() {
        let lambda = -0.6;
        let dt = 0.3;
        let f = decay(lambda);
        let tab = ButcherTableau::euler();
        let sol = integrate(
            &f,
            &[1.0],
            0.0,
            dt,
            &tab,
            &ControllerConfig::default(),
            Some(dt),
            &[],
            &[],
        )
        .unwrap();
        let g = 0.8;
        let (dl_dy0, dl_dl) = dto_backprop(&sol, &f, &tab, &[(dt, vec![g])]).unwrap();
        assert!((dl_dy0[0] - (1.0 + lambda * dt) * g).abs() < 1e-14);
        assert!((dl_dl[0] - dt * g).abs() < 1e-14); // dL/dlambda = y0 dt g
    }

    #[test]
    fn dto_zero_cotangent_gives_zero() {
        let f = decay(-1.0);
        let tab = ButcherTableau::rk4();
        let sol = integrate(
            &f,
            &[1.0],
            0.0,
            1.0,
            &tab,
            &ControllerConfig::default(),
            Some(0.1),
            &[],
            &[],
        )
        .unwrap();
        let (dy, dth) = dto_backprop(&sol, &f, &tab, &[(1.0, vec![0.0])]).unwrap();
        assert_eq!(dy, vec![0.0]);
        assert_eq!(dth, vec![0.0]);
    }

    #[test]
    fn dto_matches_loss_finite_differences_on_mlp() {
        let mlp = Mlp::<f64>::init(&[2, 8, 2], Activation::Tanh, 12, 1.0).unwrap();
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-8, 1e-10);
        let y0 = [0.4, -0.7];
        let sol = integrate(&mlp, &y0, 0.0, 1.0, &tab, &cfg, None, &[], &[]).unwrap();
        // L = sum(y(T)).
        let cot = vec![1.0, 1.0];
        let t_end = *sol.ts.last().unwrap();
        let (dl_dy0, dl_dth) = dto_backprop(&sol, &mlp, &tab, &[(t_end, cot)]).unwrap();
        // Finite differences of the loss through the full solve.
        let h = 1e-6;
        let theta = mlp.params();
        let solve_loss = |field: &Mlp<f64>, y0: &[f64]| -> f64 {
            let s = integrate(field, y0, 0.0, 1.0, &tab, &cfg, None, &[], &[]).unwrap();
            s.terminal().iter().sum()
        };
        for j in 0..2 {
            let mut yp = y0;
            let mut ym = y0;
            yp[j] += h;
            ym[j] -= h;
            let fd = (solve_loss(&mlp, &yp) - solve_loss(&mlp, &ym)) / (2.0 * h);
            let scale = 1.0f64.max(fd.abs());
            assert!(
                ((dl_dy0[j] - fd) / scale).abs() < 1e-4,
                "state grad {j}: {} vs {fd}",
                dl_dy0[j]
            );
        }
        for j in [0usize, 7, theta.len() - 1] {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fp = solve_loss(&mlp.with_flat_params(&tp).unwrap(), &y0);
            let fm = solve_loss(&mlp.with_flat_params(&tm).unwrap(), &y0);
            let fd = (fp - fm) / (2.0 * h);
            let scale = 1.0f64.max(fd.abs());
            assert!(
                ((dl_dth[j] - fd) / scale).abs() < 1e-4,
                "theta grad {j}: {} vs {fd}",
                dl_dth[j]
            );
        }
    }

    #[test]
    fn otd_linear_decay_closed_form_adjoint() {
        let lambda = -1.0;
        let f = decay(lambda);
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-9, 1e-12);
        let t_end = 2.0;
        let y_t = [(lambda * t_end as f64).exp()];
        let g = 1.0;
        let r = otd_ode_backprop(
            &f,
            &y_t,
            t_end,
            0.0,
            &[g],
            &tab,
            &cfg,
            NormMode::RmsFull,
            &[],
        )
        .unwrap();
        // a_y(0) = e^{lambda T} g.
        let expect = (lambda * t_end as f64).exp() * g;
        assert!((r.dl_dy0[0] - expect).abs() < 1e-7, "{}", r.dl_dy0[0]);
        // dL/dlambda = T e^{lambda T} for y0 = 1.
        let expect_th = t_end * (lambda * t_end as f64).exp();
        assert!((r.dl_dtheta[0] - expect_th).abs() < 1e-6);
        // y is reconstructed back to its initial value.
        assert!((r.y0_reconstructed[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn otd_zero_terminal_cotangent() {
        let f = decay(-0.5);
        let r = otd_ode_backprop(
            &f,
            &[0.6],
            1.0,
            0.0,
            &[0.0],
            &ButcherTableau::dopri5(),
            &ControllerConfig::default(),
            NormMode::RmsFull,
            &[],
        )
        .unwrap();
        assert_eq!(r.dl_dy0, vec![0.0]);
        assert_eq!(r.dl_dtheta, vec![0.0]);
    }

    #[test]
    fn seminorm_ignores_a_theta() {
        let layout = StackedLayout { d: 1, m: 3 };
        let state = [3.0, 4.0, 100.0, -50.0, 7.0];
        let v = adjoint_seminorm(&state, layout, true);
        assert!((v - 12.5f64.sqrt()).abs() < 1e-15); // sqrt((9+16)/2) = 3.5355
        let mut perturbed = state;
        perturbed[2] = -1e6;
        perturbed[4] = 42.0;
        assert_eq!(v, adjoint_seminorm(&perturbed, layout, true));
        // With a_theta = 0 it equals the full RMS over (y, a_y).
        let state0 = [3.0, 4.0, 0.0, 0.0, 0.0];
        assert_eq!(
            adjoint_seminorm(&state0, layout, true),
            crate::real::rms(&state0[..2])
        );
        // Excluding y keeps a_y only.
        assert_eq!(adjoint_seminorm(&state, layout, false), 4.0);
    }

    #[test]
    fn interpolated_matches_plain_otd_when_interpolation_is_exact() {
        // Time-only field: y(t) is exactly cubic-representable (linear).
        let f = AnalyticField::parameter_free(
            1,
            1,
            |t, _y| vec![2.0 * t + 1.0],
            |_t, _y| vec![vec![0.0]],
        );
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-9, 1e-12);
        let sol = integrate(&f, &[0.0], 0.0, 1.0, &tab, &cfg, None, &[], &[0.5]).unwrap();
        let knots: Vec<(f64, Vec<f64>)> = sol
            .ts
            .iter()
            .zip(&sol.ys)
            .map(|(&t, y)| (t, y.clone()))
            .collect();
        let plain = otd_ode_backprop(
            &f,
            sol.terminal(),
            1.0,
            0.0,
            &[1.0],
            &tab,
            &cfg,
            NormMode::RmsFull,
            &[],
        )
        .unwrap();
        let interp =
            otd_interpolated_backprop(&f, &knots, &[1.0], &tab, &cfg, NormMode::RmsFull).unwrap();
        assert!(max_rel_err(&plain.dl_dy0, &interp.dl_dy0) < 1e-10);
    }

    #[test]
    fn interpolated_rejects_out_of_range_queries() {
        let f = decay(-1.0);
        let knots = vec![(0.0, vec![1.0]), (1.0, vec![0.37])];
        let trajectory = HermiteTrajectory::new(&f, &knots).unwrap();
        assert!(trajectory.eval(1.5).is_err());
        assert!(trajectory.eval(0.99).is_ok());
    }

    #[test]
    fn checkpointed_single_segment_equals_plain_otd() {
        let mlp = Mlp::<f64>::init(&[2, 6, 2], Activation::Silu, 5, 1.0).unwrap();
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-9, 1e-12);
        let y0 = [0.3, -0.2];
        let sol = integrate(&mlp, &y0, 0.0, 1.0, &tab, &cfg, None, &[], &[]).unwrap();
        let y_t = sol.terminal().to_vec();
        let dl = [1.0, -1.0];
        let plain = otd_ode_backprop(
            &mlp,
            &y_t,
            1.0,
            0.0,
            &dl,
            &tab,
            &cfg,
            NormMode::RmsFull,
            &[],
        )
        .unwrap();
        let ckpt = otd_checkpointed_backprop(
            &mlp,
            &[(0.0, y0.to_vec()), (1.0, y_t.clone())],
            &dl,
            &tab,
            &cfg,
            NormMode::RmsFull,
        )
        .unwrap();
        assert!(max_rel_err(&plain.dl_dy0, &ckpt.dl_dy0) < 1e-12);
        assert!(max_rel_err(&plain.dl_dtheta, &ckpt.dl_dtheta) < 1e-12);
        // Unordered checkpoints are rejected.
        assert!(otd_checkpointed_backprop(
            &mlp,
            &[(1.0, y_t.clone()), (0.0, y0.to_vec())],
            &dl,
            &tab,
            &cfg,
            NormMode::RmsFull,
        )
        .is_err());
    }

    #[test]
    fn checkpoint_density_shrinks_reconstruction_residual() {
        // Forward-unstable direction: lambda > 0 makes the backward y drift.
        let f = decay(1.5);
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-6, 1e-9);
        let t_end = 3.0;
        let mut residuals = Vec::new();
        for n_ckpt in [1usize, 2, 4, 8] {
            let ts: Vec<f64> = (0..=n_ckpt)
                .map(|k| t_end * k as f64 / n_ckpt as f64)
                .collect();
            let checkpoints: Vec<(f64, Vec<f64>)> = ts
                .iter()
                .map(|&t| (t, vec![(1.5 * t as f64).exp()]))
                .collect();
            let r = otd_checkpointed_backprop(
                &f,
                &checkpoints,
                &[1.0],
                &tab,
                &cfg,
                NormMode::RmsFull,
            )
            .unwrap();
            residuals.push(r.max_y_residual);
        }
        for w in residuals.windows(2) {
            assert!(w[1] <= w[0] * 1.001, "residuals not monotone: {residuals:?}");
        }
    }

    #[test]
    fn forward_sensitivity_linear_and_duality() {
        let lambda = -0.8;
        let f = decay(lambda);
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-9, 1e-12);
        let (j_y, j_th) = forward_sensitivity(&f, &[1.0], 0.0, 1.0, &tab, &cfg).unwrap();
        assert!((j_y[0][0] - (lambda as f64).exp()).abs() < 1e-7);
        // dy(T)/dlambda = T e^{lambda T} y0.
        assert!((j_th[0][0] - (lambda as f64).exp()).abs() < 1e-6);
        // t1 = t0 short-circuits to identity and zero.
        let (j_y0, j_th0) = forward_sensitivity(&f, &[1.0], 0.5, 0.5, &tab, &cfg).unwrap();
        assert_eq!(j_y0, vec![vec![1.0]]);
        assert_eq!(j_th0, vec![vec![0.0]]);
        // Duality: J_y^T cot equals the reverse-mode dL/dy0.
        let y_t = [(lambda as f64).exp()];
        let r = otd_ode_backprop(
            &f,
            &y_t,
            1.0,
            0.0,
            &[1.0],
            &tab,
            &cfg,
            NormMode::RmsFull,
            &[],
        )
        .unwrap();
        assert!((j_y[0][0] - r.dl_dy0[0]).abs() < 1e-6);
    }
}
