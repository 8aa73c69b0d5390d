//! Algebraically reversible steppers and exact-gradient backpropagation.
//!
//! A reversible stepper's prior state is a closed-form function of its next
//! state, so the backward pass reconstructs the forward trajectory instead of
//! storing it, and the computed gradients are precisely the
//! discretise-then-optimise gradients of the forward discretisation — in O(1)
//! memory.

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::real::{all_finite, axpy, Real};

// ---------------------------------------------------------------------------
// Reversible Heun
// ---------------------------------------------------------------------------

/// State carried by the reversible Heun method: the solution y, the auxiliary
/// solution-like variable y_hat, and the cached drift f_cached = f(t, y_hat).
#[derive(Debug, Clone, PartialEq)]
pub struct RevHeunState<T> {
    pub t: T,
    pub y: Vec<T>,
    pub y_hat: Vec<T>,
    pub f_cached: Vec<T>,
}

impl<T: Real> RevHeunState<T> {
    /// Initialises with y_hat = y and f_cached = f(t, y).
    pub fn init(field: &dyn VectorField<T>, t: T, y: &[T]) -> Result<Self> {
        Ok(Self {
            t,
            y: y.to_vec(),
            y_hat: y.to_vec(),
            f_cached: field.eval(t, y)?,
        })
    }
}

/// One forward reversible-Heun step; also returns the error estimate
/// (f_next - f_cached) * dt / 2 for adaptive control.
pub fn revheun_step<T: Real>(
    field: &dyn VectorField<T>,
    s: &RevHeunState<T>,
    dt: T,
) -> Result<(RevHeunState<T>, Vec<T>)> {
    if dt == T::zero() {
        return Err(Error::Contract("revheun_step: dt must be nonzero".into()));
    }
    let d = s.y.len();
    let t_next = s.t + dt;
    let mut y_hat_next = vec![T::zero(); d];
    for i in 0..d {
        y_hat_next[i] = T::two() * s.y[i] - s.y_hat[i] + s.f_cached[i] * dt;
    }
    if !all_finite(&y_hat_next) {
        return Err(Error::StepFailure {
            t: s.t.as_f64(),
            evals: 0,
        });
    }
    let f_next = field.eval(t_next, &y_hat_next)?;
    if !all_finite(&f_next) {
        return Err(Error::StepFailure {
            t: s.t.as_f64(),
            evals: 1,
        });
    }
    let mut y_next = s.y.clone();
    let mut err = vec![T::zero(); d];
    for i in 0..d {
        y_next[i] += T::half() * (s.f_cached[i] + f_next[i]) * dt;
        err[i] = (f_next[i] - s.f_cached[i]) * dt * T::half();
    }
    Ok((
        RevHeunState {
            t: t_next,
            y: y_next,
            y_hat: y_hat_next,
            f_cached: f_next,
        },
        err,
    ))
}

/// Reconstructs the prior reversible-Heun state exactly (up to floating-point
/// association) from the next one.
pub fn revheun_reverse<T: Real>(
    field: &dyn VectorField<T>,
    s_next: &RevHeunState<T>,
    dt: T,
) -> Result<RevHeunState<T>> {
    let d = s_next.y.len();
    let t = s_next.t - dt;
    let mut y_hat = vec![T::zero(); d];
    for i in 0..d {
        y_hat[i] = T::two() * s_next.y[i] - s_next.y_hat[i] - s_next.f_cached[i] * dt;
    }
    let f = field.eval(t, &y_hat)?;
    let mut y = s_next.y.clone();
    for i in 0..d {
        y[i] -= T::half() * (s_next.f_cached[i] + f[i]) * dt;
    }
    Ok(RevHeunState {
        t,
        y,
        y_hat,
        f_cached: f,
    })
}

// ---------------------------------------------------------------------------
// Asynchronous leapfrog
// ---------------------------------------------------------------------------

/// State carried by the asynchronous leapfrog method: the solution y and the
/// velocity-like variable v.
#[derive(Debug, Clone, PartialEq)]
pub struct AlfState<T> {
    pub t: T,
    pub y: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AlfState<T> {
    /// Initialises with v = f(t, y).
    pub fn init(field: &dyn VectorField<T>, t: T, y: &[T]) -> Result<Self> {
        Ok(Self {
            t,
            y: y.to_vec(),
            v: field.eval(t, y)?,
        })
    }
}

/// One forward ALF step; also returns the error estimate (v_next - v) / 2.
pub fn alf_step<T: Real>(
    field: &dyn VectorField<T>,
    s: &AlfState<T>,
    dt: T,
) -> Result<(AlfState<T>, Vec<T>)> {
    if dt == T::zero() {
        return Err(Error::Contract("alf_step: dt must be nonzero".into()));
    }
    let d = s.y.len();
    let half_dt = dt * T::half();
    let t_mid = s.t + half_dt;
    let mut y_mid = s.y.clone();
    axpy(&mut y_mid, half_dt, &s.v);
    if !all_finite(&y_mid) {
        return Err(Error::StepFailure {
            t: s.t.as_f64(),
            evals: 0,
        });
    }
    let v_mid = field.eval(t_mid, &y_mid)?;
    if !all_finite(&v_mid) {
        return Err(Error::StepFailure {
            t: s.t.as_f64(),
            evals: 1,
        });
    }
    let mut y_next = s.y.clone();
    axpy(&mut y_next, dt, &v_mid);
    let mut v_next = vec![T::zero(); d];
    let mut err = vec![T::zero(); d];
    for i in 0..d {
        v_next[i] = T::two() * v_mid[i] - s.v[i];
        err[i] = (v_next[i] - s.v[i]) * T::half();
    }
    Ok((
        AlfState {
            t: s.t + dt,
            y: y_next,
            v: v_next,
        },
        err,
    ))
}

/// Reconstructs the prior ALF state exactly. The midpoint used here is
/// algebraically identical to the forward one.
pub fn alf_reverse<T: Real>(
    field: &dyn VectorField<T>,
    s_next: &AlfState<T>,
    dt: T,
) -> Result<AlfState<T>> {
    let half_dt = dt * T::half();
    let t_mid = s_next.t - half_dt;
    let mut y_mid = s_next.y.clone();
    axpy(&mut y_mid, -half_dt, &s_next.v);
    let v_mid = field.eval(t_mid, &y_mid)?;
    let mut y = s_next.y.clone();
    axpy(&mut y, -dt, &v_mid);
    let d = s_next.y.len();
    let mut v = vec![T::zero(); d];
    for i in 0..d {
        v[i] = T::two() * v_mid[i] - s_next.v[i];
    }
    Ok(AlfState {
        t: s_next.t - dt,
        y,
        v,
    })
}

/// Reconstructs the prior state and propagates loss cotangents through one
/// ALF step in a single pass, reusing the one shared midpoint evaluation
/// instead of running a separate local forward.
///
/// Returns (prior state, dL/dy, dL/dv, dL/dtheta contribution).
#[allow(clippy::type_complexity)]
pub fn alf_reverse_backprop<T: Real>(
    field: &dyn VectorField<T>,
    s_next: &AlfState<T>,
    dt: T,
    dl_dy_next: &[T],
    dl_dv_next: &[T],
) -> Result<(AlfState<T>, Vec<T>, Vec<T>, Vec<T>)> {
    let d = s_next.y.len();
    if dl_dy_next.len() != d || dl_dv_next.len() != d {
        return Err(Error::Contract(
            "alf_reverse_backprop: cotangent length mismatch".into(),
        ));
    }
    let half_dt = dt * T::half();
    let t_mid = s_next.t - half_dt;
    let mut y_mid = s_next.y.clone();
    axpy(&mut y_mid, -half_dt, &s_next.v);
    let v_mid = field.eval(t_mid, &y_mid)?;
    let mut y = s_next.y.clone();
    axpy(&mut y, -dt, &v_mid);
    let mut v = vec![T::zero(); d];
    for i in 0..d {
        v[i] = T::two() * v_mid[i] - s_next.v[i];
    }

    // Cotangent on the midpoint evaluation: y_next and v_next both flow
    // through v_mid, with weights dt and 2 respectively.
    let mut cot_mid = vec![T::zero(); d];
    for i in 0..d {
        cot_mid[i] = T::two() * dl_dv_next[i] + dl_dy_next[i] * dt;
    }
    let pullback = field.vjp(t_mid, &y_mid, &cot_mid)?;
    let mut dl_dy = dl_dy_next.to_vec();
    let mut dl_dv = vec![T::zero(); d];
    for i in 0..d {
        dl_dy[i] += pullback.grad_y[i];
        // y_mid depends on v with weight dt/2; v_next = 2 v_mid - v.
        dl_dv[i] = half_dt * pullback.grad_y[i] - dl_dv_next[i];
    }
    Ok((
        AlfState {
            t: s_next.t - dt,
            y,
            v,
        },
        dl_dy,
        dl_dv,
        pullback.grad_params,
    ))
}

// ---------------------------------------------------------------------------
// Leapfrog/midpoint and semi-implicit Euler
// ---------------------------------------------------------------------------

/// The two-step leapfrog/midpoint rule y_next = y_prev2 + f(t_prev1, y_prev1)
/// * 2 dt, where dt is the grid spacing.
pub fn leapfrog_midpoint_step<T: Real>(
    field: &dyn VectorField<T>,
    y_prev2: &[T],
    y_prev1: &[T],
    t_prev1: T,
    dt: T,
) -> Result<Vec<T>> {
    let f = field.eval(t_prev1, y_prev1)?;
    let mut y = y_prev2.to_vec();
    axpy(&mut y, T::two() * dt, &f);
    Ok(y)
}

/// Semi-implicit Euler for the paired system dy/dt = f(t, v), dv/dt = g(t, y):
/// v' = v + g(t, y) dt, then y' = y + f(t, v') dt.
pub fn semi_implicit_euler_step<T: Real>(
    f: &dyn VectorField<T>,
    g: &dyn VectorField<T>,
    t: T,
    y: &[T],
    v: &[T],
    dt: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let gv = g.eval(t, y)?;
    let mut v_next = v.to_vec();
    axpy(&mut v_next, dt, &gv);
    let fv = f.eval(t, &v_next)?;
    let mut y_next = y.to_vec();
    axpy(&mut y_next, dt, &fv);
    Ok((y_next, v_next))
}

/// Exact inverse of [`semi_implicit_euler_step`]: undo the updates in the
/// opposite order.
pub fn semi_implicit_euler_reverse<T: Real>(
    f: &dyn VectorField<T>,
    g: &dyn VectorField<T>,
    t: T,
    y_next: &[T],
    v_next: &[T],
    dt: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let fv = f.eval(t, v_next)?;
    let mut y = y_next.to_vec();
    axpy(&mut y, -dt, &fv);
    let gv = g.eval(t, &y)?;
    let mut v = v_next.to_vec();
    axpy(&mut v, -dt, &gv);
    Ok((y, v))
}

// ---------------------------------------------------------------------------
// Generic reversible backpropagation
// ---------------------------------------------------------------------------

/// A stepper usable by [`reversible_backprop`]: forward step, closed-form
/// reverse, and a hand-derived vjp through one step.
pub trait ReversibleStepper<T: Real> {
    type State: Clone;
    /// Cotangents carried against every component of the solver state.
    type Cotangent: Clone;

    fn init(&self, field: &dyn VectorField<T>, t0: T, y0: &[T]) -> Result<Self::State>;
    fn step(&self, field: &dyn VectorField<T>, s: &Self::State, dt: T) -> Result<Self::State>;
    fn reverse(
        &self,
        field: &dyn VectorField<T>,
        s_next: &Self::State,
        dt: T,
    ) -> Result<Self::State>;

    /// Pulls `cot_next` back through one forward step rebuilt at `s_prev`,
    /// returning the prior cotangent and the step's theta contribution.
    fn vjp_step(
        &self,
        field: &dyn VectorField<T>,
        s_prev: &Self::State,
        dt: T,
        cot_next: &Self::Cotangent,
    ) -> Result<(Self::Cotangent, Vec<T>)>;

    /// Seeds the terminal cotangent from dL/dy(T).
    fn terminal_cotangent(&self, dl_dy: &[T]) -> Self::Cotangent;

    /// Folds the state-initialisation map (which evaluates f at (t0, y0))
    /// into gradients with respect to y0 and theta.
    fn init_backprop(
        &self,
        field: &dyn VectorField<T>,
        t0: T,
        y0: &[T],
        cot: &Self::Cotangent,
    ) -> Result<(Vec<T>, Vec<T>)>;

    fn y<'a>(&self, s: &'a Self::State) -> &'a [T];
    fn t(&self, s: &Self::State) -> T;

    /// Relative deviation of a reconstructed initial state from the stepper's
    /// initialisation invariant. Reverse-then-step is an algebraic identity
    /// for any dt, so a schedule or terminal-state mismatch only becomes
    /// visible here, once the backward pass has returned to t0.
    fn init_residual(&self, field: &dyn VectorField<T>, s0: &Self::State) -> Result<T>;
}

/// Reversible Heun as a [`ReversibleStepper`].
pub struct RevHeun;

/// Cotangents against (y, y_hat, f_cached).
#[derive(Debug, Clone)]
pub struct RevHeunCotangent<T> {
    pub y: Vec<T>,
    pub y_hat: Vec<T>,
    pub f: Vec<T>,
}

impl<T: Real> ReversibleStepper<T> for RevHeun {
    type State = RevHeunState<T>;
    type Cotangent = RevHeunCotangent<T>;

    fn init(&self, field: &dyn VectorField<T>, t0: T, y0: &[T]) -> Result<Self::State> {
        RevHeunState::init(field, t0, y0)
    }

    fn step(&self, field: &dyn VectorField<T>, s: &Self::State, dt: T) -> Result<Self::State> {
        Ok(revheun_step(field, s, dt)?.0)
    }

    fn reverse(
        &self,
        field: &dyn VectorField<T>,
        s_next: &Self::State,
        dt: T,
    ) -> Result<Self::State> {
        revheun_reverse(field, s_next, dt)
    }

    fn vjp_step(
        &self,
        field: &dyn VectorField<T>,
        s_prev: &Self::State,
        dt: T,
        cot: &Self::Cotangent,
    ) -> Result<(Self::Cotangent, Vec<T>)> {
        let d = s_prev.y.len();
        // Local forward: rebuild y_hat_next, where f was evaluated.
        let mut y_hat_next = vec![T::zero(); d];
        for i in 0..d {
            y_hat_next[i] = T::two() * s_prev.y[i] - s_prev.y_hat[i] + s_prev.f_cached[i] * dt;
        }
        // Total cotangent on f_next: direct carry plus the y-update half.
        let mut cot_f_next = cot.f.clone();
        for i in 0..d {
            cot_f_next[i] += T::half() * dt * cot.y[i];
        }
        let pullback = field.vjp(s_prev.t + dt, &y_hat_next, &cot_f_next)?;
        // Total cotangent on y_hat_next.
        let mut cot_yh = cot.y_hat.clone();
        for i in 0..d {
            cot_yh[i] += pullback.grad_y[i];
        }
        let mut prior = RevHeunCotangent {
            y: cot.y.clone(),
            y_hat: vec![T::zero(); d],
            f: vec![T::zero(); d],
        };
        for i in 0..d {
            prior.y[i] += T::two() * cot_yh[i];
            prior.y_hat[i] = -cot_yh[i];
            prior.f[i] = T::half() * dt * cot.y[i] + dt * cot_yh[i];
        }
        Ok((prior, pullback.grad_params))
    }

    fn terminal_cotangent(&self, dl_dy: &[T]) -> Self::Cotangent {
        RevHeunCotangent {
            y: dl_dy.to_vec(),
            y_hat: vec![T::zero(); dl_dy.len()],
            f: vec![T::zero(); dl_dy.len()],
        }
    }

    fn init_backprop(
        &self,
        field: &dyn VectorField<T>,
        t0: T,
        y0: &[T],
        cot: &Self::Cotangent,
    ) -> Result<(Vec<T>, Vec<T>)> {
        // y_hat(0) = y0 and f_cached(0) = f(t0, y0).
        let pullback = field.vjp(t0, y0, &cot.f)?;
        let mut dl_dy0 = cot.y.clone();
        for i in 0..dl_dy0.len() {
            dl_dy0[i] += cot.y_hat[i] + pullback.grad_y[i];
        }
        Ok((dl_dy0, pullback.grad_params))
    }

    fn y<'a>(&self, s: &'a Self::State) -> &'a [T] {
        &s.y
    }

    fn t(&self, s: &Self::State) -> T {
        s.t
    }

    fn init_residual(&self, field: &dyn VectorField<T>, s0: &Self::State) -> Result<T> {
        // At initialisation y_hat = y and f_cached = f(t0, y).
        let f0 = field.eval(s0.t, &s0.y)?;
        let r = crate::real::max_rel_err(&s0.y_hat, &s0.y);
        Ok(r.max(crate::real::max_rel_err(&s0.f_cached, &f0)))
    }
}

/// Asynchronous leapfrog as a [`ReversibleStepper`].
pub struct Alf;

/// Cotangents against (y, v).
#[derive(Debug, Clone)]
pub struct AlfCotangent<T> {
    pub y: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> ReversibleStepper<T> for Alf {
    type State = AlfState<T>;
    type Cotangent = AlfCotangent<T>;

    fn init(&self, field: &dyn VectorField<T>, t0: T, y0: &[T]) -> Result<Self::State> {
        AlfState::init(field, t0, y0)
    }

    fn step(&self, field: &dyn VectorField<T>, s: &Self::State, dt: T) -> Result<Self::State> {
        Ok(alf_step(field, s, dt)?.0)
    }

    fn reverse(
        &self,
        field: &dyn VectorField<T>,
        s_next: &Self::State,
        dt: T,
    ) -> Result<Self::State> {
        alf_reverse(field, s_next, dt)
    }

    fn vjp_step(
        &self,
        field: &dyn VectorField<T>,
        s_prev: &Self::State,
        dt: T,
        cot: &Self::Cotangent,
    ) -> Result<(Self::Cotangent, Vec<T>)> {
        let d = s_prev.y.len();
        let half_dt = dt * T::half();
        // Local forward: rebuild the midpoint.
        let mut y_mid = s_prev.y.clone();
        axpy(&mut y_mid, half_dt, &s_prev.v);
        let mut cot_mid = vec![T::zero(); d];
        for i in 0..d {
            cot_mid[i] = T::two() * cot.v[i] + dt * cot.y[i];
        }
        let pullback = field.vjp(s_prev.t + half_dt, &y_mid, &cot_mid)?;
        let mut prior = AlfCotangent {
            y: cot.y.clone(),
            v: vec![T::zero(); d],
        };
        for i in 0..d {
            prior.y[i] += pullback.grad_y[i];
            prior.v[i] = half_dt * pullback.grad_y[i] - cot.v[i];
        }
        Ok((prior, pullback.grad_params))
    }

    fn terminal_cotangent(&self, dl_dy: &[T]) -> Self::Cotangent {
        AlfCotangent {
            y: dl_dy.to_vec(),
            v: vec![T::zero(); dl_dy.len()],
        }
    }

    fn init_backprop(
        &self,
        field: &dyn VectorField<T>,
        t0: T,
        y0: &[T],
        cot: &Self::Cotangent,
    ) -> Result<(Vec<T>, Vec<T>)> {
        // v(0) = f(t0, y0).
        let pullback = field.vjp(t0, y0, &cot.v)?;
        let mut dl_dy0 = cot.y.clone();
        for i in 0..dl_dy0.len() {
            dl_dy0[i] += pullback.grad_y[i];
        }
        Ok((dl_dy0, pullback.grad_params))
    }

    fn y<'a>(&self, s: &'a Self::State) -> &'a [T] {
        &s.y
    }

    fn t(&self, s: &Self::State) -> T {
        s.t
    }

    fn init_residual(&self, field: &dyn VectorField<T>, s0: &Self::State) -> Result<T> {
        // At initialisation v = f(t0, y).
        let f0 = field.eval(s0.t, &s0.y)?;
        Ok(crate::real::max_rel_err(&s0.v, &f0))
    }
}

/// Options for [`reversible_backprop`].
#[derive(Debug, Clone, Copy)]
pub struct ReversibleBackpropOptions<T> {
    /// Relative round-trip residual above which the reverse pass refuses to
    /// continue. Catches a dt-schedule or terminal-state mismatch early
    /// instead of silently producing garbage gradients.
    pub reconstruction_guard: T,
}

impl<T: Real> Default for ReversibleBackpropOptions<T> {
    fn default() -> Self {
        Self {
            reconstruction_guard: T::c(1e-6),
        }
    }
}

/// Backpropagates through a reversible solve in O(1) memory.
///
/// `terminal_state` must be the exact forward output and `dt_schedule` the
/// accepted-step sequence (replayed verbatim; the controller is not re-run).
/// Per step: reverse to the prior state, rebuild the step locally, pull the
/// cotangents back through it, and accumulate on all solver state and theta.
pub fn reversible_backprop<T: Real, S: ReversibleStepper<T>>(
    stepper: &S,
    field: &dyn VectorField<T>,
    terminal_state: &S::State,
    dt_schedule: &[T],
    dl_dy_terminal: &[T],
    opts: &ReversibleBackpropOptions<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut cot = stepper.terminal_cotangent(dl_dy_terminal);
    let mut theta_grad = vec![T::zero(); field.params_dim()];
    let mut state = terminal_state.clone();
    for &dt in dt_schedule.iter().rev() {
        let prior = stepper.reverse(field, &state, dt)?;
        let (cot_prior, dtheta) = stepper.vjp_step(field, &prior, dt, &cot)?;
        for (g, &dg) in theta_grad.iter_mut().zip(&dtheta) {
            *g += dg;
        }
        cot = cot_prior;
        state = prior;
    }
    let residual = stepper.init_residual(field, &state)?;
    if residual > opts.reconstruction_guard {
        return Err(Error::ReconstructionDivergence {
            step: 0,
            residual: residual.as_f64(),
            guard: opts.reconstruction_guard.as_f64(),
        });
    }
    let t0 = stepper.t(&state);
    let y0 = stepper.y(&state).to_vec();
    let (dl_dy0, dtheta0) = stepper.init_backprop(field, t0, &y0, &cot)?;
    for (g, &dg) in theta_grad.iter_mut().zip(&dtheta0) {
        *g += dg;
    }
    Ok((dl_dy0, theta_grad))
}

/// Discretise-then-optimise replay for a reversible stepper: stores every
/// forward state (O(n) memory) and backpropagates from the stored states
/// without any reconstruction. Serves as the independent gradient route that
/// [`reversible_backprop`] is checked against.
pub fn dto_replay_backprop<T: Real, S: ReversibleStepper<T>>(
    stepper: &S,
    field: &dyn VectorField<T>,
    states: &[S::State],
    dt_schedule: &[T],
    dl_dy_terminal: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    if states.len() != dt_schedule.len() + 1 {
        return Err(Error::Contract(
            "dto_replay_backprop: need one more state than steps".into(),
        ));
    }
    let mut cot = stepper.terminal_cotangent(dl_dy_terminal);
    let mut theta_grad = vec![T::zero(); field.params_dim()];
    for (idx, &dt) in dt_schedule.iter().enumerate().rev() {
        let (cot_prior, dtheta) = stepper.vjp_step(field, &states[idx], dt, &cot)?;
        for (g, &dg) in theta_grad.iter_mut().zip(&dtheta) {
            *g += dg;
        }
        cot = cot_prior;
    }
    let t0 = stepper.t(&states[0]);
    let y0 = stepper.y(&states[0]).to_vec();
    let (dl_dy0, dtheta0) = stepper.init_backprop(field, t0, &y0, &cot)?;
    for (g, &dg) in theta_grad.iter_mut().zip(&dtheta0) {
        *g += dg;
    }
    Ok((dl_dy0, theta_grad))
}

/// Runs a fixed-schedule reversible solve and returns every state.
pub fn run_forward<T: Real, S: ReversibleStepper<T>>(
    stepper: &S,
    field: &dyn VectorField<T>,
    t0: T,
    y0: &[T],
    dt_schedule: &[T],
) -> Result<Vec<S::State>> {
    let mut states = Vec::with_capacity(dt_schedule.len() + 1);
    states.push(stepper.init(field, t0, y0)?);
    for &dt in dt_schedule {
        let next = stepper.step(field, states.last().unwrap(), dt)?;
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Activation, AnalyticField, Mlp};
    use crate::ode::loglog_slope;
    use crate::real::max_rel_err;

    fn decay() -> AnalyticField<f64> {
        AnalyticField::linear_scalar(-1.0, 1)
    }

    #[test]
    fn revheun_one_step_symbolic() {
        let lambda = -0.8f64;
        let dt = 0.3;
        let f = AnalyticField::linear_scalar(lambda, 1);
        let s0 = RevHeunState::init(&f, 0.0, &[1.0]).unwrap();
        let (s1, _) = revheun_step(&f, &s0, dt).unwrap();
        let expected = 1.0 + lambda * dt + 0.5 * lambda * lambda * dt * dt;
        assert!((s1.y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn revheun_zero_field_only_advances_time() {
        let zero = Mlp::<f64>::init(&[2, 2], Activation::Tanh, 0, 0.0).unwrap();
        let s0 = RevHeunState::init(&zero, 0.0, &[0.4, -0.2]).unwrap();
        let (s1, err) = revheun_step(&zero, &s0, 0.125).unwrap();
        assert_eq!(s1.y, s0.y);
        assert_eq!(s1.y_hat, s0.y_hat);
        assert_eq!(err, vec![0.0, 0.0]);
        assert_eq!(s1.t, 0.125);
        // And reverse is bit-identical.
        let back = revheun_reverse(&zero, &s1, 0.125).unwrap();
        assert_eq!(back, s0);
    }

    #[test]
    fn revheun_step_reverse_round_trip_mlp() {
        let mlp = Mlp::<f64>::init(&[3, 12, 3], Activation::Silu, 17, 1.5).unwrap();
        let s0 = RevHeunState::init(&mlp, 0.0, &[0.3, -0.6, 0.9]).unwrap();
        let (s1, _) = revheun_step(&mlp, &s0, 0.07).unwrap();
        let back = revheun_reverse(&mlp, &s1, 0.07).unwrap();
        assert!(max_rel_err(&back.y, &s0.y) <= 1e-12);
        assert!(max_rel_err(&back.y_hat, &s0.y_hat) <= 1e-12);
    }

    #[test]
    fn revheun_thousand_step_round_trip() {
        let f = decay();
        let dt = 1e-3;
        let mut s = RevHeunState::init(&f, 0.0, &[1.0]).unwrap();
        for _ in 0..1000 {
            s = revheun_step(&f, &s, dt).unwrap().0;
        }
        for _ in 0..1000 {
            s = revheun_reverse(&f, &s, dt).unwrap();
        }
        assert!((s.y[0] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn revheun_half_step_refinement() {
        // Two half steps against one full step differ at O(dt^3).
        let mlp = Mlp::<f64>::init(&[2, 8, 2], Activation::Tanh, 4, 1.0).unwrap();
        let y0 = [0.2, -0.5];
        let mut diffs = Vec::new();
        let dts = [0.2, 0.1, 0.05, 0.025];
        for &dt in &dts {
            let s0 = RevHeunState::init(&mlp, 0.0, &y0).unwrap();
            let full = revheun_step(&mlp, &s0, dt).unwrap().0;
            let half = revheun_step(&mlp, &s0, dt / 2.0).unwrap().0;
            let half2 = revheun_step(&mlp, &half, dt / 2.0).unwrap().0;
            let d: f64 = full
                .y
                .iter()
                .zip(&half2.y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            diffs.push(d);
        }
        let slope = loglog_slope(&dts, &diffs);
        assert!((slope - 3.0).abs() < 0.5, "slope {slope}");
    }

    #[test]
    fn alf_one_step_symbolic() {
        let lambda = 0.6f64;
        let dt = 0.25;
        let f = AnalyticField::linear_scalar(lambda, 1);
        let s0 = AlfState::init(&f, 0.0, &[1.0]).unwrap();
        let (s1, _) = alf_step(&f, &s0, dt).unwrap();
        let expected = 1.0 + lambda * dt + 0.5 * lambda * lambda * dt * dt;
        assert!((s1.y[0] - expected).abs() < 1e-15);
        let expected_v = lambda * (1.0 + lambda * dt);
        assert!((s1.v[0] - expected_v).abs() < 1e-15);
    }

    #[test]
    fn alf_zero_field_zero_velocity_no_motion() {
        let zero = Mlp::<f64>::init(&[1, 1], Activation::Tanh, 0, 0.0).unwrap();
        let s0 = AlfState::init(&zero, 0.0, &[0.7]).unwrap();
        let (s1, _) = alf_step(&zero, &s0, 0.5).unwrap();
        assert_eq!(s1.y, vec![0.7]);
        assert_eq!(s1.v, vec![0.0]);
    }

    #[test]
    fn alf_second_order_convergence() {
        let f = decay();
        let dts: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let n = (1.0 / dt).round() as usize;
                let mut s = AlfState::init(&f, 0.0, &[1.0]).unwrap();
                for _ in 0..n {
                    s = alf_step(&f, &s, dt).unwrap().0;
                }
                (s.y[0] - (-1.0f64).exp()).abs()
            })
            .collect();
        let slope = loglog_slope(&dts, &errs);
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn alf_backprop_matches_one_step_jacobian() {
        // For f = lambda y the one-step map has an explicit Jacobian.
        let lambda = -0.9f64;
        let dt = 0.2;
        let f = AnalyticField::linear_scalar(lambda, 1);
        let s0 = AlfState {
            t: 0.0,
            y: vec![1.3],
            v: vec![0.4],
        };
        let (s1, _) = alf_step(&f, &s0, dt).unwrap();
        let (g_y, g_v) = (0.7, -0.3);
        let (prior, dl_dy, dl_dv, _) = alf_reverse_backprop(&f, &s1, dt, &[g_y], &[g_v]).unwrap();
        assert!(max_rel_err(&prior.y, &s0.y) <= 1e-12);
        assert!(max_rel_err(&prior.v, &s0.v) <= 1e-12);
        // M = [[1 + l dt, l dt^2 / 2], [2 l, l dt - 1]].
        let expect_dy = g_y * (1.0 + lambda * dt) + g_v * 2.0 * lambda;
        let expect_dv = g_y * lambda * dt * dt / 2.0 + g_v * (lambda * dt - 1.0);
        assert!(
            (dl_dy[0] - expect_dy).abs() < 1e-12,
            "{} vs {expect_dy}",
            dl_dy[0]
        );
        assert!(
            (dl_dv[0] - expect_dv).abs() < 1e-12,
            "{} vs {expect_dv}",
            dl_dv[0]
        );
    }

    #[test]
    fn alf_backprop_zero_cotangents() {
        let f = decay();
        let s0 = AlfState::init(&f, 0.0, &[1.0]).unwrap();
        let (s1, _) = alf_step(&f, &s0, 0.1).unwrap();
        let (_, dl_dy, dl_dv, dtheta) = alf_reverse_backprop(&f, &s1, 0.1, &[0.0], &[0.0]).unwrap();
        assert_eq!(dl_dy, vec![0.0]);
        assert_eq!(dl_dv, vec![0.0]);
        assert_eq!(dtheta, vec![0.0]);
    }

    #[test]
    fn alf_efficient_backprop_matches_generic() {
        let mlp = Mlp::<f64>::init(&[2, 10, 2], Activation::Tanh, 8, 1.2).unwrap();
        let dt = 0.05;
        let n = 20;
        let schedule = vec![dt; n];
        let states = run_forward(&Alf, &mlp, 0.0, &[0.4, -0.1], &schedule).unwrap();
        let dl = [1.0, -2.0];
        let (gy_generic, gp_generic) = reversible_backprop(
            &Alf,
            &mlp,
            states.last().unwrap(),
            &schedule,
            &dl,
            &ReversibleBackpropOptions::default(),
        )
        .unwrap();
        // Efficient fused loop.
        let mut state = states.last().unwrap().clone();
        let mut g_y = dl.to_vec();
        let mut g_v = vec![0.0; 2];
        let mut g_p = vec![0.0; mlp.params_dim()];
        for _ in 0..n {
            let (prior, ny, nv, dp) = alf_reverse_backprop(&mlp, &state, dt, &g_y, &g_v).unwrap();
            for (a, b) in g_p.iter_mut().zip(&dp) {
                *a += b;
            }
            state = prior;
            g_y = ny;
            g_v = nv;
        }
        let pull = mlp.vjp(0.0, &state.y, &g_v).unwrap();
        for i in 0..2 {
            g_y[i] += pull.grad_y[i];
        }
        for (a, b) in g_p.iter_mut().zip(&pull.grad_params) {
            *a += b;
        }
        assert!(max_rel_err(&g_y, &gy_generic) <= 1e-12);
        assert!(max_rel_err(&g_p, &gp_generic) <= 1e-12);
    }

    #[test]
    fn leapfrog_examples() {
        let f = decay();
        // Zero field: y_next = y_prev2.
        let zero = Mlp::<f64>::init(&[1, 1], Activation::Tanh, 0, 0.0).unwrap();
        let y = leapfrog_midpoint_step(&zero, &[0.3], &[0.9], 0.0, 0.1).unwrap();
        assert_eq!(y, vec![0.3]);
        // Linear field matches the recurrence solution alpha eta^j + beta kappa^j.
        let lambda = -1.0f64;
        let dt = 0.05;
        let root = (1.0 + lambda * lambda * dt * dt).sqrt();
        let (eta, kappa) = (lambda * dt + root, lambda * dt - root);
        let y0 = 1.0;
        let y1 = (lambda * dt).exp(); // seed the second point with the exact value
        let beta = (y1 - eta * y0) / (kappa - eta);
        let alpha = y0 - beta;
        let mut prev2 = vec![y0];
        let mut prev1 = vec![y1];
        let mut t = dt;
        for j in 2..=40 {
            let next = leapfrog_midpoint_step(&f, &prev2, &prev1, t, dt).unwrap();
            let closed = alpha * eta.powi(j) + beta * kappa.powi(j);
            assert!((next[0] - closed).abs() < 1e-10, "j = {j}");
            prev2 = prev1;
            prev1 = next;
            t += dt;
        }
        // Reversing the recurrence recovers y_prev2 exactly.
        let next = leapfrog_midpoint_step(&f, &prev2, &prev1, t, dt).unwrap();
        let recovered = leapfrog_midpoint_step(&f, &next, &prev1, t, -dt).unwrap();
        assert_eq!(recovered, prev2);
    }

    #[test]
    fn semi_implicit_euler_examples() {
        // Harmonic oscillator: dy/dt = v, dv/dt = -y.
        let f = AnalyticField::parameter_free(1, 1, |_t, v| vec![v[0]], |_t, _v| vec![vec![1.0]]);
        let g =
            AnalyticField::parameter_free(1, 1, |_t, y: &[f64]| vec![-y[0]], |_t, _y| {
                vec![vec![-1.0]]
            });
        let dt = 0.1;
        let (mut y, mut v) = (vec![1.0], vec![0.0]);
        let mut max_energy = 0.0f64;
        for _ in 0..100_000 {
            let (yn, vn) = semi_implicit_euler_step(&f, &g, 0.0, &y, &v, dt).unwrap();
            y = yn;
            v = vn;
            max_energy = max_energy.max(y[0] * y[0] + v[0] * v[0]);
        }
        assert!(max_energy < 1.2, "energy-like bound violated: {max_energy}");
        // Reverse step recovers the state exactly.
        let (y1, v1) = semi_implicit_euler_step(&f, &g, 0.0, &y, &v, dt).unwrap();
        let (y_back, v_back) = semi_implicit_euler_reverse(&f, &g, 0.0, &y1, &v1, dt).unwrap();
        assert_eq!(y_back, y);
        assert_eq!(v_back, v);
        // g = 0 keeps v constant and advances y linearly.
        let zero = Mlp::<f64>::init(&[1, 1], Activation::Tanh, 0, 0.0).unwrap();
        let (y2, v2) = semi_implicit_euler_step(&f, &zero, 0.0, &[2.0], &[3.0], 0.5).unwrap();
        assert_eq!(v2, vec![3.0]);
        assert_eq!(y2, vec![2.0 + 3.0 * 0.5]);
    }

    #[test]
    fn reversible_backprop_one_step_linear() {
        let lambda = -0.4f64;
        let dt = 0.2;
        let f = AnalyticField::linear_scalar(lambda, 1);
        let schedule = vec![dt];
        let states = run_forward(&RevHeun, &f, 0.0, &[1.0], &schedule).unwrap();
        let (dl_dy0, dl_dtheta) = reversible_backprop(
            &RevHeun,
            &f,
            states.last().unwrap(),
            &schedule,
            &[1.0],
            &ReversibleBackpropOptions::default(),
        )
        .unwrap();
        let expect = 1.0 + lambda * dt + 0.5 * lambda * lambda * dt * dt;
        assert!((dl_dy0[0] - expect).abs() < 1e-14);
        // d y1 / d lambda = dt + lambda dt^2 for y0 = 1.
        let expect_th = dt + lambda * dt * dt;
        assert!((dl_dtheta[0] - expect_th).abs() < 1e-14);
    }

    #[test]
    fn reversible_backprop_zero_cotangent() {
        let f = decay();
        let schedule = vec![0.1; 5];
        let states = run_forward(&RevHeun, &f, 0.0, &[1.0], &schedule).unwrap();
        let (dl_dy0, dl_dtheta) = reversible_backprop(
            &RevHeun,
            &f,
            states.last().unwrap(),
            &schedule,
            &[0.0],
            &ReversibleBackpropOptions::default(),
        )
        .unwrap();
        assert_eq!(dl_dy0, vec![0.0]);
        assert_eq!(dl_dtheta, vec![0.0]);
    }

    #[test]
    fn reversible_backprop_matches_dto_replay_on_mlp() {
        let mlp = Mlp::<f64>::init(&[3, 16, 3], Activation::Silu, 33, 1.0).unwrap();
        let schedule = vec![0.02; 50];
        let states = run_forward(&RevHeun, &mlp, 0.0, &[0.1, 0.5, -0.4], &schedule).unwrap();
        let dl = [0.3, -1.0, 0.8];
        let (gy_rev, gp_rev) = reversible_backprop(
            &RevHeun,
            &mlp,
            states.last().unwrap(),
            &schedule,
            &dl,
            &ReversibleBackpropOptions::default(),
        )
        .unwrap();
        let (gy_dto, gp_dto) =
            dto_replay_backprop(&RevHeun, &mlp, &states, &schedule, &dl).unwrap();
        assert!(max_rel_err(&gy_rev, &gy_dto) <= 1e-9);
        assert!(max_rel_err(&gp_rev, &gp_dto) <= 1e-9);
    }

    #[test]
    fn reconstruction_guard_detects_schedule_mismatch() {
        let f = decay();
        let schedule = vec![0.1; 10];
        let states = run_forward(&RevHeun, &f, 0.0, &[1.0], &schedule).unwrap();
        let mut wrong = vec![0.1; 10];
        wrong[3] = 0.11;
        let r = reversible_backprop(
            &RevHeun,
            &f,
            states.last().unwrap(),
            &wrong,
            &[1.0],
            &ReversibleBackpropOptions::default(),
        );
        assert!(matches!(r, Err(Error::ReconstructionDivergence { .. })));
    }
}
