//! Stochastic steppers and a strong-convergence measurement harness.
//!
//! All steppers are fixed-step and draw their noise increments from a
//! [`BrownianSource`], so the same increments can be replayed on a backward
//! pass. Whether a stepper converges to the Ito or the Stratonovich solution
//! is a property of the stepper, not of the field; each stepper documents
//! its convention.

use crate::brownian::BrownianSource;
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::ode::loglog_slope;
use crate::real::{all_finite, Real};
use crate::reversible::RevHeunState;

/// Shape and dependence class of the diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// sigma(t, y) is a d_y x d_w matrix (flattened row-major).
    General,
    /// d_w = d_y and sigma(t, y) returns the d_y diagonal entries.
    Diagonal,
    /// sigma is independent of y (matrix-shaped like General).
    Additive,
    /// d_w = 1 and sigma(t, y) returns a d_y vector.
    Scalar,
}

/// Drift/diffusion pair defining dy = mu dt + sigma dW (Ito) or
/// dy = mu dt + sigma o dW (Stratonovich), depending on the stepper.
pub struct SdeField<T: Real> {
    pub drift: Box<dyn VectorField<T>>,
    pub diffusion: Box<dyn VectorField<T>>,
    pub noise_kind: NoiseKind,
    pub dim_y: usize,
    pub dim_w: usize,
}

impl<T: Real> SdeField<T> {
    pub fn new(
        drift: Box<dyn VectorField<T>>,
        diffusion: Box<dyn VectorField<T>>,
        noise_kind: NoiseKind,
        dim_w: usize,
    ) -> Result<Self> {
        let dim_y = drift.dim_out();
        let expected = match noise_kind {
            NoiseKind::General | NoiseKind::Additive => dim_y * dim_w,
            NoiseKind::Diagonal => {
                if dim_w != dim_y {
                    return Err(Error::Config(
                        "SdeField: diagonal noise requires dim_w = dim_y".into(),
                    ));
                }
                dim_y
            }
            NoiseKind::Scalar => {
                if dim_w != 1 {
                    return Err(Error::Config(
                        "SdeField: scalar noise requires dim_w = 1".into(),
                    ));
                }
                dim_y
            }
        };
        if diffusion.dim_out() != expected {
            return Err(Error::Config(format!(
                "SdeField: diffusion returns {} values, expected {expected}",
                diffusion.dim_out()
            )));
        }
        Ok(Self {
            drift,
            diffusion,
            noise_kind,
            dim_y,
            dim_w,
        })
    }

    /// sigma(t, y) * dw, respecting the noise shape.
    pub fn sigma_matvec(&self, sigma: &[T], dw: &[T]) -> Vec<T> {
        match self.noise_kind {
            NoiseKind::Diagonal => sigma.iter().zip(dw).map(|(&s, &w)| s * w).collect(),
            NoiseKind::Scalar => sigma.iter().map(|&s| s * dw[0]).collect(),
            NoiseKind::General | NoiseKind::Additive => {
                let mut out = vec![T::zero(); self.dim_y];
                for i in 0..self.dim_y {
                    let row = &sigma[i * self.dim_w..(i + 1) * self.dim_w];
                    out[i] = row.iter().zip(dw).map(|(&s, &w)| s * w).sum();
                }
                out
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fixed-step stochastic steppers
// ---------------------------------------------------------------------------

/// Euler-Maruyama step (Ito): y + mu dt + sigma dW.
pub fn euler_maruyama_step<T: Real>(
    f: &SdeField<T>,
    t: T,
    y: &[T],
    dt: T,
    dw: &[T],
) -> Result<Vec<T>> {
    let mu = f.drift.eval(t, y)?;
    let sigma = f.diffusion.eval(t, y)?;
    let noise = f.sigma_matvec(&sigma, dw);
    Ok(y.iter()
        .zip(mu.iter().zip(&noise))
        .map(|(&yi, (&m, &n))| yi + m * dt + n)
        .collect())
}

/// Heun predictor-corrector step, converging to the Stratonovich solution:
/// predictor y~ = y + mu dt + sigma dW, corrector averages drift and
/// diffusion between (t, y) and (t + dt, y~).
pub fn stratonovich_heun_step<T: Real>(
    f: &SdeField<T>,
    t: T,
    y: &[T],
    dt: T,
    dw: &[T],
) -> Result<Vec<T>> {
    let mu0 = f.drift.eval(t, y)?;
    let sig0 = f.diffusion.eval(t, y)?;
    let noise0 = f.sigma_matvec(&sig0, dw);
    let pred: Vec<T> = y
        .iter()
        .zip(mu0.iter().zip(&noise0))
        .map(|(&yi, (&m, &n))| yi + m * dt + n)
        .collect();
    if !all_finite(&pred) {
        return Err(Error::StepFailure {
            t: t.as_f64(),
            evals: 2,
        });
    }
    let mu1 = f.drift.eval(t + dt, &pred)?;
    let sig1 = f.diffusion.eval(t + dt, &pred)?;
    let noise1 = f.sigma_matvec(&sig1, dw);
    Ok(y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            yi + T::half() * (mu0[i] + mu1[i]) * dt + T::half() * (noise0[i] + noise1[i])
        })
        .collect())
}

/// Milstein step (Ito) for diagonal, scalar or additive noise:
/// per channel k, y_k + mu_k dt + sigma_k dW_k
/// + 1/2 sigma_k (d sigma_k / d y_k) (dW_k^2 - dt).
/// The diffusion derivative comes from the field's jvp.
pub fn milstein_step<T: Real>(
    f: &SdeField<T>,
    t: T,
    y: &[T],
    dt: T,
    dw: &[T],
) -> Result<Vec<T>> {
    match f.noise_kind {
        NoiseKind::General => {
            return Err(Error::Unsupported(
                "milstein_step: general noise is unsupported (needs Levy areas); \
                 use diagonal, scalar or additive noise"
                    .into(),
            ))
        }
        NoiseKind::Diagonal | NoiseKind::Scalar | NoiseKind::Additive => {}
    }
    let d = f.dim_y;
    let mu = f.drift.eval(t, y)?;
    let sigma = f.diffusion.eval(t, y)?;
    let noise = f.sigma_matvec(&sigma, dw);
    let mut out: Vec<T> = y
        .iter()
        .zip(mu.iter().zip(&noise))
        .map(|(&yi, (&m, &n))| yi + m * dt + n)
        .collect();
    match f.noise_kind {
        NoiseKind::Additive => {} // d sigma / d y = 0: reduces to Euler-Maruyama
        NoiseKind::Diagonal => {
            for k in 0..d {
                let mut e_k = vec![T::zero(); d];
                e_k[k] = T::one();
                let dsig = f.diffusion.jvp(t, y, &e_k)?;
                out[k] += T::half() * sigma[k] * dsig[k] * (dw[k] * dw[k] - dt);
            }
        }
        NoiseKind::Scalar => {
            // One jvp with tangent sigma gives (J_sigma sigma)_k for every k.
            let js = f.diffusion.jvp(t, y, &sigma)?;
            let corr = dw[0] * dw[0] - dt;
            for k in 0..d {
                out[k] += T::half() * js[k] * corr;
            }
        }
        NoiseKind::General => unreachable!(),
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reversible Heun for SDEs
// ---------------------------------------------------------------------------

/// Reversible Heun state for SDEs: (t, y, y_hat, cached mu, cached sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct RevHeunSdeState<T> {
    pub t: T,
    pub y: Vec<T>,
    pub y_hat: Vec<T>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> RevHeunSdeState<T> {
    pub fn init(f: &SdeField<T>, t: T, y: &[T]) -> Result<Self> {
        Ok(Self {
            t,
            y: y.to_vec(),
            y_hat: y.to_vec(),
            mu: f.drift.eval(t, y)?,
            sigma: f.diffusion.eval(t, y)?,
        })
    }
}

/// Forward reversible-Heun SDE step (Stratonovich). `dw` must be the
/// increment W(t + dt) - W(t); the same increment must be supplied on the
/// reverse pass.
pub fn revheun_sde_step<T: Real>(
    f: &SdeField<T>,
    s: &RevHeunSdeState<T>,
    dt: T,
    dw: &[T],
) -> Result<RevHeunSdeState<T>> {
    let d = s.y.len();
    let t_next = s.t + dt;
    let noise = f.sigma_matvec(&s.sigma, dw);
    let mut y_hat_next = vec![T::zero(); d];
    for i in 0..d {
        y_hat_next[i] = T::two() * s.y[i] - s.y_hat[i] + s.mu[i] * dt + noise[i];
    }
    if !all_finite(&y_hat_next) {
        return Err(Error::StepFailure {
            t: s.t.as_f64(),
            evals: 0,
        });
    }
    let mu_next = f.drift.eval(t_next, &y_hat_next)?;
    let sigma_next = f.diffusion.eval(t_next, &y_hat_next)?;
    let noise_next = f.sigma_matvec(&sigma_next, dw);
    let mut y_next = s.y.clone();
    for i in 0..d {
        y_next[i] += T::half() * (s.mu[i] + mu_next[i]) * dt
            + T::half() * (noise[i] + noise_next[i]);
    }
    Ok(RevHeunSdeState {
        t: t_next,
        y: y_next,
        y_hat: y_hat_next,
        mu: mu_next,
        sigma: sigma_next,
    })
}

/// Exact algebraic reverse of [`revheun_sde_step`] given the identical `dw`.
pub fn revheun_sde_reverse<T: Real>(
    f: &SdeField<T>,
    s_next: &RevHeunSdeState<T>,
    dt: T,
    dw: &[T],
) -> Result<RevHeunSdeState<T>> {
    let d = s_next.y.len();
    let t = s_next.t - dt;
    let noise_next = f.sigma_matvec(&s_next.sigma, dw);
    let mut y_hat = vec![T::zero(); d];
    for i in 0..d {
        y_hat[i] = T::two() * s_next.y[i] - s_next.y_hat[i] - s_next.mu[i] * dt - noise_next[i];
    }
    let mu = f.drift.eval(t, &y_hat)?;
    let sigma = f.diffusion.eval(t, &y_hat)?;
    let noise = f.sigma_matvec(&sigma, dw);
    let mut y = s_next.y.clone();
    for i in 0..d {
        y[i] -= T::half() * (s_next.mu[i] + mu[i]) * dt
            + T::half() * (noise_next[i] + noise[i]);
    }
    Ok(RevHeunSdeState {
        t,
        y,
        y_hat,
        mu,
        sigma,
    })
}

impl<T: Real> RevHeunSdeState<T> {
    /// Drops the stochastic extras, viewing this as an ODE reversible-Heun
    /// state (used when sigma = 0).
    pub fn as_ode_state(&self) -> RevHeunState<T> {
        RevHeunState {
            t: self.t,
            y: self.y.clone(),
            y_hat: self.y_hat.clone(),
            f_cached: self.mu.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Fixed-step solve loop
// ---------------------------------------------------------------------------

/// Which stochastic stepper to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdeStepper {
    /// Ito.
    EulerMaruyama,
    /// Stratonovich.
    StratonovichHeun,
    /// Ito; diagonal/scalar/additive noise only.
    Milstein,
    /// Stratonovich; algebraically reversible.
    ReversibleHeun,
}

impl SdeStepper {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "euler_maruyama" => Ok(Self::EulerMaruyama),
            "stratonovich_heun" => Ok(Self::StratonovichHeun),
            "milstein" => Ok(Self::Milstein),
            "reversible_heun_sde" => Ok(Self::ReversibleHeun),
            other => Err(Error::Config(format!(
                "unknown SDE stepper '{other}' (expected euler_maruyama, \
                 stratonovich_heun, milstein or reversible_heun_sde)"
            ))),
        }
    }
}

/// Solves the SDE from 0 to `t1` with `n_steps` equal steps, drawing
/// increments from the source. Returns the terminal state.
pub fn sde_solve<T: Real>(
    stepper: SdeStepper,
    f: &SdeField<T>,
    y0: &[T],
    t1: T,
    n_steps: usize,
    source: &mut dyn BrownianSource<T>,
) -> Result<Vec<T>> {
    if n_steps == 0 || t1 <= T::zero() {
        return Err(Error::Contract("sde_solve: need n_steps >= 1, t1 > 0".into()));
    }
    let dt = t1 / T::from_usize(n_steps).unwrap();
    let mut t = T::zero();
    let mut rev_state = match stepper {
        SdeStepper::ReversibleHeun => Some(RevHeunSdeState::init(f, t, y0)?),
        _ => None,
    };
    let mut y = y0.to_vec();
    for j in 0..n_steps {
        // Midpoint-recursion grid so the final point lands on t1 exactly.
        let t_next = if j + 1 == n_steps {
            t1
        } else {
            T::from_usize(j + 1).unwrap() * dt
        };
        let h = t_next - t;
        let dw = source.increment(t, t_next)?;
        match stepper {
            SdeStepper::EulerMaruyama => y = euler_maruyama_step(f, t, &y, h, &dw)?,
            SdeStepper::StratonovichHeun => y = stratonovich_heun_step(f, t, &y, h, &dw)?,
            SdeStepper::Milstein => y = milstein_step(f, t, &y, h, &dw)?,
            SdeStepper::ReversibleHeun => {
                let s = rev_state.take().unwrap();
                let next = revheun_sde_step(f, &s, h, &dw)?;
                y = next.y.clone();
                rev_state = Some(next);
            }
        }
        t = t_next;
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Strong-order measurement
// ---------------------------------------------------------------------------

/// Result of [`strong_order_estimate`]: the fitted slope of
/// log E|y_N - y(T)| against log dt, or `None` when every error sits at
/// machine epsilon (the estimate is saturated).
#[derive(Debug, Clone)]
pub struct StrongOrderReport<T> {
    pub dts: Vec<T>,
    pub mean_errors: Vec<T>,
    pub slope: Option<T>,
}

/// Measures the strong convergence order of a stepper against a pathwise
/// reference map `exact(t1, source)`, which may itself query the source (for
/// example at a fine dyadic grid). All dt solves of one path share a single
/// [`crate::brownian::BrownianInterval`], whose exact additivity makes
/// coarse and fine increments consistent.
#[allow(clippy::too_many_arguments)]
pub fn strong_order_estimate<T, F>(
    stepper: SdeStepper,
    f: &SdeField<T>,
    y0: &[T],
    exact: F,
    t1: T,
    step_counts: &[usize],
    n_paths: usize,
    seed: crate::brownian::Seed,
) -> Result<StrongOrderReport<T>>
where
    T: Real,
    F: Fn(T, &mut dyn BrownianSource<T>) -> Result<Vec<T>>,
{
    if step_counts.len() < 2 || n_paths == 0 {
        return Err(Error::Contract(
            "strong_order_estimate: need >= 2 step counts and >= 1 path".into(),
        ));
    }
    let mut sums = vec![T::zero(); step_counts.len()];
    for p in 0..n_paths {
        let path_seed = seed.child(p as u64);
        let mut source =
            crate::brownian::BrownianInterval::<T>::new(path_seed, f.dim_w, t1)?;
        let y_true = exact(t1, &mut source)?;
        for (i, &n) in step_counts.iter().enumerate() {
            let y_num = sde_solve(stepper, f, y0, t1, n, &mut source)?;
            let err: T = y_num
                .iter()
                .zip(&y_true)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            sums[i] += err;
        }
    }
    let np = T::from_usize(n_paths).unwrap();
    let mean_errors: Vec<T> = sums.iter().map(|&s| s / np).collect();
    let dts: Vec<T> = step_counts
        .iter()
        .map(|&n| t1 / T::from_usize(n).unwrap())
        .collect();
    let saturated = mean_errors.iter().all(|&e| e < T::c(1e-12));
    let slope = if saturated {
        None
    } else {
        Some(loglog_slope(&dts, &mean_errors))
    };
    Ok(StrongOrderReport {
        dts,
        mean_errors,
        slope,
    })
}
