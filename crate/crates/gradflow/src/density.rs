//! Continuous-normalising-flow density utilities.
//!
//! Along a trajectory of dy/dt = f(t, y), the log-density of the flow evolves
//! by d(log p)/dt = -div f(t, y(t)). The divergence is computed either
//! exactly (d vector-Jacobian products) or with Hutchinson's stochastic trace
//! estimator trace(A) = E[eps^T A eps].

use crate::brownian::Seed;
use crate::error::{Error, Result};
use crate::field::{FieldSpec, VectorField};
use crate::ode::{integrate, ControllerConfig};
use crate::real::Real;
use crate::tableau::ButcherTableau;

/// Distribution of the probe vectors for Hutchinson's estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsDist {
    /// Entries +-1: variance-optimal for diagonal-heavy Jacobians, and exact
    /// for diagonal ones.
    Rademacher,
    Gaussian,
}

/// How the divergence term is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum TraceMode {
    Exact,
    Hutchinson {
        eps_dist: EpsDist,
        n_samples: usize,
        seed: Seed,
    },
}

impl TraceMode {
    pub fn hutchinson(eps_dist: EpsDist, n_samples: usize, seed: Seed) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("TraceMode: need n_samples >= 1".into()));
        }
        Ok(TraceMode::Hutchinson {
            eps_dist,
            n_samples,
            seed,
        })
    }
}

fn draw_eps<T: Real>(dist: EpsDist, seed: Seed, d: usize) -> Vec<T> {
    match dist {
        EpsDist::Gaussian => seed.normals(d),
        EpsDist::Rademacher => (0..d as u64)
            .map(|k| {
                if seed.normal(k) >= 0.0 {
                    T::one()
                } else {
                    -T::one()
                }
            })
            .collect(),
    }
}

/// Exact divergence sum_k df_k/dy_k via d unit-cotangent vjps (O(d^2) cost).
pub fn divergence_exact<T: Real>(field: &dyn VectorField<T>, t: T, y: &[T]) -> Result<T> {
    let d = y.len();
    let mut div = T::zero();
    for k in 0..d {
        let mut cot = vec![T::zero(); d];
        cot[k] = T::one();
        div += field.vjp(t, y, &cot)?.grad_y[k];
    }
    Ok(div)
}

/// Hutchinson's estimator: the sample mean of eps^T (df/dy) eps over the
/// mode's probes. Unbiased for any isotropic probe distribution.
pub fn divergence_hutchinson<T: Real>(
    field: &dyn VectorField<T>,
    t: T,
    y: &[T],
    mode: &TraceMode,
) -> Result<T> {
    let (eps_dist, n_samples, seed) = match *mode {
        TraceMode::Exact => return divergence_exact(field, t, y),
        TraceMode::Hutchinson {
            eps_dist,
            n_samples,
            seed,
        } => (eps_dist, n_samples, seed),
    };
    let d = y.len();
    let mut acc = T::zero();
    for i in 0..n_samples {
        let eps = draw_eps::<T>(eps_dist, seed.child(i as u64), d);
        let pull = field.vjp(t, y, &eps)?;
        acc += crate::real::dot(&pull.grad_y, &eps);
    }
    Ok(acc / T::from_usize(n_samples).unwrap())
}

/// The divergence-augmented field over (y, l): y evolves by f and the extra
/// channel by -div f. The probe vectors are drawn once at construction and
/// held constant for the duration of any integration, so the augmented field
/// stays deterministic within a solve.
pub struct CnfAugmentedField<'a, T: Real> {
    field: &'a dyn VectorField<T>,
    probes: Option<Vec<Vec<T>>>,
}

impl<'a, T: Real> CnfAugmentedField<'a, T> {
    pub fn new(field: &'a dyn VectorField<T>, mode: &TraceMode) -> Self {
        let probes = match *mode {
            TraceMode::Exact => None,
            TraceMode::Hutchinson {
                eps_dist,
                n_samples,
                seed,
            } => Some(
                (0..n_samples)
                    .map(|i| draw_eps::<T>(eps_dist, seed.child(i as u64), field.dim_in()))
                    .collect(),
            ),
        };
        Self { field, probes }
    }

    fn divergence(&self, t: T, y: &[T]) -> Result<T> {
        match &self.probes {
            None => divergence_exact(self.field, t, y),
            Some(probes) => {
                let mut acc = T::zero();
                for eps in probes {
                    let pull = self.field.vjp(t, y, eps)?;
                    acc += crate::real::dot(&pull.grad_y, eps);
                }
                Ok(acc / T::from_usize(probes.len()).unwrap())
            }
        }
    }
}

impl<T: Real> VectorField<T> for CnfAugmentedField<'_, T> {
    fn spec(&self) -> FieldSpec {
        let inner = self.field.spec();
        FieldSpec {
            dim_in: inner.dim_in + 1,
            dim_out: inner.dim_out + 1,
            time_dependent: inner.time_dependent,
            params_dim: 0,
        }
    }

    fn eval(&self, t: T, z: &[T]) -> Result<Vec<T>> {
        let d = z.len() - 1;
        let y = &z[..d];
        let mut out = self.field.eval(t, y)?;
        out.push(-self.divergence(t, y)?);
        Ok(out)
    }

    fn vjp(&self, _t: T, _y: &[T], _c: &[T]) -> Result<crate::field::VjpResult<T>> {
        Err(Error::Unsupported("cnf augmented field has no vjp".into()))
    }

    fn jvp(&self, _t: T, _y: &[T], _v: &[T]) -> Result<Vec<T>> {
        Err(Error::Unsupported("cnf augmented field has no jvp".into()))
    }
}

/// Builds the divergence-augmented field over R^{d+1}.
pub fn cnf_augmented_field<'a, T: Real>(
    field: &'a dyn VectorField<T>,
    mode: &TraceMode,
) -> CnfAugmentedField<'a, T> {
    CnfAugmentedField::new(field, mode)
}

/// Log-density of the standard normal on R^d.
pub fn std_normal_logdensity<T: Real>(y: &[T]) -> T {
    let d = T::from_usize(y.len()).unwrap();
    let two_pi = T::c(2.0 * std::f64::consts::PI);
    -T::half() * (d * two_pi.ln() + y.iter().map(|&v| v * v).sum::<T>())
}

/// Log-density of the flow's terminal distribution at x: integrates the
/// augmented system backward from (x, 0) at t1 to t0 and returns
/// base_logdensity(y(t0)) minus the accumulated divergence integral.
#[allow(clippy::too_many_arguments)]
pub fn cnf_logprob<T: Real>(
    field: &dyn VectorField<T>,
    base_logdensity: &dyn Fn(&[T]) -> T,
    x: &[T],
    t0: T,
    t1: T,
    tab: &ButcherTableau<T>,
    cfg: &ControllerConfig<T>,
    mode: &TraceMode,
) -> Result<T> {
    let augmented = CnfAugmentedField::new(field, mode);
    let mut z = x.to_vec();
    z.push(T::zero());
    let sol = integrate(&augmented, &z, t1, t0, tab, cfg, None, &[], &[])?;
    let z0 = sol.terminal();
    let d = x.len();
    // l(t0) = integral of div f over [t0, t1] along the trajectory.
    Ok(base_logdensity(&z0[..d]) - z0[d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Activation, AnalyticField, Mlp};
    use crate::real::Real;

    #[test]
    fn exact_divergence_linear_and_rotation() {
        let f = AnalyticField::linear_scalar(0.7f64, 3);
        let div = divergence_exact(&f, 0.0, &[0.1, 0.2, 0.3]).unwrap();
        assert!((div - 2.1).abs() < 1e-15); // lambda * d
        let rot = AnalyticField::rotation(1.3f64);
        assert_eq!(divergence_exact(&rot, 0.0, &[0.5, -0.5]).unwrap(), 0.0);
    }

    #[test]
    fn exact_divergence_matches_fd_trace_on_mlp() {
        let mlp = Mlp::<f64>::init(&[3, 10, 3], Activation::Tanh, 7, 1.0).unwrap();
        let y = [0.2, -0.4, 0.6];
        let div = divergence_exact(&mlp, 0.0, &y).unwrap();
        let h = 1e-6;
        let mut fd = 0.0;
        for k in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            fd += (mlp.eval(0.0, &yp).unwrap()[k] - mlp.eval(0.0, &ym).unwrap()[k]) / (2.0 * h);
        }
        assert!((div - fd).abs() < 1e-5, "{div} vs {fd}");
    }

    #[test]
    fn exact_divergence_equals_jvp_assembled_trace() {
        let mlp = Mlp::<f64>::init(&[4, 12, 4], Activation::Silu, 19, 1.0).unwrap();
        let y = [0.1, 0.2, -0.3, 0.4];
        let div = divergence_exact(&mlp, 0.0, &y).unwrap();
        let mut trace = 0.0;
        for k in 0..4 {
            let mut tan = [0.0; 4];
            tan[k] = 1.0;
            trace += mlp.jvp(0.0, &y, &tan).unwrap()[k];
        }
        assert!((div - trace).abs() <= 1e-10);
    }

    #[test]
    fn rademacher_exact_for_diagonal_jacobian() {
        // f = lambda y has a diagonal Jacobian: every single Rademacher
        // sample gives the trace exactly.
        let f = AnalyticField::linear_scalar(-0.9f64, 4);
        for i in 0..20 {
            let mode = TraceMode::hutchinson(EpsDist::Rademacher, 1, Seed::from_u64(i)).unwrap();
            let est = divergence_hutchinson(&f, 0.0, &[0.1, 0.2, 0.3, 0.4], &mode).unwrap();
            assert!((est - (-0.9 * 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_hutchinson_is_unbiased() {
        // Fixed 5x5 linear map with known trace.
        let a: Vec<Vec<f64>> = vec![
            vec![0.9, 0.1, -0.3, 0.0, 0.2],
            vec![0.4, -1.2, 0.5, 0.3, -0.1],
            vec![0.0, 0.7, 0.6, -0.2, 0.8],
            vec![-0.5, 0.2, 0.1, 1.1, 0.0],
            vec![0.3, -0.4, 0.0, 0.6, -0.7],
        ];
        let true_trace: f64 = (0..5).map(|i| a[i][i]).sum();
        let a2 = a.clone();
        let a3 = a.clone();
        let field = AnalyticField::new(
            crate::field::FieldSpec {
                dim_in: 5,
                dim_out: 5,
                time_dependent: false,
                params_dim: 0,
            },
            vec![],
            move |_t, y: &[f64], _p| {
                a.iter()
                    .map(|row| row.iter().zip(y).map(|(&r, &v)| r * v).sum())
                    .collect()
            },
            move |_t, _y, _p| a2.clone(),
            None,
        );
        let n = 100_000;
        let mode = TraceMode::hutchinson(EpsDist::Gaussian, n, Seed::from_u64(5)).unwrap();
        let est = divergence_hutchinson(&field, 0.0, &[0.0; 5], &mode).unwrap();
        // Var of one Gaussian sample is 2 ||A||_F^2 (up to the diagonal).
        let frob2: f64 = (0..5)
            .map(|i| (0..5).map(|j| a3[i][j] * a3[i][j]).sum::<f64>())
            .sum();
        let se = (2.0 * frob2 / n as f64).sqrt();
        assert!((est - true_trace).abs() < 4.0 * se, "{est} vs {true_trace}");
    }

    #[test]
    fn augmented_field_examples() {
        // Divergence-free field: the log-density channel stays constant.
        let rot = AnalyticField::rotation(2.0f64);
        let aug = cnf_augmented_field(&rot, &TraceMode::Exact);
        let out = aug.eval(0.0, &[0.3, 0.4, 7.0]).unwrap();
        assert_eq!(out[2], 0.0);
        // f = lambda y: l(T) - l(0) = -lambda d T under fixed-step solves.
        let lambda = 0.6f64;
        let f = AnalyticField::linear_scalar(lambda, 2);
        let aug = cnf_augmented_field(&f, &TraceMode::Exact);
        let sol = integrate(
            &aug,
            &[1.0, -1.0, 0.0],
            0.0,
            1.0,
            &ButcherTableau::rk4(),
            &ControllerConfig::default(),
            Some(0.05),
            &[],
            &[],
        )
        .unwrap();
        let ell = sol.terminal()[2];
        assert!((ell - (-lambda * 2.0)).abs() < 1e-10, "ell {ell}");
        // The y block of the augmented solve matches the unaugmented one.
        let plain = integrate(
            &f,
            &[1.0, -1.0],
            0.0,
            1.0,
            &ButcherTableau::rk4(),
            &ControllerConfig::default(),
            Some(0.05),
            &[],
            &[],
        )
        .unwrap();
        assert!((sol.terminal()[0] - plain.terminal()[0]).abs() <= 1e-12);
        assert!((sol.terminal()[1] - plain.terminal()[1]).abs() <= 1e-12);
    }

    #[test]
    fn logprob_identity_flow() {
        let zero = Mlp::<f64>::init(&[2, 2], Activation::Tanh, 0, 0.0).unwrap();
        let x = [0.7, -0.3];
        let lp = cnf_logprob(
            &zero,
            &std_normal_logdensity,
            &x,
            0.0,
            1.0,
            &ButcherTableau::dopri5(),
            &ControllerConfig::with_tols(1e-9, 1e-12),
            &TraceMode::Exact,
        )
        .unwrap();
        assert!((lp - std_normal_logdensity(&x)).abs() < 1e-9);
    }

    #[test]
    fn logprob_linear_flow_closed_form() {
        let lambda = 0.4;
        let t_end = 1.0;
        let f = AnalyticField::linear_scalar(lambda, 1);
        for &x in &[-1.5, -0.3, 0.0, 0.8, 2.0] {
            let lp = cnf_logprob(
                &f,
                &std_normal_logdensity,
                &[x],
                0.0,
                t_end,
                &ButcherTableau::dopri5(),
                &ControllerConfig::with_tols(1e-10, 1e-12),
                &TraceMode::Exact,
            )
            .unwrap();
            let pulled = x * (-lambda * t_end as f64).exp();
            let expect = std_normal_logdensity(&[pulled]) - lambda * t_end;
            assert!((lp - expect).abs() < 1e-6, "x = {x}: {lp} vs {expect}");
        }
    }

    #[test]
    fn logprob_mass_normalises() {
        // Integrate the density of a 1-d flow over a wide grid.
        let lambda = 0.5;
        let f = AnalyticField::linear_scalar(lambda, 1);
        let tab = ButcherTableau::dopri5();
        let cfg = ControllerConfig::with_tols(1e-9, 1e-12);
        let n = 400;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / n as f64;
        let mut mass = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let lp = cnf_logprob(
                &f,
                &std_normal_logdensity,
                &[x],
                0.0,
                1.0,
                &tab,
                &cfg,
                &TraceMode::Exact,
            )
            .unwrap();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            mass += w * lp.exp() * h;
        }
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }
}
