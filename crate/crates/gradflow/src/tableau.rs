//! Butcher tableaux for explicit Runge-Kutta methods.

use crate::error::{Error, Result};
use crate::real::Real;

/// An explicit Runge-Kutta tableau. `a` is strictly lower triangular, `b` the
/// solution weights, `b_embedded` the optional embedded (lower-order) weights
/// used for the error estimate y_err = dt * sum_i (b_i - b_embedded_i) k_i,
/// and `c` the stage nodes.
#[derive(Debug, Clone)]
pub struct ButcherTableau<T> {
    pub order: u32,
    pub a: Vec<Vec<T>>,
    pub b: Vec<T>,
    pub b_embedded: Option<Vec<T>>,
    pub c: Vec<T>,
}

impl<T: Real> ButcherTableau<T> {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Validates explicitness, row-sum consistency c_i = sum_j a_ij and
    /// sum_i b_i = 1.
    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if self.a.len() != s || self.c.len() != s {
            return Err(Error::Config("tableau: inconsistent stage count".into()));
        }
        if let Some(be) = &self.b_embedded {
            if be.len() != s {
                return Err(Error::Config("tableau: embedded weight length".into()));
            }
        }
        let tol = T::c(1e-12);
        for (i, row) in self.a.iter().enumerate() {
            if row.len() != s {
                return Err(Error::Config("tableau: ragged a matrix".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if j >= i && v != T::zero() {
                    return Err(Error::Config(format!(
                        "tableau: a[{i}][{j}] nonzero above the diagonal (not explicit)"
                    )));
                }
            }
            let row_sum: T = row.iter().copied().sum();
            if (row_sum - self.c[i]).abs() > tol {
                return Err(Error::Config(format!(
                    "tableau: row {i} sum does not match c[{i}]"
                )));
            }
        }
        let b_sum: T = self.b.iter().copied().sum();
        if (b_sum - T::one()).abs() > tol {
            return Err(Error::Config("tableau: b weights do not sum to 1".into()));
        }
        Ok(())
    }

    fn from_f64(
        order: u32,
        a: &[&[f64]],
        b: &[f64],
        b_embedded: Option<&[f64]>,
        c: &[f64],
    ) -> Self {
        let s = b.len();
        let mut a_full = vec![vec![T::zero(); s]; s];
        for (i, row) in a.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                a_full[i + 1][j] = T::c(v);
            }
        }
        Self {
            order,
            a: a_full,
            b: b.iter().map(|&v| T::c(v)).collect(),
            b_embedded: b_embedded.map(|be| be.iter().map(|&v| T::c(v)).collect()),
            c: c.iter().map(|&v| T::c(v)).collect(),
        }
    }

    /// Explicit Euler, order 1.
    pub fn euler() -> Self {
        Self::from_f64(1, &[], &[1.0], None, &[0.0])
    }

    /// Heun's method (explicit trapezoidal), order 2.
    pub fn heun() -> Self {
        Self::from_f64(2, &[&[1.0]], &[0.5, 0.5], None, &[0.0, 1.0])
    }

    /// Explicit midpoint, order 2.
    pub fn midpoint() -> Self {
        Self::from_f64(2, &[&[0.5]], &[0.0, 1.0], None, &[0.0, 0.5])
    }

    /// The classic RK4, order 4.
    pub fn rk4() -> Self {
        Self::from_f64(
            4,
            &[&[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
            &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            None,
            &[0.0, 0.5, 0.5, 1.0],
        )
    }

    /// Dormand-Prince 5(4), order 5 with an embedded 4th-order error estimate.
    pub fn dopri5() -> Self {
        Self::from_f64(
            5,
            &[
                &[1.0 / 5.0],
                &[3.0 / 40.0, 9.0 / 40.0],
                &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
                &[
                    19372.0 / 6561.0,
                    -25360.0 / 2187.0,
                    64448.0 / 6561.0,
                    -212.0 / 729.0,
                ],
                &[
                    9017.0 / 3168.0,
                    -355.0 / 33.0,
                    46732.0 / 5247.0,
                    49.0 / 176.0,
                    -5103.0 / 18656.0,
                ],
                &[
                    35.0 / 384.0,
                    0.0,
                    500.0 / 1113.0,
                    125.0 / 192.0,
                    -2187.0 / 6784.0,
                    11.0 / 84.0,
                ],
            ],
            &[
                35.0 / 384.0,
                0.0,
                500.0 / 1113.0,
                125.0 / 192.0,
                -2187.0 / 6784.0,
                11.0 / 84.0,
                0.0,
            ],
            Some(&[
                5179.0 / 57600.0,
                0.0,
                7571.0 / 16695.0,
                393.0 / 640.0,
                -92097.0 / 339200.0,
                187.0 / 2100.0,
                1.0 / 40.0,
            ]),
            &[0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0],
        )
    }

    /// Looks a tableau up by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(Self::euler()),
            "heun" => Ok(Self::heun()),
            "midpoint" => Ok(Self::midpoint()),
            "rk4" => Ok(Self::rk4()),
            "dopri5" => Ok(Self::dopri5()),
            other => Err(Error::Config(format!(
                "unknown tableau '{other}' (expected euler, heun, midpoint, rk4 or dopri5)"
            ))),
        }
    }

    pub const NAMES: &'static [&'static str] = &["euler", "heun", "midpoint", "rk4", "dopri5"];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_tableaux_validate() {
        for name in ButcherTableau::<f64>::NAMES {
            ButcherTableau::<f64>::by_name(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn dopri5_has_embedded_weights() {
        let tab = ButcherTableau::<f64>::dopri5();
        let be = tab.b_embedded.as_ref().unwrap();
        let s: f64 = be.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(ButcherTableau::<f64>::by_name("dopri853").is_err());
    }
}
