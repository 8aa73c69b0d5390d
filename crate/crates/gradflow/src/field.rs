//! Vector fields and their derivatives.
//!
//! A [`VectorField`] bundles evaluation of f(t, y) with vector-Jacobian and
//! Jacobian-vector products, which are the only two differentiation
//! primitives the rest of the crate needs. Two implementations ship here:
//!
//! * [`Mlp`] — a small multi-layer perceptron with hand-derived layer-by-layer
//!   derivatives, so gradient machinery is testable without an external
//!   autodiff system;
//! * [`AnalyticField`] — closures for f and its Jacobians, used for test
//!   problems with known derivatives.

use crate::error::{Error, Result};
use crate::real::{all_finite, Real};
use crate::rng::Mix64;

/// Shape metadata for a vector field f: R x R^dim_in -> R^dim_out with
/// flattened parameters theta in R^params_dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub dim_in: usize,
    pub dim_out: usize,
    pub time_dependent: bool,
    pub params_dim: usize,
}

/// Result of a vector-Jacobian product: (a^T df/dy, a^T df/dtheta).
#[derive(Debug, Clone, PartialEq)]
pub struct VjpResult<T> {
    pub grad_y: Vec<T>,
    pub grad_params: Vec<T>,
}

/// A vector field together with its differentiation primitives.
///
/// Implementations must be pure: repeated evaluation with identical inputs is
/// bit-identical, and fields are immutable after construction (safe to share
/// across threads).
pub trait VectorField<T: Real>: Send + Sync {
    fn spec(&self) -> FieldSpec;

    /// f(t, y).
    fn eval(&self, t: T, y: &[T]) -> Result<Vec<T>>;

    /// (a^T df/dy, a^T df/dtheta) for a cotangent `a` of length `dim_out`.
    fn vjp(&self, t: T, y: &[T], cotangent: &[T]) -> Result<VjpResult<T>>;

    /// (df/dy) v for a tangent `v` of length `dim_in`.
    fn jvp(&self, t: T, y: &[T], tangent: &[T]) -> Result<Vec<T>>;

    /// The flattened parameter vector theta.
    fn params(&self) -> Vec<T> {
        Vec::new()
    }

    /// Evaluates f with substituted parameters. Used by finite-difference
    /// oracles; the default only supports parameter-free fields.
    fn eval_with_params(&self, t: T, y: &[T], params: &[T]) -> Result<Vec<T>> {
        if !params.is_empty() {
            return Err(Error::Unsupported(
                "eval_with_params not implemented for this field".into(),
            ));
        }
        self.eval(t, y)
    }

    fn dim_in(&self) -> usize {
        self.spec().dim_in
    }

    fn dim_out(&self) -> usize {
        self.spec().dim_out
    }

    fn params_dim(&self) -> usize {
        self.spec().params_dim
    }
}

pub(crate) fn check_state<T: Real>(y: &[T], dim: usize, what: &str) -> Result<()> {
    if y.len() != dim {
        return Err(Error::Contract(format!(
            "{what}: expected length {dim}, got {}",
            y.len()
        )));
    }
    if !all_finite(y) {
        return Err(Error::NumericInput(format!("{what}: non-finite entries")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Continuously differentiable activations. ReLU is deliberately absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Silu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            // max(x, 0) + ln(1 + exp(-|x|)) is stable in both tails.
            Activation::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let th = x.tanh();
                T::one() - th * th
            }
            Activation::Softplus => sigmoid(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected tanh, softplus or silu)"
            ))),
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Parameters of an MLP, kept as flat arrays.
///
/// `weights` holds each layer's matrix in sequence, row-major; `biases` holds
/// each layer's bias vector in sequence. The flattened theta exposed through
/// [`VectorField::params`] is `weights ++ biases`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> MlpParams<T> {
    pub fn weights_len(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn biases_len(layer_sizes: &[usize]) -> usize {
        layer_sizes[1..].iter().sum()
    }

    pub fn params_dim(layer_sizes: &[usize]) -> usize {
        Self::weights_len(layer_sizes) + Self::biases_len(layer_sizes)
    }
}

/// A small MLP vector field with hand-derived derivatives.
///
/// Hidden layers apply the activation; the final layer is affine. With
/// `time_dependent` the input is `[t, y]` and `layer_sizes[0]` must equal
/// `dim_in + 1`.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    params: MlpParams<T>,
    time_dependent: bool,
    // Per-layer offsets into the weight/bias arrays.
    w_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

impl<T: Real> Mlp<T> {
    /// Initialises weights and biases uniformly in [-scale/sqrt(fan_in),
    /// scale/sqrt(fan_in)], deterministically from `seed`. `scale = 0` gives
    /// an identically-zero field.
    pub fn init(
        layer_sizes: &[usize],
        activation: Activation,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        Self::init_time_dependent(layer_sizes, activation, seed, scale, false)
    }

    pub fn init_time_dependent(
        layer_sizes: &[usize],
        activation: Activation,
        seed: u64,
        scale: f64,
        time_dependent: bool,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "mlp_init: need at least two layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("mlp_init: zero-width layer".into()));
        }
        if scale < 0.0 {
            return Err(Error::Config("mlp_init: scale must be >= 0".into()));
        }
        let mut rng = Mix64::new(seed);
        let mut weights = Vec::with_capacity(MlpParams::<T>::weights_len(layer_sizes));
        let mut biases = Vec::with_capacity(MlpParams::<T>::biases_len(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let u = scale / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                weights.push(T::c(u * rng.uniform_signed()));
            }
            for _ in 0..fan_out {
                biases.push(T::c(u * rng.uniform_signed()));
            }
        }
        Self::from_params(
            MlpParams {
                layer_sizes: layer_sizes.to_vec(),
                weights,
                biases,
                activation,
            },
            time_dependent,
        )
    }

    pub fn from_params(params: MlpParams<T>, time_dependent: bool) -> Result<Self> {
        let sizes = &params.layer_sizes;
        if sizes.len() < 2 {
            return Err(Error::Config("mlp: need at least two layer sizes".into()));
        }
        if params.weights.len() != MlpParams::<T>::weights_len(sizes)
            || params.biases.len() != MlpParams::<T>::biases_len(sizes)
        {
            return Err(Error::Config(
                "mlp: flat array lengths do not match layer sizes".into(),
            ));
        }
        let mut w_offsets = Vec::with_capacity(sizes.len() - 1);
        let mut b_offsets = Vec::with_capacity(sizes.len() - 1);
        let (mut wo, mut bo) = (0, 0);
        for w in sizes.windows(2) {
            w_offsets.push(wo);
            b_offsets.push(bo);
            wo += w[0] * w[1];
            bo += w[1];
        }
        Ok(Self {
            params,
            time_dependent,
            w_offsets,
            b_offsets,
        })
    }

    /// Rebuilds the MLP from a flattened theta (`weights ++ biases`).
    pub fn with_flat_params(&self, flat: &[T]) -> Result<Self> {
        let nw = self.params.weights.len();
        if flat.len() != nw + self.params.biases.len() {
            return Err(Error::Contract(format!(
                "with_flat_params: expected {} entries, got {}",
                nw + self.params.biases.len(),
                flat.len()
            )));
        }
        let mut p = self.params.clone();
        p.weights = flat[..nw].to_vec();
        p.biases = flat[nw..].to_vec();
        Self::from_params(p, self.time_dependent)
    }

    pub fn mlp_params(&self) -> &MlpParams<T> {
        &self.params
    }

    fn n_layers(&self) -> usize {
        self.params.layer_sizes.len() - 1
    }

    fn layer(&self, l: usize) -> (&[T], &[T], usize, usize) {
        let (n_in, n_out) = (
            self.params.layer_sizes[l],
            self.params.layer_sizes[l + 1],
        );
        let w = &self.params.weights[self.w_offsets[l]..self.w_offsets[l] + n_in * n_out];
        let b = &self.params.biases[self.b_offsets[l]..self.b_offsets[l] + n_out];
        (w, b, n_in, n_out)
    }

    fn input_vec(&self, t: T, y: &[T]) -> Vec<T> {
        if self.time_dependent {
            let mut v = Vec::with_capacity(y.len() + 1);
            v.push(t);
            v.extend_from_slice(y);
            v
        } else {
            y.to_vec()
        }
    }

    /// Forward pass keeping pre-activations, as needed by the backward pass.
    fn forward_trace(&self, t: T, y: &[T]) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
        let nl = self.n_layers();
        let mut acts = Vec::with_capacity(nl + 1);
        let mut pre = Vec::with_capacity(nl);
        acts.push(self.input_vec(t, y));
        for l in 0..nl {
            let (w, b, n_in, n_out) = self.layer(l);
            let a = acts.last().unwrap();
            let mut z = b.to_vec();
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    z[i] += row[j] * a[j];
                }
            }
            let out = if l + 1 < nl {
                z.iter().map(|&x| self.params.activation.apply(x)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(out);
        }
        (acts, pre)
    }
}

impl<T: Real> VectorField<T> for Mlp<T> {
    fn spec(&self) -> FieldSpec {
        let first = self.params.layer_sizes[0];
        FieldSpec {
            dim_in: if self.time_dependent { first - 1 } else { first },
            dim_out: *self.params.layer_sizes.last().unwrap(),
            time_dependent: self.time_dependent,
            params_dim: self.params.weights.len() + self.params.biases.len(),
        }
    }

    fn eval(&self, t: T, y: &[T]) -> Result<Vec<T>> {
        check_state(y, self.dim_in(), "mlp eval")?;
        let (acts, _) = self.forward_trace(t, y);
        Ok(acts.into_iter().last().unwrap())
    }

    fn vjp(&self, t: T, y: &[T], cotangent: &[T]) -> Result<VjpResult<T>> {
        check_state(y, self.dim_in(), "mlp vjp state")?;
        check_state(cotangent, self.dim_out(), "mlp vjp cotangent")?;
        let (acts, pre) = self.forward_trace(t, y);
        let nl = self.n_layers();
        let mut grad_w = vec![T::zero(); self.params.weights.len()];
        let mut grad_b = vec![T::zero(); self.params.biases.len()];
        let mut g = cotangent.to_vec();
        for l in (0..nl).rev() {
            let (w, _, n_in, n_out) = self.layer(l);
            // Through the activation (hidden layers only).
            if l + 1 < nl {
                for i in 0..n_out {
                    g[i] *= self.params.activation.derivative(pre[l][i]);
                }
            }
            let a = &acts[l];
            let gw = &mut grad_w[self.w_offsets[l]..self.w_offsets[l] + n_in * n_out];
            let gb = &mut grad_b[self.b_offsets[l]..self.b_offsets[l] + n_out];
            for i in 0..n_out {
                gb[i] += g[i];
                for j in 0..n_in {
                    gw[i * n_in + j] += g[i] * a[j];
                }
            }
            let mut g_prev = vec![T::zero(); n_in];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    g_prev[j] += row[j] * g[i];
                }
            }
            g = g_prev;
        }
        let grad_y = if self.time_dependent {
            g[1..].to_vec()
        } else {
            g
        };
        let mut grad_params = grad_w;
        grad_params.extend(grad_b);
        Ok(VjpResult {
            grad_y,
            grad_params,
        })
    }

    fn jvp(&self, t: T, y: &[T], tangent: &[T]) -> Result<Vec<T>> {
        check_state(y, self.dim_in(), "mlp jvp state")?;
        check_state(tangent, self.dim_in(), "mlp jvp tangent")?;
        // Dual-number propagation: carry (value, tangent) through each layer.
        let nl = self.n_layers();
        let mut a = self.input_vec(t, y);
        let mut da = if self.time_dependent {
            let mut v = Vec::with_capacity(tangent.len() + 1);
            v.push(T::zero());
            v.extend_from_slice(tangent);
            v
        } else {
            tangent.to_vec()
        };
        for l in 0..nl {
            let (w, b, n_in, n_out) = self.layer(l);
            let mut z = b.to_vec();
            let mut dz = vec![T::zero(); n_out];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    z[i] += row[j] * a[j];
                    dz[i] += row[j] * da[j];
                }
            }
            if l + 1 < nl {
                for i in 0..n_out {
                    dz[i] *= self.params.activation.derivative(z[i]);
                    z[i] = self.params.activation.apply(z[i]);
                }
            }
            a = z;
            da = dz;
        }
        Ok(da)
    }

    fn params(&self) -> Vec<T> {
        let mut p = self.params.weights.clone();
        p.extend_from_slice(&self.params.biases);
        p
    }

    fn eval_with_params(&self, t: T, y: &[T], params: &[T]) -> Result<Vec<T>> {
        self.with_flat_params(params)?.eval(t, y)
    }
}

// ---------------------------------------------------------------------------
// Analytic fields
// ---------------------------------------------------------------------------

type EvalFn<T> = dyn Fn(T, &[T], &[T]) -> Vec<T> + Send + Sync;
type JacFn<T> = dyn Fn(T, &[T], &[T]) -> Vec<Vec<T>> + Send + Sync;

/// A field defined by closures for f(t, y; theta) and its Jacobians, from
/// which vjp/jvp are assembled. Used for test problems with hand-derived
/// derivatives.
pub struct AnalyticField<T: Real> {
    spec: FieldSpec,
    params: Vec<T>,
    f: Box<EvalFn<T>>,
    /// Rows of df/dy: dim_out x dim_in.
    jac_y: Box<JacFn<T>>,
    /// Rows of df/dtheta: dim_out x params_dim; `None` means zero.
    jac_p: Option<Box<JacFn<T>>>,
}

impl<T: Real> AnalyticField<T> {
    pub fn new(
        spec: FieldSpec,
        params: Vec<T>,
        f: impl Fn(T, &[T], &[T]) -> Vec<T> + Send + Sync + 'static,
        jac_y: impl Fn(T, &[T], &[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
        jac_p: Option<Box<JacFn<T>>>,
    ) -> Self {
        assert_eq!(spec.params_dim, params.len());
        Self {
            spec,
            params,
            f: Box::new(f),
            jac_y: Box::new(jac_y),
            jac_p,
        }
    }

    /// f(t, y) = lambda * y on R^dim, with theta = [lambda].
    pub fn linear_scalar(lambda: T, dim: usize) -> Self {
        Self::new(
            FieldSpec {
                dim_in: dim,
                dim_out: dim,
                time_dependent: false,
                params_dim: 1,
            },
            vec![lambda],
            |_t, y, p| y.iter().map(|&yi| p[0] * yi).collect(),
            |_t, y, p| {
                (0..y.len())
                    .map(|i| {
                        let mut row = vec![T::zero(); y.len()];
                        row[i] = p[0];
                        row
                    })
                    .collect()
            },
            Some(Box::new(|_t, y: &[T], _p: &[T]| {
                y.iter().map(|&yi| vec![yi]).collect()
            })),
        )
    }

    /// Planar rotation f(y) = omega * (y2, -y1), with theta = [omega].
    pub fn rotation(omega: T) -> Self {
        Self::new(
            FieldSpec {
                dim_in: 2,
                dim_out: 2,
                time_dependent: false,
                params_dim: 1,
            },
            vec![omega],
            |_t, y, p| vec![p[0] * y[1], -p[0] * y[0]],
            |_t, _y, p| vec![vec![T::zero(), p[0]], vec![-p[0], T::zero()]],
            Some(Box::new(|_t, y: &[T], _p: &[T]| {
                vec![vec![y[1]], vec![-y[0]]]
            })),
        )
    }

    /// A parameter-free field from value and Jacobian closures.
    pub fn parameter_free(
        dim_in: usize,
        dim_out: usize,
        f: impl Fn(T, &[T]) -> Vec<T> + Send + Sync + 'static,
        jac_y: impl Fn(T, &[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            FieldSpec {
                dim_in,
                dim_out,
                time_dependent: true,
                params_dim: 0,
            },
            Vec::new(),
            move |t, y, _p| f(t, y),
            move |t, y, _p| jac_y(t, y),
            None,
        )
    }
}

impl<T: Real> VectorField<T> for AnalyticField<T> {
    fn spec(&self) -> FieldSpec {
        self.spec
    }

    fn eval(&self, t: T, y: &[T]) -> Result<Vec<T>> {
        check_state(y, self.spec.dim_in, "analytic eval")?;
        Ok((self.f)(t, y, &self.params))
    }

    fn vjp(&self, t: T, y: &[T], cotangent: &[T]) -> Result<VjpResult<T>> {
        check_state(y, self.spec.dim_in, "analytic vjp state")?;
        check_state(cotangent, self.spec.dim_out, "analytic vjp cotangent")?;
        let jy = (self.jac_y)(t, y, &self.params);
        let mut grad_y = vec![T::zero(); self.spec.dim_in];
        for (i, row) in jy.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                grad_y[j] += cotangent[i] * v;
            }
        }
        let mut grad_params = vec![T::zero(); self.spec.params_dim];
        if let Some(jp) = &self.jac_p {
            for (i, row) in jp(t, y, &self.params).iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    grad_params[j] += cotangent[i] * v;
                }
            }
        }
        Ok(VjpResult {
            grad_y,
            grad_params,
        })
    }

    fn jvp(&self, t: T, y: &[T], tangent: &[T]) -> Result<Vec<T>> {
        check_state(y, self.spec.dim_in, "analytic jvp state")?;
        check_state(tangent, self.spec.dim_in, "analytic jvp tangent")?;
        let jy = (self.jac_y)(t, y, &self.params);
        Ok(jy
            .iter()
            .map(|row| row.iter().zip(tangent).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    fn params(&self) -> Vec<T> {
        self.params.clone()
    }

    fn eval_with_params(&self, t: T, y: &[T], params: &[T]) -> Result<Vec<T>> {
        if params.len() != self.spec.params_dim {
            return Err(Error::Contract("eval_with_params: wrong length".into()));
        }
        Ok((self.f)(t, y, params))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference check
// ---------------------------------------------------------------------------

/// Report from [`fd_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdReport<T> {
    pub max_rel_err_y: T,
    pub max_rel_err_params: T,
}

/// Compares the field's vjp and jvp against central finite differences over
/// every coordinate. Relative errors use max(1, |entry|) as the scale.
pub fn fd_check<T: Real>(
    field: &dyn VectorField<T>,
    t: T,
    y: &[T],
    step: T,
) -> Result<FdReport<T>> {
    if step <= T::zero() {
        return Err(Error::Contract("fd_check: step must be > 0".into()));
    }
    let spec = field.spec();
    let (d_in, d_out, m) = (spec.dim_in, spec.dim_out, spec.params_dim);

    // Jacobian wrt y, three ways.
    let mut jac_fd = vec![vec![T::zero(); d_in]; d_out];
    for j in 0..d_in {
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        yp[j] += step;
        ym[j] -= step;
        let fp = field.eval(t, &yp)?;
        let fm = field.eval(t, &ym)?;
        for i in 0..d_out {
            jac_fd[i][j] = (fp[i] - fm[i]) / (T::two() * step);
        }
    }
    let mut max_y = T::zero();
    for i in 0..d_out {
        let mut cot = vec![T::zero(); d_out];
        cot[i] = T::one();
        let row = field.vjp(t, y, &cot)?.grad_y;
        for j in 0..d_in {
            let scale = T::one().max(jac_fd[i][j].abs());
            max_y = max_y.max((row[j] - jac_fd[i][j]).abs() / scale);
        }
    }
    for j in 0..d_in {
        let mut tan = vec![T::zero(); d_in];
        tan[j] = T::one();
        let col = field.jvp(t, y, &tan)?;
        for i in 0..d_out {
            let scale = T::one().max(jac_fd[i][j].abs());
            max_y = max_y.max((col[i] - jac_fd[i][j]).abs() / scale);
        }
    }

    // Jacobian wrt theta.
    let mut max_p = T::zero();
    if m > 0 {
        let theta = field.params();
        let mut jp_fd = vec![vec![T::zero(); m]; d_out];
        for j in 0..m {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += step;
            tm[j] -= step;
            let fp = field.eval_with_params(t, y, &tp)?;
            let fm = field.eval_with_params(t, y, &tm)?;
            for i in 0..d_out {
                jp_fd[i][j] = (fp[i] - fm[i]) / (T::two() * step);
            }
        }
        for i in 0..d_out {
            let mut cot = vec![T::zero(); d_out];
            cot[i] = T::one();
            let row = field.vjp(t, y, &cot)?.grad_params;
            for j in 0..m {
                let scale = T::one().max(jp_fd[i][j].abs());
                max_p = max_p.max((row[j] - jp_fd[i][j]).abs() / scale);
            }
        }
    }

    Ok(FdReport {
        max_rel_err_y: max_y,
        max_rel_err_params: max_p,
    })
}
