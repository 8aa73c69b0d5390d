//! Control-path construction from (possibly irregular, possibly missing)
//! time series: channel augmentation, four interpolation schemes, reduction
//! of a CDE to an ODE, and the depth-2 logsignature (log-ODE) reduction.

use crate::error::{Error, Result};
use crate::field::{check_state, FieldSpec, VectorField};
use crate::real::Real;

// ---------------------------------------------------------------------------
// Time series
// ---------------------------------------------------------------------------

/// An irregularly sampled, possibly partially observed time series.
/// `xs[j][k]` is channel k at time `ts[j]`; NaN marks a missing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries<T> {
    pub ts: Vec<T>,
    pub xs: Vec<Vec<T>>,
    pub labels: Vec<String>,
}

impl<T: Real> TimeSeries<T> {
    pub fn new(ts: Vec<T>, xs: Vec<Vec<T>>, labels: Vec<String>) -> Result<Self> {
        if ts.is_empty() || ts.len() != xs.len() {
            return Err(Error::Contract(
                "TimeSeries: need equal, nonzero numbers of times and rows".into(),
            ));
        }
        if !ts.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract(
                "TimeSeries: timestamps must be strictly increasing".into(),
            ));
        }
        let width = xs[0].len();
        if xs.iter().any(|row| row.len() != width) || labels.len() != width {
            return Err(Error::Contract("TimeSeries: ragged rows or labels".into()));
        }
        if !xs.iter().any(|row| row.iter().any(|v| !v.is_nan())) {
            return Err(Error::Contract(
                "TimeSeries: at least one observed entry required".into(),
            ));
        }
        Ok(Self { ts, xs, labels })
    }

    pub fn n_points(&self) -> usize {
        self.ts.len()
    }

    pub fn n_channels(&self) -> usize {
        self.labels.len()
    }

    /// Parses the plain-CSV series format: header row of channel names, the
    /// first column a timestamp, an empty cell or "NaN" marking a missing
    /// entry. One series per file.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract("csv: empty input".into()))?;
        let names: Vec<&str> = header.split(',').collect();
        if names.len() < 2 {
            return Err(Error::Contract("csv: need a time column plus data".into()));
        }
        let labels: Vec<String> = names[1..].iter().map(|s| s.trim().to_string()).collect();
        let mut ts = Vec::new();
        let mut xs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() {
                return Err(Error::Contract(format!(
                    "csv: row {} has {} cells, expected {}",
                    lineno + 2,
                    cells.len(),
                    names.len()
                )));
            }
            let t: f64 = cells[0].trim().parse().map_err(|_| {
                Error::Contract(format!("csv: bad timestamp '{}'", cells[0].trim()))
            })?;
            ts.push(T::c(t));
            let mut row = Vec::with_capacity(labels.len());
            for cell in &cells[1..] {
                let c = cell.trim();
                if c.is_empty() || c.eq_ignore_ascii_case("nan") {
                    row.push(T::nan());
                } else {
                    let v: f64 = c
                        .parse()
                        .map_err(|_| Error::Contract(format!("csv: bad value '{c}'")))?;
                    row.push(T::c(v));
                }
            }
            xs.push(row);
        }
        Self::new(ts, xs, labels)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (t, row) in self.ts.iter().zip(&self.xs) {
            out.push_str(&format!("{t}"));
            for v in row {
                out.push(',');
                if v.is_nan() {
                    // empty cell
                } else {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Prepends the timestamps as channel 0 (when `include_time`) and appends
/// cumulative per-channel observation counts (when `include_counts`):
/// c_{j,k} = #{m <= j : x_{m,k} observed}.
pub fn augment_series<T: Real>(
    series: &TimeSeries<T>,
    include_time: bool,
    include_counts: bool,
) -> TimeSeries<T> {
    let n = series.n_points();
    let k = series.n_channels();
    let mut labels = Vec::new();
    if include_time {
        labels.push("t".to_string());
    }
    labels.extend(series.labels.iter().cloned());
    if include_counts {
        labels.extend(series.labels.iter().map(|l| format!("count_{l}")));
    }
    let mut xs = Vec::with_capacity(n);
    let mut counts = vec![0usize; k];
    for j in 0..n {
        let mut row = Vec::with_capacity(labels.len());
        if include_time {
            row.push(series.ts[j]);
        }
        row.extend_from_slice(&series.xs[j]);
        if include_counts {
            for c in 0..k {
                if !series.xs[j][c].is_nan() {
                    counts[c] += 1;
                }
                row.push(T::from_usize(counts[c]).unwrap());
            }
        }
        xs.push(row);
    }
    TimeSeries {
        ts: series.ts.clone(),
        xs,
        labels,
    }
}

// ---------------------------------------------------------------------------
// Control paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Linear,
    Rectilinear,
    HermiteCubicBd,
    NaturalCubic,
}

impl Scheme {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Scheme::Linear),
            "rectilinear" => Ok(Scheme::Rectilinear),
            "hermite_cubic_bd" => Ok(Scheme::HermiteCubicBd),
            "natural_cubic" => Ok(Scheme::NaturalCubic),
            other => Err(Error::Config(format!(
                "unknown interpolation scheme '{other}' (expected linear, rectilinear, \
                 hermite_cubic_bd or natural_cubic)"
            ))),
        }
    }
}

/// How much of the future an interpolation scheme looks at: rectilinear is
/// continuously measurable, linear and Hermite look one observation ahead,
/// natural cubic splines are global.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurability {
    Continuous,
    Discrete,
    NotMeasurable,
}

/// Placement of the interpolation knots s_j.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotRule {
    /// s_j = t_j.
    STime,
    /// s_j = j.
    SIndex,
    /// The rectilinear rule s_j = t_j + j, r_j = t_j + j - 1.
    Rectilinear,
}

/// Per-channel piecewise cubic, over channel-specific breakpoints (missing
/// entries are interpolated over). Between the path start and a channel's
/// first observation (and past its last) the channel is held constant.
#[derive(Debug, Clone)]
struct Channel<T> {
    knots: Vec<T>,
    /// coeffs[i] = [a, b, c, d]: a + b u + c u^2 + d u^3 on
    /// [knots[i], knots[i+1]), u = s - knots[i].
    coeffs: Vec<[T; 4]>,
}

impl<T: Real> Channel<T> {
    fn constant(v: T, lo: T, hi: T) -> Self {
        Self {
            knots: vec![lo, hi],
            coeffs: vec![[v, T::zero(), T::zero(), T::zero()]],
        }
    }

    fn segment_index(&self, s: T) -> usize {
        if s <= self.knots[0] {
            return 0;
        }
        let n = self.coeffs.len();
        // First knot strictly greater than s, minus one: the right-limit
        // convention at interior knots.
        let idx = self.knots.partition_point(|&k| k <= s);
        idx.saturating_sub(1).min(n - 1)
    }

    fn eval(&self, s: T) -> T {
        let i = self.segment_index(s);
        let u = s - self.knots[i];
        let [a, b, c, d] = self.coeffs[i];
        ((d * u + c) * u + b) * u + a
    }

    fn deriv(&self, s: T) -> T {
        let i = self.segment_index(s);
        let u = s - self.knots[i];
        let [_, b, c, d] = self.coeffs[i];
        (T::c(3.0) * d * u + T::two() * c) * u + b
    }
}

/// A piecewise-polynomial control path x(s) with per-channel breakpoints.
#[derive(Debug, Clone)]
pub struct ControlPath<T> {
    pub scheme: Scheme,
    pub measurability: Measurability,
    s_lo: T,
    s_hi: T,
    channels: Vec<Channel<T>>,
    /// Interior knots at which the derivative may jump (piecewise-C0 schemes
    /// only); exported so adaptive solvers can step to them.
    jumps: Vec<T>,
}

impl<T: Real> ControlPath<T> {
    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn domain(&self) -> (T, T) {
        (self.s_lo, self.s_hi)
    }

    /// Interior derivative-jump locations (empty for C1 schemes).
    pub fn jumps(&self) -> &[T] {
        &self.jumps
    }

    fn check_domain(&self, s: T) -> Result<()> {
        if s < self.s_lo || s > self.s_hi {
            return Err(Error::Contract(format!(
                "ControlPath: {s} outside [{}, {}]",
                self.s_lo, self.s_hi
            )));
        }
        Ok(())
    }

    /// x(s). At knots the value is continuous; out-of-range s is an error.
    pub fn eval(&self, s: T) -> Result<Vec<T>> {
        self.check_domain(s)?;
        Ok(self.channels.iter().map(|c| c.eval(s)).collect())
    }

    /// dx/ds, using the right limit at interior knots.
    pub fn deriv(&self, s: T) -> Result<Vec<T>> {
        self.check_domain(s)?;
        Ok(self.channels.iter().map(|c| c.deriv(s)).collect())
    }

    /// Builds a piecewise-linear path directly from (knot, value) pairs.
    pub fn piecewise_linear(knots: Vec<T>, values: Vec<Vec<T>>) -> Result<Self> {
        if knots.len() < 2 || knots.len() != values.len() {
            return Err(Error::Contract(
                "piecewise_linear: need matching knots and values, len >= 2".into(),
            ));
        }
        if !knots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract(
                "piecewise_linear: knots must be strictly increasing".into(),
            ));
        }
        let dim = values[0].len();
        let mut channels = Vec::with_capacity(dim);
        for k in 0..dim {
            let vals: Vec<T> = values.iter().map(|row| row[k]).collect();
            channels.push(linear_channel(&knots, &vals));
        }
        Ok(Self {
            scheme: Scheme::Linear,
            measurability: Measurability::Discrete,
            s_lo: knots[0],
            s_hi: *knots.last().unwrap(),
            jumps: knots[1..knots.len() - 1].to_vec(),
            channels,
        })
    }
}

fn linear_channel<T: Real>(knots: &[T], vals: &[T]) -> Channel<T> {
    let mut coeffs = Vec::with_capacity(knots.len() - 1);
    for i in 0..knots.len() - 1 {
        let h = knots[i + 1] - knots[i];
        coeffs.push([vals[i], (vals[i + 1] - vals[i]) / h, T::zero(), T::zero()]);
    }
    Channel {
        knots: knots.to_vec(),
        coeffs,
    }
}

fn hermite_bd_channel<T: Real>(knots: &[T], vals: &[T]) -> Channel<T> {
    let m = knots.len();
    // Backward-difference slopes; the first interval has no backward
    // difference, so its left derivative is pinned to zero.
    let mut d = vec![T::zero(); m];
    for i in 1..m {
        d[i] = (vals[i] - vals[i - 1]) / (knots[i] - knots[i - 1]);
    }
    let mut coeffs = Vec::with_capacity(m - 1);
    for i in 0..m - 1 {
        let h = knots[i + 1] - knots[i];
        let secant = (vals[i + 1] - vals[i]) / h;
        let (d0, d1) = (d[i], d[i + 1]);
        let c2 = (T::c(3.0) * secant - T::two() * d0 - d1) / h;
        let c3 = (d0 + d1 - T::two() * secant) / (h * h);
        coeffs.push([vals[i], d0, c2, c3]);
    }
    Channel {
        knots: knots.to_vec(),
        coeffs,
    }
}

fn natural_cubic_channel<T: Real>(knots: &[T], vals: &[T]) -> Channel<T> {
    let m = knots.len();
    // Second derivatives from the natural-boundary tridiagonal system,
    // solved with the Thomas algorithm. M[0] = M[m-1] = 0.
    let mut mom = vec![T::zero(); m];
    if m > 2 {
        let n = m - 2;
        let mut sub = vec![T::zero(); n];
        let mut diag = vec![T::zero(); n];
        let mut sup = vec![T::zero(); n];
        let mut rhs = vec![T::zero(); n];
        for i in 1..m - 1 {
            let h0 = knots[i] - knots[i - 1];
            let h1 = knots[i + 1] - knots[i];
            sub[i - 1] = h0 / T::c(6.0);
            diag[i - 1] = (h0 + h1) / T::c(3.0);
            sup[i - 1] = h1 / T::c(6.0);
            rhs[i - 1] = (vals[i + 1] - vals[i]) / h1 - (vals[i] - vals[i - 1]) / h0;
        }
        for i in 1..n {
            let w = sub[i] / diag[i - 1];
            diag[i] = diag[i] - w * sup[i - 1];
            rhs[i] = rhs[i] - w * rhs[i - 1];
        }
        mom[m - 2] = rhs[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            mom[i + 1] = (rhs[i] - sup[i] * mom[i + 2]) / diag[i];
        }
    }
    let mut coeffs = Vec::with_capacity(m - 1);
    for i in 0..m - 1 {
        let h = knots[i + 1] - knots[i];
        let b = (vals[i + 1] - vals[i]) / h - h * (T::two() * mom[i] + mom[i + 1]) / T::c(6.0);
        let c = mom[i] / T::two();
        let d = (mom[i + 1] - mom[i]) / (T::c(6.0) * h);
        coeffs.push([vals[i], b, c, d]);
    }
    Channel {
        knots: knots.to_vec(),
        coeffs,
    }
}

/// Builds an interpolation of the series, per the scheme and knot rule. Each
/// channel is interpolated separately; missing entries are interpolated over
/// (or filled forward, for rectilinear). Rectilinear requires the time
/// channel at index 0 (see [`augment_series`]).
pub fn build_interpolation<T: Real>(
    series: &TimeSeries<T>,
    scheme: Scheme,
    knot_rule: KnotRule,
) -> Result<ControlPath<T>> {
    let n = series.n_points();
    if n < 2 {
        return Err(Error::Contract(
            "build_interpolation: need at least two sample times".into(),
        ));
    }
    if scheme == Scheme::Rectilinear {
        return build_rectilinear(series, knot_rule);
    }
    let s: Vec<T> = match knot_rule {
        KnotRule::STime => series.ts.clone(),
        KnotRule::SIndex => (0..n).map(|j| T::from_usize(j).unwrap()).collect(),
        KnotRule::Rectilinear => {
            return Err(Error::Config(
                "the rectilinear knot rule applies only to the rectilinear scheme".into(),
            ))
        }
    };
    let (s_lo, s_hi) = (s[0], *s.last().unwrap());
    let mut channels = Vec::with_capacity(series.n_channels());
    for k in 0..series.n_channels() {
        let mut knots = Vec::new();
        let mut vals = Vec::new();
        for j in 0..n {
            let v = series.xs[j][k];
            if !v.is_nan() {
                knots.push(s[j]);
                vals.push(v);
            }
        }
        let channel = match (knots.len(), scheme) {
            (0, _) => {
                return Err(Error::Contract(format!(
                    "channel {k} has no observed entries"
                )))
            }
            (1, Scheme::Linear | Scheme::NaturalCubic) => Channel::constant(vals[0], s_lo, s_hi),
            (1, Scheme::HermiteCubicBd) => {
                return Err(Error::Contract(format!(
                    "hermite_cubic_bd needs at least two observations in channel {k}"
                )))
            }
            (_, Scheme::Linear) => linear_channel(&knots, &vals),
            (_, Scheme::HermiteCubicBd) => hermite_bd_channel(&knots, &vals),
            (_, Scheme::NaturalCubic) => natural_cubic_channel(&knots, &vals),
            (_, Scheme::Rectilinear) => unreachable!(),
        };
        channels.push(channel);
    }
    let (measurability, jumps) = match scheme {
        Scheme::Linear => (
            Measurability::Discrete,
            s[1..n - 1].to_vec(), // derivative jumps at interior knots
        ),
        Scheme::HermiteCubicBd => (Measurability::Discrete, Vec::new()),
        Scheme::NaturalCubic => (Measurability::NotMeasurable, Vec::new()),
        Scheme::Rectilinear => unreachable!(),
    };
    Ok(ControlPath {
        scheme,
        measurability,
        s_lo,
        s_hi,
        channels,
        jumps,
    })
}

fn build_rectilinear<T: Real>(
    series: &TimeSeries<T>,
    knot_rule: KnotRule,
) -> Result<ControlPath<T>> {
    let n = series.n_points();
    let k = series.n_channels();
    if k < 1 {
        return Err(Error::Contract("rectilinear: need channels".into()));
    }
    // Knot layout s_0 < r_1 < s_1 < ... < r_n < s_n; the default rule is
    // s_j = t_j + j, r_j = t_j + j - 1.
    let (s, r): (Vec<T>, Vec<T>) = match knot_rule {
        KnotRule::Rectilinear => {
            let s: Vec<T> = series
                .ts
                .iter()
                .enumerate()
                .map(|(j, &t)| t + T::from_usize(j).unwrap())
                .collect();
            let r: Vec<T> = series
                .ts
                .iter()
                .enumerate()
                .skip(1)
                .map(|(j, &t)| t + T::from_usize(j).unwrap() - T::one())
                .collect();
            (s, r)
        }
        KnotRule::SIndex => {
            // s_j = 2j, r_j = 2j - 1: the same alternating layout on indices.
            let s: Vec<T> = (0..n).map(|j| T::from_usize(2 * j).unwrap()).collect();
            let r: Vec<T> = (1..n).map(|j| T::from_usize(2 * j - 1).unwrap()).collect();
            (s, r)
        }
        KnotRule::STime => {
            return Err(Error::Config(
                "rectilinear needs alternating knots; use the rectilinear or s_eq_index rule"
                    .into(),
            ))
        }
    };
    for j in 0..n - 1 {
        if !(s[j] < r[j] && r[j] < s[j + 1]) {
            return Err(Error::Contract(
                "rectilinear: knots must alternate s_j < r_{j+1} < s_{j+1}".into(),
            ));
        }
    }
    // Fill-forward values; a channel unobserved so far fills with zero.
    let mut bar = vec![vec![T::zero(); k]; n];
    for c in 0..k {
        let mut last = T::zero();
        for j in 0..n {
            if !series.xs[j][c].is_nan() {
                last = series.xs[j][c];
            }
            bar[j][c] = last;
        }
    }
    // Global knot vector s_0, r_1, s_1, ..., r_n, s_n with per-channel
    // values: the time channel (index 0) advances on [s_j, r_{j+1}], the
    // others advance on [r_{j+1}, s_{j+1}].
    let mut knots = Vec::with_capacity(2 * n - 1);
    let mut values: Vec<Vec<T>> = Vec::with_capacity(2 * n - 1);
    for j in 0..n {
        if j > 0 {
            knots.push(r[j - 1]);
            let mut row = bar[j - 1].clone();
            row[0] = series.xs[j][0]; // time channel has advanced to t_{j}
            values.push(row);
        }
        knots.push(s[j]);
        values.push(bar[j].clone());
    }
    let mut path = ControlPath::piecewise_linear(knots, values)?;
    path.scheme = Scheme::Rectilinear;
    path.measurability = Measurability::Continuous;
    Ok(path)
}

/// Free-function forms matching the operation names.
pub fn path_eval<T: Real>(path: &ControlPath<T>, t: T) -> Result<Vec<T>> {
    path.eval(t)
}

pub fn path_deriv<T: Real>(path: &ControlPath<T>, t: T) -> Result<Vec<T>> {
    path.deriv(t)
}

// ---------------------------------------------------------------------------
// CDE -> ODE reduction
// ---------------------------------------------------------------------------

/// The ODE vector field g(t, y) = f(y) dx/dt obtained by reducing a CDE with
/// matrix-valued field f: R^{d_y} -> R^{d_y x d_x} (flattened row-major)
/// driven by the given control path.
pub struct CdeOde<T: Real> {
    f: Box<dyn VectorField<T>>,
    path: ControlPath<T>,
    dim_y: usize,
    dim_x: usize,
}

impl<T: Real> CdeOde<T> {
    pub fn new(f: Box<dyn VectorField<T>>, path: ControlPath<T>) -> Result<Self> {
        let dim_y = f.dim_in();
        let dim_x = path.dim();
        if f.dim_out() != dim_y * dim_x {
            return Err(Error::Contract(format!(
                "cde_to_ode: f returns {} values, expected dim_y * dim_x = {}",
                f.dim_out(),
                dim_y * dim_x
            )));
        }
        Ok(Self {
            f,
            path,
            dim_y,
            dim_x,
        })
    }

    /// Knot locations the adaptive solver should step to exactly.
    pub fn jumps(&self) -> &[T] {
        self.path.jumps()
    }

    pub fn path(&self) -> &ControlPath<T> {
        &self.path
    }
}

impl<T: Real> VectorField<T> for CdeOde<T> {
    fn spec(&self) -> FieldSpec {
        FieldSpec {
            dim_in: self.dim_y,
            dim_out: self.dim_y,
            time_dependent: true,
            params_dim: self.f.params_dim(),
        }
    }

    fn eval(&self, t: T, y: &[T]) -> Result<Vec<T>> {
        check_state(y, self.dim_y, "cde eval")?;
        let fm = self.f.eval(t, y)?;
        let xdot = self.path.deriv(t)?;
        let mut g = vec![T::zero(); self.dim_y];
        for i in 0..self.dim_y {
            let row = &fm[i * self.dim_x..(i + 1) * self.dim_x];
            g[i] = row.iter().zip(&xdot).map(|(&a, &b)| a * b).sum();
        }
        Ok(g)
    }

    fn vjp(&self, t: T, y: &[T], cotangent: &[T]) -> Result<crate::field::VjpResult<T>> {
        check_state(cotangent, self.dim_y, "cde vjp cotangent")?;
        let xdot = self.path.deriv(t)?;
        let mut cot_f = vec![T::zero(); self.dim_y * self.dim_x];
        for i in 0..self.dim_y {
            for k in 0..self.dim_x {
                cot_f[i * self.dim_x + k] = cotangent[i] * xdot[k];
            }
        }
        self.f.vjp(t, y, &cot_f)
    }

    fn jvp(&self, t: T, y: &[T], tangent: &[T]) -> Result<Vec<T>> {
        let fdot = self.f.jvp(t, y, tangent)?;
        let xdot = self.path.deriv(t)?;
        let mut g = vec![T::zero(); self.dim_y];
        for i in 0..self.dim_y {
            let row = &fdot[i * self.dim_x..(i + 1) * self.dim_x];
            g[i] = row.iter().zip(&xdot).map(|(&a, &b)| a * b).sum();
        }
        Ok(g)
    }

    fn params(&self) -> Vec<T> {
        self.f.params()
    }

    fn eval_with_params(&self, t: T, y: &[T], params: &[T]) -> Result<Vec<T>> {
        let fm = self.f.eval_with_params(t, y, params)?;
        let xdot = self.path.deriv(t)?;
        let mut g = vec![T::zero(); self.dim_y];
        for i in 0..self.dim_y {
            let row = &fm[i * self.dim_x..(i + 1) * self.dim_x];
            g[i] = row.iter().zip(&xdot).map(|(&a, &b)| a * b).sum();
        }
        Ok(g)
    }
}

/// Reduces a CDE dy = f(y) dx to the ODE dy/dt = f(y) dx/dt; the path's knot
/// set is exported as the solver's jump list (see [`CdeOde::jumps`]).
pub fn cde_to_ode<T: Real>(
    f: Box<dyn VectorField<T>>,
    path: ControlPath<T>,
) -> Result<CdeOde<T>> {
    CdeOde::new(f, path)
}

// ---------------------------------------------------------------------------
// Logsignatures
// ---------------------------------------------------------------------------

/// Dimension of the depth-M logsignature of a d-dimensional path, via the
/// Mobius sum beta(d, M) = sum_{k <= M} (1/k) sum_{j | k} mu(k/j) d^j.
/// Depth is capped at 2.
pub fn beta(d: usize, m: u32) -> Result<usize> {
    if d < 1 {
        return Err(Error::Contract("beta: need d >= 1".into()));
    }
    match m {
        1 | 2 => {}
        _ => {
            return Err(Error::Unsupported(format!(
                "beta: logsignature depth {m} unsupported (depth <= 2 only)"
            )))
        }
    }
    let mobius = |n: usize| -> i64 {
        match n {
            1 => 1,
            2 => -1,
            _ => unreachable!("only k <= 2 arises"),
        }
    };
    let mut total: i64 = 0;
    for k in 1..=m as usize {
        let mut inner: i64 = 0;
        for j in 1..=k {
            if k % j == 0 {
                inner += mobius(k / j) * (d as i64).pow(j as u32);
            }
        }
        debug_assert_eq!(inner % k as i64, 0);
        total += inner / k as i64;
    }
    Ok(total as usize)
}

/// Depth-2 logsignature of a piecewise-linear path given by its vertices:
/// the first d entries are the total increment, the remaining d(d-1)/2 the
/// Levy areas A_ij = 1/2 int (x_i dx_j - x_j dx_i) over ordered pairs i < j.
pub fn logsig2<T: Real>(points: &[Vec<T>]) -> Result<Vec<T>> {
    if points.len() < 2 {
        return Err(Error::Contract("logsig2: need at least two points".into()));
    }
    let d = points[0].len();
    if d < 1 {
        return Err(Error::Contract("logsig2: need d >= 1".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Contract("logsig2: ragged points".into()));
    }
    let base = &points[0];
    let n_areas = d * (d - 1) / 2;
    let mut increment = vec![T::zero(); d];
    for (k, inc) in increment.iter_mut().enumerate() {
        *inc = points[points.len() - 1][k] - base[k];
    }
    let mut areas = vec![T::zero(); n_areas];
    for seg in points.windows(2) {
        let (u, v) = (&seg[0], &seg[1]);
        let mut idx = 0;
        for i in 0..d {
            let mean_i = T::half() * (u[i] + v[i]) - base[i];
            let delta_i = v[i] - u[i];
            for j in i + 1..d {
                let mean_j = T::half() * (u[j] + v[j]) - base[j];
                let delta_j = v[j] - u[j];
                areas[idx] += T::half() * (mean_i * delta_j - mean_j * delta_i);
                idx += 1;
            }
        }
    }
    let mut out = increment;
    out.extend(areas);
    Ok(out)
}

/// Chen composition at depth 2: combines the logsignatures of two
/// consecutive path segments into the logsignature of their concatenation.
pub fn logsig2_chen<T: Real>(first: &[T], second: &[T], d: usize) -> Result<Vec<T>> {
    let expect = beta(d, 2)?;
    if first.len() != expect || second.len() != expect {
        return Err(Error::Contract("logsig2_chen: length mismatch".into()));
    }
    let mut out = vec![T::zero(); expect];
    for k in 0..d {
        out[k] = first[k] + second[k];
    }
    let mut idx = d;
    for i in 0..d {
        for j in i + 1..d {
            out[idx] = first[idx]
                + second[idx]
                + T::half() * (first[i] * second[j] - first[j] * second[i]);
            idx += 1;
        }
    }
    Ok(out)
}

/// A path of per-window logsignatures for the log-ODE method.
#[derive(Debug, Clone)]
pub struct LogSigPath<T> {
    /// Window boundaries r_0 < ... < r_m.
    pub windows: Vec<T>,
    /// Per-window depth-M logsignatures (not yet divided by window length).
    pub values: Vec<Vec<T>>,
    pub depth: u32,
    pub dim: usize,
}

impl<T: Real> LogSigPath<T> {
    /// Dimension of each logsignature value.
    pub fn value_dim(&self) -> usize {
        beta(self.dim, self.depth).expect("validated at construction")
    }

    /// The drive logsig_j / (r_{j+1} - r_j) for window j.
    pub fn drive(&self, j: usize) -> Vec<T> {
        let h = self.windows[j + 1] - self.windows[j];
        self.values[j].iter().map(|&v| v / h).collect()
    }

    /// The piecewise-linear path in logsignature space whose derivative on
    /// window j equals `drive(j)`; driving a CDE with it realises the
    /// log-ODE reduction.
    pub fn as_control_path(&self) -> Result<ControlPath<T>> {
        let width = self.value_dim();
        let mut values = vec![vec![T::zero(); width]];
        for v in &self.values {
            let prev = values.last().unwrap().clone();
            values.push(prev.iter().zip(v).map(|(&a, &b)| a + b).collect());
        }
        ControlPath::piecewise_linear(self.windows.clone(), values)
    }
}

/// Reduces a series to per-window logsignatures of its linear interpolation:
/// the log-ODE preprocessing. Window bounds must start at t_0, end at t_n
/// and each contain at least one observation time.
pub fn logode_reduce<T: Real>(
    series: &TimeSeries<T>,
    window_bounds: &[T],
    depth: u32,
) -> Result<LogSigPath<T>> {
    if depth == 0 || depth > 2 {
        return Err(Error::Unsupported(format!(
            "logode_reduce: depth {depth} unsupported (1 or 2 only)"
        )));
    }
    if window_bounds.len() < 2 || !window_bounds.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Contract(
            "logode_reduce: window bounds must be increasing, len >= 2".into(),
        ));
    }
    let t0 = series.ts[0];
    let tn = *series.ts.last().unwrap();
    if window_bounds[0] != t0 || *window_bounds.last().unwrap() != tn {
        return Err(Error::Contract(
            "logode_reduce: windows must span [t_0, t_n] exactly".into(),
        ));
    }
    // Linear interpolation over missing entries, knots at the sample times.
    let path = build_interpolation(series, Scheme::Linear, KnotRule::STime)?;
    let d = path.dim();
    let full_width = beta(d, 2)?;
    let out_width = beta(d, depth)?;
    let mut values = Vec::with_capacity(window_bounds.len() - 1);
    for w in window_bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if !series.ts.iter().any(|&t| lo <= t && t <= hi) {
            return Err(Error::Contract(format!(
                "logode_reduce: window [{lo}, {hi}] contains no observations"
            )));
        }
        // Vertices: window bounds plus every sample time strictly inside.
        let mut pts = vec![path.eval(lo)?];
        for &t in &series.ts {
            if t > lo && t < hi {
                pts.push(path.eval(t)?);
            }
        }
        pts.push(path.eval(hi)?);
        let mut sig = logsig2(&pts)?;
        sig.truncate(if depth == 1 { d } else { full_width });
        values.push(sig);
    }
    let _ = out_width;
    Ok(LogSigPath {
        windows: window_bounds.to_vec(),
        values,
        depth,
        dim: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(ts: &[f64], xs: &[&[f64]]) -> TimeSeries<f64> {
        TimeSeries::new(
            ts.to_vec(),
            xs.iter().map(|r| r.to_vec()).collect(),
            (0..xs[0].len()).map(|k| format!("x{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_with_missing() {
        let text = "t,a,b\n0.0,1.0,2.0\n1.0,,3.0\n2.5,NaN,4.0\n";
        let s = TimeSeries::<f64>::from_csv(text).unwrap();
        assert_eq!(s.ts, vec![0.0, 1.0, 2.5]);
        assert!(s.xs[1][0].is_nan());
        assert!(s.xs[2][0].is_nan());
        assert_eq!(s.xs[2][1], 4.0);
        let again = TimeSeries::<f64>::from_csv(&s.to_csv()).unwrap();
        assert_eq!(again.ts, s.ts);
        assert!(again.xs[1][0].is_nan());
    }

    #[test]
    fn augment_time_and_counts() {
        let s = series(&[0.0, 1.0, 2.0], &[&[1.0], &[2.0], &[3.0]]);
        let a = augment_series(&s, true, true);
        assert_eq!(a.labels.len(), 3);
        // Channel 0 is time.
        assert_eq!(a.xs[0][0], 0.0);
        assert_eq!(a.xs[2][0], 2.0);
        // Fully observed counts are 1, 2, ..., n+1.
        assert_eq!(
            a.xs.iter().map(|r| r[2]).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn augment_counts_with_missing() {
        let s = series(
            &[0.0, 1.0, 2.0, 3.0],
            &[&[1.0], &[f64::NAN], &[2.0], &[3.0]],
        );
        let a = augment_series(&s, false, true);
        assert_eq!(
            a.xs.iter().map(|r| r[1]).collect::<Vec<_>>(),
            vec![1.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn linear_midpoint_is_mean() {
        let s = series(&[0.0, 1.0], &[&[2.0], &[4.0]]);
        let p = build_interpolation(&s, Scheme::Linear, KnotRule::STime).unwrap();
        assert_eq!(p.eval(0.5).unwrap(), vec![3.0]);
        assert_eq!(p.deriv(0.5).unwrap(), vec![2.0]);
        assert!(p.eval(1.5).is_err());
    }

    #[test]
    fn hermite_bd_derivative_is_backward_difference() {
        let s = series(&[0.0, 1.0, 3.0], &[&[0.0], &[2.0], &[1.0]]);
        let p = build_interpolation(&s, Scheme::HermiteCubicBd, KnotRule::STime).unwrap();
        // At s_1 the derivative equals (x_1 - x_0) / (s_1 - s_0) = 2, from
        // both sides (C^1 by construction).
        let eps = 1e-7;
        let right = p.deriv(1.0).unwrap()[0];
        let left = (p.eval(1.0).unwrap()[0] - p.eval(1.0 - eps).unwrap()[0]) / eps;
        assert!((right - 2.0).abs() < 1e-12, "right {right}");
        assert!((left - 2.0).abs() < 1e-5, "left {left}");
        // Value continuity at the knot.
        let below = p.eval(1.0 - 1e-12).unwrap()[0];
        assert!((below - 2.0).abs() < 1e-10);
        // Knot matching.
        assert!((p.eval(3.0).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hermite_single_observation_is_error() {
        let s = series(&[0.0, 1.0], &[&[1.0], &[f64::NAN]]);
        assert!(build_interpolation(&s, Scheme::HermiteCubicBd, KnotRule::STime).is_err());
    }

    #[test]
    fn natural_cubic_boundary_second_derivative() {
        let s = series(
            &[0.0, 1.0, 2.0, 3.0],
            &[&[0.0], &[1.0], &[-1.0], &[0.5]],
        );
        let p = build_interpolation(&s, Scheme::NaturalCubic, KnotRule::STime).unwrap();
        // Knot matching.
        for (t, v) in [(0.0, 0.0), (1.0, 1.0), (2.0, -1.0), (3.0, 0.5)] {
            assert!((p.eval(t).unwrap()[0] - v).abs() < 1e-12);
        }
        // Second derivative vanishes at both ends (finite differences).
        let h = 1e-5;
        let dd0 = (p.eval(2.0 * h).unwrap()[0] - 2.0 * p.eval(h).unwrap()[0]
            + p.eval(0.0).unwrap()[0])
            / (h * h);
        let dd1 = (p.eval(3.0).unwrap()[0] - 2.0 * p.eval(3.0 - h).unwrap()[0]
            + p.eval(3.0 - 2.0 * h).unwrap()[0])
            / (h * h);
        assert!(dd0.abs() < 1e-4, "dd0 {dd0}");
        assert!(dd1.abs() < 1e-4, "dd1 {dd1}");
    }

    #[test]
    fn rectilinear_visits_hold_then_update() {
        // ((t=0, a), (t=1, b)): the path goes (0, a) -> (1, a) -> (1, b).
        let s = series(&[0.0, 1.0], &[&[0.0, 5.0], &[1.0, 7.0]]);
        // Channel 0 is the time channel here.
        let p = build_interpolation(&s, Scheme::Rectilinear, KnotRule::Rectilinear).unwrap();
        // s_0 = t_0 + 0 = 0, r_1 = t_1 + 0 = 1, s_1 = t_1 + 1 = 2.
        assert_eq!(p.eval(0.0).unwrap(), vec![0.0, 5.0]);
        assert_eq!(p.eval(1.0).unwrap(), vec![1.0, 5.0]);
        assert_eq!(p.eval(2.0).unwrap(), vec![1.0, 7.0]);
        // Between s_0 and r_1 only time moves; between r_1 and s_1 only the
        // value moves.
        assert_eq!(p.deriv(0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.deriv(1.5).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn measurability_perturbation_properties() {
        let ts = [0.0, 1.0, 2.0, 3.0, 4.0];
        let base: Vec<Vec<f64>> = vec![
            vec![0.0],
            vec![1.0],
            vec![0.5],
            vec![2.0],
            vec![-1.0],
        ];
        let mut perturbed = base.clone();
        perturbed[4][0] += 10.0; // observation with index 4
        let probe = 1.3; // inside [s_1, s_2)
        for scheme in [Scheme::Linear, Scheme::HermiteCubicBd] {
            let p0 = build_interpolation(
                &TimeSeries::new(ts.to_vec(), base.clone(), vec!["a".into()]).unwrap(),
                scheme,
                KnotRule::STime,
            )
            .unwrap();
            let p1 = build_interpolation(
                &TimeSeries::new(ts.to_vec(), perturbed.clone(), vec!["a".into()]).unwrap(),
                scheme,
                KnotRule::STime,
            )
            .unwrap();
            // Discretely measurable: changing an observation two knots ahead
            // does not move the path here.
            assert_eq!(
                p0.eval(probe).unwrap(),
                p1.eval(probe).unwrap(),
                "{scheme:?}"
            );
        }
        // Natural cubic is global: the same perturbation is felt.
        let p0 = build_interpolation(
            &TimeSeries::new(ts.to_vec(), base.clone(), vec!["a".into()]).unwrap(),
            Scheme::NaturalCubic,
            KnotRule::STime,
        )
        .unwrap();
        let p1 = build_interpolation(
            &TimeSeries::new(ts.to_vec(), perturbed, vec!["a".into()]).unwrap(),
            Scheme::NaturalCubic,
            KnotRule::STime,
        )
        .unwrap();
        assert_ne!(p0.eval(probe).unwrap(), p1.eval(probe).unwrap());
    }

    #[test]
    fn knot_matching_all_schemes() {
        let ts = [0.0, 0.7, 1.9, 3.2];
        let xs: Vec<Vec<f64>> = vec![vec![0.3], vec![-1.2], vec![0.8], vec![2.1]];
        let s = TimeSeries::new(ts.to_vec(), xs.clone(), vec!["a".into()]).unwrap();
        for scheme in [Scheme::Linear, Scheme::HermiteCubicBd, Scheme::NaturalCubic] {
            let p = build_interpolation(&s, scheme, KnotRule::STime).unwrap();
            for (j, &t) in ts.iter().enumerate() {
                let v = p.eval(t).unwrap()[0];
                assert!((v - xs[j][0]).abs() <= 1e-12, "{scheme:?} at {t}");
            }
        }
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta(1, 1).unwrap(), 1);
        assert_eq!(beta(5, 1).unwrap(), 5);
        assert_eq!(beta(2, 2).unwrap(), 3);
        assert_eq!(beta(3, 2).unwrap(), 6);
        assert!(beta(2, 3).is_err());
    }

    #[test]
    fn logsig2_straight_line_has_zero_area() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let sig = logsig2(&pts).unwrap();
        assert_eq!(sig, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn logsig2_l_path_levy_area() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let sig = logsig2(&pts).unwrap();
        assert_eq!(sig[0], 1.0);
        assert_eq!(sig[1], 1.0);
        assert_eq!(sig[2], 0.5);
    }

    #[test]
    fn chen_composition_matches_direct() {
        let pts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.2, -0.4],
            vec![0.7, 1.1, 0.3],
            vec![-0.2, 0.9, 1.4],
            vec![0.4, -0.5, 1.0],
        ];
        let whole = logsig2(&pts).unwrap();
        let first = logsig2(&pts[..3]).unwrap();
        let second = logsig2(&pts[2..]).unwrap();
        let composed = logsig2_chen(&first, &second, 3).unwrap();
        for (a, b) in whole.iter().zip(&composed) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn logode_depth1_single_window() {
        let s = series(&[0.0, 1.0, 2.0], &[&[0.0], &[3.0], &[4.0]]);
        let ls = logode_reduce(&s, &[0.0, 2.0], 1).unwrap();
        assert_eq!(ls.values.len(), 1);
        // Total increment over everything, divided by t_n - t_0.
        assert_eq!(ls.drive(0), vec![2.0]);
    }

    #[test]
    fn logode_window_count_and_empty_window() {
        let ts: Vec<f64> = (0..11).map(|j| j as f64).collect();
        let xs: Vec<Vec<f64>> = (0..11).map(|j| vec![(j as f64).sin()]).collect();
        let s = TimeSeries::new(ts, xs, vec!["a".into()]).unwrap();
        let ls = logode_reduce(&s, &[0.0, 5.0, 10.0], 2).unwrap();
        assert_eq!(ls.values.len(), 2);
        assert_eq!(ls.values[0].len(), beta(1, 2).unwrap());
        // A window with no observation errors out.
        let sparse = series(&[0.0, 10.0], &[&[0.0], &[1.0]]);
        assert!(logode_reduce(&sparse, &[0.0, 4.0, 4.5, 10.0], 1).is_err());
    }

    #[test]
    fn logsig_path_has_m_segments() {
        let ts: Vec<f64> = (0..21).map(|j| j as f64 * 0.5).collect();
        let xs: Vec<Vec<f64>> = (0..21)
            .map(|j| vec![(j as f64).cos(), (j as f64).sin()])
            .collect();
        let s = TimeSeries::new(ts, xs, vec!["a".into(), "b".into()]).unwrap();
        let bounds: Vec<f64> = (0..6).map(|j| j as f64 * 2.0).collect();
        let ls = logode_reduce(&s, &bounds, 2).unwrap();
        assert_eq!(ls.values.len(), 5);
        let cp = ls.as_control_path().unwrap();
        assert_eq!(cp.dim(), beta(2, 2).unwrap());
        // The control path's derivative on window j is drive(j).
        let mid = 1.0;
        let d = cp.deriv(mid).unwrap();
        assert_eq!(d, ls.drive(0));
    }
}
