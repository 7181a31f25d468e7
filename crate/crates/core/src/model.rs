//! Coordinate-model operators and structural diagnostics.
//!
//! A model is described by a [`CoefficientSet`]: the kinetic coefficient
//! `alpha`, a real potential `V(t,x)`, real advection fields `A^j(t,x)`, and
//! per-channel noise coefficients `sigma_lk(t,x)`, `eta_l(t,x)`. From these we
//! assemble matrix-free handles for
//!
//! * the Hamiltonian `H(t) = -alpha*Lap + i*sum_j (A^j d_j + d_j A^j) + V`,
//! * the noise operators `L_l(t) = sum_k sigma_lk d_k + eta_l`,
//! * the drift `G(t) = -i H(t) - 1/2 sum_l L_l(t)* L_l(t)`,
//! * the reference operator `C = -Lap + |x|^2`.
//!
//! Adjoints are assembled analytically from the antisymmetric derivative and
//! pointwise conjugation, so they are exact discrete adjoints; the norm
//! balance `2 Re<f, Gf> + sum_l ||L_l f||^2 = 0` then holds to round-off on
//! every grid, independent of resolution.
//!
//! The back half of the module holds the structural diagnostics: the phase
//! compatibility residual for `sigma`, an empirical regularity-rate probe, the
//! coefficient growth report, and the closed-form expansions (`[H, C]`,
//! `[C, L_l]`, `L*L`, and the dissipator acting on position, `|x|^2`,
//! derivative and Laplacian observables) that the verification suite checks
//! against direct operator composition.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use num_complex::Complex;
use num_traits::Zero;
use thiserror::Error;

use crate::grid::{
    apply_derivative, apply_derivative_into, apply_laplacian_into, boundary_mass, inner_product,
    GridSpec, WaveFunction,
};
use crate::Scalar;

pub mod presets;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("channel {channel} out of range: model has {channels} noise channels")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error("coefficient shape: {0}")]
    Shape(String),
    #[error("kinetic coefficient must be finite and non-negative, got {0}")]
    Alpha(f64),
    #[error("field {label} evaluates non-finite at t = {t}")]
    NonFiniteField { label: String, t: f64 },
    #[error("field {label} must be real-valued, found imaginary part {imag:e} at t = {t}")]
    ComplexField { label: String, t: f64, imag: f64 },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("preset {preset:?} does not take a parameter {name:?}")]
    UnknownParameter { preset: &'static str, name: String },
    #[error("empty sample set")]
    EmptySampleSet,
}

fn cplx<S: Scalar>(re: S) -> Complex<S> {
    Complex::new(re, S::zero())
}

fn mul_i<S: Scalar>(z: Complex<S>) -> Complex<S> {
    Complex::new(-z.im, z.re)
}

// ---------------------------------------------------------------------------
// Coefficient fields

type FieldEval<S> = dyn Fn(S, [S; 2]) -> Complex<S> + Send + Sync;
type FieldDeriv<S> = dyn Fn(S, [S; 2], [usize; 2]) -> Complex<S> + Send + Sync;

/// Scalar coefficient field `(t, x) -> value` with an optional analytic
/// derivative callback `(t, x, order) -> d^order value`.
///
/// When no callback is supplied, derivatives are taken by second-order finite
/// differences of the sampled field (one-sided at the box edge, where the
/// coefficient need not vanish). Analytic callbacks are preferred wherever
/// third derivatives enter: repeated differencing inflates the error constant
/// even though the order stays two.
#[derive(Clone)]
pub struct Field<S: Scalar> {
    eval: Arc<FieldEval<S>>,
    deriv: Option<Arc<FieldDeriv<S>>>,
    time_dependent: bool,
    zero: bool,
}

impl<S: Scalar> Field<S> {
    /// The identically-zero field. Operators skip the work it would cost.
    pub fn zero() -> Self {
        Field {
            eval: Arc::new(|_, _| Complex::zero()),
            deriv: Some(Arc::new(|_, _, _| Complex::zero())),
            time_dependent: false,
            zero: true,
        }
    }

    pub fn constant(v: Complex<S>) -> Self {
        Field {
            eval: Arc::new(move |_, _| v),
            deriv: Some(Arc::new(|_, _, _| Complex::zero())),
            time_dependent: false,
            zero: false,
        }
    }

    pub fn real_constant(v: S) -> Self {
        Self::constant(cplx(v))
    }

    /// General field from a closure; `time_dependent` declares whether samples
    /// may change with `t` (it keys the per-time memoization).
    pub fn new(
        time_dependent: bool,
        eval: impl Fn(S, [S; 2]) -> Complex<S> + Send + Sync + 'static,
    ) -> Self {
        Field {
            eval: Arc::new(eval),
            deriv: None,
            time_dependent,
            zero: false,
        }
    }

    /// Attaches an analytic derivative callback. It is consulted only for
    /// total order >= 1 and never beyond total order 3 (the largest order any
    /// diagnostic consumes).
    pub fn with_derivatives(
        mut self,
        deriv: impl Fn(S, [S; 2], [usize; 2]) -> Complex<S> + Send + Sync + 'static,
    ) -> Self {
        self.deriv = Some(Arc::new(deriv));
        self
    }

    /// Time-independent real profile of the first coordinate with its first
    /// three derivatives; the convenient shape for d = 1 models.
    pub fn real_1d(
        f: impl Fn(S) -> S + Send + Sync + 'static,
        d1: impl Fn(S) -> S + Send + Sync + 'static,
        d2: impl Fn(S) -> S + Send + Sync + 'static,
        d3: impl Fn(S) -> S + Send + Sync + 'static,
    ) -> Self {
        let f = Arc::new(f);
        let fe = f.clone();
        Field {
            eval: Arc::new(move |_, x: [S; 2]| cplx(fe(x[0]))),
            deriv: Some(Arc::new(move |_, x: [S; 2], o: [usize; 2]| {
                debug_assert!(o[0] + o[1] <= 3, "derivative order beyond the C^3 class");
                if o[1] > 0 {
                    return Complex::zero();
                }
                let v = match o[0] {
                    0 => f(x[0]),
                    1 => d1(x[0]),
                    2 => d2(x[0]),
                    _ => d3(x[0]),
                };
                cplx(v)
            })),
            time_dependent: false,
            zero: false,
        }
    }

    /// Complex variant of [`Field::real_1d`].
    pub fn complex_1d(
        f: impl Fn(S) -> Complex<S> + Send + Sync + 'static,
        d1: impl Fn(S) -> Complex<S> + Send + Sync + 'static,
        d2: impl Fn(S) -> Complex<S> + Send + Sync + 'static,
        d3: impl Fn(S) -> Complex<S> + Send + Sync + 'static,
    ) -> Self {
        let f = Arc::new(f);
        let fe = f.clone();
        Field {
            eval: Arc::new(move |_, x: [S; 2]| fe(x[0])),
            deriv: Some(Arc::new(move |_, x: [S; 2], o: [usize; 2]| {
                debug_assert!(o[0] + o[1] <= 3, "derivative order beyond the C^3 class");
                if o[1] > 0 {
                    return Complex::zero();
                }
                match o[0] {
                    0 => f(x[0]),
                    1 => d1(x[0]),
                    2 => d2(x[0]),
                    _ => d3(x[0]),
                }
            })),
            time_dependent: false,
            zero: false,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn eval(&self, t: S, x: [S; 2]) -> Complex<S> {
        (self.eval)(t, x)
    }

    fn analytic_deriv(&self, t: S, x: [S; 2], order: [usize; 2]) -> Option<Complex<S>> {
        self.deriv.as_ref().map(|d| d(t, x, order))
    }
}

// ---------------------------------------------------------------------------
// Coefficient sets

/// The coefficient functions of the coordinate model. `a` is empty or length
/// d; each `sigma` row is empty (derivative-free channel) or length d;
/// `sigma` and `eta` have one row per noise channel.
#[derive(Clone)]
pub struct CoefficientSet<S: Scalar> {
    pub alpha: S,
    pub v: Field<S>,
    pub a: Vec<Field<S>>,
    pub sigma: Vec<Vec<Field<S>>>,
    pub eta: Vec<Field<S>>,
}

impl<S: Scalar> CoefficientSet<S> {
    /// Free model: kinetic term only.
    pub fn free(alpha: S) -> Self {
        CoefficientSet {
            alpha,
            v: Field::zero(),
            a: Vec::new(),
            sigma: Vec::new(),
            eta: Vec::new(),
        }
    }

    pub fn with_potential(mut self, v: Field<S>) -> Self {
        self.v = v;
        self
    }

    pub fn with_vector_potential(mut self, a: Vec<Field<S>>) -> Self {
        self.a = a;
        self
    }

    /// Appends a noise channel `L = sum_k sigma_k d_k + eta`.
    pub fn with_channel(mut self, sigma: Vec<Field<S>>, eta: Field<S>) -> Self {
        self.sigma.push(sigma);
        self.eta.push(eta);
        self
    }

    pub fn channels(&self) -> usize {
        self.eta.len()
    }

    pub fn is_time_dependent(&self) -> bool {
        self.v.is_time_dependent()
            || self.a.iter().any(Field::is_time_dependent)
            || self.eta.iter().any(Field::is_time_dependent)
            || self
                .sigma
                .iter()
                .any(|row| row.iter().any(Field::is_time_dependent))
    }

    fn validate(&self, d: usize) -> Result<(), ModelError> {
        if !(self.alpha.is_finite() && self.alpha >= S::zero()) {
            return Err(ModelError::Alpha(self.alpha.as_f64()));
        }
        if !(self.a.is_empty() || self.a.len() == d) {
            return Err(ModelError::Shape(format!(
                "expected {} advection fields (or none), got {}",
                d,
                self.a.len()
            )));
        }
        if self.sigma.len() != self.eta.len() {
            return Err(ModelError::Shape(format!(
                "{} sigma rows vs {} eta fields",
                self.sigma.len(),
                self.eta.len()
            )));
        }
        for (l, row) in self.sigma.iter().enumerate() {
            if !(row.is_empty() || row.len() == d) {
                return Err(ModelError::Shape(format!(
                    "sigma row {} has length {}, expected 0 or {}",
                    l,
                    row.len(),
                    d
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sampling

fn sample_complex<S: Scalar>(
    grid: GridSpec<S>,
    field: &Field<S>,
    t: S,
    label: &str,
) -> Result<Option<Vec<Complex<S>>>, ModelError> {
    if field.is_zero() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let z = field.eval(t, grid.point(i));
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(ModelError::NonFiniteField {
                label: label.to_string(),
                t: t.as_f64(),
            });
        }
        out.push(z);
    }
    Ok(Some(out))
}

fn sample_real<S: Scalar>(
    grid: GridSpec<S>,
    field: &Field<S>,
    t: S,
    label: &str,
) -> Result<Option<Vec<S>>, ModelError> {
    let Some(values) = sample_complex(grid, field, t, label)? else {
        return Ok(None);
    };
    let tol = S::of(1e-12);
    let mut out = Vec::with_capacity(values.len());
    for z in values {
        if z.im.abs() > tol * (S::one() + z.re.abs()) {
            return Err(ModelError::ComplexField {
                label: label.to_string(),
                t: t.as_f64(),
                imag: z.im.as_f64(),
            });
        }
        out.push(z.re);
    }
    Ok(Some(out))
}

/// Second-order first derivative of a sampled coefficient along `axis`:
/// central in the interior, one-sided at the box edge. Coefficients need not
/// respect the wavefunction boundary condition, so this never wraps or zeroes
/// ghost values.
fn fd_axis<S: Scalar>(grid: GridSpec<S>, v: &[Complex<S>], axis: usize) -> Vec<Complex<S>> {
    let n = grid.points_per_axis();
    let inv2h = S::of(0.5) / grid.spacing();
    let mut out = vec![Complex::zero(); v.len()];
    let lines: Vec<(usize, usize)> = match (grid.dimension(), axis) {
        (1, 0) => vec![(0, 1)],
        (2, 0) => (0..n).map(|i1| (i1, n)).collect(),
        (2, 1) => (0..n).map(|i0| (i0 * n, 1)).collect(),
        _ => panic!("axis {axis} out of range"),
    };
    let three = S::of(3.0);
    let four = S::of(4.0);
    for (start, stride) in lines {
        let at = |k: usize| v[start + k * stride];
        out[start] = (at(1) * four - at(0) * three - at(2)) * inv2h;
        for k in 1..n - 1 {
            out[start + k * stride] = (at(k + 1) - at(k - 1)) * inv2h;
        }
        out[start + (n - 1) * stride] =
            (at(n - 1) * three - at(n - 2) * four + at(n - 3)) * inv2h;
    }
    out
}

/// Samples `d^order field` on the grid: the analytic callback when present,
/// otherwise repeated finite differencing of the sampled field.
fn derivative_samples<S: Scalar>(
    grid: GridSpec<S>,
    field: &Field<S>,
    t: S,
    order: [usize; 2],
    label: &str,
) -> Result<Vec<Complex<S>>, ModelError> {
    let n = grid.len();
    if field.is_zero() {
        return Ok(vec![Complex::zero(); n]);
    }
    if order == [0, 0] {
        return Ok(sample_complex(grid, field, t, label)?.expect("non-zero field"));
    }
    if field.deriv.is_some() {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let z = field
                .analytic_deriv(t, grid.point(i), order)
                .expect("deriv present");
            if !(z.re.is_finite() && z.im.is_finite()) {
                return Err(ModelError::NonFiniteField {
                    label: format!("d^{:?} {}", order, label),
                    t: t.as_f64(),
                });
            }
            out.push(z);
        }
        return Ok(out);
    }
    let mut cur = sample_complex(grid, field, t, label)?.expect("non-zero field");
    for axis in 0..2 {
        for _ in 0..order[axis] {
            cur = fd_axis(grid, &cur, axis);
        }
    }
    Ok(cur)
}

fn unit_order(axis: usize) -> [usize; 2] {
    let mut o = [0, 0];
    o[axis] = 1;
    o
}

fn add_orders(a: [usize; 2], b: [usize; 2]) -> [usize; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

// ---------------------------------------------------------------------------
// Memoized coefficient tables

struct GridFields<S: Scalar> {
    /// coordinate of each node along every axis
    axis: Vec<Vec<S>>,
    /// squared Euclidean radius at each node
    radius_sq: Vec<S>,
}

impl<S: Scalar> GridFields<S> {
    fn new(grid: GridSpec<S>) -> Self {
        let d = grid.dimension();
        let n = grid.len();
        let mut axis = vec![Vec::with_capacity(n); d];
        let mut radius_sq = Vec::with_capacity(n);
        for i in 0..n {
            let x = grid.point(i);
            let mut r2 = S::zero();
            for (j, row) in axis.iter_mut().enumerate() {
                row.push(x[j]);
                r2 += x[j] * x[j];
            }
            radius_sq.push(r2);
        }
        GridFields { axis, radius_sq }
    }
}

pub(crate) struct SampledCoeffs<S: Scalar> {
    v: Option<Vec<S>>,
    a: Vec<Option<Vec<S>>>,
    sigma: Vec<Vec<Option<Vec<Complex<S>>>>>,
    eta: Vec<Option<Vec<Complex<S>>>>,
}

/// Coefficient samples shared by every handle of one model, keyed by time.
/// Reads are lock-free-ish (RwLock read path); a miss samples outside the lock
/// and inserts, so concurrent first access at the same time costs at most a
/// duplicated sampling pass.
pub(crate) struct ModelTables<S: Scalar> {
    grid: GridSpec<S>,
    coeffs: CoefficientSet<S>,
    time_dependent: bool,
    cache: RwLock<HashMap<u64, Arc<SampledCoeffs<S>>>>,
}

impl<S: Scalar> ModelTables<S> {
    fn new(grid: GridSpec<S>, coeffs: CoefficientSet<S>) -> Result<Arc<Self>, ModelError> {
        coeffs.validate(grid.dimension())?;
        let tables = Arc::new(ModelTables {
            grid,
            time_dependent: coeffs.is_time_dependent(),
            coeffs,
            cache: RwLock::new(HashMap::new()),
        });
        // Reject malformed fields at build time rather than mid-trajectory.
        tables.sampled(S::zero())?;
        Ok(tables)
    }

    fn cache_key(&self, t: S) -> u64 {
        if self.time_dependent {
            t.as_f64().to_bits()
        } else {
            0
        }
    }

    fn sample_all(&self, t: S) -> Result<SampledCoeffs<S>, ModelError> {
        let g = self.grid;
        let c = &self.coeffs;
        let v = sample_real(g, &c.v, t, "V")?;
        let mut a = Vec::with_capacity(c.a.len());
        for (j, f) in c.a.iter().enumerate() {
            a.push(sample_real(g, f, t, &format!("A[{j}]"))?);
        }
        let mut sigma = Vec::with_capacity(c.sigma.len());
        let mut eta = Vec::with_capacity(c.eta.len());
        for (l, row) in c.sigma.iter().enumerate() {
            let mut r = Vec::with_capacity(row.len());
            for (k, f) in row.iter().enumerate() {
                r.push(sample_complex(g, f, t, &format!("sigma[{l}][{k}]"))?);
            }
            sigma.push(r);
        }
        for (l, f) in c.eta.iter().enumerate() {
            eta.push(sample_complex(g, f, t, &format!("eta[{l}]"))?);
        }
        Ok(SampledCoeffs { v, a, sigma, eta })
    }

    pub(crate) fn sampled(&self, t: S) -> Result<Arc<SampledCoeffs<S>>, ModelError> {
        let key = self.cache_key(t);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let fresh = Arc::new(self.sample_all(t)?);
        let mut w = self.cache.write().expect("cache lock");
        Ok(w.entry(key).or_insert(fresh).clone())
    }
}

// ---------------------------------------------------------------------------
// Operator handles

type ApplyFn<S> = dyn Fn(S, &WaveFunction<S>, &mut WaveFunction<S>) + Send + Sync;

/// Matrix-free linear operator together with its exact discrete adjoint.
/// Immutable and cheap to clone; safe to apply concurrently.
#[derive(Clone)]
pub struct OperatorHandle<S: Scalar> {
    label: String,
    time_dependent: bool,
    forward: Arc<ApplyFn<S>>,
    adjoint: Arc<ApplyFn<S>>,
}

impl<S: Scalar> OperatorHandle<S> {
    pub fn new(
        label: impl Into<String>,
        time_dependent: bool,
        forward: impl Fn(S, &WaveFunction<S>, &mut WaveFunction<S>) + Send + Sync + 'static,
        adjoint: impl Fn(S, &WaveFunction<S>, &mut WaveFunction<S>) + Send + Sync + 'static,
    ) -> Self {
        OperatorHandle {
            label: label.into(),
            time_dependent,
            forward: Arc::new(forward),
            adjoint: Arc::new(adjoint),
        }
    }

    pub fn self_adjoint(
        label: impl Into<String>,
        time_dependent: bool,
        apply: impl Fn(S, &WaveFunction<S>, &mut WaveFunction<S>) + Send + Sync + 'static,
    ) -> Self {
        let f: Arc<ApplyFn<S>> = Arc::new(apply);
        OperatorHandle {
            label: label.into(),
            time_dependent,
            forward: f.clone(),
            adjoint: f,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn apply_into(&self, t: S, f: &WaveFunction<S>, out: &mut WaveFunction<S>) {
        (self.forward)(t, f, out);
    }

    pub fn apply(&self, t: S, f: &WaveFunction<S>) -> WaveFunction<S> {
        let mut out = WaveFunction::zeros(f.grid());
        self.apply_into(t, f, &mut out);
        out
    }

    pub fn adjoint_into(&self, t: S, f: &WaveFunction<S>, out: &mut WaveFunction<S>) {
        (self.adjoint)(t, f, out);
    }

    pub fn adjoint_apply(&self, t: S, f: &WaveFunction<S>) -> WaveFunction<S> {
        let mut out = WaveFunction::zeros(f.grid());
        self.adjoint_into(t, f, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Application kernels

fn h_kernel<S: Scalar>(
    grid: GridSpec<S>,
    alpha: S,
    sc: &SampledCoeffs<S>,
    f: &WaveFunction<S>,
    out: &mut WaveFunction<S>,
) {
    let n = grid.len();
    apply_laplacian_into(f, out);
    let neg_alpha = -alpha;
    for z in out.amp_mut() {
        *z = *z * neg_alpha;
    }
    if sc.a.iter().any(Option::is_some) {
        let mut der = WaveFunction::zeros(grid);
        let mut prod = WaveFunction::zeros(grid);
        for (j, aj) in sc.a.iter().enumerate() {
            let Some(aj) = aj else { continue };
            // i * A^j * d_j f
            apply_derivative_into(f, j, &mut der);
            {
                let oa = out.amp_mut();
                let da = der.amp();
                for i in 0..n {
                    oa[i] += mul_i(da[i] * aj[i]);
                }
            }
            // i * d_j (A^j f)
            {
                let pa = prod.amp_mut();
                let fa = f.amp();
                for i in 0..n {
                    pa[i] = fa[i] * aj[i];
                }
            }
            apply_derivative_into(&prod, j, &mut der);
            {
                let oa = out.amp_mut();
                let da = der.amp();
                for i in 0..n {
                    oa[i] += mul_i(da[i]);
                }
            }
        }
    }
    if let Some(v) = &sc.v {
        let oa = out.amp_mut();
        let fa = f.amp();
        for i in 0..n {
            oa[i] += fa[i] * v[i];
        }
    }
}

fn l_kernel<S: Scalar>(
    grid: GridSpec<S>,
    sc: &SampledCoeffs<S>,
    channel: usize,
    f: &WaveFunction<S>,
    out: &mut WaveFunction<S>,
) {
    let n = grid.len();
    out.fill_zero();
    let row = &sc.sigma[channel];
    if row.iter().any(Option::is_some) {
        let mut der = WaveFunction::zeros(grid);
        for (k, s) in row.iter().enumerate() {
            let Some(s) = s else { continue };
            apply_derivative_into(f, k, &mut der);
            let oa = out.amp_mut();
            let da = der.amp();
            for i in 0..n {
                oa[i] += s[i] * da[i];
            }
        }
    }
    if let Some(e) = &sc.eta[channel] {
        let oa = out.amp_mut();
        let fa = f.amp();
        for i in 0..n {
            oa[i] += e[i] * fa[i];
        }
    }
}

fn l_adjoint_kernel<S: Scalar>(
    grid: GridSpec<S>,
    sc: &SampledCoeffs<S>,
    channel: usize,
    f: &WaveFunction<S>,
    out: &mut WaveFunction<S>,
) {
    let n = grid.len();
    out.fill_zero();
    let row = &sc.sigma[channel];
    if row.iter().any(Option::is_some) {
        let mut prod = WaveFunction::zeros(grid);
        let mut der = WaveFunction::zeros(grid);
        for (k, s) in row.iter().enumerate() {
            let Some(s) = s else { continue };
            {
                let pa = prod.amp_mut();
                let fa = f.amp();
                for i in 0..n {
                    pa[i] = s[i].conj() * fa[i];
                }
            }
            apply_derivative_into(&prod, k, &mut der);
            let oa = out.amp_mut();
            let da = der.amp();
            for i in 0..n {
                oa[i] -= da[i];
            }
        }
    }
    if let Some(e) = &sc.eta[channel] {
        let oa = out.amp_mut();
        let fa = f.amp();
        for i in 0..n {
            oa[i] += e[i].conj() * fa[i];
        }
    }
}

fn g_kernel<S: Scalar>(
    grid: GridSpec<S>,
    alpha: S,
    sc: &SampledCoeffs<S>,
    conjugate: bool,
    f: &WaveFunction<S>,
    out: &mut WaveFunction<S>,
) {
    let n = grid.len();
    h_kernel(grid, alpha, sc, f, out);
    // -iH, or +iH for the adjoint; the noise part below is self-adjoint.
    for z in out.amp_mut() {
        *z = if conjugate { mul_i(*z) } else { -mul_i(*z) };
    }
    let m = sc.eta.len();
    if m > 0 {
        let half = S::of(0.5);
        let mut lf = WaveFunction::zeros(grid);
        let mut llf = WaveFunction::zeros(grid);
        for l in 0..m {
            l_kernel(grid, sc, l, f, &mut lf);
            l_adjoint_kernel(grid, sc, l, &lf, &mut llf);
            let oa = out.amp_mut();
            let la = llf.amp();
            for i in 0..n {
                oa[i] -= la[i] * half;
            }
        }
    }
}

fn c_kernel<S: Scalar>(
    radius_sq: &[S],
    f: &WaveFunction<S>,
    out: &mut WaveFunction<S>,
) {
    apply_laplacian_into(f, out);
    let oa = out.amp_mut();
    let fa = f.amp();
    for i in 0..fa.len() {
        oa[i] = fa[i] * radius_sq[i] - oa[i];
    }
}

// ---------------------------------------------------------------------------
// Model assembly

/// The assembled operator family of one model: `H`, all `L_l`, `G`, and the
/// reference operator `C`, sharing one memoized coefficient table.
pub struct ModelOps<S: Scalar> {
    grid: GridSpec<S>,
    coeffs: CoefficientSet<S>,
    tables: Arc<ModelTables<S>>,
    hamiltonian: OperatorHandle<S>,
    lindblads: Vec<OperatorHandle<S>>,
    drift: OperatorHandle<S>,
    reference: OperatorHandle<S>,
}

impl<S: Scalar> ModelOps<S> {
    pub fn new(grid: GridSpec<S>, coeffs: &CoefficientSet<S>) -> Result<Self, ModelError> {
        let tables = ModelTables::new(grid, coeffs.clone())?;
        let alpha = coeffs.alpha;

        let td_h = coeffs.v.is_time_dependent() || coeffs.a.iter().any(Field::is_time_dependent);
        let tb = tables.clone();
        let hamiltonian = OperatorHandle::self_adjoint("H", td_h, move |t, f, out| {
            let sc = tb.sampled(t).unwrap_or_else(|e| panic!("{e}"));
            h_kernel(grid, alpha, &sc, f, out);
        });

        let mut lindblads = Vec::with_capacity(coeffs.channels());
        for l in 0..coeffs.channels() {
            let td = coeffs.eta[l].is_time_dependent()
                || coeffs.sigma[l].iter().any(Field::is_time_dependent);
            let tf = tables.clone();
            let ta = tables.clone();
            lindblads.push(OperatorHandle::new(
                format!("L{}", l + 1),
                td,
                move |t, f: &WaveFunction<S>, out: &mut WaveFunction<S>| {
                    let sc = tf.sampled(t).unwrap_or_else(|e| panic!("{e}"));
                    l_kernel(grid, &sc, l, f, out);
                },
                move |t, f: &WaveFunction<S>, out: &mut WaveFunction<S>| {
                    let sc = ta.sampled(t).unwrap_or_else(|e| panic!("{e}"));
                    l_adjoint_kernel(grid, &sc, l, f, out);
                },
            ));
        }

        let td_g = coeffs.is_time_dependent();
        let tf = tables.clone();
        let ta = tables.clone();
        let drift = OperatorHandle::new(
            "G",
            td_g,
            move |t, f: &WaveFunction<S>, out: &mut WaveFunction<S>| {
                let sc = tf.sampled(t).unwrap_or_else(|e| panic!("{e}"));
                g_kernel(grid, alpha, &sc, false, f, out);
            },
            move |t, f: &WaveFunction<S>, out: &mut WaveFunction<S>| {
                let sc = ta.sampled(t).unwrap_or_else(|e| panic!("{e}"));
                g_kernel(grid, alpha, &sc, true, f, out);
            },
        );

        Ok(ModelOps {
            grid,
            coeffs: coeffs.clone(),
            tables,
            hamiltonian,
            lindblads,
            drift,
            reference: build_c(grid),
        })
    }

    pub fn grid(&self) -> GridSpec<S> {
        self.grid
    }

    pub fn coefficients(&self) -> &CoefficientSet<S> {
        &self.coeffs
    }

    pub fn channels(&self) -> usize {
        self.lindblads.len()
    }

    pub fn hamiltonian(&self) -> &OperatorHandle<S> {
        &self.hamiltonian
    }

    pub fn lindblad(&self, channel: usize) -> &OperatorHandle<S> {
        &self.lindblads[channel]
    }

    pub fn lindblads(&self) -> &[OperatorHandle<S>] {
        &self.lindblads
    }

    pub fn drift(&self) -> &OperatorHandle<S> {
        &self.drift
    }

    pub fn reference(&self) -> &OperatorHandle<S> {
        &self.reference
    }

    /// Pre-populates the coefficient cache at the given times, so parallel
    /// trajectory workers only ever take the read path. Also the fallible way
    /// to surface bad coefficient samples before a run.
    pub fn prime(&self, times: &[S]) -> Result<(), ModelError> {
        for &t in times {
            self.tables.sampled(t)?;
        }
        Ok(())
    }
}

pub fn build_h<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
) -> Result<OperatorHandle<S>, ModelError> {
    Ok(ModelOps::new(grid, coeffs)?.hamiltonian.clone())
}

pub fn build_l<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    channel: usize,
) -> Result<OperatorHandle<S>, ModelError> {
    let ops = ModelOps::new(grid, coeffs)?;
    ops.lindblads
        .get(channel)
        .cloned()
        .ok_or(ModelError::ChannelOutOfRange {
            channel,
            channels: ops.lindblads.len(),
        })
}

pub fn build_g<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
) -> Result<OperatorHandle<S>, ModelError> {
    Ok(ModelOps::new(grid, coeffs)?.drift.clone())
}

/// The reference operator `C = -Lap + |x|^2`: symmetric and positive on the
/// grid, with the d = 1 ground profile `exp(-x^2/2)` reproduced to O(h^2).
pub fn build_c<S: Scalar>(grid: GridSpec<S>) -> OperatorHandle<S> {
    let radius_sq = GridFields::new(grid).radius_sq;
    OperatorHandle::self_adjoint("C", false, move |_t, f, out| {
        c_kernel(&radius_sq, f, out)
    })
}

/// Norm-balance residual `2 Re<f, Gf> + sum_l ||L_l f||^2` and the scale
/// `||f||^2 + sum_l ||L_l f||^2` it should be compared against. Zero residual
/// to round-off is structural: the adjoints are exact.
pub fn norm_balance_residual<S: Scalar>(
    ops: &ModelOps<S>,
    t: S,
    f: &WaveFunction<S>,
) -> (S, S) {
    let gf = ops.drift().apply(t, f);
    let two = S::of(2.0);
    let mut resid = two * inner_product(f, &gf).re;
    let mut scale = f.norm_sq();
    for l in 0..ops.channels() {
        let lf = ops.lindblad(l).apply(t, f);
        let nl = lf.norm_sq();
        resid += nl;
        scale += nl;
    }
    (resid, scale)
}

// ---------------------------------------------------------------------------
// Observables

/// One factor of a composed observable: a multiplier `M_c`, a multiplier
/// following a derivative `M_b d_k`, or a derivative following a multiplier
/// `d_k M_a`. Fields are real-valued.
#[derive(Clone)]
pub enum Factor<S: Scalar> {
    Multiplier(Field<S>),
    MultiplierDerivative { field: Field<S>, axis: usize },
    DerivativeMultiplier { field: Field<S>, axis: usize },
}

impl<S: Scalar> Factor<S> {
    fn samples(&self, grid: GridSpec<S>, t: S) -> Result<Vec<S>, ModelError> {
        let field = match self {
            Factor::Multiplier(f) => f,
            Factor::MultiplierDerivative { field, .. } => field,
            Factor::DerivativeMultiplier { field, .. } => field,
        };
        Ok(sample_real(grid, field, t, "observable factor")?
            .unwrap_or_else(|| vec![S::zero(); grid.len()]))
    }

    fn apply(&self, t: S, f: &WaveFunction<S>) -> Result<WaveFunction<S>, ModelError> {
        let grid = f.grid();
        let n = grid.len();
        let c = self.samples(grid, t)?;
        match self {
            Factor::Multiplier(_) => {
                let mut out = WaveFunction::zeros(grid);
                let oa = out.amp_mut();
                let fa = f.amp();
                for i in 0..n {
                    oa[i] = fa[i] * c[i];
                }
                Ok(out)
            }
            Factor::MultiplierDerivative { axis, .. } => {
                let mut out = apply_derivative(f, *axis);
                let oa = out.amp_mut();
                for i in 0..n {
                    oa[i] = oa[i] * c[i];
                }
                Ok(out)
            }
            Factor::DerivativeMultiplier { axis, .. } => {
                let mut prod = WaveFunction::zeros(grid);
                {
                    let pa = prod.amp_mut();
                    let fa = f.amp();
                    for i in 0..n {
                        pa[i] = fa[i] * c[i];
                    }
                }
                Ok(apply_derivative(&prod, *axis))
            }
        }
    }

    fn adjoint_apply(&self, t: S, f: &WaveFunction<S>) -> Result<WaveFunction<S>, ModelError> {
        // (M_c)* = M_c, (M_b d_k)* = -d_k M_b, (d_k M_a)* = -M_a d_k for real
        // fields and the antisymmetric discrete derivative.
        match self {
            Factor::Multiplier(_) => self.apply(t, f),
            Factor::MultiplierDerivative { field, axis } => {
                let flipped = Factor::DerivativeMultiplier {
                    field: field.clone(),
                    axis: *axis,
                };
                let mut out = flipped.apply(t, f)?;
                out.scale(cplx(-S::one()));
                Ok(out)
            }
            Factor::DerivativeMultiplier { field, axis } => {
                let flipped = Factor::MultiplierDerivative {
                    field: field.clone(),
                    axis: *axis,
                };
                let mut out = flipped.apply(t, f)?;
                out.scale(cplx(-S::one()));
                Ok(out)
            }
        }
    }
}

/// Composed observable `A = B1* B2` given by two factors. Expectations are
/// evaluated as `<B1 psi, B2 psi>`, so only forward factor applications enter.
#[derive(Clone)]
pub struct ObservableSpec<S: Scalar> {
    pub label: String,
    pub left: Factor<S>,
    pub right: Factor<S>,
}

impl<S: Scalar> ObservableSpec<S> {
    pub fn new(label: impl Into<String>, left: Factor<S>, right: Factor<S>) -> Self {
        ObservableSpec {
            label: label.into(),
            left,
            right,
        }
    }

    /// `<psi, x_j psi>` via the split `M_1* M_{x_j}`.
    pub fn position(axis: usize) -> Self {
        ObservableSpec::new(
            format!("x{}", axis + 1),
            Factor::Multiplier(Field::real_constant(S::one())),
            Factor::Multiplier(coordinate_field(axis)),
        )
    }

    /// `<psi, x_j^2 psi>` via the symmetric split `M_{x_j}* M_{x_j}`, which
    /// keeps both factors inside the linear-growth class.
    pub fn position_squared(axis: usize) -> Self {
        ObservableSpec::new(
            format!("x{}_sq", axis + 1),
            Factor::Multiplier(coordinate_field(axis)),
            Factor::Multiplier(coordinate_field(axis)),
        )
    }

    /// `<psi, -d_k^2 psi>` via `(M_1 d_k)* (M_1 d_k)`; the discrete operator
    /// is the exact square of the antisymmetric first derivative, not the
    /// three-point Laplacian.
    pub fn momentum_squared(axis: usize) -> Self {
        let b = || Factor::MultiplierDerivative {
            field: Field::real_constant(S::one()),
            axis,
        };
        ObservableSpec::new(format!("p{}_sq", axis + 1), b(), b())
    }

    pub fn expectation(&self, t: S, psi: &WaveFunction<S>) -> Result<Complex<S>, ModelError> {
        let lf = self.left.apply(t, psi)?;
        let rf = self.right.apply(t, psi)?;
        Ok(inner_product(&lf, &rf))
    }

    /// `A psi = B1*(B2 psi)`.
    pub fn apply(&self, t: S, psi: &WaveFunction<S>) -> Result<WaveFunction<S>, ModelError> {
        let rf = self.right.apply(t, psi)?;
        self.left.adjoint_apply(t, &rf)
    }

    /// `A* psi = B2*(B1 psi)`.
    pub fn adjoint_apply(
        &self,
        t: S,
        psi: &WaveFunction<S>,
    ) -> Result<WaveFunction<S>, ModelError> {
        let lf = self.left.apply(t, psi)?;
        self.right.adjoint_apply(t, &lf)
    }

    /// Numeric probe of the factor growth classes: multipliers may grow
    /// linearly (their derivatives quadratically), derivative-adjacent fields
    /// must stay bounded with linearly growing first derivatives. When both
    /// factors are plain multipliers only the linear bound applies.
    pub fn check_growth(&self, grid: GridSpec<S>, t: S) -> Result<Vec<GrowthBound<S>>, ModelError> {
        let both_multipliers =
            matches!(self.left, Factor::Multiplier(_)) && matches!(self.right, Factor::Multiplier(_));
        let mut bounds = Vec::new();
        for (side, factor) in [("left", &self.left), ("right", &self.right)] {
            match factor {
                Factor::Multiplier(c) => {
                    bounds.push(ratio_bound(
                        grid,
                        &derivative_samples(grid, c, t, [0, 0], "c")?,
                        Weight::Linear,
                        format!("{side} multiplier over 1+|x|"),
                    ));
                    if !both_multipliers {
                        for ax in 0..grid.dimension() {
                            bounds.push(ratio_bound(
                                grid,
                                &derivative_samples(grid, c, t, unit_order(ax), "c")?,
                                Weight::Quadratic,
                                format!("{side} multiplier gradient over 1+|x|^2"),
                            ));
                        }
                    }
                }
                Factor::MultiplierDerivative { field, .. } => {
                    bounds.push(ratio_bound(
                        grid,
                        &derivative_samples(grid, field, t, [0, 0], "b")?,
                        Weight::One,
                        format!("{side} factor field"),
                    ));
                    for ax in 0..grid.dimension() {
                        bounds.push(ratio_bound(
                            grid,
                            &derivative_samples(grid, field, t, unit_order(ax), "b")?,
                            Weight::Linear,
                            format!("{side} factor field gradient over 1+|x|"),
                        ));
                    }
                }
                Factor::DerivativeMultiplier { field, .. } => {
                    bounds.push(ratio_bound(
                        grid,
                        &derivative_samples(grid, field, t, [0, 0], "a")?,
                        Weight::One,
                        format!("{side} factor field"),
                    ));
                    for ax in 0..grid.dimension() {
                        bounds.push(ratio_bound(
                            grid,
                            &derivative_samples(grid, field, t, unit_order(ax), "a")?,
                            Weight::Linear,
                            format!("{side} factor field gradient over 1+|x|"),
                        ));
                        for ax2 in 0..grid.dimension() {
                            bounds.push(ratio_bound(
                                grid,
                                &derivative_samples(
                                    grid,
                                    field,
                                    t,
                                    add_orders(unit_order(ax), unit_order(ax2)),
                                    "a",
                                )?,
                                Weight::Quadratic,
                                format!("{side} factor field curvature over 1+|x|^2"),
                            ));
                        }
                    }
                }
            }
        }
        Ok(bounds)
    }
}

fn coordinate_field<S: Scalar>(axis: usize) -> Field<S> {
    assert!(axis < 2);
    Field::new(false, move |_, x: [S; 2]| cplx(x[axis])).with_derivatives(
        move |_, _, o: [usize; 2]| {
            if o == unit_order(axis) {
                cplx(S::one())
            } else {
                Complex::zero()
            }
        },
    )
}

// ---------------------------------------------------------------------------
// Growth diagnostics

#[derive(Clone, Debug)]
pub struct GrowthBound<S: Scalar> {
    pub name: String,
    /// Smallest constant achieving the bound over the grid.
    pub constant: S,
    /// Set when the ratio keeps growing at the boundary ring, evidence the
    /// quantity escapes its growth class.
    pub unbounded: bool,
}

#[derive(Clone, Copy)]
enum Weight {
    One,
    Linear,
    Quadratic,
}

/// Sup of `|values| / weight(|x|)` with an escape heuristic: nodes with
/// `|x|_inf <= L/4` form the interior, nodes with `|x|_inf > 7L/8` the
/// boundary ring; a ring maximum more than twice the interior maximum means
/// the ratio is still growing where the box ends.
fn ratio_bound<S: Scalar>(
    grid: GridSpec<S>,
    values: &[Complex<S>],
    weight: Weight,
    name: String,
) -> GrowthBound<S> {
    let l = grid.half_width();
    let interior_edge = l * S::of(0.25);
    let ring_edge = l * S::of(0.875);
    let mut global = S::zero();
    let mut interior = S::zero();
    let mut ring = S::zero();
    for (i, z) in values.iter().enumerate() {
        let x = grid.point(i);
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let w = match weight {
            Weight::One => S::one(),
            Weight::Linear => S::one() + r,
            Weight::Quadratic => S::one() + r * r,
        };
        let ratio = z.norm() / w;
        global = global.max(ratio);
        let xmax = x[0].abs().max(x[1].abs());
        if xmax <= interior_edge {
            interior = interior.max(ratio);
        } else if xmax > ring_edge {
            ring = ring.max(ratio);
        }
    }
    let floor = S::of(1e-12);
    let unbounded = ring > (interior + interior).max(floor);
    GrowthBound {
        name,
        constant: global,
        unbounded,
    }
}

fn fold_bounds<S: Scalar>(name: &str, parts: Vec<GrowthBound<S>>) -> GrowthBound<S> {
    let mut constant = S::zero();
    let mut unbounded = false;
    for p in parts {
        constant = constant.max(p.constant);
        unbounded |= p.unbounded;
    }
    GrowthBound {
        name: name.to_string(),
        constant,
        unbounded,
    }
}

/// Growth report for one coefficient set at one time: per-bound constants for
/// the Hamiltonian coefficient class and the two admissible noise classes.
#[derive(Clone, Debug)]
pub struct GrowthReport<S: Scalar> {
    pub bounds: Vec<GrowthBound<S>>,
    /// V and A stay inside their growth classes.
    pub hamiltonian_ok: bool,
    /// sigma bounded and eta with bounded derivatives through third order.
    pub noise_common_ok: bool,
    /// Additionally |eta| bounded and sigma with bounded derivatives.
    pub bounded_eta_branch: bool,
    /// Additionally sigma independent of x (eta may grow).
    pub constant_sigma_branch: bool,
}

impl<S: Scalar> GrowthReport<S> {
    /// Whether the full set of coefficient growth conditions holds along
    /// either branch.
    pub fn satisfied(&self) -> bool {
        self.hamiltonian_ok
            && self.noise_common_ok
            && (self.bounded_eta_branch || self.constant_sigma_branch)
    }

    pub fn bound(&self, name: &str) -> Option<&GrowthBound<S>> {
        self.bounds.iter().find(|b| b.name == name)
    }
}

pub fn check_growth<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
) -> Result<GrowthReport<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    let n = grid.len();
    let mut bounds = Vec::new();
    let zero_samples = || vec![Complex::<S>::zero(); n];

    // Hamiltonian class.
    bounds.push(ratio_bound(
        grid,
        &derivative_samples(grid, &coeffs.v, t, [0, 0], "V")?,
        Weight::Quadratic,
        "V over 1+|x|^2".into(),
    ));
    let mut lap_v = zero_samples();
    let mut grad_v = Vec::new();
    for ax in 0..d {
        let dv = derivative_samples(grid, &coeffs.v, t, unit_order(ax), "V")?;
        grad_v.push(ratio_bound(
            grid,
            &dv,
            Weight::Linear,
            String::new(),
        ));
        let ddv = derivative_samples(grid, &coeffs.v, t, add_orders(unit_order(ax), unit_order(ax)), "V")?;
        for i in 0..n {
            lap_v[i] += ddv[i];
        }
    }
    bounds.push(ratio_bound(
        grid,
        &lap_v,
        Weight::Quadratic,
        "lap V over 1+|x|^2".into(),
    ));
    bounds.push(fold_bounds("grad V over 1+|x|", grad_v));

    let mut a_val = Vec::new();
    let mut a_first = Vec::new();
    let mut a_second = Vec::new();
    let mut a_third = Vec::new();
    for (j, aj) in coeffs.a.iter().enumerate() {
        let label = format!("A[{j}]");
        a_val.push(ratio_bound(
            grid,
            &derivative_samples(grid, aj, t, [0, 0], &label)?,
            Weight::Linear,
            String::new(),
        ));
        for ax in 0..d {
            a_first.push(ratio_bound(
                grid,
                &derivative_samples(grid, aj, t, unit_order(ax), &label)?,
                Weight::One,
                String::new(),
            ));
            for ax2 in 0..d {
                a_second.push(ratio_bound(
                    grid,
                    &derivative_samples(grid, aj, t, add_orders(unit_order(ax), unit_order(ax2)), &label)?,
                    Weight::Linear,
                    String::new(),
                ));
            }
        }
        // d_j applied to the Laplacian of A^j, the third-order entry.
        let mut d_lap = zero_samples();
        for ax in 0..d {
            let o = add_orders(unit_order(j), add_orders(unit_order(ax), unit_order(ax)));
            let s = derivative_samples(grid, aj, t, o, &label)?;
            for i in 0..n {
                d_lap[i] += s[i];
            }
        }
        a_third.push(ratio_bound(grid, &d_lap, Weight::Quadratic, String::new()));
    }
    bounds.push(fold_bounds("A over 1+|x|", a_val));
    bounds.push(fold_bounds("grad A", a_first));
    bounds.push(fold_bounds("second derivatives of A over 1+|x|", a_second));
    bounds.push(fold_bounds("d lap A over 1+|x|^2", a_third));
    let hamiltonian_ok = bounds.iter().all(|b| !b.unbounded);

    // Noise class, common part: sigma bounded, eta derivatives bounded.
    let m = coeffs.channels();
    let orders: Vec<[usize; 2]> = {
        let mut o = Vec::new();
        for total in 1..=3usize {
            for i0 in 0..=total {
                let i1 = total - i0;
                if (d == 1 && i1 > 0) || i0 + i1 == 0 {
                    continue;
                }
                o.push([i0, i1]);
            }
        }
        o
    };
    let mut sig_val = Vec::new();
    let mut sig_deriv = Vec::new();
    let mut sig_xdep = S::zero();
    let mut eta_val = Vec::new();
    let mut eta_deriv = Vec::new();
    for l in 0..m {
        let eta_label = format!("eta[{l}]");
        eta_val.push(ratio_bound(
            grid,
            &derivative_samples(grid, &coeffs.eta[l], t, [0, 0], &eta_label)?,
            Weight::One,
            String::new(),
        ));
        for &o in &orders {
            eta_deriv.push(ratio_bound(
                grid,
                &derivative_samples(grid, &coeffs.eta[l], t, o, &eta_label)?,
                Weight::One,
                String::new(),
            ));
        }
        for (k, s) in coeffs.sigma[l].iter().enumerate() {
            let label = format!("sigma[{l}][{k}]");
            let vals = derivative_samples(grid, s, t, [0, 0], &label)?;
            sig_val.push(ratio_bound(grid, &vals, Weight::One, String::new()));
            let v0 = vals[0];
            for v in &vals {
                sig_xdep = sig_xdep.max((*v - v0).norm());
            }
            for &o in &orders {
                sig_deriv.push(ratio_bound(
                    grid,
                    &derivative_samples(grid, s, t, o, &label)?,
                    Weight::One,
                    String::new(),
                ));
            }
        }
    }
    let sigma_bound = fold_bounds("sigma", sig_val);
    let eta_deriv_bound = fold_bounds("eta derivatives order 1..3", eta_deriv);
    let noise_common_ok = !sigma_bound.unbounded && !eta_deriv_bound.unbounded;
    let sigma_sup = sigma_bound.constant;
    bounds.push(sigma_bound);
    bounds.push(eta_deriv_bound);

    // Branch with bounded eta and smooth bounded sigma.
    let eta_bound = fold_bounds("eta (bounded-eta branch)", eta_val);
    let sig_deriv_bound = fold_bounds("sigma derivatives order 1..3 (bounded-eta branch)", sig_deriv);
    let bounded_eta_branch =
        noise_common_ok && !eta_bound.unbounded && !sig_deriv_bound.unbounded;
    bounds.push(eta_bound);
    bounds.push(sig_deriv_bound);

    // Branch with x-independent sigma; eta is then only pinned at the origin.
    let xdep_tol = S::of(1e-10) * (S::one() + sigma_sup);
    let constant_sigma_branch = noise_common_ok && sig_xdep <= xdep_tol;
    bounds.push(GrowthBound {
        name: "sigma x-dependence (constant-sigma branch)".into(),
        constant: sig_xdep,
        unbounded: sig_xdep > xdep_tol,
    });
    let mut eta_origin = S::zero();
    for (l, e) in coeffs.eta.iter().enumerate() {
        let z = e.eval(t, [S::zero(), S::zero()]);
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(ModelError::NonFiniteField {
                label: format!("eta[{l}]"),
                t: t.as_f64(),
            });
        }
        eta_origin = eta_origin.max(z.norm());
    }
    bounds.push(GrowthBound {
        name: "eta at origin (constant-sigma branch)".into(),
        constant: eta_origin,
        unbounded: false,
    });

    Ok(GrowthReport {
        bounds,
        hamiltonian_ok,
        noise_common_ok,
        bounded_eta_branch,
        constant_sigma_branch,
    })
}

// ---------------------------------------------------------------------------
// Phase compatibility and regularity probes

/// Residual of the phase-compatibility condition on `sigma`:
/// `max |sum_l (sigma_lk d_j conj(sigma_lh) - conj(sigma_lk) d_j sigma_lh)|`
/// over grid points and index triples (j, h, k). Zero means the condition
/// holds; x-dependent phases of sigma break it.
pub fn check_phase_condition<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
) -> Result<S, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    let n = grid.len();
    let m = coeffs.channels();
    if m == 0 {
        return Ok(S::zero());
    }
    let zero_row = || vec![Complex::<S>::zero(); n];
    let mut sig = vec![vec![zero_row(); d]; m];
    let mut dsig = vec![vec![vec![zero_row(); d]; d]; m];
    for l in 0..m {
        for (k, f) in coeffs.sigma[l].iter().enumerate() {
            let label = format!("sigma[{l}][{k}]");
            sig[l][k] = derivative_samples(grid, f, t, [0, 0], &label)?;
            for j in 0..d {
                dsig[l][j][k] = derivative_samples(grid, f, t, unit_order(j), &label)?;
            }
        }
    }
    let mut worst = S::zero();
    for j in 0..d {
        for h in 0..d {
            for k in 0..d {
                for i in 0..n {
                    let mut r = Complex::<S>::zero();
                    for l in 0..m {
                        r += sig[l][k][i] * dsig[l][j][h][i].conj()
                            - sig[l][k][i].conj() * dsig[l][j][h][i];
                    }
                    worst = worst.max(r.norm());
                }
            }
        }
    }
    Ok(worst)
}

/// Empirical lower bound for the regularity rate: the largest value of
/// `(2 Re<C^2 x, Gx> + sum_l ||C L_l x||^2) / (||x||^2 + ||Cx||^2)` over the
/// sample set, floored at zero. Evidence, not proof: the true rate is a sup
/// over a dense core.
pub fn estimate_alpha<S: Scalar>(
    ops: &ModelOps<S>,
    t: S,
    samples: &[WaveFunction<S>],
) -> Result<S, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptySampleSet);
    }
    let two = S::of(2.0);
    let mut best = S::neg_infinity();
    for x in samples {
        let gx = ops.drift().apply(t, x);
        let cx = ops.reference().apply(t, x);
        let ccx = ops.reference().apply(t, &cx);
        let mut num = two * inner_product(&ccx, &gx).re;
        for l in 0..ops.channels() {
            let lx = ops.lindblad(l).apply(t, x);
            let clx = ops.reference().apply(t, &lx);
            num += clx.norm_sq();
        }
        let den = x.norm_sq() + cx.norm_sq();
        assert!(den > S::zero(), "zero sample in regularity probe");
        best = best.max(num / den);
    }
    Ok(best.max(S::zero()))
}

// ---------------------------------------------------------------------------
// Closed-form expansions

/// Commutator output plus a reliability note: the closed forms assume
/// negligible mass at the box edge, where the discrete derivative no longer
/// matches the continuum one.
pub struct CommutatorOutput<S: Scalar> {
    pub value: WaveFunction<S>,
    pub boundary_warning: Option<String>,
}

fn boundary_note<S: Scalar>(f: &WaveFunction<S>) -> Option<String> {
    let grid = f.grid();
    let margin = grid.half_width() * S::of(0.125);
    let bm = boundary_mass(f, margin);
    let tol = S::of(1e-10) * f.norm_sq();
    (bm > tol).then(|| {
        format!(
            "mass {:.3e} within {:.3} of the box edge exceeds {:.3e}: commutator identity unreliable there",
            bm.as_f64(),
            margin.as_f64(),
            tol.as_f64()
        )
    })
}

fn add_scaled_product<S: Scalar>(
    out: &mut WaveFunction<S>,
    coeff: &[Complex<S>],
    f: &WaveFunction<S>,
    scale: Complex<S>,
) {
    let oa = out.amp_mut();
    let fa = f.amp();
    for i in 0..fa.len() {
        oa[i] += coeff[i] * fa[i] * scale;
    }
}

/// Closed-form `[H, C]` applied to `f`:
/// `4i M_{d_k A^j} d_k d_j
///  + (2 M_{d_j V} - 4 alpha x_j + 2i M_{lap A^j} + 2i M_{d_j d_k A^k}) d_j
///  + (M_{lap V} - 2 alpha d + i M_{d_j lap A^j} + 4i x_j A^j)`.
pub fn commutator_hc<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
    f: &WaveFunction<S>,
) -> Result<CommutatorOutput<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    let n = grid.len();
    let gf = GridFields::new(grid);
    let mut out = WaveFunction::zeros(grid);
    let df: Vec<WaveFunction<S>> = (0..d).map(|j| apply_derivative(f, j)).collect();
    let has_a = !coeffs.a.is_empty() && !coeffs.a.iter().all(Field::is_zero);
    let has_v = !coeffs.v.is_zero();

    let four_i = Complex::new(S::zero(), S::of(4.0));
    let two_i = Complex::new(S::zero(), S::of(2.0));
    let one_i = Complex::new(S::zero(), S::one());
    let two = cplx(S::of(2.0));

    if has_a {
        for j in 0..d {
            let label = format!("A[{j}]");
            let aj = &coeffs.a[j];
            if aj.is_zero() {
                continue;
            }
            for k in 0..d {
                let dka = derivative_samples(grid, aj, t, unit_order(k), &label)?;
                let ddf = apply_derivative(&df[j], k);
                add_scaled_product(&mut out, &dka, &ddf, four_i);
            }
        }
    }

    for j in 0..d {
        let mut coeff = vec![Complex::<S>::zero(); n];
        if has_v {
            let dv = derivative_samples(grid, &coeffs.v, t, unit_order(j), "V")?;
            for i in 0..n {
                coeff[i] += dv[i] * two;
            }
        }
        let four_alpha = S::of(4.0) * coeffs.alpha;
        for i in 0..n {
            coeff[i] -= cplx(four_alpha * gf.axis[j][i]);
        }
        if has_a {
            let label = format!("A[{j}]");
            let aj = &coeffs.a[j];
            if !aj.is_zero() {
                for k in 0..d {
                    let lap_part =
                        derivative_samples(grid, aj, t, add_orders(unit_order(k), unit_order(k)), &label)?;
                    for i in 0..n {
                        coeff[i] += two_i * lap_part[i];
                    }
                }
            }
            for k in 0..d {
                let ak = &coeffs.a[k];
                if ak.is_zero() {
                    continue;
                }
                let label = format!("A[{k}]");
                let mixed = derivative_samples(grid, ak, t, add_orders(unit_order(j), unit_order(k)), &label)?;
                for i in 0..n {
                    coeff[i] += two_i * mixed[i];
                }
            }
        }
        add_scaled_product(&mut out, &coeff, &df[j], cplx(S::one()));
    }

    let mut coeff0 = vec![Complex::<S>::zero(); n];
    if has_v {
        for k in 0..d {
            let ddv = derivative_samples(grid, &coeffs.v, t, add_orders(unit_order(k), unit_order(k)), "V")?;
            for i in 0..n {
                coeff0[i] += ddv[i];
            }
        }
    }
    let two_alpha_d = S::of(2.0) * coeffs.alpha * S::of(d as f64);
    for c in coeff0.iter_mut() {
        *c -= cplx(two_alpha_d);
    }
    if has_a {
        for j in 0..d {
            let aj = &coeffs.a[j];
            if aj.is_zero() {
                continue;
            }
            let label = format!("A[{j}]");
            for k in 0..d {
                let o = add_orders(unit_order(j), add_orders(unit_order(k), unit_order(k)));
                let third = derivative_samples(grid, aj, t, o, &label)?;
                for i in 0..n {
                    coeff0[i] += one_i * third[i];
                }
            }
            let avals = derivative_samples(grid, aj, t, [0, 0], &label)?;
            for i in 0..n {
                coeff0[i] += four_i * avals[i] * gf.axis[j][i];
            }
        }
    }
    add_scaled_product(&mut out, &coeff0, f, cplx(S::one()));

    Ok(CommutatorOutput {
        boundary_warning: boundary_note(f),
        value: out,
    })
}

/// Closed-form `[C, L_l]` applied to `f`:
/// `-2 M_{d_j sigma_lk} d_j d_k - M_{lap sigma_lk} d_k - 2 M_{d_j eta_l} d_j
///  - 2 x_k sigma_lk - M_{lap eta_l}`.
pub fn commutator_cl<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    channel: usize,
    t: S,
    f: &WaveFunction<S>,
) -> Result<CommutatorOutput<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    if channel >= coeffs.channels() {
        return Err(ModelError::ChannelOutOfRange {
            channel,
            channels: coeffs.channels(),
        });
    }
    let d = grid.dimension();
    let n = grid.len();
    let gf = GridFields::new(grid);
    let mut out = WaveFunction::zeros(grid);
    let df: Vec<WaveFunction<S>> = (0..d).map(|j| apply_derivative(f, j)).collect();
    let row = &coeffs.sigma[channel];
    let eta = &coeffs.eta[channel];
    let m_two = cplx(-S::of(2.0));

    for (k, s) in row.iter().enumerate() {
        if s.is_zero() {
            continue;
        }
        let label = format!("sigma[{channel}][{k}]");
        for j in 0..d {
            let ds = derivative_samples(grid, s, t, unit_order(j), &label)?;
            let ddf = apply_derivative(&df[k], j);
            add_scaled_product(&mut out, &ds, &ddf, m_two);
        }
    }

    for k in 0..d {
        let mut coeff = vec![Complex::<S>::zero(); n];
        if let Some(s) = row.get(k) {
            if !s.is_zero() {
                let label = format!("sigma[{channel}][{k}]");
                for j in 0..d {
                    let dds =
                        derivative_samples(grid, s, t, add_orders(unit_order(j), unit_order(j)), &label)?;
                    for i in 0..n {
                        coeff[i] -= dds[i];
                    }
                }
            }
        }
        if !eta.is_zero() {
            let de = derivative_samples(grid, eta, t, unit_order(k), "eta")?;
            for i in 0..n {
                coeff[i] += de[i] * m_two;
            }
        }
        add_scaled_product(&mut out, &coeff, &df[k], cplx(S::one()));
    }

    let mut coeff0 = vec![Complex::<S>::zero(); n];
    for (k, s) in row.iter().enumerate() {
        if s.is_zero() {
            continue;
        }
        let label = format!("sigma[{channel}][{k}]");
        let sv = derivative_samples(grid, s, t, [0, 0], &label)?;
        for i in 0..n {
            coeff0[i] += sv[i] * cplx(gf.axis[k][i]) * m_two;
        }
    }
    if !eta.is_zero() {
        for j in 0..d {
            let dde = derivative_samples(grid, eta, t, add_orders(unit_order(j), unit_order(j)), "eta")?;
            for i in 0..n {
                coeff0[i] -= dde[i];
            }
        }
    }
    add_scaled_product(&mut out, &coeff0, f, cplx(S::one()));

    Ok(CommutatorOutput {
        boundary_warning: boundary_note(f),
        value: out,
    })
}

/// Closed-form `L_l* L_l` applied to `f`:
/// `-M_{conj(sigma_lj) sigma_lk} d_j d_k
///  - (M_{d_j conj(sigma_lj) sigma_lk} + M_{conj(sigma_lj) d_j sigma_lk}
///     + M_{conj(sigma_lk) eta_l} - M_{conj(eta_l) sigma_lk}) d_k
///  + M_{|eta_l|^2 - d_j conj(sigma_lj) eta_l - conj(sigma_lj) d_j eta_l}`.
pub fn lindblad_quadratic_expansion<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    channel: usize,
    t: S,
    f: &WaveFunction<S>,
) -> Result<WaveFunction<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    if channel >= coeffs.channels() {
        return Err(ModelError::ChannelOutOfRange {
            channel,
            channels: coeffs.channels(),
        });
    }
    let d = grid.dimension();
    let n = grid.len();
    let mut out = WaveFunction::zeros(grid);
    let df: Vec<WaveFunction<S>> = (0..d).map(|j| apply_derivative(f, j)).collect();

    let label = |k: usize| format!("sigma[{channel}][{k}]");
    let row = &coeffs.sigma[channel];
    let zeros = vec![Complex::<S>::zero(); n];
    let mut sig = Vec::with_capacity(d);
    let mut dsig = Vec::with_capacity(d);
    for k in 0..d {
        match row.get(k) {
            Some(s) if !s.is_zero() => {
                sig.push(derivative_samples(grid, s, t, [0, 0], &label(k))?);
                let mut per_axis = Vec::with_capacity(d);
                for j in 0..d {
                    per_axis.push(derivative_samples(grid, s, t, unit_order(j), &label(k))?);
                }
                dsig.push(per_axis);
            }
            _ => {
                sig.push(zeros.clone());
                dsig.push(vec![zeros.clone(); d]);
            }
        }
    }
    let eta = derivative_samples(grid, &coeffs.eta[channel], t, [0, 0], "eta")?;

    for j in 0..d {
        for k in 0..d {
            let mut coeff = vec![Complex::<S>::zero(); n];
            for i in 0..n {
                coeff[i] = -(sig[j][i].conj() * sig[k][i]);
            }
            let ddf = apply_derivative(&df[k], j);
            add_scaled_product(&mut out, &coeff, &ddf, cplx(S::one()));
        }
    }

    for k in 0..d {
        let mut coeff = vec![Complex::<S>::zero(); n];
        for j in 0..d {
            for i in 0..n {
                coeff[i] -= dsig[j][j][i].conj() * sig[k][i] + sig[j][i].conj() * dsig[k][j][i];
            }
        }
        for i in 0..n {
            coeff[i] -= sig[k][i].conj() * eta[i] - eta[i].conj() * sig[k][i];
        }
        add_scaled_product(&mut out, &coeff, &df[k], cplx(S::one()));
    }

    let mut coeff0 = vec![Complex::<S>::zero(); n];
    for i in 0..n {
        coeff0[i] = eta[i].conj() * eta[i];
    }
    if !coeffs.eta[channel].is_zero() {
        let mut de = Vec::with_capacity(d);
        for j in 0..d {
            de.push(derivative_samples(grid, &coeffs.eta[channel], t, unit_order(j), "eta")?);
        }
        for j in 0..d {
            for i in 0..n {
                coeff0[i] -= dsig[j][j][i].conj() * eta[i] + sig[j][i].conj() * de[j][i];
            }
        }
    } else {
        for j in 0..d {
            for i in 0..n {
                coeff0[i] -= dsig[j][j][i].conj() * eta[i];
            }
        }
    }
    add_scaled_product(&mut out, &coeff0, f, cplx(S::one()));
    Ok(out)
}

/// The dissipator part of the Lindblad generator applied by direct
/// composition: `sum_l (L* A L - 1/2 L*L A - 1/2 A L*L) f` for a caller-
/// supplied action of `A`. The slow-but-obvious second route the closed
/// forms below are checked against.
pub fn dissipator_direct<S: Scalar>(
    ops: &ModelOps<S>,
    t: S,
    apply_a: impl Fn(&WaveFunction<S>) -> WaveFunction<S>,
    f: &WaveFunction<S>,
) -> WaveFunction<S> {
    let grid = ops.grid();
    let half = cplx(S::of(0.5));
    let mut out = WaveFunction::zeros(grid);
    let af = apply_a(f);
    for l in 0..ops.channels() {
        let lop = ops.lindblad(l);
        let lf = lop.apply(t, f);
        let alf = apply_a(&lf);
        out.axpy(cplx(S::one()), &lop.adjoint_apply(t, &alf));
        let llf = lop.adjoint_apply(t, &lf);
        out.axpy(-half, &apply_a(&llf));
        let laf = lop.apply(t, &af);
        out.axpy(-half, &lop.adjoint_apply(t, &laf));
    }
    out
}

/// Channel-summed products `(sigma* sigma)_kj = sum_l conj(sigma_lk) sigma_lj`
/// and their first derivatives, used by the dissipator closed forms.
struct SigmaProducts<S: Scalar> {
    /// `ss[k][j]` on the grid
    ss: Vec<Vec<Vec<Complex<S>>>>,
    /// `div_ss[j] = sum_k d_k (sigma* sigma)_kj`
    div_ss: Vec<Vec<Complex<S>>>,
    /// `eta_sig[j] = sum_l conj(eta_l) sigma_lj`
    eta_sig: Vec<Vec<Complex<S>>>,
}

fn sigma_products<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
) -> Result<SigmaProducts<S>, ModelError> {
    let d = grid.dimension();
    let n = grid.len();
    let m = coeffs.channels();
    let zeros = vec![Complex::<S>::zero(); n];
    let mut sig = vec![vec![zeros.clone(); d]; m];
    let mut dsig = vec![vec![vec![zeros.clone(); d]; d]; m];
    let mut eta = vec![zeros.clone(); m];
    for l in 0..m {
        eta[l] = derivative_samples(grid, &coeffs.eta[l], t, [0, 0], &format!("eta[{l}]"))?;
        for (k, s) in coeffs.sigma[l].iter().enumerate() {
            let label = format!("sigma[{l}][{k}]");
            sig[l][k] = derivative_samples(grid, s, t, [0, 0], &label)?;
            for j in 0..d {
                dsig[l][j][k] = derivative_samples(grid, s, t, unit_order(j), &label)?;
            }
        }
    }
    let mut ss = vec![vec![zeros.clone(); d]; d];
    let mut div_ss = vec![zeros.clone(); d];
    let mut eta_sig = vec![zeros.clone(); d];
    for k in 0..d {
        for j in 0..d {
            for l in 0..m {
                for i in 0..n {
                    ss[k][j][i] += sig[l][k][i].conj() * sig[l][j][i];
                }
            }
        }
    }
    for j in 0..d {
        for k in 0..d {
            for l in 0..m {
                for i in 0..n {
                    div_ss[j][i] += dsig[l][k][k][i].conj() * sig[l][j][i]
                        + sig[l][k][i].conj() * dsig[l][k][j][i];
                }
            }
        }
        for l in 0..m {
            for i in 0..n {
                eta_sig[j][i] += eta[l][i].conj() * sig[l][j][i];
            }
        }
    }
    Ok(SigmaProducts { ss, div_ss, eta_sig })
}

/// Closed-form dissipator acting on the position observable `x_j`:
/// `2 L0(x_j) = ((s*s)_kj - (s*s)_jk) d_k + M_{d_k (s*s)_kj}
///  - M_{conj(eta) sigma_j + eta conj(sigma_j)}` summed over channels.
pub fn l0_position<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
    axis: usize,
    f: &WaveFunction<S>,
) -> Result<WaveFunction<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    let n = grid.len();
    assert!(axis < d, "axis {axis} out of range");
    let p = sigma_products(grid, coeffs, t)?;
    let mut out = WaveFunction::zeros(grid);
    let half = cplx(S::of(0.5));
    for k in 0..d {
        let mut coeff = vec![Complex::<S>::zero(); n];
        for i in 0..n {
            coeff[i] = p.ss[k][axis][i] - p.ss[axis][k][i];
        }
        let dkf = apply_derivative(f, k);
        add_scaled_product(&mut out, &coeff, &dkf, half);
    }
    let mut coeff0 = vec![Complex::<S>::zero(); n];
    for i in 0..n {
        let two_re = p.eta_sig[axis][i] + p.eta_sig[axis][i].conj();
        coeff0[i] = p.div_ss[axis][i] - two_re;
    }
    add_scaled_product(&mut out, &coeff0, f, half);
    Ok(out)
}

/// Closed-form dissipator acting on `|x|^2`:
/// `L0(|x|^2) = sum_j { x_j ((s*s)_kj - (s*s)_jk) d_k + x_j M_{d_k (s*s)_kj}
///  - 2 Re(conj(eta) sigma_j) x_j } + sum_j (s*s)_jj`.
pub fn l0_position_squared<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
    f: &WaveFunction<S>,
) -> Result<WaveFunction<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    let n = grid.len();
    let gf = GridFields::new(grid);
    let p = sigma_products(grid, coeffs, t)?;
    let mut out = WaveFunction::zeros(grid);
    for k in 0..d {
        let mut coeff = vec![Complex::<S>::zero(); n];
        for j in 0..d {
            for i in 0..n {
                coeff[i] += (p.ss[k][j][i] - p.ss[j][k][i]) * gf.axis[j][i];
            }
        }
        let dkf = apply_derivative(f, k);
        add_scaled_product(&mut out, &coeff, &dkf, cplx(S::one()));
    }
    let mut coeff0 = vec![Complex::<S>::zero(); n];
    for j in 0..d {
        for i in 0..n {
            let two_re = p.eta_sig[j][i] + p.eta_sig[j][i].conj();
            coeff0[i] += (p.div_ss[j][i] - two_re) * gf.axis[j][i] + p.ss[j][j][i];
        }
    }
    add_scaled_product(&mut out, &coeff0, f, cplx(S::one()));
    Ok(out)
}

/// First-order coefficient fields of the dissipator acting on derivatives:
/// `nu[j][k] = sum_l Re(d_j sigma_lk conj(eta_l) - sigma_lk d_j conj(eta_l))`
/// and `2 xi[j] = sum_{l,h} (conj(d_j d_h sigma_lh) eta_l
///  + conj(d_j sigma_lh) d_h eta_l - conj(d_h sigma_lh) d_j eta_l
///  - conj(sigma_lh) d_j d_h eta_l) + 2i sum_l Im(conj(eta_l) d_j eta_l)`.
/// Valid where the phase-compatibility condition holds.
fn nu_xi_samples<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
) -> Result<(Vec<Vec<Vec<Complex<S>>>>, Vec<Vec<Complex<S>>>), ModelError> {
    let d = grid.dimension();
    let n = grid.len();
    let m = coeffs.channels();
    let zeros = vec![Complex::<S>::zero(); n];
    let mut nu = vec![vec![zeros.clone(); d]; d];
    let mut xi = vec![zeros.clone(); d];
    let half = S::of(0.5);
    for l in 0..m {
        let eta_label = format!("eta[{l}]");
        let eta = derivative_samples(grid, &coeffs.eta[l], t, [0, 0], &eta_label)?;
        let mut de = Vec::with_capacity(d);
        for j in 0..d {
            de.push(derivative_samples(grid, &coeffs.eta[l], t, unit_order(j), &eta_label)?);
        }
        let mut dde = vec![vec![zeros.clone(); d]; d];
        for j in 0..d {
            for h in 0..d {
                dde[j][h] = derivative_samples(
                    grid,
                    &coeffs.eta[l],
                    t,
                    add_orders(unit_order(j), unit_order(h)),
                    &eta_label,
                )?;
            }
        }
        let mut sigv = vec![zeros.clone(); d];
        let mut dsig = vec![vec![zeros.clone(); d]; d];
        let mut ddsig = vec![vec![vec![zeros.clone(); d]; d]; d];
        for (k, s) in coeffs.sigma[l].iter().enumerate() {
            let label = format!("sigma[{l}][{k}]");
            sigv[k] = derivative_samples(grid, s, t, [0, 0], &label)?;
            for j in 0..d {
                dsig[j][k] = derivative_samples(grid, s, t, unit_order(j), &label)?;
                for h in 0..d {
                    ddsig[j][h][k] = derivative_samples(
                        grid,
                        s,
                        t,
                        add_orders(unit_order(j), unit_order(h)),
                        &label,
                    )?;
                }
            }
        }
        for j in 0..d {
            for k in 0..d {
                for i in 0..n {
                    let v = dsig[j][k][i] * eta[i].conj() - sigv[k][i] * de[j][i].conj();
                    nu[j][k][i] += cplx(v.re);
                }
            }
            for i in 0..n {
                let mut acc = Complex::<S>::zero();
                for h in 0..d {
                    acc += ddsig[j][h][h][i].conj() * eta[i]
                        + dsig[j][h][i].conj() * de[h][i]
                        - dsig[h][h][i].conj() * de[j][i]
                        - sigv[h][i].conj() * dde[j][h][i];
                }
                let im = (eta[i].conj() * de[j][i]).im;
                acc += Complex::new(S::zero(), im + im);
                xi[j][i] += acc * half;
            }
        }
    }
    Ok((nu, xi))
}

/// Closed-form dissipator acting on `d_j`: `L0(d_j) = M_{nu_jk} d_k + M_{xi_j}`.
/// Valid where the phase-compatibility condition holds.
pub fn l0_derivative<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
    axis: usize,
    f: &WaveFunction<S>,
) -> Result<WaveFunction<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    assert!(axis < d, "axis {axis} out of range");
    let (nu, xi) = nu_xi_samples(grid, coeffs, t)?;
    let mut out = WaveFunction::zeros(grid);
    for k in 0..d {
        let dkf = apply_derivative(f, k);
        add_scaled_product(&mut out, &nu[axis][k], &dkf, cplx(S::one()));
    }
    add_scaled_product(&mut out, &xi[axis], f, cplx(S::one()));
    Ok(out)
}

/// Closed-form dissipator acting on the Laplacian:
/// `L0(lap) = 2 nu_jk d_j d_k + M_{d_j nu_jk} d_k + 2 xi_j d_j + M_{d_j xi_j}
///  + M_{d_j conj(sigma_lh) d_j sigma_lk} d_h d_k
///  + (M_{d_h d_j conj(sigma_lh) d_j sigma_lk} + M_{d_j conj(sigma_lh) d_h d_j sigma_lk}) d_k
///  - M_{d_j conj(eta_l) d_j sigma_lk} d_k
///  + M_{d_j conj(sigma_lh) d_j eta_l} d_h
///  + M_{d_h d_j conj(sigma_lh) d_j eta_l} + M_{d_j conj(sigma_lh) d_h d_j eta_l}
///  - M_{d_j conj(eta_l) d_j eta_l}`,
/// channel sums implicit. Valid where the phase-compatibility condition holds.
pub fn l0_laplacian<S: Scalar>(
    grid: GridSpec<S>,
    coeffs: &CoefficientSet<S>,
    t: S,
    f: &WaveFunction<S>,
) -> Result<WaveFunction<S>, ModelError> {
    coeffs.validate(grid.dimension())?;
    let d = grid.dimension();
    let n = grid.len();
    let m = coeffs.channels();
    let (nu, xi) = nu_xi_samples(grid, coeffs, t)?;
    let mut out = WaveFunction::zeros(grid);
    let df: Vec<WaveFunction<S>> = (0..d).map(|j| apply_derivative(f, j)).collect();
    let two = cplx(S::of(2.0));

    for j in 0..d {
        for k in 0..d {
            let ddf = apply_derivative(&df[k], j);
            add_scaled_product(&mut out, &nu[j][k], &ddf, two);
        }
    }
    for k in 0..d {
        let mut coeff = vec![Complex::<S>::zero(); n];
        for j in 0..d {
            let dnu = fd_axis(grid, &nu[j][k], j);
            for i in 0..n {
                coeff[i] += dnu[i];
            }
        }
        add_scaled_product(&mut out, &coeff, &df[k], cplx(S::one()));
    }
    for j in 0..d {
        add_scaled_product(&mut out, &xi[j], &df[j], two);
    }
    let mut coeff0 = vec![Complex::<S>::zero(); n];
    for j in 0..d {
        let dxi = fd_axis(grid, &xi[j], j);
        for i in 0..n {
            coeff0[i] += dxi[i];
        }
    }

    // Cross terms from the first-derivative commutators with L and L*.
    let zeros = vec![Complex::<S>::zero(); n];
    for l in 0..m {
        let eta_label = format!("eta[{l}]");
        let mut de = Vec::with_capacity(d);
        for j in 0..d {
            de.push(derivative_samples(grid, &coeffs.eta[l], t, unit_order(j), &eta_label)?);
        }
        let mut dde = vec![vec![zeros.clone(); d]; d];
        for j in 0..d {
            for h in 0..d {
                dde[j][h] = derivative_samples(
                    grid,
                    &coeffs.eta[l],
                    t,
                    add_orders(unit_order(j), unit_order(h)),
                    &eta_label,
                )?;
            }
        }
        let mut dsig = vec![vec![zeros.clone(); d]; d];
        let mut ddsig = vec![vec![vec![zeros.clone(); d]; d]; d];
        for (k, s) in coeffs.sigma[l].iter().enumerate() {
            let label = format!("sigma[{l}][{k}]");
            for j in 0..d {
                dsig[j][k] = derivative_samples(grid, s, t, unit_order(j), &label)?;
                for h in 0..d {
                    ddsig[j][h][k] = derivative_samples(
                        grid,
                        s,
                        t,
                        add_orders(unit_order(j), unit_order(h)),
                        &label,
                    )?;
                }
            }
        }

        for h in 0..d {
            for k in 0..d {
                let mut coeff = vec![Complex::<S>::zero(); n];
                for j in 0..d {
                    for i in 0..n {
                        coeff[i] += dsig[j][h][i].conj() * dsig[j][k][i];
                    }
                }
                let ddf = apply_derivative(&df[k], h);
                add_scaled_product(&mut out, &coeff, &ddf, cplx(S::one()));
            }
        }
        for k in 0..d {
            let mut coeff = vec![Complex::<S>::zero(); n];
            for h in 0..d {
                for j in 0..d {
                    for i in 0..n {
                        coeff[i] += ddsig[h][j][h][i].conj() * dsig[j][k][i]
                            + dsig[j][h][i].conj() * ddsig[h][j][k][i];
                    }
                }
            }
            for j in 0..d {
                for i in 0..n {
                    coeff[i] -= de[j][i].conj() * dsig[j][k][i];
                }
            }
            add_scaled_product(&mut out, &coeff, &df[k], cplx(S::one()));
        }
        for h in 0..d {
            let mut coeff = vec![Complex::<S>::zero(); n];
            for j in 0..d {
                for i in 0..n {
                    coeff[i] += dsig[j][h][i].conj() * de[j][i];
                }
            }
            add_scaled_product(&mut out, &coeff, &df[h], cplx(S::one()));
        }
        for h in 0..d {
            for j in 0..d {
                for i in 0..n {
                    coeff0[i] += ddsig[h][j][h][i].conj() * de[j][i]
                        + dsig[j][h][i].conj() * dde[h][j][i];
                }
            }
        }
        for j in 0..d {
            for i in 0..n {
                coeff0[i] -= de[j][i].conj() * de[j][i];
            }
        }
    }
    add_scaled_product(&mut out, &coeff0, f, cplx(S::one()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::presets::{
        self, LaserParams, PaulTrapParams, PositionMeasurementParams, QbmParams,
    };
    use super::*;
    use crate::grid::{apply_laplacian, make_gaussian, Boundary};
    use std::sync::atomic::{AtomicUsize, Ordering};

    type W = WaveFunction<f64>;

    fn grid1(n: usize, l: f64) -> GridSpec<f64> {
        GridSpec::new(1, l, n, Boundary::Dirichlet).expect("grid")
    }

    fn splitmix(state: &mut u64) -> f64 {
        *state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Rough deterministic wave; fine for exact identities, useless for
    /// anything that assumes smoothness.
    fn rough_wave(grid: GridSpec<f64>, seed: u64) -> W {
        let mut s = seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(1);
        let mut f = W::zeros(grid);
        for z in f.amp_mut() {
            *z = Complex::new(
                2.0 * splitmix(&mut s) - 1.0,
                2.0 * splitmix(&mut s) - 1.0,
            );
        }
        f
    }

    /// Gaussian packets kept well away from the box edge, for tests that
    /// compare against continuum formulas.
    fn smooth_battery(grid: GridSpec<f64>, count: usize) -> Vec<W> {
        let centers = [0.0, 0.4, -0.5];
        let widths = [0.6, 0.7, 0.8];
        let momenta = [0.0, 0.5, 1.0];
        (0..count)
            .map(|i| {
                make_gaussian(
                    grid,
                    &[centers[i % 3]],
                    widths[(i / 3) % 3],
                    &[momenta[(i / 2) % 3]],
                )
                .expect("battery packet")
            })
            .collect()
    }

    fn diff_norm(a: &W, b: &W) -> f64 {
        let mut d = a.clone();
        d.axpy(Complex::new(-1.0, 0.0), b);
        d.norm_sq().sqrt()
    }

    fn rel_err(got: &W, want: &W) -> f64 {
        diff_norm(got, want) / want.norm_sq().sqrt().max(1e-300)
    }

    #[test]
    fn free_hamiltonian_energy_is_nonnegative() {
        let grid = grid1(64, 6.0);
        let ops = ModelOps::new(grid, &CoefficientSet::free(0.5)).unwrap();
        for f in smooth_battery(grid, 4) {
            let e = inner_product(&f, &ops.hamiltonian().apply(0.0, &f));
            assert!(e.im.abs() <= 1e-12 * (1.0 + e.re.abs()));
            assert!(e.re >= 0.0, "kinetic energy {} < 0", e.re);
        }
    }

    #[test]
    fn handles_satisfy_adjoint_pairing() {
        let grid = grid1(48, 6.0);
        let coeffs = presets::qbm::<f64>(&QbmParams::default());
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let handles = [
            ops.hamiltonian(),
            ops.lindblad(0),
            ops.drift(),
            ops.reference(),
        ];
        for pair in 0..20 {
            let f = rough_wave(grid, 2 * pair + 1);
            let g = rough_wave(grid, 2 * pair + 2);
            for op in handles {
                let af = op.apply(0.0, &f);
                let astar_g = op.adjoint_apply(0.0, &g);
                let lhs = inner_product(&af, &g);
                let rhs = inner_product(&f, &astar_g);
                let scale = af.norm_sq().sqrt() * g.norm_sq().sqrt()
                    + f.norm_sq().sqrt() * astar_g.norm_sq().sqrt()
                    + 1e-30;
                assert!(
                    (lhs - rhs).norm() <= 1e-12 * scale,
                    "adjoint pairing broken for {}: {:e}",
                    op.label(),
                    (lhs - rhs).norm()
                );
            }
        }
    }

    #[test]
    fn position_channel_is_pointwise_multiplication() {
        let grid = grid1(64, 6.0);
        let p = PositionMeasurementParams { mass: 1.0, eta: 0.5 };
        let coeffs = presets::position_measurement::<f64>(&p);
        let l = build_l(grid, &coeffs, 0).unwrap();
        let f = rough_wave(grid, 7);
        let lf = l.apply(0.0, &f);
        let back = l.adjoint_apply(0.0, &f);
        for i in 0..grid.len() {
            let want = f.amp()[i] * (0.5 * grid.point(i)[0]);
            assert!((lf.amp()[i] - want).norm() <= 1e-14 * (1.0 + want.norm()));
            assert!((back.amp()[i] - want).norm() <= 1e-14 * (1.0 + want.norm()));
        }
    }

    #[test]
    fn norm_balance_residual_vanishes_on_presets() {
        let grid = grid1(48, 6.0);
        let t = 0.3;
        for name in presets::PRESET_NAMES {
            let coeffs = presets::by_name::<f64>(name, &Default::default()).unwrap();
            let ops = ModelOps::new(grid, &coeffs).unwrap();
            for k in 0..10 {
                let f = rough_wave(grid, 100 + k);
                let (resid, scale) = norm_balance_residual(&ops, t, &f);
                assert!(
                    resid.abs() <= 1e-12 * scale,
                    "{name}: norm balance residual {resid:e} vs scale {scale:e}"
                );
            }
        }
    }

    #[test]
    fn drift_expectation_is_imaginary_without_noise() {
        let grid = grid1(64, 6.0);
        let coeffs = CoefficientSet::free(0.5).with_potential(Field::real_1d(
            |x| 0.5 * x * x,
            |x| x,
            |_| 1.0,
            |_| 0.0,
        ));
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        for k in 0..10 {
            let f = rough_wave(grid, 500 + k);
            let e = inner_product(&f, &ops.drift().apply(0.0, &f));
            assert!(e.re.abs() <= 1e-12 * (f.norm_sq() + e.norm()));
        }
    }

    #[test]
    fn reference_reproduces_gaussian_ground_profile() {
        let residual = |n: usize| {
            let grid = grid1(n, 10.0);
            let f = W::from_fn(grid, |x| Complex::new((-0.5 * x[0] * x[0]).exp(), 0.0));
            let c = build_c(grid);
            let cf = c.apply(0.0, &f);
            (rel_err(&cf, &f), {
                let num = inner_product(&f, &cf).re;
                num / f.norm_sq() - 1.0
            })
        };
        let (r256, rayleigh) = residual(256);
        assert!(r256 <= 4e-3, "ground profile residual {r256:e}");
        assert!(rayleigh.abs() <= 6e-4, "eigenvalue estimate off by {rayleigh:e}");
        let (r128, _) = residual(128);
        let ratio = r128 / r256;
        assert!(
            (3.2..=4.8).contains(&ratio),
            "residual refinement ratio {ratio} not second order"
        );
    }

    #[test]
    fn reference_operator_is_positive() {
        let grid = grid1(48, 6.0);
        let c = build_c(grid);
        for k in 0..10 {
            let f = rough_wave(grid, 900 + k);
            assert!(inner_product(&f, &c.apply(0.0, &f)).re > 0.0);
        }
    }

    #[test]
    fn phase_condition_holds_for_real_noise_gradients() {
        let grid = grid1(64, 6.0);
        let coeffs = presets::qbm::<f64>(&QbmParams::default());
        assert_eq!(check_phase_condition(grid, &coeffs, 0.0).unwrap(), 0.0);
        let no_sigma = presets::paul_trap::<f64>(&PaulTrapParams::default());
        assert_eq!(check_phase_condition(grid, &no_sigma, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn phase_condition_detects_x_dependent_phase() {
        let grid = grid1(256, 6.0);
        // sigma = exp(ix): the gradient cross terms reduce to -2i sin-free
        // residual of modulus 2 everywhere.
        let analytic = CoefficientSet::free(0.5).with_channel(
            vec![Field::complex_1d(
                |x| Complex::from_polar(1.0, x),
                |x| mul_i(Complex::from_polar(1.0, x)),
                |x| -Complex::from_polar(1.0, x),
                |x| -mul_i(Complex::from_polar(1.0, x)),
            )],
            Field::zero(),
        );
        let r = check_phase_condition(grid, &analytic, 0.0).unwrap();
        assert!((r - 2.0).abs() <= 1e-12, "analytic residual {r}");
        let sampled = CoefficientSet::free(0.5).with_channel(
            vec![Field::new(false, |_, x: [f64; 2]| {
                Complex::from_polar(1.0, x[0])
            })],
            Field::zero(),
        );
        let r = check_phase_condition(grid, &sampled, 0.0).unwrap();
        assert!((r - 2.0).abs() <= 5e-3, "differenced residual {r}");
    }

    #[test]
    fn alpha_probe_is_zero_for_empty_model() {
        let grid = grid1(48, 6.0);
        let ops = ModelOps::new(grid, &CoefficientSet::free(0.0)).unwrap();
        let battery = smooth_battery(grid, 3);
        assert_eq!(estimate_alpha(&ops, 0.0, &battery).unwrap(), 0.0);
        assert!(matches!(
            estimate_alpha(&ops, 0.0, &[]),
            Err(ModelError::EmptySampleSet)
        ));
    }

    #[test]
    fn alpha_probe_ignores_sample_scale() {
        let grid = grid1(48, 6.0);
        let coeffs = presets::paul_trap::<f64>(&PaulTrapParams::default());
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let battery = smooth_battery(grid, 5);
        let scaled: Vec<W> = battery
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.scale(Complex::new(2.0, 0.0));
                g
            })
            .collect();
        let a = estimate_alpha(&ops, 0.0, &battery).unwrap();
        let b = estimate_alpha(&ops, 0.0, &scaled).unwrap();
        assert_eq!(a, b, "degree-zero homogeneity must be exact");
    }

    #[test]
    fn alpha_probe_scales_quadratically_in_noise_strength() {
        let grid = grid1(64, 8.0);
        let battery: Vec<W> = (0..4)
            .map(|i| {
                make_gaussian(grid, &[[0.0, 0.5, -0.4, 0.2][i]], 0.7, &[0.0]).unwrap()
            })
            .collect();
        let base = PaulTrapParams { mass: 1.0, omega: 1.0, eta: 0.5 };
        let doubled = PaulTrapParams { eta: 1.0, ..base };
        let ops1 = ModelOps::new(grid, &presets::paul_trap::<f64>(&base)).unwrap();
        let ops2 = ModelOps::new(grid, &presets::paul_trap::<f64>(&doubled)).unwrap();
        let a1 = estimate_alpha(&ops1, 0.0, &battery).unwrap();
        let a2 = estimate_alpha(&ops2, 0.0, &battery).unwrap();
        assert!(a1 > 0.0);
        let ratio = a2 / a1;
        assert!(
            (3.4..=4.6).contains(&ratio),
            "doubling eta should quadruple the rate, got ratio {ratio}"
        );
    }

    #[test]
    fn growth_report_for_heated_trap() {
        let grid = grid1(128, 10.0);
        let coeffs = presets::paul_trap::<f64>(&PaulTrapParams::default());
        let report = check_growth(grid, &coeffs, 0.0).unwrap();
        let v = report.bound("V over 1+|x|^2").unwrap();
        assert!(!v.unbounded);
        assert!(
            (v.constant - 0.5).abs() <= 0.025,
            "harmonic constant {} should approach M omega^2 / 2",
            v.constant
        );
        assert!(report.hamiltonian_ok);
        assert!(report.noise_common_ok);
        assert!(!report.bounded_eta_branch, "linear eta is not bounded");
        assert!(report.constant_sigma_branch);
        assert!(report.satisfied());
    }

    #[test]
    fn growth_report_flags_quartic_potential() {
        let grid = grid1(128, 10.0);
        let coeffs = CoefficientSet::free(0.5).with_potential(Field::real_1d(
            |x: f64| x.powi(4),
            |x: f64| 4.0 * x.powi(3),
            |x| 12.0 * x * x,
            |x| 24.0 * x,
        ));
        let report = check_growth(grid, &coeffs, 0.0).unwrap();
        assert!(report.bound("V over 1+|x|^2").unwrap().unbounded);
        assert!(!report.hamiltonian_ok);
        assert!(!report.satisfied());
    }

    #[test]
    fn growth_report_rejects_growing_sigma() {
        let grid = grid1(128, 10.0);
        let coeffs = CoefficientSet::free(0.5).with_channel(
            vec![Field::real_1d(|x| x, |_| 1.0, |_| 0.0, |_| 0.0)],
            Field::zero(),
        );
        let report = check_growth(grid, &coeffs, 0.0).unwrap();
        assert!(report.bound("sigma").unwrap().unbounded);
        assert!(!report.noise_common_ok);
        assert!(!report.constant_sigma_branch);
        assert!(!report.satisfied());
    }

    #[test]
    fn hamiltonian_commutator_free_case_matches_closed_form() {
        let grid = grid1(256, 6.0);
        let alpha = 0.3;
        let coeffs = CoefficientSet::free(alpha);
        let f = make_gaussian(grid, &[0.2], 0.7, &[0.5]).unwrap();
        let out = commutator_hc(grid, &coeffs, 0.0, &f).unwrap();
        assert!(out.boundary_warning.is_none());
        // -4 alpha x d f - 2 alpha f, assembled by hand
        let df = apply_derivative(&f, 0);
        let mut want = W::zeros(grid);
        for i in 0..grid.len() {
            want.amp_mut()[i] =
                df.amp()[i] * (-4.0 * alpha * grid.point(i)[0]) - f.amp()[i] * (2.0 * alpha);
        }
        assert!(rel_err(&out.value, &want) <= 1e-13);
    }

    fn direct_hc(ops: &ModelOps<f64>, t: f64, f: &W) -> W {
        let mut out = ops.hamiltonian().apply(t, &ops.reference().apply(t, f));
        out.axpy(
            Complex::new(-1.0, 0.0),
            &ops.reference().apply(t, &ops.hamiltonian().apply(t, f)),
        );
        out
    }

    #[test]
    fn hamiltonian_commutator_matches_direct_composition() {
        // Mass 2 keeps H away from a multiple of C, where the commutator
        // would vanish identically; here [H, C] = x d + 1/2.
        let check = |n: usize, coeffs: &CoefficientSet<f64>| {
            let grid = grid1(n, 8.0);
            let ops = ModelOps::new(grid, coeffs).unwrap();
            let f = make_gaussian(grid, &[0.0], 0.6, &[0.5]).unwrap();
            let closed = commutator_hc(grid, coeffs, 0.0, &f).unwrap().value;
            let direct = direct_hc(&ops, 0.0, &f);
            rel_err(&closed, &direct)
        };
        let harmonic = presets::position_measurement::<f64>(&PositionMeasurementParams {
            mass: 2.0,
            eta: 0.5,
        });
        let r256 = check(256, &harmonic);
        assert!(r256 <= 0.02, "harmonic closed form off by {r256:e}");
        let ratio = check(128, &harmonic) / r256;
        assert!(
            (2.8..=5.5).contains(&ratio),
            "commutator refinement ratio {ratio} not second order"
        );
    }

    #[test]
    fn hamiltonian_commutator_handles_curved_advection() {
        // A = x^2/2 puts the mixed third-derivative coefficients in play;
        // every term of the closed form is exercised.
        let coeffs = CoefficientSet::free(0.25).with_vector_potential(vec![Field::real_1d(
            |x| 0.5 * x * x,
            |x| x,
            |_| 1.0,
            |_| 0.0,
        )]);
        let check = |n: usize| {
            let grid = grid1(n, 8.0);
            let ops = ModelOps::new(grid, &coeffs).unwrap();
            let f = make_gaussian(grid, &[0.3], 0.6, &[0.0]).unwrap();
            let closed = commutator_hc(grid, &coeffs, 0.0, &f).unwrap().value;
            rel_err(&closed, &direct_hc(&ops, 0.0, &f))
        };
        let r256 = check(256);
        assert!(r256 <= 0.03, "curved advection closed form off by {r256:e}");
        let ratio = check(128) / r256;
        assert!(
            (2.8..=5.5).contains(&ratio),
            "curved advection refinement ratio {ratio}"
        );
    }

    #[test]
    fn commutator_warns_when_state_touches_boundary() {
        let grid = grid1(128, 10.0);
        let coeffs = CoefficientSet::free(0.5);
        let edge = make_gaussian(grid, &[8.6], 0.3, &[0.0]).unwrap();
        let out = commutator_hc(grid, &coeffs, 0.0, &edge).unwrap();
        assert!(out.boundary_warning.is_some());
        let interior = make_gaussian(grid, &[0.0], 0.7, &[0.0]).unwrap();
        let out = commutator_hc(grid, &coeffs, 0.0, &interior).unwrap();
        assert!(out.boundary_warning.is_none());
    }

    fn direct_cl(ops: &ModelOps<f64>, channel: usize, t: f64, f: &W) -> W {
        let mut out = ops.reference().apply(t, &ops.lindblad(channel).apply(t, f));
        out.axpy(
            Complex::new(-1.0, 0.0),
            &ops.lindblad(channel).apply(t, &ops.reference().apply(t, f)),
        );
        out
    }

    #[test]
    fn noise_commutator_for_multiplicative_channel_is_exact() {
        let eta = 0.5;
        let coeffs = presets::position_measurement::<f64>(&PositionMeasurementParams {
            mass: 1.0,
            eta,
        });
        let grid = grid1(256, 6.0);
        let f = make_gaussian(grid, &[0.0], 0.7, &[0.5]).unwrap();
        let closed = commutator_cl(grid, &coeffs, 0, 0.0, &f).unwrap().value;
        let mut want = apply_derivative(&f, 0);
        want.scale(Complex::new(-2.0 * eta, 0.0));
        assert!(rel_err(&closed, &want) <= 1e-13, "closed form is -2 eta df");
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let r = rel_err(&closed, &direct_cl(&ops, 0, 0.0, &f));
        assert!(r <= 0.02, "direct composition off by {r:e}");
    }

    #[test]
    fn noise_commutator_matches_direct_composition() {
        let qbm = presets::qbm::<f64>(&QbmParams::default());
        let synthetic = CoefficientSet::free(0.5).with_channel(
            vec![Field::real_1d(|x| x, |_| 1.0, |_| 0.0, |_| 0.0)],
            Field::zero(),
        );
        for coeffs in [&qbm, &synthetic] {
            let check = |n: usize| {
                let grid = grid1(n, 8.0);
                let ops = ModelOps::new(grid, coeffs).unwrap();
                let f = make_gaussian(grid, &[0.2], 0.6, &[0.5]).unwrap();
                let closed = commutator_cl(grid, coeffs, 0, 0.0, &f).unwrap().value;
                rel_err(&closed, &direct_cl(&ops, 0, 0.0, &f))
            };
            let r256 = check(256);
            assert!(r256 <= 0.02, "noise commutator off by {r256:e}");
            let ratio = check(128) / r256;
            assert!(
                (2.8..=5.5).contains(&ratio),
                "noise commutator refinement ratio {ratio}"
            );
        }
    }

    #[test]
    fn noise_commutator_rejects_missing_channel() {
        let grid = grid1(32, 6.0);
        let coeffs = CoefficientSet::free(0.5);
        let f = rough_wave(grid, 1);
        assert!(matches!(
            commutator_cl(grid, &coeffs, 0, 0.0, &f),
            Err(ModelError::ChannelOutOfRange { .. })
        ));
    }

    #[test]
    fn quadratic_expansion_matches_hand_assembly() {
        // sigma = b, eta = a x: L*L = -b^2 dd + (a^2 x^2 - a b)
        let p = QbmParams::default();
        let (a, b) = (p.eta, p.sigma);
        let coeffs = presets::qbm::<f64>(&p);
        let grid = grid1(256, 6.0);
        let f = make_gaussian(grid, &[0.0], 0.7, &[0.5]).unwrap();
        let got = lindblad_quadratic_expansion(grid, &coeffs, 0, 0.0, &f).unwrap();
        let ddf = apply_derivative(&apply_derivative(&f, 0), 0);
        let mut want = W::zeros(grid);
        for i in 0..grid.len() {
            let x = grid.point(i)[0];
            want.amp_mut()[i] =
                ddf.amp()[i] * (-b * b) + f.amp()[i] * (a * a * x * x - a * b);
        }
        assert!(rel_err(&got, &want) <= 1e-13);
    }

    #[test]
    fn quadratic_expansion_matches_operator_composition() {
        let qbm = presets::qbm::<f64>(&QbmParams::default());
        // sigma = x exercises the divergence terms of the expansion:
        // L*L = -x^2 dd - 2x d for L = x d.
        let synthetic = CoefficientSet::free(0.5).with_channel(
            vec![Field::real_1d(|x| x, |_| 1.0, |_| 0.0, |_| 0.0)],
            Field::zero(),
        );
        for coeffs in [&qbm, &synthetic] {
            let check = |n: usize| {
                let grid = grid1(n, 8.0);
                let ops = ModelOps::new(grid, coeffs).unwrap();
                let f = make_gaussian(grid, &[0.2], 0.6, &[0.5]).unwrap();
                let got = lindblad_quadratic_expansion(grid, coeffs, 0, 0.0, &f).unwrap();
                let composed = ops.lindblad(0).adjoint_apply(0.0, &ops.lindblad(0).apply(0.0, &f));
                rel_err(&got, &composed)
            };
            let r256 = check(256);
            assert!(r256 <= 0.02, "expansion vs composition off by {r256:e}");
            let ratio = check(128) / r256;
            assert!(
                (2.8..=5.5).contains(&ratio),
                "expansion refinement ratio {ratio}"
            );
        }
    }

    #[test]
    fn dissipator_position_closed_form() {
        let p = QbmParams::default();
        let coeffs = presets::qbm::<f64>(&p);
        let grid = grid1(256, 6.0);
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let f = make_gaussian(grid, &[0.2], 0.7, &[0.5]).unwrap();
        let closed = l0_position(grid, &coeffs, 0.0, 0, &f).unwrap();
        // -a b x f for constant sigma and linear eta
        let mut want = W::zeros(grid);
        for i in 0..grid.len() {
            want.amp_mut()[i] = f.amp()[i] * (-p.eta * p.sigma * grid.point(i)[0]);
        }
        assert!(rel_err(&closed, &want) <= 1e-13);
        let direct = dissipator_direct(
            &ops,
            0.0,
            |g| {
                let mut out = W::zeros(grid);
                for i in 0..grid.len() {
                    out.amp_mut()[i] = g.amp()[i] * grid.point(i)[0];
                }
                out
            },
            &f,
        );
        let r = rel_err(&closed, &direct);
        assert!(r <= 0.02, "position dissipator off by {r:e}");
    }

    #[test]
    fn dissipator_position_squared_closed_form() {
        let p = QbmParams::default();
        let coeffs = presets::qbm::<f64>(&p);
        let grid = grid1(256, 6.0);
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let f = make_gaussian(grid, &[0.2], 0.7, &[0.5]).unwrap();
        let closed = l0_position_squared(grid, &coeffs, 0.0, &f).unwrap();
        // -2 a b x^2 f + b^2 f
        let mut want = W::zeros(grid);
        for i in 0..grid.len() {
            let x = grid.point(i)[0];
            want.amp_mut()[i] =
                f.amp()[i] * (-2.0 * p.eta * p.sigma * x * x + p.sigma * p.sigma);
        }
        assert!(rel_err(&closed, &want) <= 1e-13);
        let direct = dissipator_direct(
            &ops,
            0.0,
            |g| {
                let mut out = W::zeros(grid);
                for i in 0..grid.len() {
                    let x = grid.point(i)[0];
                    out.amp_mut()[i] = g.amp()[i] * (x * x);
                }
                out
            },
            &f,
        );
        let r = rel_err(&closed, &direct);
        assert!(r <= 0.02, "position-squared dissipator off by {r:e}");
    }

    #[test]
    fn dissipator_derivative_closed_form() {
        let p = QbmParams::default();
        let coeffs = presets::qbm::<f64>(&p);
        let grid = grid1(256, 6.0);
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let f = make_gaussian(grid, &[0.2], 0.7, &[0.5]).unwrap();
        let closed = l0_derivative(grid, &coeffs, 0.0, 0, &f).unwrap();
        // -a b d f
        let mut want = apply_derivative(&f, 0);
        want.scale(Complex::new(-p.eta * p.sigma, 0.0));
        assert!(rel_err(&closed, &want) <= 1e-13);
        let direct = dissipator_direct(&ops, 0.0, |g| apply_derivative(g, 0), &f);
        let r = rel_err(&closed, &direct);
        assert!(r <= 0.02, "derivative dissipator off by {r:e}");
    }

    #[test]
    fn dissipator_laplacian_for_imaginary_linear_eta_is_constant() {
        let p = PaulTrapParams::default();
        let coeffs = presets::paul_trap::<f64>(&p);
        let grid = grid1(256, 6.0);
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let f = make_gaussian(grid, &[0.2], 0.7, &[0.5]).unwrap();
        let closed = l0_laplacian(grid, &coeffs, 0.0, &f).unwrap();
        let mut want = f.clone();
        want.scale(Complex::new(-p.eta * p.eta, 0.0));
        assert!(
            rel_err(&closed, &want) <= 1e-14,
            "heating dissipator must be exactly -eta^2"
        );
        let direct = dissipator_direct(&ops, 0.0, apply_laplacian, &f);
        let r = rel_err(&closed, &direct);
        assert!(r <= 0.02, "laplacian dissipator off by {r:e}");
    }

    #[test]
    fn dissipator_laplacian_matches_direct_for_derivative_noise() {
        // L = x d: the dissipator on the Laplacian collapses to +dd. The
        // direct route stacks three derivative applications with x-weights,
        // so any edge amplitude is amplified by 1/h^3; the packet must decay
        // to round-off well inside the box or the comparison diverges under
        // refinement instead of converging.
        let coeffs = CoefficientSet::free(0.5).with_channel(
            vec![Field::real_1d(|x| x, |_| 1.0, |_| 0.0, |_| 0.0)],
            Field::zero(),
        );
        let check = |n: usize| {
            let grid = grid1(n, 8.0);
            let ops = ModelOps::new(grid, &coeffs).unwrap();
            let f = make_gaussian(grid, &[0.2], 0.6, &[0.5]).unwrap();
            let closed = l0_laplacian(grid, &coeffs, 0.0, &f).unwrap();
            let ddf = apply_derivative(&apply_derivative(&f, 0), 0);
            assert!(rel_err(&closed, &ddf) <= 1e-13);
            rel_err(&closed, &dissipator_direct(&ops, 0.0, apply_laplacian, &f))
        };
        let r256 = check(256);
        assert!(r256 <= 0.02, "laplacian dissipator off by {r256:e}");
        let ratio = check(128) / r256;
        assert!(
            (2.8..=5.5).contains(&ratio),
            "laplacian dissipator refinement ratio {ratio}"
        );
    }

    #[test]
    fn observable_expectations_match_gaussian_moments() {
        let grid = grid1(256, 10.0);
        let (c, w, p) = (1.2, 0.8, 0.5);
        let f = make_gaussian(grid, &[c], w, &[p]).unwrap();
        let x = ObservableSpec::<f64>::position(0).expectation(0.0, &f).unwrap();
        assert!((x.re - c).abs() <= 1e-9, "mean position {}", x.re);
        assert!(x.im.abs() <= 1e-12);
        let xx = ObservableSpec::<f64>::position_squared(0)
            .expectation(0.0, &f)
            .unwrap();
        let want = c * c + w * w;
        assert!(
            (xx.re - want).abs() <= 1e-8 * want,
            "second moment {} vs {want}",
            xx.re
        );
        let pp = ObservableSpec::<f64>::momentum_squared(0)
            .expectation(0.0, &f)
            .unwrap();
        let want = p * p + 0.25 / (w * w);
        assert!(
            (pp.re - want).abs() <= 1e-2 * want,
            "kinetic moment {} vs {want}",
            pp.re
        );
    }

    #[test]
    fn observable_factors_pair_with_their_adjoints() {
        let grid = grid1(64, 6.0);
        let f = rough_wave(grid, 11);
        let g = rough_wave(grid, 12);
        let field = || Field::real_1d(|x| x, |_| 1.0, |_| 0.0, |_| 0.0);
        let factors = [
            Factor::Multiplier(field()),
            Factor::MultiplierDerivative { field: field(), axis: 0 },
            Factor::DerivativeMultiplier { field: field(), axis: 0 },
        ];
        for b in factors {
            let lhs = inner_product(&b.apply(0.0, &f).unwrap(), &g);
            let rhs = inner_product(&f, &b.adjoint_apply(0.0, &g).unwrap());
            assert!((lhs - rhs).norm() <= 1e-12 * (lhs.norm() + rhs.norm() + 1.0));
        }
    }

    #[test]
    fn observable_growth_check_flags_quadratic_multiplier() {
        let grid = grid1(128, 10.0);
        let bad = ObservableSpec::<f64>::new(
            "x_sq_unsplit",
            Factor::Multiplier(Field::real_constant(1.0)),
            Factor::Multiplier(Field::real_1d(
                |x| x * x,
                |x| 2.0 * x,
                |_| 2.0,
                |_| 0.0,
            )),
        );
        assert!(bad
            .check_growth(grid, 0.0)
            .unwrap()
            .iter()
            .any(|b| b.unbounded));
        for good in [
            ObservableSpec::<f64>::position(0),
            ObservableSpec::<f64>::position_squared(0),
            ObservableSpec::<f64>::momentum_squared(0),
        ] {
            let bounds = good.check_growth(grid, 0.0).unwrap();
            assert!(
                bounds.iter().all(|b| !b.unbounded),
                "{} flagged: {:?}",
                good.label,
                bounds
                    .iter()
                    .filter(|b| b.unbounded)
                    .map(|b| &b.name)
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn coefficient_samples_are_memoized_per_time() {
        let grid = grid1(16, 6.0);
        let n = grid.len();
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let v = Field::new(true, move |t, x: [f64; 2]| {
            c.fetch_add(1, Ordering::SeqCst);
            Complex::new(t * x[0], 0.0)
        });
        let coeffs = CoefficientSet::free(0.5).with_potential(v);
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        assert_eq!(count.load(Ordering::SeqCst), n, "one sampling pass at build");
        let f = rough_wave(grid, 3);
        ops.hamiltonian().apply(0.0, &f);
        ops.hamiltonian().apply(0.0, &f);
        assert_eq!(count.load(Ordering::SeqCst), n, "t = 0 was already cached");
        ops.hamiltonian().apply(0.5, &f);
        ops.drift().apply(0.5, &f);
        assert_eq!(count.load(Ordering::SeqCst), 2 * n, "new time, one more pass");
        ops.hamiltonian().apply(1.0, &f);
        assert_eq!(count.load(Ordering::SeqCst), 3 * n);
    }

    #[test]
    fn time_dependent_potential_enters_hamiltonian() {
        let grid = grid1(64, 6.0);
        let coeffs = CoefficientSet::free(0.5)
            .with_potential(Field::new(true, |t, x: [f64; 2]| Complex::new(t * x[0], 0.0)));
        let ops = ModelOps::new(grid, &coeffs).unwrap();
        let f = make_gaussian(grid, &[0.0], 0.7, &[0.0]).unwrap();
        let hf = ops.hamiltonian().apply(2.0, &f);
        let mut want = apply_laplacian(&f);
        for i in 0..grid.len() {
            let w = want.amp()[i] * (-0.5) + f.amp()[i] * (2.0 * grid.point(i)[0]);
            want.amp_mut()[i] = w;
        }
        assert!(rel_err(&hf, &want) <= 1e-13);
    }

    #[test]
    fn preset_registry_round_trips() {
        let grid = grid1(32, 6.0);
        for name in presets::PRESET_NAMES {
            let coeffs = presets::by_name::<f64>(name, &Default::default()).unwrap();
            ModelOps::new(grid, &coeffs).expect(name);
        }
        let mut params = std::collections::BTreeMap::new();
        params.insert("eta".to_string(), 1.0);
        params.insert("M".to_string(), 2.0);
        let coeffs = presets::by_name::<f64>("paul-trap-e4", &params).unwrap();
        assert_eq!(coeffs.alpha, 0.25);
        params.insert("bogus".to_string(), 1.0);
        assert!(matches!(
            presets::by_name::<f64>("paul-trap-e4", &params),
            Err(ModelError::UnknownParameter { .. })
        ));
        assert!(matches!(
            presets::by_name::<f64>("unknown", &Default::default()),
            Err(ModelError::UnknownPreset(_))
        ));
    }

    #[test]
    fn malformed_coefficients_are_rejected_at_build() {
        let grid = grid1(32, 6.0);
        let complex_v =
            CoefficientSet::free(0.5).with_potential(Field::constant(Complex::new(0.0, 1.0)));
        assert!(matches!(
            ModelOps::new(grid, &complex_v),
            Err(ModelError::ComplexField { .. })
        ));
        assert!(matches!(
            ModelOps::new(grid, &CoefficientSet::free(-1.0)),
            Err(ModelError::Alpha(_))
        ));
        let ragged = CoefficientSet::free(0.5)
            .with_vector_potential(vec![Field::zero(), Field::zero()]);
        assert!(matches!(
            ModelOps::new(grid, &ragged),
            Err(ModelError::Shape(_))
        ));
        assert!(matches!(
            build_l(grid, &CoefficientSet::free(0.5), 0),
            Err(ModelError::ChannelOutOfRange { .. })
        ));
    }

    #[test]
    fn laser_pulse_envelope_ramps_and_clamps() {
        let p = LaserParams::default();
        assert_eq!(presets::pulse_envelope(&p, -0.1), 0.0);
        assert_eq!(presets::pulse_envelope(&p, 2.5), 0.0);
        assert!((presets::pulse_envelope(&p, 1.0f64) - 1.0).abs() <= 1e-15);
        let up = presets::pulse_envelope(&p, 0.25);
        assert!(up > 0.0 && up < 1.0);
        let down = presets::pulse_envelope(&p, 1.9);
        assert!(down > 0.0 && down < 1.0);
    }
}
