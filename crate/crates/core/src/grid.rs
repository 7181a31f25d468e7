//! Uniform tensor grids on [-L, L]^d and complex wavefunctions on them.
//!
//! Stencils are second-order central differences throughout, not spectral.
//! The choice is structural: central differences make the discrete derivative
//! exactly antisymmetric and the discrete Laplacian exactly symmetric under
//! the weighted inner product, so every adjoint built on top of them is exact
//! rather than an O(h^2) approximation, and identity tests elsewhere measure
//! discretization error only.

use num_complex::Complex;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::Scalar;

/// Total point count cap: N^d above this is rejected at construction.
pub const MAX_POINTS: u64 = 1 << 26;

/// Boundary treatment of the stencils.
///
/// Dirichlet reads zero ghost values outside the box (the function is assumed
/// to vanish there, monitored by [`boundary_mass`]); periodic wraps around.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// Construction and sampling errors for grid data.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension must be 1 or 2, got {0}")]
    Dimension(usize),
    #[error("points_per_axis must be an even integer >= 8, got {0}")]
    PointsPerAxis(usize),
    #[error("half_width must be positive and finite")]
    HalfWidth,
    #[error("grid has {points} points, exceeding the cap of {max}")]
    TooManyPoints { points: u64, max: u64 },
    #[error("width must be positive and finite")]
    Width,
    #[error(
        "gaussian support reaches the boundary: |center| + 4*width = {reach} but half_width = {half_width}"
    )]
    SupportNearBoundary { reach: f64, half_width: f64 },
    #[error("multiplier field has a non-finite sample at index {0}")]
    NonFiniteSample(usize),
}

/// Uniform tensor grid on [-L, L]^d with N points per axis.
///
/// Coordinates are x_i = -L + i*h with h = 2L/N, so the rightmost node is
/// L - h; under periodic boundaries the node at L is identified with -L.
/// Values live in row-major order with axis 0 slowest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<S> {
    dimension: usize,
    half_width: S,
    points_per_axis: usize,
    boundary: Boundary,
    spacing: S,
}

impl<S: Scalar> GridSpec<S> {
    pub fn new(
        dimension: usize,
        half_width: S,
        points_per_axis: usize,
        boundary: Boundary,
    ) -> Result<Self, GridError> {
        if !(dimension == 1 || dimension == 2) {
            return Err(GridError::Dimension(dimension));
        }
        if !(half_width.is_finite() && half_width > S::zero()) {
            return Err(GridError::HalfWidth);
        }
        if points_per_axis < 8 || points_per_axis % 2 != 0 {
            return Err(GridError::PointsPerAxis(points_per_axis));
        }
        let points = (points_per_axis as u64).pow(dimension as u32);
        if points > MAX_POINTS {
            return Err(GridError::TooManyPoints {
                points,
                max: MAX_POINTS,
            });
        }
        let spacing = (half_width + half_width) / S::of(points_per_axis as f64);
        Ok(Self {
            dimension,
            half_width,
            points_per_axis,
            boundary,
            spacing,
        })
    }

    pub fn dimension(self) -> usize {
        self.dimension
    }

    pub fn half_width(self) -> S {
        self.half_width
    }

    pub fn points_per_axis(self) -> usize {
        self.points_per_axis
    }

    pub fn boundary(self) -> Boundary {
        self.boundary
    }

    pub fn spacing(self) -> S {
        self.spacing
    }

    /// Total number of grid points, N^d.
    pub fn len(self) -> usize {
        self.points_per_axis.pow(self.dimension as u32)
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Quadrature weight h^d of one grid cell.
    pub fn cell_volume(self) -> S {
        match self.dimension {
            1 => self.spacing,
            _ => self.spacing * self.spacing,
        }
    }

    /// Coordinate of node i along one axis.
    pub fn coord(self, i: usize) -> S {
        debug_assert!(i < self.points_per_axis);
        -self.half_width + S::of(i as f64) * self.spacing
    }

    /// Coordinates of a flat index; the second entry is zero when d = 1.
    pub fn point(self, flat: usize) -> [S; 2] {
        match self.dimension {
            1 => [self.coord(flat), S::zero()],
            _ => {
                let n = self.points_per_axis;
                [self.coord(flat / n), self.coord(flat % n)]
            }
        }
    }
}

/// Complex amplitudes on a grid; the simulated state.
///
/// Immutable by convention once handed to concurrent code: operations either
/// return fresh buffers or write into caller-supplied scratch.
#[derive(Clone, Debug)]
pub struct WaveFunction<S: Scalar> {
    grid: GridSpec<S>,
    amp: Vec<Complex<S>>,
}

impl<S: Scalar> WaveFunction<S> {
    pub fn zeros(grid: GridSpec<S>) -> Self {
        Self {
            grid,
            amp: vec![Complex::zero(); grid.len()],
        }
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(grid: GridSpec<S>, mut f: impl FnMut([S; 2]) -> Complex<S>) -> Self {
        let amp = (0..grid.len()).map(|i| f(grid.point(i))).collect();
        Self { grid, amp }
    }

    pub fn grid(&self) -> GridSpec<S> {
        self.grid
    }

    pub fn amp(&self) -> &[Complex<S>] {
        &self.amp
    }

    pub fn amp_mut(&mut self) -> &mut [Complex<S>] {
        &mut self.amp
    }

    /// Discrete L2 norm squared, h^d sum |amp|^2.
    pub fn norm_sq(&self) -> S {
        let s: S = self.amp.iter().map(|a| a.norm_sqr()).sum();
        s * self.grid.cell_volume()
    }

    pub fn is_finite(&self) -> bool {
        self.amp.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    pub fn scale(&mut self, c: Complex<S>) {
        for a in &mut self.amp {
            *a = *a * c;
        }
    }

    /// self += c * other.
    pub fn axpy(&mut self, c: Complex<S>, other: &Self) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        for (a, b) in self.amp.iter_mut().zip(&other.amp) {
            *a = *a + c * *b;
        }
    }

    pub fn fill_zero(&mut self) {
        for a in &mut self.amp {
            *a = Complex::zero();
        }
    }

    pub fn copy_from(&mut self, other: &Self) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        self.amp.copy_from_slice(&other.amp);
    }
}

/// h^d sum conj(f_i) g_i; antilinear in `f`, linear in `g`.
pub fn inner_product<S: Scalar>(f: &WaveFunction<S>, g: &WaveFunction<S>) -> Complex<S> {
    assert_eq!(f.grid, g.grid, "grid mismatch");
    let mut acc = Complex::zero();
    for (a, b) in f.amp.iter().zip(&g.amp) {
        acc = acc + a.conj() * *b;
    }
    acc * f.grid.cell_volume()
}

// Adds the second difference along one line of nodes (start, start+stride, ..)
// into out, scaled by 1/h^2.
fn second_diff_line<S: Scalar>(
    amp: &[Complex<S>],
    out: &mut [Complex<S>],
    start: usize,
    stride: usize,
    n: usize,
    inv_h2: S,
    periodic: bool,
) {
    for i in 0..n {
        let idx = start + i * stride;
        let c = amp[idx];
        let left = if i > 0 {
            amp[idx - stride]
        } else if periodic {
            amp[start + (n - 1) * stride]
        } else {
            Complex::zero()
        };
        let right = if i + 1 < n {
            amp[idx + stride]
        } else if periodic {
            amp[start]
        } else {
            Complex::zero()
        };
        out[idx] = out[idx] + (left + right - c - c) * inv_h2;
    }
}

// Adds the central difference along one line into out, scaled by 1/(2h).
fn central_diff_line<S: Scalar>(
    amp: &[Complex<S>],
    out: &mut [Complex<S>],
    start: usize,
    stride: usize,
    n: usize,
    inv_2h: S,
    periodic: bool,
) {
    for i in 0..n {
        let idx = start + i * stride;
        let left = if i > 0 {
            amp[idx - stride]
        } else if periodic {
            amp[start + (n - 1) * stride]
        } else {
            Complex::zero()
        };
        let right = if i + 1 < n {
            amp[idx + stride]
        } else if periodic {
            amp[start]
        } else {
            Complex::zero()
        };
        out[idx] = out[idx] + (right - left) * inv_2h;
    }
}

/// Five-point (three-point in d = 1) Laplacian; overwrites `out`.
pub fn apply_laplacian_into<S: Scalar>(f: &WaveFunction<S>, out: &mut WaveFunction<S>) {
    assert_eq!(f.grid, out.grid, "grid mismatch");
    let g = f.grid;
    let n = g.points_per_axis();
    let periodic = g.boundary() == Boundary::Periodic;
    let inv_h2 = S::one() / (g.spacing() * g.spacing());
    out.fill_zero();
    match g.dimension() {
        1 => second_diff_line(&f.amp, &mut out.amp, 0, 1, n, inv_h2, periodic),
        _ => {
            for j in 0..n {
                second_diff_line(&f.amp, &mut out.amp, j, n, n, inv_h2, periodic);
            }
            for i in 0..n {
                second_diff_line(&f.amp, &mut out.amp, i * n, 1, n, inv_h2, periodic);
            }
        }
    }
}

pub fn apply_laplacian<S: Scalar>(f: &WaveFunction<S>) -> WaveFunction<S> {
    let mut out = WaveFunction::zeros(f.grid);
    apply_laplacian_into(f, &mut out);
    out
}

/// Central first difference along `axis` (0-based); overwrites `out`.
///
/// Antisymmetric on the discrete inner product in both boundary modes, so
/// i * apply_derivative is discretely symmetric.
pub fn apply_derivative_into<S: Scalar>(
    f: &WaveFunction<S>,
    axis: usize,
    out: &mut WaveFunction<S>,
) {
    assert_eq!(f.grid, out.grid, "grid mismatch");
    let g = f.grid;
    assert!(axis < g.dimension(), "axis {axis} out of range");
    let n = g.points_per_axis();
    let periodic = g.boundary() == Boundary::Periodic;
    let inv_2h = S::one() / (g.spacing() + g.spacing());
    out.fill_zero();
    match (g.dimension(), axis) {
        (1, _) => central_diff_line(&f.amp, &mut out.amp, 0, 1, n, inv_2h, periodic),
        (_, 0) => {
            for j in 0..n {
                central_diff_line(&f.amp, &mut out.amp, j, n, n, inv_2h, periodic);
            }
        }
        _ => {
            for i in 0..n {
                central_diff_line(&f.amp, &mut out.amp, i * n, 1, n, inv_2h, periodic);
            }
        }
    }
}

pub fn apply_derivative<S: Scalar>(f: &WaveFunction<S>, axis: usize) -> WaveFunction<S> {
    let mut out = WaveFunction::zeros(f.grid);
    apply_derivative_into(f, axis, &mut out);
    out
}

/// Pointwise product phi_i * f_i for a complex field sampled on the grid.
pub fn apply_multiplier<S: Scalar>(
    f: &WaveFunction<S>,
    phi: &[Complex<S>],
) -> Result<WaveFunction<S>, GridError> {
    assert_eq!(f.amp.len(), phi.len(), "field length mismatch");
    if let Some(bad) = phi
        .iter()
        .position(|p| !(p.re.is_finite() && p.im.is_finite()))
    {
        return Err(GridError::NonFiniteSample(bad));
    }
    let mut out = f.clone();
    for (a, p) in out.amp.iter_mut().zip(phi) {
        *a = *a * *p;
    }
    Ok(out)
}

/// Pointwise product for a real field.
pub fn apply_multiplier_real<S: Scalar>(
    f: &WaveFunction<S>,
    phi: &[S],
) -> Result<WaveFunction<S>, GridError> {
    assert_eq!(f.amp.len(), phi.len(), "field length mismatch");
    if let Some(bad) = phi.iter().position(|p| !p.is_finite()) {
        return Err(GridError::NonFiniteSample(bad));
    }
    let mut out = f.clone();
    for (a, p) in out.amp.iter_mut().zip(phi) {
        *a = *a * *p;
    }
    Ok(out)
}

/// Normalized Gaussian wave packet exp(-|x-c|^2/(4 w^2) + i p.x).
///
/// The support must sit well inside the box: |c| + 4w < L. The result is
/// normalized against the discrete norm, so its norm is 1 to round-off.
pub fn make_gaussian<S: Scalar>(
    grid: GridSpec<S>,
    center: &[S],
    width: S,
    momentum: &[S],
) -> Result<WaveFunction<S>, GridError> {
    let d = grid.dimension();
    assert_eq!(center.len(), d, "center length mismatch");
    assert_eq!(momentum.len(), d, "momentum length mismatch");
    if !(width.is_finite() && width > S::zero()) {
        return Err(GridError::Width);
    }
    let c_norm = center
        .iter()
        .fold(S::zero(), |acc, &c| acc + c * c)
        .sqrt();
    let reach = c_norm + S::of(4.0) * width;
    if reach >= grid.half_width() {
        return Err(GridError::SupportNearBoundary {
            reach: reach.as_f64(),
            half_width: grid.half_width().as_f64(),
        });
    }
    let quarter_inv_w2 = S::one() / (S::of(4.0) * width * width);
    let mut f = WaveFunction::from_fn(grid, |x| {
        let mut r2 = S::zero();
        let mut phase = S::zero();
        for j in 0..d {
            let dx = x[j] - center[j];
            r2 += dx * dx;
            phase += momentum[j] * x[j];
        }
        Complex::from_polar((-r2 * quarter_inv_w2).exp(), phase)
    });
    let norm = f.norm_sq().sqrt();
    f.scale(Complex::new(S::one() / norm, S::zero()));
    Ok(f)
}

/// Mass h^d sum |f_i|^2 over nodes with any coordinate of magnitude
/// exceeding L - margin. Monitors how much of the state feels the artificial
/// boundary.
pub fn boundary_mass<S: Scalar>(f: &WaveFunction<S>, margin: S) -> S {
    let g = f.grid;
    assert!(
        margin > S::zero() && margin < g.half_width(),
        "margin must lie in (0, L)"
    );
    let cut = g.half_width() - margin;
    let mut acc = S::zero();
    for (i, a) in f.amp.iter().enumerate() {
        let x = g.point(i);
        let in_shell = match g.dimension() {
            1 => x[0].abs() > cut,
            _ => x[0].abs() > cut || x[1].abs() > cut,
        };
        if in_shell {
            acc += a.norm_sqr();
        }
    }
    acc * g.cell_volume()
}

/// Complex unit, shorthand for stencil code elsewhere.
pub fn im_unit<S: Scalar>() -> Complex<S> {
    Complex::new(S::zero(), S::one())
}

/// Complex one.
pub fn c_one<S: Scalar>() -> Complex<S> {
    Complex::one()
}

/// Real scalar as complex.
pub fn c_re<S: Scalar>(v: S) -> Complex<S> {
    Complex::new(v, S::zero())
}
