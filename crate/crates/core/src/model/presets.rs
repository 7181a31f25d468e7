//! Named coefficient sets for the one-dimensional reference models: quantum
//! Brownian motion, continuous position measurement, a laser-driven soft-core
//! atom, a heated trap, and a moving Gaussian well.
//!
//! Every preset ships analytic derivative callbacks for all coefficients, so
//! the closed-form diagnostics run at full accuracy on them. Physics
//! parameters are plain `f64` regardless of the working scalar; they are
//! exactly representable knobs, not simulation state.

use std::collections::BTreeMap;

use num_complex::Complex;
use num_traits::Zero;

use super::{CoefficientSet, Field, ModelError};
use crate::Scalar;

/// Quantum Brownian motion: harmonic potential, linear advection `c x`,
/// constant noise gradient `b` and linear noise multiplier `a x`.
#[derive(Clone, Copy, Debug)]
pub struct QbmParams {
    pub mass: f64,
    pub advection: f64,
    pub sigma: f64,
    pub eta: f64,
}

impl Default for QbmParams {
    fn default() -> Self {
        QbmParams {
            mass: 1.0,
            advection: 0.2,
            sigma: 0.2,
            eta: 0.5,
        }
    }
}

pub fn qbm<S: Scalar>(p: &QbmParams) -> CoefficientSet<S> {
    let c = S::of(p.advection);
    let half = S::of(0.5);
    CoefficientSet::free(S::of(0.5 / p.mass))
        .with_potential(Field::real_1d(
            move |x| half * x * x,
            |x| x,
            |_| S::one(),
            |_| S::zero(),
        ))
        .with_vector_potential(vec![Field::real_1d(
            move |x| c * x,
            move |_| c,
            |_| S::zero(),
            |_| S::zero(),
        )])
        .with_channel(
            vec![Field::real_constant(S::of(p.sigma))],
            linear_real_eta(p.eta),
        )
}

/// Continuous position measurement: harmonic potential, single channel
/// `L = eta x`.
#[derive(Clone, Copy, Debug)]
pub struct PositionMeasurementParams {
    pub mass: f64,
    pub eta: f64,
}

impl Default for PositionMeasurementParams {
    fn default() -> Self {
        PositionMeasurementParams { mass: 1.0, eta: 0.5 }
    }
}

pub fn position_measurement<S: Scalar>(p: &PositionMeasurementParams) -> CoefficientSet<S> {
    let half = S::of(0.5);
    CoefficientSet::free(S::of(0.5 / p.mass))
        .with_potential(Field::real_1d(
            move |x| half * x * x,
            |x| x,
            |_| S::one(),
            |_| S::zero(),
        ))
        .with_channel(Vec::new(), linear_real_eta(p.eta))
}

/// Soft-core atom in a pulsed dipole field: `V = -1/sqrt(x^2+eps^2) + x F(t)`
/// with a sine carrier under a ramp-flat-ramp envelope, plus the heating
/// channel `L = -i eta x`.
#[derive(Clone, Copy, Debug)]
pub struct LaserParams {
    pub eta: f64,
    pub softening: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub ramp: f64,
    pub pulse: f64,
}

impl Default for LaserParams {
    fn default() -> Self {
        LaserParams {
            eta: 0.1,
            softening: 1.0,
            amplitude: 0.5,
            frequency: 1.0,
            phase: 0.0,
            ramp: 0.5,
            pulse: 2.0,
        }
    }
}

/// Ramp-flat-ramp pulse envelope: sine quarter-wave up over `[0, ramp]`,
/// unity over `[ramp, pulse - ramp]`, squared-cosine down over the final
/// `ramp`, zero outside `[0, pulse]`.
pub fn pulse_envelope<S: Scalar>(p: &LaserParams, t: S) -> S {
    let tau = S::of(p.ramp);
    let total = S::of(p.pulse);
    let zero = S::zero();
    if t < zero || t > total {
        return zero;
    }
    let halfpi = S::PI() * S::of(0.5);
    if t < tau {
        (halfpi * t / tau).sin()
    } else if t <= total - tau {
        S::one()
    } else {
        let c = (halfpi * (t + tau - total) / tau).cos();
        c * c
    }
}

fn laser_force<S: Scalar>(p: &LaserParams, t: S) -> S {
    let carrier = (S::of(p.frequency) * t + S::of(p.phase)).sin();
    S::of(p.amplitude) * carrier * pulse_envelope(p, t)
}

pub fn laser<S: Scalar>(p: &LaserParams) -> CoefficientSet<S> {
    let eps_sq = S::of(p.softening * p.softening);
    let pp = *p;
    let v = Field::new(true, move |t, x: [S; 2]| {
        let r2 = x[0] * x[0] + eps_sq;
        Complex::new(-r2.sqrt().recip() + x[0] * laser_force(&pp, t), S::zero())
    })
    .with_derivatives(move |t, x: [S; 2], o: [usize; 2]| {
        if o[1] > 0 {
            return Complex::zero();
        }
        let x0 = x[0];
        let r2 = x0 * x0 + eps_sq;
        let v = match o[0] {
            0 => -r2.sqrt().recip() + x0 * laser_force(&pp, t),
            1 => x0 * r2.powf(S::of(-1.5)) + laser_force(&pp, t),
            2 => (eps_sq - S::of(2.0) * x0 * x0) * r2.powf(S::of(-2.5)),
            _ => x0 * (S::of(6.0) * x0 * x0 - S::of(9.0) * eps_sq) * r2.powf(S::of(-3.5)),
        };
        Complex::new(v, S::zero())
    });
    CoefficientSet::free(S::of(0.5))
        .with_potential(v)
        .with_channel(Vec::new(), linear_imag_eta(p.eta))
}

/// Heated harmonic trap: `V = M omega^2 x^2 / 2`, channel `L = -i eta x`.
/// The mean energy of the nonlinear flow grows linearly at rate
/// `eta^2 / (2 M)`.
#[derive(Clone, Copy, Debug)]
pub struct PaulTrapParams {
    pub mass: f64,
    pub omega: f64,
    pub eta: f64,
}

impl Default for PaulTrapParams {
    fn default() -> Self {
        PaulTrapParams {
            mass: 1.0,
            omega: 1.0,
            eta: 0.5,
        }
    }
}

pub fn paul_trap<S: Scalar>(p: &PaulTrapParams) -> CoefficientSet<S> {
    let k = S::of(0.5 * p.mass * p.omega * p.omega);
    CoefficientSet::free(S::of(0.5 / p.mass))
        .with_potential(Field::real_1d(
            move |x| k * x * x,
            move |x| (k + k) * x,
            move |_| k + k,
            |_| S::zero(),
        ))
        .with_channel(Vec::new(), linear_imag_eta(p.eta))
}

/// Gaussian well on a prescribed sweep `r(t) = r sin t`, with the quantum
/// Brownian motion noise channel.
#[derive(Clone, Copy, Debug)]
pub struct GaussianWellParams {
    pub mass: f64,
    pub depth: f64,
    pub well: f64,
    pub sigma: f64,
    pub eta: f64,
    pub sweep: f64,
}

impl Default for GaussianWellParams {
    fn default() -> Self {
        GaussianWellParams {
            mass: 1.0,
            depth: 1.0,
            well: 0.5,
            sigma: 0.2,
            eta: 0.5,
            sweep: 0.3,
        }
    }
}

pub fn gaussian_well<S: Scalar>(p: &GaussianWellParams) -> CoefficientSet<S> {
    let depth = S::of(p.depth);
    let a = S::of(p.well);
    let sweep = S::of(p.sweep);
    let v = Field::new(true, move |t, x: [S; 2]| {
        let u = x[0] - sweep * t.sin();
        Complex::new(-depth * (-a * u * u).exp(), S::zero())
    })
    .with_derivatives(move |t, x: [S; 2], o: [usize; 2]| {
        if o[1] > 0 {
            return Complex::zero();
        }
        let u = x[0] - sweep * t.sin();
        let v = -depth * (-a * u * u).exp();
        let two = S::of(2.0);
        let val = match o[0] {
            0 => v,
            1 => -two * a * u * v,
            2 => -two * a * v + S::of(4.0) * a * a * u * u * v,
            _ => S::of(12.0) * a * a * u * v - S::of(8.0) * a * a * a * u * u * u * v,
        };
        Complex::new(val, S::zero())
    });
    CoefficientSet::free(S::of(0.5 / p.mass))
        .with_potential(v)
        .with_channel(
            vec![Field::real_constant(S::of(p.sigma))],
            linear_real_eta(p.eta),
        )
}

fn linear_real_eta<S: Scalar>(eta: f64) -> Field<S> {
    let e = S::of(eta);
    Field::real_1d(move |x| e * x, move |_| e, |_| S::zero(), |_| S::zero())
}

fn linear_imag_eta<S: Scalar>(eta: f64) -> Field<S> {
    let e = S::of(eta);
    Field::complex_1d(
        move |x| Complex::new(S::zero(), -e * x),
        move |_| Complex::new(S::zero(), -e),
        |_| Complex::zero(),
        |_| Complex::zero(),
    )
}

pub const PRESET_NAMES: [&str; 5] = [
    "qbm-e1",
    "position-measurement-e2",
    "laser-e3",
    "paul-trap-e4",
    "gaussian-well-e5",
];

fn apply_params(
    preset: &'static str,
    params: &BTreeMap<String, f64>,
    mut slots: Vec<(&str, &mut f64)>,
) -> Result<(), ModelError> {
    'keys: for (key, value) in params {
        for (name, slot) in slots.iter_mut() {
            if name == key {
                **slot = *value;
                continue 'keys;
            }
        }
        return Err(ModelError::UnknownParameter {
            preset,
            name: key.clone(),
        });
    }
    Ok(())
}

/// Builds a preset by its registry name, overriding defaults from a parameter
/// map. Unknown names and unknown parameter keys are rejected, never ignored.
pub fn by_name<S: Scalar>(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<CoefficientSet<S>, ModelError> {
    match name {
        "qbm-e1" => {
            let mut p = QbmParams::default();
            apply_params(
                "qbm-e1",
                params,
                vec![
                    ("M", &mut p.mass),
                    ("c", &mut p.advection),
                    ("b", &mut p.sigma),
                    ("a", &mut p.eta),
                ],
            )?;
            Ok(qbm(&p))
        }
        "position-measurement-e2" => {
            let mut p = PositionMeasurementParams::default();
            apply_params(
                "position-measurement-e2",
                params,
                vec![("M", &mut p.mass), ("eta", &mut p.eta)],
            )?;
            Ok(position_measurement(&p))
        }
        "laser-e3" => {
            let mut p = LaserParams::default();
            apply_params(
                "laser-e3",
                params,
                vec![
                    ("eta", &mut p.eta),
                    ("eps", &mut p.softening),
                    ("F0", &mut p.amplitude),
                    ("beta", &mut p.frequency),
                    ("delta", &mut p.phase),
                    ("tau", &mut p.ramp),
                    ("pulse", &mut p.pulse),
                ],
            )?;
            Ok(laser(&p))
        }
        "paul-trap-e4" => {
            let mut p = PaulTrapParams::default();
            apply_params(
                "paul-trap-e4",
                params,
                vec![
                    ("M", &mut p.mass),
                    ("omega", &mut p.omega),
                    ("eta", &mut p.eta),
                ],
            )?;
            Ok(paul_trap(&p))
        }
        "gaussian-well-e5" => {
            let mut p = GaussianWellParams::default();
            apply_params(
                "gaussian-well-e5",
                params,
                vec![
                    ("M", &mut p.mass),
                    ("V0", &mut p.depth),
                    ("a_well", &mut p.well),
                    ("b", &mut p.sigma),
                    ("a", &mut p.eta),
                    ("r", &mut p.sweep),
                ],
            )?;
            Ok(gaussian_well(&p))
        }
        other => Err(ModelError::UnknownPreset(other.to_string())),
    }
}
