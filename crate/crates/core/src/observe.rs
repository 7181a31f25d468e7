//! Ensemble statistics over trajectory batches.
//!
//! Trajectories are independent given their index, so batches parallelize
//! over rayon; the per-trajectory results are collected in index order and
//! reduced sequentially, which makes every statistic bit-identical no matter
//! how many worker threads ran the batch.

use rayon::prelude::*;

use crate::grid::{inner_product, WaveFunction};
use crate::integrate::{run_trajectory, Flow, IntegrateError, SchemeConfig, TrajectoryRecord};
use crate::model::{ModelError, ModelOps, ObservableSpec};
use crate::Scalar;

/// A per-sample-time scalar extracted from a trajectory.
pub enum Probe<S: Scalar> {
    /// `|X|^2`; under the linear flow its mean is a constant of the motion.
    NormSq,
    /// `Re <X, H X>`, the (unnormalized) energy quadratic form.
    Energy,
    /// `|C X|^2`, the regularity functional of the reference operator.
    ReferenceNormSq,
    /// `Re <B1 X, B2 X>` for a factored observable.
    Quadratic(ObservableSpec<S>),
    /// The generator side of the observable's drift identity:
    /// `Re [ <B1 X, B2 G X> + <B1 G X, B2 X> + sum_l <B1 L_l X, B2 L_l X> ]`.
    /// The time integral of its mean balances the jump of the
    /// [`Probe::Quadratic`] mean for the same observable.
    Generator(ObservableSpec<S>),
}

impl<S: Scalar> Probe<S> {
    fn eval(&self, ops: &ModelOps<S>, t: S, x: &WaveFunction<S>) -> Result<S, ModelError> {
        match self {
            Probe::NormSq => Ok(x.norm_sq()),
            Probe::Energy => Ok(inner_product(x, &ops.hamiltonian().apply(t, x)).re),
            Probe::ReferenceNormSq => Ok(ops.reference().apply(t, x).norm_sq()),
            Probe::Quadratic(spec) => Ok(spec.expectation(t, x)?.re),
            Probe::Generator(spec) => {
                let gx = ops.drift().apply(t, x);
                let mut acc = inner_product(x, &spec.apply(t, &gx)?).re
                    + inner_product(&gx, &spec.apply(t, x)?).re;
                for l in 0..ops.channels() {
                    let lx = ops.lindblad(l).apply(t, x);
                    acc += inner_product(&lx, &spec.apply(t, &lx)?).re;
                }
                Ok(acc)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleStat<S> {
    pub mean: S,
    pub stderr: S,
}

/// Per-probe, per-sample-time means with standard errors, plus the terminal
/// weight statistics.
pub struct EnsembleSummary<S: Scalar> {
    pub times: Vec<S>,
    /// Indexed `[probe][sample time]`.
    pub probes: Vec<Vec<SampleStat<S>>>,
    pub n_traj: u64,
    /// `|X_T|^2` across the batch.
    pub weight: SampleStat<S>,
}

fn sample_times<S: Scalar>(dt: S, n_steps: u64, sample_every: u64) -> Vec<S> {
    let mut times: Vec<S> = (0..=n_steps)
        .filter(|s| s % sample_every == 0 || *s == n_steps)
        .map(|s| dt * S::of(s as f64))
        .collect();
    times.dedup_by(|a, b| a == b);
    times
}

/// Runs `n_traj` trajectories of the flow and reduces the probes. The
/// `increments_for` factory maps a trajectory index to its increment
/// function, so callers control the noise coupling (plain, coarsened, or
/// frozen paths). Fails on the first trajectory error.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble<S, F, M>(
    ops: &ModelOps<S>,
    cfg: &SchemeConfig<S>,
    flow: Flow,
    initial: &WaveFunction<S>,
    n_traj: u64,
    n_steps: u64,
    sample_every: u64,
    probes: &[Probe<S>],
    increments_for: F,
) -> Result<(EnsembleSummary<S>, Vec<TrajectoryRecord<S>>), IntegrateError>
where
    S: Scalar,
    F: Fn(u64) -> M + Sync,
    M: FnMut(usize, u64) -> S,
{
    let times = sample_times(cfg.dt, n_steps, sample_every);
    let n_times = times.len();
    let results: Result<Vec<_>, IntegrateError> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut rows: Vec<S> = Vec::with_capacity(n_times * probes.len());
            let mut probe_err: Option<ModelError> = None;
            let record = run_trajectory(
                ops,
                cfg,
                flow,
                initial,
                increments_for(traj),
                n_steps,
                sample_every,
                |_, t, x| {
                    if probe_err.is_some() {
                        return;
                    }
                    for probe in probes {
                        match probe.eval(ops, t, x) {
                            Ok(v) => rows.push(v),
                            Err(e) => {
                                probe_err = Some(e);
                                return;
                            }
                        }
                    }
                },
            )?;
            if let Some(e) = probe_err {
                return Err(e.into());
            }
            Ok((rows, record))
        })
        .collect();
    let results = results?;

    // sequential reduction in trajectory order: thread-count independent
    let n = S::of(n_traj as f64);
    let mut sum = vec![S::zero(); n_times * probes.len()];
    let mut sum_sq = vec![S::zero(); n_times * probes.len()];
    let mut w_sum = S::zero();
    let mut w_sum_sq = S::zero();
    let mut records = Vec::with_capacity(n_traj as usize);
    for (rows, record) in results {
        for (i, v) in rows.iter().enumerate() {
            sum[i] += *v;
            sum_sq[i] += *v * *v;
        }
        w_sum += record.weight;
        w_sum_sq += record.weight * record.weight;
        records.push(record);
    }
    let stat = |s: S, ss: S| {
        let mean = s / n;
        let var = if n_traj > 1 {
            ((ss - s * mean) / (n - S::one())).max(S::zero())
        } else {
            S::zero()
        };
        SampleStat {
            mean,
            stderr: (var / n).sqrt(),
        }
    };
    let probes_out = (0..probes.len())
        .map(|j| {
            (0..n_times)
                .map(|k| stat(sum[k * probes.len() + j], sum_sq[k * probes.len() + j]))
                .collect()
        })
        .collect();
    Ok((
        EnsembleSummary {
            times,
            probes: probes_out,
            n_traj,
            weight: stat(w_sum, w_sum_sq),
        },
        records,
    ))
}

/// Ordinary least squares fit `y ~ intercept + slope t`, with the slope's
/// standard error propagated from the per-point standard errors as if the
/// points were independent.
#[derive(Clone, Copy, Debug)]
pub struct LineFit<S> {
    pub slope: S,
    pub intercept: S,
    pub slope_stderr: S,
}

pub fn fit_line<S: Scalar>(times: &[S], stats: &[SampleStat<S>]) -> LineFit<S> {
    assert_eq!(times.len(), stats.len());
    assert!(times.len() >= 2, "need at least two points for a slope");
    let n = S::of(times.len() as f64);
    let t_bar = times.iter().copied().sum::<S>() / n;
    let y_bar = stats.iter().map(|s| s.mean).sum::<S>() / n;
    let mut stt = S::zero();
    let mut sty = S::zero();
    for (t, s) in times.iter().zip(stats) {
        let dt = *t - t_bar;
        stt += dt * dt;
        sty += dt * (s.mean - y_bar);
    }
    let slope = sty / stt;
    let mut var = S::zero();
    for (t, s) in times.iter().zip(stats) {
        let c = (*t - t_bar) / stt;
        var += c * c * s.stderr * s.stderr;
    }
    LineFit {
        slope,
        intercept: y_bar - slope * t_bar,
        slope_stderr: var.sqrt(),
    }
}

/// Residuals of the observable drift identity: the jump of the quadratic
/// mean from `t_0` minus the trapezoid integral of the generator mean, with
/// a combined standard error per time.
pub struct DriftBalance<S> {
    pub times: Vec<S>,
    pub residual: Vec<S>,
    pub stderr: Vec<S>,
}

pub fn ehrenfest_residuals<S: Scalar>(
    summary: &EnsembleSummary<S>,
    value_probe: usize,
    rate_probe: usize,
) -> DriftBalance<S> {
    let times = &summary.times;
    let value = &summary.probes[value_probe];
    let rate = &summary.probes[rate_probe];
    let half = S::of(0.5);
    let mut residual = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    let mut integral = S::zero();
    let mut integral_var = S::zero();
    residual.push(S::zero());
    stderr.push(S::zero());
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        integral += half * dt * (rate[k - 1].mean + rate[k].mean);
        let w = half * dt;
        integral_var +=
            w * w * (rate[k - 1].stderr * rate[k - 1].stderr + rate[k].stderr * rate[k].stderr);
        residual.push(value[k].mean - value[0].mean - integral);
        let var = value[k].stderr * value[k].stderr
            + value[0].stderr * value[0].stderr
            + integral_var;
        stderr.push(var.sqrt());
    }
    DriftBalance {
        times: times.clone(),
        residual,
        stderr,
    }
}

/// The a priori growth envelope for the regularity functional: starting from
/// a state with `|C xi|^2 = c_xi_sq` and `|xi|^2 = xi_sq`, the mean of
/// `|C X_t|^2` stays below `exp(t a) (c_xi_sq + t a xi_sq)` when `a`
/// dominates the model's regularity rate.
pub fn regularity_bound<S: Scalar>(rate: S, c_xi_sq: S, xi_sq: S, t: S) -> S {
    (t * rate).exp() * (c_xi_sq + t * rate * xi_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_gaussian, Boundary, GridSpec};
    use crate::integrate::NoiseSource;
    use crate::model::presets::{self, PaulTrapParams, PositionMeasurementParams};

    fn harmonic_ops(n: usize, l: f64) -> ModelOps<f64> {
        let coeffs = presets::position_measurement::<f64>(&PositionMeasurementParams {
            mass: 1.0,
            eta: 0.5,
        });
        ModelOps::new(GridSpec::new(1, l, n, Boundary::Dirichlet).unwrap(), &coeffs).unwrap()
    }

    #[test]
    fn ensemble_reduces_single_trajectories_exactly() {
        let ops = harmonic_ops(32, 6.0);
        let dt = 1e-3;
        let cfg = SchemeConfig::semi_implicit(dt);
        let x0 = make_gaussian(ops.grid(), &[0.0], 0.7, &[0.0]).unwrap();
        let src = NoiseSource::new(3);
        let (summary, records) = run_ensemble(
            &ops,
            &cfg,
            Flow::Linear,
            &x0,
            3,
            20,
            10,
            &[Probe::NormSq],
            |traj| move |ch, step| src.increment(traj, ch, step, dt.sqrt()),
        )
        .unwrap();
        assert_eq!(summary.times.len(), 3);
        assert_eq!(records.len(), 3);
        let mut by_hand = 0.0;
        for traj in 0..3u64 {
            let rec = run_trajectory(
                &ops,
                &cfg,
                Flow::Linear,
                &x0,
                |ch, step| src.increment(traj, ch, step, dt.sqrt()),
                20,
                10,
                |_, _, _| {},
            )
            .unwrap();
            by_hand += rec.weight;
        }
        assert_eq!(summary.weight.mean.to_bits(), (by_hand / 3.0).to_bits());
    }

    #[test]
    fn summaries_are_thread_count_independent() {
        let ops = harmonic_ops(32, 6.0);
        let dt = 1e-3;
        let cfg = SchemeConfig::semi_implicit(dt);
        let x0 = make_gaussian(ops.grid(), &[0.1], 0.7, &[0.2]).unwrap();
        let src = NoiseSource::new(19);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    run_ensemble(
                        &ops,
                        &cfg,
                        Flow::Nonlinear,
                        &x0,
                        16,
                        30,
                        10,
                        &[Probe::NormSq, Probe::Energy],
                        |traj| move |ch, step| src.increment(traj, ch, step, dt.sqrt()),
                    )
                    .unwrap()
                    .0
                })
        };
        let a = run(1);
        let b = run(3);
        for (pa, pb) in a.probes.iter().zip(&b.probes) {
            for (sa, sb) in pa.iter().zip(pb) {
                assert_eq!(sa.mean.to_bits(), sb.mean.to_bits());
                assert_eq!(sa.stderr.to_bits(), sb.stderr.to_bits());
            }
        }
        assert_eq!(a.weight.mean.to_bits(), b.weight.mean.to_bits());
    }

    #[test]
    fn norm_mean_stays_at_one_for_the_linear_flow() {
        let ops = harmonic_ops(32, 6.0);
        let dt = 1e-3;
        let cfg = SchemeConfig::semi_implicit(dt);
        let x0 = make_gaussian(ops.grid(), &[0.0], 0.7, &[0.0]).unwrap();
        let src = NoiseSource::new(8);
        let (summary, _) = run_ensemble(
            &ops,
            &cfg,
            Flow::Linear,
            &x0,
            300,
            100,
            20,
            &[Probe::NormSq],
            |traj| move |ch, step| src.increment(traj, ch, step, dt.sqrt()),
        )
        .unwrap();
        for (k, stat) in summary.probes[0].iter().enumerate() {
            let slack = 4.0 * stat.stderr + 5.0 * dt;
            assert!(
                (stat.mean - 1.0).abs() <= slack,
                "t = {}: E|X|^2 = {} exceeds 1 +- {slack}",
                summary.times[k],
                stat.mean
            );
        }
    }

    #[test]
    fn heating_slope_matches_the_dissipation_rate() {
        // quadratic trap with L = -i eta x: energy grows at eta^2/(2M)
        let coeffs = presets::paul_trap::<f64>(&PaulTrapParams {
            mass: 1.0,
            omega: 1.0,
            eta: 0.5,
        });
        let ops = ModelOps::new(
            GridSpec::new(1, 8.0, 64, Boundary::Dirichlet).unwrap(),
            &coeffs,
        )
        .unwrap();
        let dt = 1e-3;
        let cfg = SchemeConfig::semi_implicit(dt);
        let x0 = make_gaussian(ops.grid(), &[0.0], 0.8, &[0.0]).unwrap();
        let src = NoiseSource::new(21);
        let (summary, _) = run_ensemble(
            &ops,
            &cfg,
            Flow::Linear,
            &x0,
            300,
            500,
            50,
            &[Probe::Energy],
            |traj| move |ch, step| src.increment(traj, ch, step, dt.sqrt()),
        )
        .unwrap();
        let fit = fit_line(&summary.times, &summary.probes[0]);
        let want = 0.125;
        assert!(
            (fit.slope - want).abs() <= 0.2 * want + 3.0 * fit.slope_stderr,
            "heating slope {} vs {want}",
            fit.slope
        );
    }

    #[test]
    fn line_fit_recovers_an_exact_line() {
        let times: Vec<f64> = (0..10).map(|k| 0.1 * k as f64).collect();
        let stats: Vec<SampleStat<f64>> = times
            .iter()
            .map(|t| SampleStat {
                mean: 1.0 + 2.0 * t,
                stderr: 0.0,
            })
            .collect();
        let fit = fit_line(&times, &stats);
        assert!((fit.slope - 2.0).abs() <= 1e-12);
        assert!((fit.intercept - 1.0).abs() <= 1e-12);
        assert!(fit.slope_stderr <= 1e-15);
    }

    #[test]
    fn drift_balance_vanishes_without_noise() {
        // One deterministic trajectory: the quadratic-form jump must equal
        // the integrated generator up to step and trapezoid error. The
        // channel strength is zero because the Lindblad term of the
        // generator probe is the noise's quadratic variation, which only
        // balances in expectation over noise, not pathwise.
        let coeffs = presets::position_measurement::<f64>(&PositionMeasurementParams {
            mass: 1.0,
            eta: 0.0,
        });
        let ops = ModelOps::new(
            GridSpec::new(1, 6.0, 64, Boundary::Dirichlet).unwrap(),
            &coeffs,
        )
        .unwrap();
        let dt = 5e-4;
        let cfg = SchemeConfig::semi_implicit(dt);
        let x0 = make_gaussian(ops.grid(), &[0.5], 0.7, &[0.0]).unwrap();
        let position = ObservableSpec::position(0);
        let (summary, _) = run_ensemble(
            &ops,
            &cfg,
            Flow::Linear,
            &x0,
            1,
            200,
            20,
            &[Probe::Quadratic(position.clone()), Probe::Generator(position)],
            |_| |_, _| 0.0,
        )
        .unwrap();
        let balance = ehrenfest_residuals(&summary, 0, 1);
        for (t, r) in balance.times.iter().zip(&balance.residual) {
            assert!(r.abs() <= 5e-4, "residual {r:e} at t = {t}");
        }
    }

    #[test]
    fn regularity_bound_grows_from_the_initial_functional() {
        let b0 = regularity_bound(2.0f64, 3.0, 1.0, 0.0);
        assert!((b0 - 3.0).abs() <= 1e-15);
        let b1 = regularity_bound(2.0, 3.0, 1.0, 0.5);
        let b2 = regularity_bound(2.0, 3.0, 1.0, 1.0);
        assert!(b0 < b1 && b1 < b2);
    }
}
