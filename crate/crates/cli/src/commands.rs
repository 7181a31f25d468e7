//! Subcommand implementations. Each one runs the configured experiment,
//! writes `results.csv` and fills the manifest details, and returns whether
//! its pass criterion held (commands without a criterion always pass).

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use serde_json::json;

use qsse_core::grid::inner_product;
use qsse_core::integrate::stability_warning;
use qsse_core::model::{
    check_growth, check_phase_condition, estimate_alpha, norm_balance_residual,
};
use qsse_core::observe::{
    ehrenfest_residuals, fit_line, regularity_bound, run_ensemble, Probe,
};
use qsse_core::oracle::{
    default_test_battery, dense_consistency_checks, identity_suite, solve_master, trace_distance,
    DensityMatrix, IdentityCheck, MASTER_CAP,
};
use qsse_core::{
    run_trajectory, Boundary, CoarsenedNoise, Flow, GridSpec64, NoiseSource, ObservableSpec64,
    TrajectoryRecord64, WaveFunction64,
};

use crate::config::{BuiltExperiment, ExperimentConfig};
use crate::output::{g17, results_path, write_csv, Manifest};

type Summary = qsse_core::EnsembleSummary64;

/// Runs the configured ensemble with the given probes, using the counter
/// noise keyed by the effective seed.
fn run(
    built: &BuiltExperiment,
    probes: &[Probe<f64>],
) -> Result<(Summary, Vec<TrajectoryRecord64>)> {
    if let Some(w) = stability_warning(&built.ops, &built.cfg, 0.0) {
        eprintln!("warning: {w}");
    }
    let noise = NoiseSource::new(built.seed);
    let sqrt_dt = built.cfg.dt.sqrt();
    run_ensemble(
        &built.ops,
        &built.cfg,
        built.flow,
        &built.initial,
        built.n_traj,
        built.n_steps,
        built.sample_every,
        probes,
        move |traj| move |channel, step| noise.increment(traj, channel, step, sqrt_dt),
    )
    .map_err(|e| anyhow!("trajectory integration failed: {e}"))
}

pub fn simulate(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    let probes = [Probe::NormSq, Probe::Energy];
    let (summary, _) = run(&built, &probes)?;
    let rows: Vec<Vec<String>> = summary
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            vec![
                g17(*t),
                g17(summary.probes[0][k].mean),
                g17(summary.probes[0][k].stderr),
                g17(summary.probes[1][k].mean),
                g17(summary.probes[1][k].stderr),
            ]
        })
        .collect();
    write_csv(
        &results_path(out_dir),
        &[
            "time",
            "mean_norm_sq",
            "stderr_norm_sq",
            "mean_energy",
            "stderr_energy",
        ],
        &rows,
    )?;
    manifest.details = json!({
        "n_traj": summary.n_traj,
        "weight_mean": summary.weight.mean,
        "weight_stderr": summary.weight.stderr,
    });
    println!(
        "simulate: {} trajectories, {} sample times, terminal weight {:.6} +- {:.1e}",
        summary.n_traj,
        summary.times.len(),
        summary.weight.mean,
        summary.weight.stderr
    );
    Ok(true)
}

pub fn heating(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    let probes = [Probe::Energy, Probe::NormSq];
    let (summary, _) = run(&built, &probes)?;
    let rows: Vec<Vec<String>> = summary
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            vec![
                g17(*t),
                g17(summary.probes[0][k].mean),
                g17(summary.probes[0][k].stderr),
            ]
        })
        .collect();
    write_csv(&results_path(out_dir), &["time", "mean_H", "stderr_H"], &rows)?;

    let fit = fit_line(&summary.times, &summary.probes[0]);
    let dt = config.run.dt;
    // Martingale deviation of the norm mean, time-discretization allowance
    // included.
    let mut mart_worst = 0.0f64;
    let mut mart_allow = 0.0f64;
    for stat in &summary.probes[1] {
        let dev = (stat.mean - 1.0).abs();
        let allow = 3.0 * stat.stderr + 5.0 * dt;
        if dev - allow > mart_worst - mart_allow {
            mart_worst = dev;
            mart_allow = allow;
        }
    }
    let mart_ok = mart_worst <= mart_allow;

    let mut slope_ok = true;
    if let Some(expected) = config.check.expected_slope {
        let rtol = config.check.slope_rtol.unwrap_or(0.05);
        slope_ok = (fit.slope - expected).abs() <= rtol * expected.abs();
        println!(
            "heating: slope {} expected {} (rtol {}) {}",
            g17(fit.slope),
            g17(expected),
            g17(rtol),
            verdict(slope_ok)
        );
    } else {
        println!(
            "heating: slope {} +- {}",
            g17(fit.slope),
            g17(fit.slope_stderr)
        );
    }
    println!(
        "heating: norm martingale deviation {:.3e} (allowance {:.3e}) {}",
        mart_worst,
        mart_allow,
        verdict(mart_ok)
    );
    manifest.details = json!({
        "slope": fit.slope,
        "slope_stderr": fit.slope_stderr,
        "intercept": fit.intercept,
        "expected_slope": config.check.expected_slope,
        "slope_ok": slope_ok,
        "martingale_deviation": mart_worst,
        "martingale_allowance": mart_allow,
        "martingale_ok": mart_ok,
    });
    Ok(slope_ok && mart_ok)
}

pub fn ehrenfest(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    let specs = [
        ("position", ObservableSpec64::position(0)),
        ("position_sq", ObservableSpec64::position_squared(0)),
        ("momentum_sq", ObservableSpec64::momentum_squared(0)),
    ];
    let mut probes = Vec::new();
    for (_, spec) in &specs {
        probes.push(Probe::Quadratic(spec.clone()));
        probes.push(Probe::Generator(spec.clone()));
    }
    let (summary, _) = run(&built, &probes)?;

    let c = config.check.residual_constant.unwrap_or(5.0);
    let h = built.grid.spacing();
    let slack = c * (config.run.dt + h * h);
    let mut header: Vec<String> = vec!["time".into()];
    let mut columns = Vec::new();
    let mut pass = true;
    let mut detail = serde_json::Map::new();
    for (i, (name, _)) in specs.iter().enumerate() {
        let balance = ehrenfest_residuals(&summary, 2 * i, 2 * i + 1);
        let mut worst_ratio = 0.0f64;
        for (r, se) in balance.residual.iter().zip(&balance.stderr) {
            let ratio = r.abs() / (3.0 * se + slack);
            worst_ratio = worst_ratio.max(ratio);
        }
        pass &= worst_ratio <= 1.0;
        println!(
            "ehrenfest: {name} worst |residual| / (3 stderr + slack) = {:.3} {}",
            worst_ratio,
            verdict(worst_ratio <= 1.0)
        );
        detail.insert(format!("{name}_worst_ratio"), json!(worst_ratio));
        header.push(format!("residual_{name}"));
        header.push(format!("stderr_{name}"));
        columns.push(balance);
    }
    let rows: Vec<Vec<String>> = summary
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut row = vec![g17(*t)];
            for balance in &columns {
                row.push(g17(balance.residual[k]));
                row.push(g17(balance.stderr[k]));
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(&results_path(out_dir), &header_refs, &rows)?;
    detail.insert("slack".into(), json!(slack));
    detail.insert("residual_constant".into(), json!(c));
    manifest.details = serde_json::Value::Object(detail);
    Ok(pass)
}

pub fn regularity(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    let probes = [Probe::ReferenceNormSq, Probe::NormSq];
    let (summary, _) = run(&built, &probes)?;

    // Empirical rate over the standard battery plus the actual initial state.
    let mut samples = default_test_battery(built.grid);
    samples.push(built.initial.clone());
    let alpha_hat = estimate_alpha(&built.ops, 0.0, &samples)
        .map_err(|e| anyhow!("regularity rate estimate failed: {e}"))?;

    let c0 = summary.probes[0][0].mean;
    let x0 = summary.probes[1][0].mean;
    let mut pass = true;
    let mut worst_margin = f64::NEG_INFINITY;
    let rows: Vec<Vec<String>> = summary
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let stat = summary.probes[0][k];
            let bound = regularity_bound(alpha_hat, c0, x0, *t);
            let margin = stat.mean - bound - 3.0 * stat.stderr;
            worst_margin = worst_margin.max(margin);
            pass &= margin <= 0.0;
            vec![g17(*t), g17(stat.mean), g17(stat.stderr), g17(bound)]
        })
        .collect();
    write_csv(
        &results_path(out_dir),
        &["time", "mean_ref_norm_sq", "stderr_ref_norm_sq", "bound"],
        &rows,
    )?;
    println!(
        "regularity: rate estimate {}, worst excess over bound {:.3e} {}",
        g17(alpha_hat),
        worst_margin,
        verdict(pass)
    );
    manifest.details = json!({
        "alpha_hat": alpha_hat,
        "worst_excess": worst_margin,
        "initial_ref_norm_sq": c0,
    });
    Ok(pass)
}

pub fn verify(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    let grid = built.grid;
    let coeffs = &built.coeffs;
    let t = 0.0;
    let mut checks: Vec<IdentityCheck<f64>> = Vec::new();

    // Operator identities at the configured resolution and its refinement.
    let fine = GridSpec64::new(
        grid.dimension(),
        grid.half_width(),
        2 * grid.points_per_axis(),
        Boundary::Dirichlet,
    )
    .map_err(|e| anyhow!("refined grid: {e}"))?;
    checks.extend(
        identity_suite(grid, fine, coeffs, t).map_err(|e| anyhow!("identity suite: {e}"))?,
    );

    // Dense adjoint and composition cross-checks on a small companion grid.
    let dense_points = if grid.dimension() == 1 { 16 } else { 8 };
    let dense_grid = GridSpec64::new(
        grid.dimension(),
        grid.half_width(),
        dense_points,
        Boundary::Dirichlet,
    )
    .map_err(|e| anyhow!("dense grid: {e}"))?;
    checks.extend(
        dense_consistency_checks(dense_grid, coeffs, t)
            .map_err(|e| anyhow!("dense checks: {e}"))?,
    );

    // Growth classes and the phase compatibility condition.
    let report = check_growth(grid, coeffs, t).map_err(|e| anyhow!("growth check: {e}"))?;
    let flag = |name: &str, ok: bool| IdentityCheck {
        name: name.to_string(),
        residual: if ok { 0.0 } else { 1.0 },
        tolerance: 0.5,
        pass: ok,
    };
    checks.push(flag("growth: hamiltonian class", report.hamiltonian_ok));
    checks.push(flag("growth: noise common class", report.noise_common_ok));
    checks.push(flag(
        "growth: dissipative branch",
        report.bounded_eta_branch || report.constant_sigma_branch,
    ));
    let phase = check_phase_condition(grid, coeffs, t)
        .map_err(|e| anyhow!("phase condition: {e}"))?;
    checks.push(IdentityCheck {
        name: "phase compatibility condition".into(),
        residual: phase,
        tolerance: 1e-8,
        pass: phase <= 1e-8,
    });

    // Norm balance on pseudo-random states; exact adjoints make this a
    // round-off level identity for arbitrary states.
    let noise = NoiseSource::new(built.seed);
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let mut i = 0u64;
        let f = WaveFunction64::from_fn(grid, |_| {
            let v = num_complex::Complex::new(noise.normal(k, 0, i), noise.normal(k, 1, i));
            i += 1;
            v
        });
        let (resid, scale) = norm_balance_residual(&built.ops, t, &f);
        worst = worst.max(resid.abs() / scale);
    }
    checks.push(IdentityCheck {
        name: "norm balance (50 random states)".into(),
        residual: worst,
        tolerance: 1e-12,
        pass: worst <= 1e-12,
    });

    let mut pass = true;
    let mut rows = Vec::new();
    for c in &checks {
        pass &= c.pass;
        println!(
            "verify: {:<44} residual {:>11.4e} tol {:>9.2e} {}",
            c.name,
            c.residual,
            c.tolerance,
            verdict(c.pass)
        );
        rows.push(vec![
            c.name.clone(),
            g17(c.residual),
            g17(c.tolerance),
            c.pass.to_string(),
        ]);
    }
    write_csv(
        &results_path(out_dir),
        &["check", "residual", "tolerance", "pass"],
        &rows,
    )?;
    manifest.details = json!({
        "checks": checks.len(),
        "failed": checks.iter().filter(|c| !c.pass).count(),
    });
    Ok(pass)
}

pub fn oracle_compare(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    if built.grid.len() > MASTER_CAP {
        bail!(
            "oracle-compare needs grid.points^dimension <= {MASTER_CAP}, got {}",
            built.grid.len()
        );
    }
    let (summary, records) = run(&built, &[Probe::NormSq])?;
    let finals: Vec<WaveFunction64> = records.into_iter().map(|r| r.final_state).collect();
    // Linear-flow states carry their squared norms, so the unweighted mixture
    // is already the unnormalized-mean estimator; nonlinear states are unit
    // norm. Normalizing both sides removes the O(1/sqrt(n)) trace jitter.
    let est = DensityMatrix::estimate(&finals, None)
        .map_err(|e| anyhow!("density estimate: {e}"))?
        .normalized();
    let rho0 = DensityMatrix::pure(&built.initial).map_err(|e| anyhow!("initial density: {e}"))?;
    let master_dt = config.check.master_dt.unwrap_or(config.run.dt / 10.0);
    let master = solve_master(&built.ops, &rho0, 0.0, config.run.time, master_dt)
        .map_err(|e| anyhow!("master equation solve: {e}"))?;
    if let Some(w) = &master.warning {
        eprintln!("warning: {w}");
    }
    let dist = trace_distance(&est, &master.rho.normalized())
        .map_err(|e| anyhow!("trace distance: {e}"))?;
    let tol = config.check.distance_tol.unwrap_or(0.05);
    let pass = dist <= tol;
    println!(
        "oracle-compare: trace distance {} over {} trajectories (tol {}) {}",
        g17(dist),
        summary.n_traj,
        g17(tol),
        verdict(pass)
    );
    write_csv(
        &results_path(out_dir),
        &["trace_distance", "tolerance", "n_traj"],
        &[vec![g17(dist), g17(tol), summary.n_traj.to_string()]],
    )?;
    manifest.details = json!({
        "trace_distance": dist,
        "tolerance": tol,
        "master_trace_drift": master.trace_drift,
        "master_dt": master_dt,
        "weight_mean": summary.weight.mean,
    });
    Ok(pass)
}

pub fn resolvent(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> Result<bool> {
    let built = config.build(seed)?;
    let strengths = config
        .check
        .strengths
        .clone()
        .unwrap_or_else(|| vec![1.0, 4.0, 16.0, 64.0, 256.0]);
    if strengths.is_empty() {
        bail!("check.strengths must not be empty");
    }
    for n in &strengths {
        if !(n.is_finite() && *n > 0.0) {
            bail!("check.strengths entries must be positive, got {n}");
        }
    }

    // One fixed noise path, drawn at half the configured step so the same
    // Brownian increments drive the dt and dt/2 runs; the dt/2 linear run
    // sets the discretization noise floor for the plateau test.
    let src = NoiseSource::new(built.seed);
    let dt_fine = config.run.dt / 2.0;
    let sqrt_fine = dt_fine.sqrt();
    let coarse = CoarsenedNoise { source: src, ratio: 2 };
    let u = &built.initial;

    let mut cfg_half = built.cfg.clone();
    cfg_half.dt = dt_fine;
    let steps_fine = 2 * built.n_steps;
    let half = run_trajectory(
        &built.ops,
        &cfg_half,
        Flow::Linear,
        u,
        |channel, step| src.increment(0, channel, step, sqrt_fine),
        steps_fine,
        steps_fine,
        |_, _, _| {},
    )
    .map_err(|e| anyhow!("dt/2 reference run failed: {e}"))?;
    let full = run_trajectory(
        &built.ops,
        &built.cfg,
        Flow::Linear,
        u,
        |channel, step| coarse.increment(0, channel, step, sqrt_fine),
        built.n_steps,
        built.n_steps,
        |_, _, _| {},
    )
    .map_err(|e| anyhow!("linear reference run failed: {e}"))?;
    let ip_half = inner_product(u, &half.final_state);
    let ip_full = inner_product(u, &full.final_state);
    let floor = (ip_full - ip_half).norm().max(1e-13 * (1.0 + ip_full.norm()));

    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for &n in &strengths {
        let rec = run_trajectory(
            &built.ops,
            &built.cfg,
            Flow::Regularized { strength: n },
            u,
            |channel, step| coarse.increment(0, channel, step, sqrt_fine),
            built.n_steps,
            built.n_steps,
            |_, _, _| {},
        )
        .map_err(|e| anyhow!("regularized run at strength {n} failed: {e}"))?;
        let ip = inner_product(u, &rec.final_state);
        let gap = (ip - ip_full).norm();
        println!(
            "resolvent: strength {:>8} overlap gap {:.6e}",
            g17(n),
            gap
        );
        rows.push(vec![g17(n), g17(ip.re), g17(ip.im), g17(gap)]);
        gaps.push(gap);
    }
    write_csv(
        &results_path(out_dir),
        &["strength", "overlap_re", "overlap_im", "gap"],
        &rows,
    )?;

    let increases = gaps
        .windows(2)
        .filter(|w| w[1] > w[0] * (1.0 + 1e-9))
        .count();
    let last = *gaps.last().unwrap();
    let pass = increases <= 1 && last <= 10.0 * floor;
    println!(
        "resolvent: floor {:.3e}, final gap {:.3e}, {} non-monotone step(s) {}",
        floor,
        last,
        increases,
        verdict(pass)
    );
    manifest.details = json!({
        "baseline_overlap_re": ip_full.re,
        "baseline_overlap_im": ip_full.im,
        "noise_floor": floor,
        "final_gap": last,
        "non_monotone_steps": increases,
    });
    Ok(pass)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
