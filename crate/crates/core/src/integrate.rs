//! Stochastic time stepping for the linear, norm-preserving, and
//! resolvent-regularized flows.
//!
//! Noise is counter-based: every Brownian increment is a pure function of
//! `(seed, trajectory, channel, step)`, so ensembles are reproducible
//! bit-for-bit regardless of how trajectories are scheduled across threads,
//! and a refined run can reuse the exact increments of a coarse one (see
//! [`CoarsenedNoise`]).
//!
//! Two schemes are provided. Explicit Euler-Maruyama is cheap but amplifies
//! every drift eigenmode `i w` by `sqrt(1 + (dt w)^2)` per step, a factor
//! `exp(T dt w^2 / 2)` over a run; with `w ~ 4 alpha / h^2` at the grid
//! cutoff this detonates round-off on fine grids long before any stability
//! warning about resolved physics would trigger. The drift-implicit variant
//! damps those modes instead and is the default for production grids; each
//! step solves `(I - dt G) x = rhs` by conjugate gradients on the normal
//! equations, which converges in a handful of iterations because `dt G`
//! has norm well below one in the dissipative directions that matter.

use thiserror::Error;

use crate::grid::{boundary_mass, c_re, inner_product, WaveFunction};
use crate::model::{ModelError, ModelOps, OperatorHandle};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("state diverged at step {step}: |X|^2 = {norm_sq:e}")]
    Diverged { step: u64, norm_sq: f64 },
    #[error("state collapsed at step {step}: norm below 1e-6")]
    Collapsed { step: u64 },
    #[error(
        "boundary mass fraction {fraction:e} exceeds {threshold:e} at step {step}: \
         the box no longer contains the state"
    )]
    BoundaryEscape {
        step: u64,
        fraction: f64,
        threshold: f64,
    },
    #[error("linear solver stalled at step {step}: residual {residual:e} after {iters} iterations")]
    SolverStall {
        step: u64,
        residual: f64,
        iters: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    SemiImplicit,
}

/// Which stochastic flow to integrate.
#[derive(Clone, Copy, Debug)]
pub enum Flow {
    /// `dX = G X dt + sum_l L_l X dW^l`; the norm is a martingale.
    Linear,
    /// The norm-preserving flow with state-dependent drift and diffusion;
    /// states stay on the unit sphere.
    Nonlinear,
    /// The linear flow with `G` and `L_l` filtered through the resolvent
    /// `n (n + C^2)^{-1}`: `G^n = R G R`, `L^n = L R`. The generator is then
    /// bounded, so explicit stepping is safe on any grid; the scheme setting
    /// is ignored.
    Regularized { strength: f64 },
}

#[derive(Clone, Debug)]
pub struct SchemeConfig<S: Scalar> {
    pub dt: S,
    pub scheme: Scheme,
    /// Nonlinear flow only: project back to the unit sphere after each step.
    pub renormalize: bool,
    /// Distance from the box edge counted as boundary; `None` means one
    /// eighth of the half-width.
    pub boundary_margin: Option<S>,
    /// Abort when the boundary mass fraction exceeds this.
    pub boundary_threshold: S,
    pub solver_tol: S,
    pub solver_max_iter: usize,
}

impl<S: Scalar> SchemeConfig<S> {
    pub fn new(dt: S) -> Self {
        SchemeConfig {
            dt,
            scheme: Scheme::EulerMaruyama,
            renormalize: true,
            boundary_margin: None,
            boundary_threshold: S::of(1e-6),
            solver_tol: S::of(1e-10),
            solver_max_iter: 400,
        }
    }

    pub fn semi_implicit(dt: S) -> Self {
        SchemeConfig {
            scheme: Scheme::SemiImplicit,
            ..Self::new(dt)
        }
    }
}

// ---------------------------------------------------------------------------
// Counter-based noise

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless Gaussian noise: `normal(trajectory, channel, step)` is a pure
/// function of its arguments and the seed.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn counter(&self, trajectory: u64, channel: usize, step: u64, lane: u64) -> u64 {
        let mut h = mix64(self.seed ^ 0x243F_6A88_85A3_08D3);
        h = mix64(h ^ trajectory.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h = mix64(h ^ (channel as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        h = mix64(h ^ step.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
        mix64(h ^ lane)
    }

    /// Standard normal draw via Box-Muller on two hashed uniforms.
    pub fn normal(&self, trajectory: u64, channel: usize, step: u64) -> f64 {
        let unit = |z: u64| ((z >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        let u1 = unit(self.counter(trajectory, channel, step, 0));
        let u2 = unit(self.counter(trajectory, channel, step, 1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Brownian increment over one step of size `sqrt_dt^2`.
    pub fn increment<S: Scalar>(
        &self,
        trajectory: u64,
        channel: usize,
        step: u64,
        sqrt_dt: S,
    ) -> S {
        S::of(self.normal(trajectory, channel, step)) * sqrt_dt
    }
}

/// View of a fine noise source at a coarser step size: the increment of
/// coarse step `k` is the sum of the `ratio` fine increments it covers.
/// A coarse run driven by this and a fine run driven by the source itself
/// see the same Brownian path, which is what a coupled step-size refinement
/// needs.
#[derive(Clone, Copy, Debug)]
pub struct CoarsenedNoise {
    pub source: NoiseSource,
    pub ratio: u64,
}

impl CoarsenedNoise {
    pub fn increment<S: Scalar>(
        &self,
        trajectory: u64,
        channel: usize,
        coarse_step: u64,
        sqrt_dt_fine: S,
    ) -> S {
        let mut acc = S::zero();
        for j in 0..self.ratio {
            acc += self
                .source
                .increment(trajectory, channel, coarse_step * self.ratio + j, sqrt_dt_fine);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Heuristic explicit-stability check: warns when `dt (4 d alpha / h^2 +
/// max|V|)` exceeds one half. Passing it is necessary, not sufficient; see
/// the module notes on round-off amplification for why fine grids want the
/// implicit scheme regardless.
pub fn stability_warning<S: Scalar>(
    ops: &ModelOps<S>,
    cfg: &SchemeConfig<S>,
    t: S,
) -> Option<String> {
    if cfg.scheme != Scheme::EulerMaruyama {
        return None;
    }
    let grid = ops.grid();
    let mut vmax = S::zero();
    let v = &ops.coefficients().v;
    if !v.is_zero() {
        for i in 0..grid.len() {
            vmax = vmax.max(v.eval(t, grid.point(i)).norm());
        }
    }
    let h = grid.spacing();
    let four_d = S::of(4.0 * grid.dimension() as f64);
    let rate = four_d * ops.coefficients().alpha / (h * h) + vmax;
    let margin = cfg.dt * rate;
    (margin > S::of(0.5)).then(|| {
        format!(
            "explicit step is marginal: dt * (4 d alpha / h^2 + max|V|) = {:.3} > 0.5; \
             reduce dt or switch to the semi-implicit scheme",
            margin.as_f64()
        )
    })
}

// ---------------------------------------------------------------------------
// Linear solvers

/// Conjugate gradients for a Hermitian positive definite `apply`, writing the
/// solution over the initial guess in `x`. Returns iterations used.
fn cg<S: Scalar>(
    apply: &mut impl FnMut(&WaveFunction<S>, &mut WaveFunction<S>),
    b: &WaveFunction<S>,
    x: &mut WaveFunction<S>,
    tol: S,
    max_iter: usize,
    r: &mut WaveFunction<S>,
    p: &mut WaveFunction<S>,
    ap: &mut WaveFunction<S>,
) -> Result<usize, (f64, usize)> {
    let bnorm = b.norm_sq().sqrt();
    let floor = tol * (bnorm + S::of(1e-300));
    apply(x, r);
    r.scale(c_re(-S::one()));
    r.axpy(c_re(S::one()), b);
    let mut rs = r.norm_sq();
    if rs.sqrt() <= floor {
        return Ok(0);
    }
    p.copy_from(r);
    for iter in 1..=max_iter {
        apply(p, ap);
        let denom = inner_product(p, ap).re;
        if !(denom > S::zero()) {
            return Err((rs.sqrt().as_f64(), iter));
        }
        let alpha = rs / denom;
        x.axpy(c_re(alpha), p);
        r.axpy(c_re(-alpha), ap);
        let rs_new = r.norm_sq();
        if rs_new.sqrt() <= floor {
            return Ok(iter);
        }
        let beta = rs_new / rs;
        rs = rs_new;
        p.scale(c_re(beta));
        p.axpy(c_re(S::one()), r);
    }
    Err(((rs.sqrt() / (bnorm + S::of(1e-300))).as_f64(), max_iter))
}

/// `n (n + C^2)^{-1} f` by conjugate gradients; `n + C^2` is Hermitian
/// positive definite for any `n > 0`.
pub fn resolvent_apply<S: Scalar>(
    reference: &OperatorHandle<S>,
    strength: S,
    f: &WaveFunction<S>,
    tol: S,
    max_iter: usize,
) -> Result<WaveFunction<S>, IntegrateError> {
    let grid = f.grid();
    let mut cu = WaveFunction::zeros(grid);
    let t0 = S::zero();
    let mut apply = |u: &WaveFunction<S>, out: &mut WaveFunction<S>| {
        reference.apply_into(t0, u, &mut cu);
        reference.apply_into(t0, &cu, out);
        let oa = out.amp_mut();
        let ua = u.amp();
        for i in 0..ua.len() {
            oa[i] += ua[i] * strength;
        }
    };
    let mut b = f.clone();
    b.scale(c_re(strength));
    let mut x = f.clone();
    let mut r = WaveFunction::zeros(grid);
    let mut p = WaveFunction::zeros(grid);
    let mut ap = WaveFunction::zeros(grid);
    cg(&mut apply, &b, &mut x, tol, max_iter, &mut r, &mut p, &mut ap).map_err(
        |(residual, iters)| IntegrateError::SolverStall {
            step: 0,
            residual,
            iters,
        },
    )?;
    Ok(x)
}

// ---------------------------------------------------------------------------
// Trajectory driver

/// Outcome of one trajectory: the final state, its squared norm (the change
/// of measure weight relating the linear and norm-preserving flows), and the
/// number of steps taken.
pub struct TrajectoryRecord<S: Scalar> {
    pub final_state: WaveFunction<S>,
    pub weight: S,
    pub steps: u64,
}

struct Workspace<S: Scalar> {
    next: WaveFunction<S>,
    gbuf: WaveFunction<S>,
    lbuf: WaveFunction<S>,
    rhs: WaveFunction<S>,
    tmp: WaveFunction<S>,
    r: WaveFunction<S>,
    p: WaveFunction<S>,
    ap: WaveFunction<S>,
}

impl<S: Scalar> Workspace<S> {
    fn new(grid: crate::grid::GridSpec<S>) -> Self {
        Workspace {
            next: WaveFunction::zeros(grid),
            gbuf: WaveFunction::zeros(grid),
            lbuf: WaveFunction::zeros(grid),
            rhs: WaveFunction::zeros(grid),
            tmp: WaveFunction::zeros(grid),
            r: WaveFunction::zeros(grid),
            p: WaveFunction::zeros(grid),
            ap: WaveFunction::zeros(grid),
        }
    }
}

/// Solves `(I - dt G(t1)) x = rhs` via CG on the normal equations. The
/// initial guess is `rhs` itself; for the step sizes this code runs at the
/// system is a small perturbation of the identity and convergence takes a
/// handful of iterations.
fn solve_drift_implicit<S: Scalar>(
    ops: &ModelOps<S>,
    t1: S,
    dt: S,
    cfg: &SchemeConfig<S>,
    step: u64,
    ws: &mut Workspace<S>,
    out: &mut WaveFunction<S>,
) -> Result<(), IntegrateError> {
    let n = ws.rhs.amp().len();
    // normal-equation right side: (I - dt G)* rhs
    ops.drift().adjoint_into(t1, &ws.rhs, &mut ws.gbuf);
    out.copy_from(&ws.rhs);
    {
        let oa = out.amp_mut();
        let ga = ws.gbuf.amp();
        for i in 0..n {
            oa[i] -= ga[i] * dt;
        }
    }
    std::mem::swap(out, &mut ws.tmp); // tmp = A* rhs
    let drift = ops.drift();
    let gbuf = &mut ws.gbuf;
    let lbuf = &mut ws.lbuf;
    let mut apply = |u: &WaveFunction<S>, result: &mut WaveFunction<S>| {
        drift.apply_into(t1, u, gbuf);
        lbuf.copy_from(u);
        {
            let la = lbuf.amp_mut();
            let ga = gbuf.amp();
            for i in 0..n {
                la[i] -= ga[i] * dt;
            }
        }
        drift.adjoint_into(t1, lbuf, gbuf);
        result.copy_from(lbuf);
        let ra = result.amp_mut();
        let ga = gbuf.amp();
        for i in 0..n {
            ra[i] -= ga[i] * dt;
        }
    };
    out.copy_from(&ws.rhs);
    let solved = cg(
        &mut apply,
        &ws.tmp,
        out,
        cfg.solver_tol,
        cfg.solver_max_iter,
        &mut ws.r,
        &mut ws.p,
        &mut ws.ap,
    );
    solved.map(|_| ()).map_err(|(residual, iters)| {
        IntegrateError::SolverStall {
            step,
            residual,
            iters,
        }
    })
}

/// Integrates one trajectory over `n_steps` steps of `cfg.dt`, driving the
/// chosen flow with the caller's increment function `(channel, step) ->
/// dW`. The observer fires at `t = 0`, every `sample_every` steps, and at
/// the final step, after the divergence and boundary checks for that time.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory<S: Scalar>(
    ops: &ModelOps<S>,
    cfg: &SchemeConfig<S>,
    flow: Flow,
    initial: &WaveFunction<S>,
    mut increment: impl FnMut(usize, u64) -> S,
    n_steps: u64,
    sample_every: u64,
    mut observer: impl FnMut(u64, S, &WaveFunction<S>),
) -> Result<TrajectoryRecord<S>, IntegrateError> {
    assert!(sample_every > 0, "sample_every must be positive");
    let grid = ops.grid();
    let dt = cfg.dt;
    let sqrt_dt_check = dt > S::zero();
    assert!(sqrt_dt_check, "dt must be positive");
    let margin = cfg
        .boundary_margin
        .unwrap_or(grid.half_width() * S::of(0.125));
    let channels = ops.channels();
    let mut ws = Workspace::new(grid);
    let mut cur = initial.clone();
    let half = S::of(0.5);

    for step in 0..=n_steps {
        if step % sample_every == 0 || step == n_steps {
            let nn = cur.norm_sq();
            if !cur.is_finite() || nn > S::of(1e12) {
                return Err(IntegrateError::Diverged {
                    step,
                    norm_sq: nn.as_f64(),
                });
            }
            let fraction = boundary_mass(&cur, margin) / nn.max(S::of(1e-300));
            if fraction > cfg.boundary_threshold {
                return Err(IntegrateError::BoundaryEscape {
                    step,
                    fraction: fraction.as_f64(),
                    threshold: cfg.boundary_threshold.as_f64(),
                });
            }
            observer(step, dt * S::of(step as f64), &cur);
        }
        if step == n_steps {
            break;
        }
        let t = dt * S::of(step as f64);
        let t1 = dt * S::of((step + 1) as f64);

        match flow {
            Flow::Linear => {
                ws.next.copy_from(&cur);
                for l in 0..channels {
                    ops.lindblad(l).apply_into(t, &cur, &mut ws.lbuf);
                    ws.next.axpy(c_re(increment(l, step)), &ws.lbuf);
                }
                match cfg.scheme {
                    Scheme::EulerMaruyama => {
                        ops.drift().apply_into(t, &cur, &mut ws.gbuf);
                        ws.next.axpy(c_re(dt), &ws.gbuf);
                        std::mem::swap(&mut cur, &mut ws.next);
                    }
                    Scheme::SemiImplicit => {
                        std::mem::swap(&mut ws.next, &mut ws.rhs);
                        solve_drift_implicit(ops, t1, dt, cfg, step, &mut ws, &mut cur)?;
                    }
                }
            }
            Flow::Nonlinear => {
                let norm_sq = cur.norm_sq();
                if norm_sq.sqrt() < S::of(1e-6) {
                    return Err(IntegrateError::Collapsed { step });
                }
                ws.next.copy_from(&cur);
                let mut state_coeff = S::zero();
                for l in 0..channels {
                    ops.lindblad(l).apply_into(t, &cur, &mut ws.lbuf);
                    let m = inner_product(&cur, &ws.lbuf).re / norm_sq;
                    let dw = increment(l, step);
                    ws.next.axpy(c_re(dt * m + dw), &ws.lbuf);
                    state_coeff -= half * dt * m * m + dw * m;
                }
                ws.next.axpy(c_re(state_coeff), &cur);
                match cfg.scheme {
                    Scheme::EulerMaruyama => {
                        ops.drift().apply_into(t, &cur, &mut ws.gbuf);
                        ws.next.axpy(c_re(dt), &ws.gbuf);
                        std::mem::swap(&mut cur, &mut ws.next);
                    }
                    Scheme::SemiImplicit => {
                        std::mem::swap(&mut ws.next, &mut ws.rhs);
                        solve_drift_implicit(ops, t1, dt, cfg, step, &mut ws, &mut cur)?;
                    }
                }
                if cfg.renormalize {
                    let nn = cur.norm_sq();
                    if nn < S::of(1e-12) {
                        return Err(IntegrateError::Collapsed { step });
                    }
                    cur.scale(c_re(nn.sqrt().recip()));
                }
            }
            Flow::Regularized { strength } => {
                let n = S::of(strength);
                let rx = resolvent_apply(
                    ops.reference(),
                    n,
                    &cur,
                    cfg.solver_tol,
                    cfg.solver_max_iter,
                )
                .map_err(|e| at_step(e, step))?;
                ws.next.copy_from(&cur);
                for l in 0..channels {
                    ops.lindblad(l).apply_into(t, &rx, &mut ws.lbuf);
                    ws.next.axpy(c_re(increment(l, step)), &ws.lbuf);
                }
                ops.drift().apply_into(t, &rx, &mut ws.gbuf);
                let rgr = resolvent_apply(
                    ops.reference(),
                    n,
                    &ws.gbuf,
                    cfg.solver_tol,
                    cfg.solver_max_iter,
                )
                .map_err(|e| at_step(e, step))?;
                ws.next.axpy(c_re(dt), &rgr);
                std::mem::swap(&mut cur, &mut ws.next);
            }
        }
    }

    let weight = cur.norm_sq();
    Ok(TrajectoryRecord {
        final_state: cur,
        weight,
        steps: n_steps,
    })
}

fn at_step(e: IntegrateError, step: u64) -> IntegrateError {
    match e {
        IntegrateError::SolverStall {
            residual, iters, ..
        } => IntegrateError::SolverStall {
            step,
            residual,
            iters,
        },
        other => other,
    }
}
