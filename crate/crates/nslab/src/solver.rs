//! Time integration on the unit interval: the nonlinear system, its
//! linearization around a reference trajectory, and the exact discrete
//! adjoint of the linearized propagation.
//!
//! One step is semi-implicit: the viscous factor `exp(-nu |k|^2 dt)` is
//! applied exactly per mode, advection and forcing are advanced by an
//! explicit Heun (second order) update. The adjoint stepper is the literal
//! transpose of the forward linearized step, so the discrete duality
//! identity holds to solver precision; this is what makes the normal
//! equations of the control synthesis exactly consistent.

use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::spectral::{
    adjoint_advection_full, bilinear_full, linearized_advection_full, SpectralVelocity, WaveGrid,
};

/// Any coefficient above this magnitude aborts the integration; 2D dynamics
/// at laboratory parameters never gets close, so tripping it indicates a bug.
pub const BLOWUP_GUARD: f64 = 1e8;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("time step {0} does not divide the unit interval")]
    BadTimeStep(f64),
    #[error("time step {0} exceeds the supported maximum 1e-2")]
    TimeStepTooLarge(f64),
    #[error("integration blow-up at step {step}: max coefficient {max:e}")]
    BlowUp { step: usize, max: f64 },
    #[error("trajectory mesh mismatch: {0} vs {1} steps")]
    MeshMismatch(usize, usize),
    #[error("forcing series has {got} nodes, mesh needs {want}")]
    SeriesLength { got: usize, want: usize },
}

/// Number of steps for a mesh of width `dt` on `[0, 1]`.
pub fn steps_for(dt: f64) -> Result<usize, SolverError> {
    if dt > 1e-2 + 1e-12 {
        return Err(SolverError::TimeStepTooLarge(dt));
    }
    let steps = (1.0 / dt).round() as usize;
    if steps == 0 || (steps as f64 * dt - 1.0).abs() > 1e-9 {
        return Err(SolverError::BadTimeStep(dt));
    }
    Ok(steps)
}

/// Uniform-mesh snapshots on `[0, 1]`; `snapshots[i]` is the state at `i*dt`.
#[derive(Clone)]
pub struct Trajectory {
    dt: f64,
    snapshots: Vec<SpectralVelocity>,
}

impl Trajectory {
    pub fn new(dt: f64, snapshots: Vec<SpectralVelocity>) -> Result<Self, SolverError> {
        let steps = steps_for(dt)?;
        if snapshots.len() != steps + 1 {
            return Err(SolverError::SeriesLength {
                got: snapshots.len(),
                want: steps + 1,
            });
        }
        Ok(Trajectory { dt, snapshots })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn at(&self, i: usize) -> &SpectralVelocity {
        &self.snapshots[i]
    }

    pub fn initial(&self) -> &SpectralVelocity {
        &self.snapshots[0]
    }

    pub fn terminal(&self) -> &SpectralVelocity {
        &self.snapshots[self.snapshots.len() - 1]
    }

    pub fn snapshots(&self) -> &[SpectralVelocity] {
        &self.snapshots
    }

    /// Hex digest of the snapshot bytes, used to stamp derived artifacts.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.dt).to_le_bytes());
        for s in &self.snapshots {
            for c in s.coeffs() {
                h.update(c.re.to_le_bytes());
                h.update(c.im.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn full_series(&self) -> Vec<Vec<Complex64>> {
        self.snapshots.iter().map(|s| s.to_full()).collect()
    }
}

/// A time-dependent forcing term evaluated in spectral space.
pub trait Forcing: Send + Sync {
    /// Accumulate `scale * f(t)` into `out` (representative coefficients).
    fn add_eval(&self, t: f64, scale: f64, out: &mut [Complex64]);
    /// Accumulate `scale * df/dt (t)`.
    fn add_eval_dt(&self, t: f64, scale: f64, out: &mut [Complex64]);
    /// Points where the forcing is not smooth (piecewise quadrature splits).
    fn time_breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Deterministic 1-periodic forcing given by a truncated time-Fourier
/// expansion with spectral-field coefficients.
#[derive(Clone)]
pub struct TimeFourierForcing {
    constant: SpectralVelocity,
    /// (q, cosine field, sine field): `cos(2 pi q t) c_q + sin(2 pi q t) s_q`
    modes: Vec<(u32, SpectralVelocity, SpectralVelocity)>,
}

impl TimeFourierForcing {
    pub fn new(
        constant: SpectralVelocity,
        modes: Vec<(u32, SpectralVelocity, SpectralVelocity)>,
    ) -> Self {
        TimeFourierForcing { constant, modes }
    }

    pub fn constant(field: SpectralVelocity) -> Self {
        TimeFourierForcing {
            constant: field,
            modes: Vec::new(),
        }
    }

    /// Space-time `H^1(D_1)` squared norm, in closed form.
    pub fn h1_norm_sq(&self) -> f64 {
        let sob = |f: &SpectralVelocity| f.norm_l2_sq() + f.norm_h1() * f.norm_h1();
        let mut total = sob(&self.constant);
        for (q, c, s) in &self.modes {
            let w = 2.0 * std::f64::consts::PI * *q as f64;
            total += 0.5 * (sob(c) + sob(s));
            total += 0.5 * w * w * (c.norm_l2_sq() + s.norm_l2_sq());
        }
        total
    }
}

impl Forcing for TimeFourierForcing {
    fn add_eval(&self, t: f64, scale: f64, out: &mut [Complex64]) {
        for (o, c) in out.iter_mut().zip(self.constant.coeffs()) {
            *o += scale * c;
        }
        for (q, c, s) in &self.modes {
            let w = 2.0 * std::f64::consts::PI * *q as f64 * t;
            let (cw, sw) = (w.cos() * scale, w.sin() * scale);
            for ((o, cc), sc) in out.iter_mut().zip(c.coeffs()).zip(s.coeffs()) {
                *o += cw * cc + sw * sc;
            }
        }
    }

    fn add_eval_dt(&self, t: f64, scale: f64, out: &mut [Complex64]) {
        for (q, c, s) in &self.modes {
            let omega = 2.0 * std::f64::consts::PI * *q as f64;
            let w = omega * t;
            let (cw, sw) = (w.cos() * scale * omega, w.sin() * scale * omega);
            for ((o, cc), sc) in out.iter_mut().zip(c.coeffs()).zip(s.coeffs()) {
                *o += -sw * cc + cw * sc;
            }
        }
    }
}

/// Sum of forcing terms on `J_1`; the solver samples it on the mesh.
#[derive(Clone, Default)]
pub struct ForcingProfile {
    parts: Vec<Arc<dyn Forcing>>,
}

impl ForcingProfile {
    pub fn zero() -> Self {
        ForcingProfile { parts: Vec::new() }
    }

    pub fn push(&mut self, part: Arc<dyn Forcing>) {
        self.parts.push(part);
    }

    pub fn with(mut self, part: Arc<dyn Forcing>) -> Self {
        self.parts.push(part);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn eval(&self, grid: &Arc<WaveGrid>, t: f64) -> SpectralVelocity {
        let mut out = SpectralVelocity::zero(grid);
        for p in &self.parts {
            p.add_eval(t, 1.0, out.coeffs_mut());
        }
        out
    }

    fn eval_dt(&self, grid: &Arc<WaveGrid>, t: f64) -> SpectralVelocity {
        let mut out = SpectralVelocity::zero(grid);
        for p in &self.parts {
            p.add_eval_dt(t, 1.0, out.coeffs_mut());
        }
        out
    }

    /// Forcing values at the mesh nodes `i*dt`, `i = 0..=steps`.
    pub fn sample_series(
        &self,
        grid: &Arc<WaveGrid>,
        dt: f64,
    ) -> Result<Vec<SpectralVelocity>, SolverError> {
        let steps = steps_for(dt)?;
        Ok((0..=steps).map(|i| self.eval(grid, i as f64 * dt)).collect())
    }

    fn quad_breaks(&self) -> Vec<f64> {
        let mut b = vec![0.0, 1.0];
        for p in &self.parts {
            b.extend(p.time_breakpoints());
        }
        b.retain(|t| (0.0..=1.0).contains(t));
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup_by(|a, c| (*a - *c).abs() < 1e-12);
        b
    }

    /// `int_0^1 ||f(t)||^2 dt` by piecewise Gauss quadrature.
    pub fn l2_norm_sq_d1(&self, grid: &Arc<WaveGrid>) -> f64 {
        self.quadrature(grid, |f, _| f.norm_l2_sq())
    }

    /// Space-time `H^1(D_1)` squared norm by piecewise Gauss quadrature.
    pub fn h1_norm_sq_d1(&self, grid: &Arc<WaveGrid>) -> f64 {
        let spatial = self.quadrature(grid, |f, _| f.norm_l2_sq() + f.norm_h1() * f.norm_h1());
        let temporal = self.quadrature_dt(grid);
        spatial + temporal
    }

    fn quadrature(
        &self,
        grid: &Arc<WaveGrid>,
        integrand: impl Fn(&SpectralVelocity, f64) -> f64,
    ) -> f64 {
        let breaks = self.quad_breaks();
        let (nodes, weights) = crate::oracles::gauss_legendre(32);
        let mut total = 0.0;
        for w in breaks.windows(2) {
            let h = w[1] - w[0];
            let mid = 0.5 * (w[0] + w[1]);
            for (x, qw) in nodes.iter().zip(&weights) {
                let t = mid + 0.5 * h * x;
                total += qw * 0.5 * h * integrand(&self.eval(grid, t), t);
            }
        }
        total
    }

    fn quadrature_dt(&self, grid: &Arc<WaveGrid>) -> f64 {
        let breaks = self.quad_breaks();
        let (nodes, weights) = crate::oracles::gauss_legendre(32);
        let mut total = 0.0;
        for w in breaks.windows(2) {
            let h = w[1] - w[0];
            let mid = 0.5 * (w[0] + w[1]);
            for (x, qw) in nodes.iter().zip(&weights) {
                let t = mid + 0.5 * h * x;
                total += qw * 0.5 * h * self.eval_dt(grid, t).norm_l2_sq();
            }
        }
        total
    }
}

fn expand_into(rep: &[Complex64], full: &mut [Complex64]) {
    let m = rep.len();
    full[..m].copy_from_slice(rep);
    for i in 0..m {
        full[m + i] = -rep[i].conj();
    }
}

fn viscous_factors(grid: &WaveGrid, nu: f64, dt: f64) -> Vec<f64> {
    (0..grid.mode_count())
        .map(|i| (-nu * grid.alpha(i) * dt).exp())
        .collect()
}

fn check_finite(coeffs: &[Complex64], step: usize) -> Result<(), SolverError> {
    let mut max = 0.0f64;
    for c in coeffs {
        let m = c.re.abs().max(c.im.abs());
        if !m.is_finite() || m > BLOWUP_GUARD {
            for c in coeffs {
                max = max.max(c.re.abs().max(c.im.abs()));
            }
            return Err(SolverError::BlowUp { step, max });
        }
    }
    Ok(())
}

/// One Heun step of the nonlinear system with forcing values at both ends
/// of the interval. Viscosity is integrated exactly per mode.
pub fn step(
    u: &SpectralVelocity,
    f_start: &SpectralVelocity,
    f_end: &SpectralVelocity,
    dt: f64,
    nu: f64,
) -> Result<SpectralVelocity, SolverError> {
    if dt > 1e-2 + 1e-12 {
        return Err(SolverError::TimeStepTooLarge(dt));
    }
    let grid = u.grid().clone();
    let visc = viscous_factors(&grid, nu, dt);
    let mut bufs = StepBufs::new(&grid);
    let mut state = u.coeffs().to_vec();
    nonlinear_step(
        &grid,
        &mut state,
        f_start.coeffs(),
        f_end.coeffs(),
        &visc,
        dt,
        &mut bufs,
    );
    check_finite(&state, 0)?;
    SpectralVelocity::from_coeffs(&grid, state).map_err(|_| SolverError::BadTimeStep(dt))
}

struct StepBufs {
    full_a: Vec<Complex64>,
    full_b: Vec<Complex64>,
    k1: Vec<Complex64>,
    k2: Vec<Complex64>,
    pred: Vec<Complex64>,
}

impl StepBufs {
    fn new(grid: &WaveGrid) -> Self {
        let m = grid.mode_count();
        let f = grid.full_count();
        StepBufs {
            full_a: vec![Complex64::new(0.0, 0.0); f],
            full_b: vec![Complex64::new(0.0, 0.0); f],
            k1: vec![Complex64::new(0.0, 0.0); m],
            k2: vec![Complex64::new(0.0, 0.0); m],
            pred: vec![Complex64::new(0.0, 0.0); m],
        }
    }
}

fn nonlinear_step(
    grid: &WaveGrid,
    state: &mut [Complex64],
    f_start: &[Complex64],
    f_end: &[Complex64],
    visc: &[f64],
    dt: f64,
    bufs: &mut StepBufs,
) {
    let m = state.len();
    expand_into(state, &mut bufs.full_a);
    bilinear_full(grid, &bufs.full_a, &bufs.full_a, &mut bufs.k1);
    for i in 0..m {
        bufs.k1[i] = f_start[i] - bufs.k1[i];
        bufs.pred[i] = visc[i] * (state[i] + dt * bufs.k1[i]);
    }
    expand_into(&bufs.pred, &mut bufs.full_b);
    bilinear_full(grid, &bufs.full_b, &bufs.full_b, &mut bufs.k2);
    for i in 0..m {
        bufs.k2[i] = f_end[i] - bufs.k2[i];
        state[i] = visc[i] * state[i] + 0.5 * dt * (visc[i] * bufs.k1[i] + bufs.k2[i]);
    }
}

/// The time-1 solution operator `S(u0, f)`.
pub fn time_one_map(
    u0: &SpectralVelocity,
    f: &ForcingProfile,
    nu: f64,
    dt: f64,
) -> Result<SpectralVelocity, SolverError> {
    Ok(run_nonlinear(u0, f, nu, dt, false)?.0)
}

/// Same as [`time_one_map`] but also emits the full trajectory.
pub fn time_one_map_traj(
    u0: &SpectralVelocity,
    f: &ForcingProfile,
    nu: f64,
    dt: f64,
) -> Result<Trajectory, SolverError> {
    let (_, traj) = run_nonlinear(u0, f, nu, dt, true)?;
    Ok(traj.expect("trajectory requested"))
}

fn run_nonlinear(
    u0: &SpectralVelocity,
    f: &ForcingProfile,
    nu: f64,
    dt: f64,
    keep: bool,
) -> Result<(SpectralVelocity, Option<Trajectory>), SolverError> {
    let steps = steps_for(dt)?;
    let grid = u0.grid().clone();
    let visc = viscous_factors(&grid, nu, dt);
    let series = f.sample_series(&grid, dt)?;
    let mut bufs = StepBufs::new(&grid);
    let mut state = u0.coeffs().to_vec();
    let mut snaps = if keep { vec![u0.clone()] } else { Vec::new() };
    for n in 0..steps {
        nonlinear_step(
            &grid,
            &mut state,
            series[n].coeffs(),
            series[n + 1].coeffs(),
            &visc,
            dt,
            &mut bufs,
        );
        check_finite(&state, n)?;
        if keep {
            snaps.push(SpectralVelocity::from_coeffs(&grid, state.clone()).unwrap());
        }
    }
    let last = SpectralVelocity::from_coeffs(&grid, state).unwrap();
    let traj = if keep {
        Some(Trajectory { dt, snapshots: snaps })
    } else {
        None
    };
    Ok((last, traj))
}

/// Forward linearized solve `w = R^{uhat}(v0, g)` around the reference
/// trajectory; `g` is a forcing series on the same mesh (or `None` for zero).
pub fn solve_linearized(
    v0: &SpectralVelocity,
    g: Option<&[SpectralVelocity]>,
    uhat: &Trajectory,
    nu: f64,
) -> Result<Trajectory, SolverError> {
    let steps = uhat.steps();
    let dt = uhat.dt();
    let grid = v0.grid().clone();
    if let Some(series) = g {
        if series.len() != steps + 1 {
            return Err(SolverError::SeriesLength {
                got: series.len(),
                want: steps + 1,
            });
        }
    }
    let visc = viscous_factors(&grid, nu, dt);
    let uhat_full = uhat.full_series();
    let m = grid.mode_count();
    let mut bufs = StepBufs::new(&grid);
    let mut state = v0.coeffs().to_vec();
    let mut snaps = vec![v0.clone()];
    for n in 0..steps {
        expand_into(&state, &mut bufs.full_a);
        linearized_advection_full(&grid, &uhat_full[n], &bufs.full_a, &mut bufs.k1);
        for i in 0..m {
            let gi = g.map_or(Complex64::new(0.0, 0.0), |s| s[n].coeffs()[i]);
            bufs.k1[i] = gi - bufs.k1[i];
            bufs.pred[i] = visc[i] * (state[i] + dt * bufs.k1[i]);
        }
        expand_into(&bufs.pred, &mut bufs.full_b);
        linearized_advection_full(&grid, &uhat_full[n + 1], &bufs.full_b, &mut bufs.k2);
        for i in 0..m {
            let gi = g.map_or(Complex64::new(0.0, 0.0), |s| s[n + 1].coeffs()[i]);
            bufs.k2[i] = gi - bufs.k2[i];
            state[i] = visc[i] * state[i] + 0.5 * dt * (visc[i] * bufs.k1[i] + bufs.k2[i]);
        }
        check_finite(&state, n)?;
        snaps.push(SpectralVelocity::from_coeffs(&grid, state.clone()).unwrap());
    }
    Ok(Trajectory { dt, snapshots: snaps })
}

/// Backward adjoint solution: `theta` carries the discrete adjoint states
/// (forward indexed), `predictors[n]` the intermediate stage used by the
/// exact duality pairing.
pub struct AdjointSolution {
    pub theta: Trajectory,
    pub predictors: Vec<SpectralVelocity>,
}

impl AdjointSolution {
    pub fn initial(&self) -> &SpectralVelocity {
        self.theta.initial()
    }
}

/// Discrete adjoint of [`solve_linearized`]'s homogeneous propagation,
/// integrated backward from the terminal datum `g1`.
pub fn solve_adjoint(
    g1: &SpectralVelocity,
    uhat: &Trajectory,
    nu: f64,
) -> Result<AdjointSolution, SolverError> {
    let steps = uhat.steps();
    let dt = uhat.dt();
    let grid = g1.grid().clone();
    let visc = viscous_factors(&grid, nu, dt);
    let uhat_full = uhat.full_series();
    let m = grid.mode_count();
    let mut bufs = StepBufs::new(&grid);
    let mut snaps = vec![SpectralVelocity::zero(&grid); steps + 1];
    let mut preds = vec![SpectralVelocity::zero(&grid); steps];
    snaps[steps] = g1.clone();
    let mut state = g1.coeffs().to_vec();
    for n in (0..steps).rev() {
        expand_into(&state, &mut bufs.full_a);
        adjoint_advection_full(&grid, &uhat_full[n + 1], &bufs.full_a, &mut bufs.k1);
        for i in 0..m {
            bufs.pred[i] = visc[i] * (state[i] + dt * bufs.k1[i]);
        }
        expand_into(&bufs.pred, &mut bufs.full_b);
        adjoint_advection_full(&grid, &uhat_full[n], &bufs.full_b, &mut bufs.k2);
        for i in 0..m {
            state[i] = visc[i] * state[i] + 0.5 * dt * (visc[i] * bufs.k1[i] + bufs.k2[i]);
        }
        check_finite(&state, n)?;
        preds[n] = SpectralVelocity::from_coeffs(&grid, bufs.pred.clone()).unwrap();
        snaps[n] = SpectralVelocity::from_coeffs(&grid, state.clone()).unwrap();
    }
    Ok(AdjointSolution {
        theta: Trajectory { dt, snapshots: snaps },
        predictors: preds,
    })
}

/// The exact discrete pairing dual to the forward propagation:
/// `<R_1(0, g), theta(1)> = pairing(g, theta)` holds to machine precision.
///
/// It is a second-order quadrature of `int_0^1 <g(t), theta(t)> dt`.
pub fn duality_pairing(g: &[SpectralVelocity], adj: &AdjointSolution) -> f64 {
    let steps = adj.theta.steps();
    assert_eq!(g.len(), steps + 1);
    let dt = adj.theta.dt();
    let mut total = 0.0;
    for n in 0..steps {
        total += 0.5 * dt * g[n].inner(&adj.predictors[n]);
    }
    for n in 1..=steps {
        total += 0.5 * dt * g[n].inner(adj.theta.at(n));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &Arc<WaveGrid>, rng: &mut impl Rng, scale: f64) -> SpectralVelocity {
        let coeffs = (0..grid.mode_count())
            .map(|i| {
                let decay = 1.0 / (1.0 + grid.alpha(i));
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale * decay
            })
            .collect();
        SpectralVelocity::from_coeffs(grid, coeffs).unwrap()
    }

    #[test]
    fn shear_mode_exact_decay() {
        let grid = WaveGrid::new(4).unwrap();
        let nu = 0.5;
        let a = Complex64::new(-0.35, 0.1);
        let u = SpectralVelocity::single_mode(&grid, [0, 1], a);
        let out = time_one_map(&u, &ForcingProfile::zero(), nu, 1e-3).unwrap();
        let i = grid.wavevectors().iter().position(|&k| k == [0, 1]).unwrap();
        let expected = a * (-nu).exp();
        assert!((out.coeffs()[i] - expected).norm() <= 1e-6 * expected.norm());
        // everything else stays zero
        assert!(out.norm_l2_sq() - 2.0 * out.coeffs()[i].norm_sqr() <= 1e-20);
    }

    #[test]
    fn zero_is_fixed_point() {
        let grid = WaveGrid::new(3).unwrap();
        let u = SpectralVelocity::zero(&grid);
        let out = time_one_map(&u, &ForcingProfile::zero(), 0.5, 1e-2).unwrap();
        assert_eq!(out.norm_l2(), 0.0);
    }

    #[test]
    fn heun_second_order_convergence() {
        let grid = WaveGrid::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let u0 = random_field(&grid, &mut rng, 0.8);
        let h = TimeFourierForcing::new(
            random_field(&grid, &mut rng, 0.3),
            vec![(
                1,
                random_field(&grid, &mut rng, 0.2),
                random_field(&grid, &mut rng, 0.2),
            )],
        );
        let f = ForcingProfile::zero().with(Arc::new(h));
        let reference = time_one_map(&u0, &f, 0.5, 1.0 / 6400.0).unwrap();
        let dts = [1e-2, 5e-3, 2.5e-3];
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                time_one_map(&u0, &f, 0.5, dt)
                    .unwrap()
                    .dist_l2(&reference)
            })
            .collect();
        // order from successive halvings
        let p1 = (errs[0] / errs[1]).log2();
        let p2 = (errs[1] / errs[2]).log2();
        assert!(p1 >= 1.9 && p2 >= 1.9, "orders {p1} {p2}, errs {errs:?}");
    }

    #[test]
    fn unforced_energy_nonincreasing() {
        let grid = WaveGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u0 = random_field(&grid, &mut rng, 1.0);
        let traj = time_one_map_traj(&u0, &ForcingProfile::zero(), 0.5, 1e-3).unwrap();
        let mut prev = f64::INFINITY;
        for s in traj.snapshots() {
            let e = s.norm_l2();
            assert!(e <= prev * (1.0 + 1e-13));
            prev = e;
        }
    }

    #[test]
    fn energy_inequality_with_forcing() {
        // ||S(u,f)|| <= exp(-nu) ||u|| + C1 ||f||_{L2(D1)} with C1 = 1
        let grid = WaveGrid::new(3).unwrap();
        let nu = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let u0 = random_field(&grid, &mut rng, 1.5);
            let h = TimeFourierForcing::new(
                random_field(&grid, &mut rng, 0.5),
                vec![(
                    rng.gen_range(1..3),
                    random_field(&grid, &mut rng, 0.4),
                    random_field(&grid, &mut rng, 0.4),
                )],
            );
            let f = ForcingProfile::zero().with(Arc::new(h));
            let out = time_one_map(&u0, &f, nu, 2e-3).unwrap();
            let bound = (-nu).exp() * u0.norm_l2() + f.l2_norm_sq_d1(&grid).sqrt();
            assert!(
                out.norm_l2() <= bound * (1.0 + 1e-6),
                "{} > {}",
                out.norm_l2(),
                bound
            );
        }
    }

    #[test]
    fn linearized_superposition_and_stokes_decay() {
        let grid = WaveGrid::new(3).unwrap();
        let nu = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let base = random_field(&grid, &mut rng, 0.6);
        let uhat = time_one_map_traj(&base, &ForcingProfile::zero(), nu, 2e-3).unwrap();

        let v0 = random_field(&grid, &mut rng, 1.0);
        let g: Vec<SpectralVelocity> = (0..=uhat.steps())
            .map(|_| random_field(&grid, &mut rng, 0.2))
            .collect();
        let w_both = solve_linearized(&v0, Some(&g), &uhat, nu).unwrap();
        let w_v = solve_linearized(&v0, None, &uhat, nu).unwrap();
        let zero = SpectralVelocity::zero(&grid);
        let w_g = solve_linearized(&zero, Some(&g), &uhat, nu).unwrap();
        let mut sum = w_v.terminal().clone();
        sum.axpy(1.0, w_g.terminal());
        assert!(w_both.terminal().dist_l2(&sum) <= 1e-12 * sum.norm_l2().max(1.0));

        // uhat = 0 reduces to per-mode heat decay
        let zero_traj = Trajectory::new(
            2e-3,
            vec![SpectralVelocity::zero(&grid); uhat.steps() + 1],
        )
        .unwrap();
        let k = [1, 1];
        let v = SpectralVelocity::single_mode(&grid, k, Complex64::new(1.0, 0.0));
        let w = solve_linearized(&v, None, &zero_traj, nu).unwrap();
        let i = grid.wavevectors().iter().position(|&kk| kk == k).unwrap();
        assert_relative_eq!(
            w.terminal().coeffs()[i].re,
            (-nu * 2.0).exp(),
            max_relative = 1e-12
        );

        // zero data -> identically zero
        let w0 = solve_linearized(&zero, None, &uhat, nu).unwrap();
        assert_eq!(w0.terminal().norm_l2(), 0.0);
    }

    #[test]
    fn adjoint_stokes_and_zero() {
        let grid = WaveGrid::new(3).unwrap();
        let nu = 0.4;
        let zero_traj =
            Trajectory::new(5e-3, vec![SpectralVelocity::zero(&grid); 201]).unwrap();
        let k = [2, -1];
        let g1 = SpectralVelocity::single_mode(&grid, k, Complex64::new(0.0, 1.0));
        let adj = solve_adjoint(&g1, &zero_traj, nu).unwrap();
        let i = grid.wavevectors().iter().position(|&kk| kk == k).unwrap();
        let expected = Complex64::new(0.0, (-nu * 5.0).exp());
        assert!((adj.initial().coeffs()[i] - expected).norm() <= 1e-12);

        let z = SpectralVelocity::zero(&grid);
        let adj0 = solve_adjoint(&z, &zero_traj, nu).unwrap();
        assert_eq!(adj0.initial().norm_l2(), 0.0);
    }

    #[test]
    fn discrete_duality_identity() {
        let grid = WaveGrid::new(3).unwrap();
        let nu = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let base = random_field(&grid, &mut rng, 0.7);
        let h = TimeFourierForcing::constant(random_field(&grid, &mut rng, 0.3));
        let f = ForcingProfile::zero().with(Arc::new(h));
        let uhat = time_one_map_traj(&base, &f, nu, 5e-3).unwrap();
        let zero = SpectralVelocity::zero(&grid);
        for _ in 0..50 {
            let g: Vec<SpectralVelocity> = (0..=uhat.steps())
                .map(|_| random_field(&grid, &mut rng, 0.5))
                .collect();
            let theta1 = random_field(&grid, &mut rng, 1.0);
            let w = solve_linearized(&zero, Some(&g), &uhat, nu).unwrap();
            let adj = solve_adjoint(&theta1, &uhat, nu).unwrap();
            let lhs = w.terminal().inner(&theta1);
            let rhs = duality_pairing(&g, &adj);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-8, epsilon = 1e-12);
        }
    }

    #[test]
    fn blowup_guard_trips() {
        let grid = WaveGrid::new(2).unwrap();
        let huge = SpectralVelocity::single_mode(&grid, [1, 0], Complex64::new(1e9, 0.0));
        let err = time_one_map(&huge, &ForcingProfile::zero(), 0.5, 1e-2).unwrap_err();
        assert!(matches!(err, SolverError::BlowUp { .. }));
    }

    #[test]
    fn rejects_bad_time_steps() {
        assert!(matches!(steps_for(3e-3), Err(SolverError::BadTimeStep(_))));
        assert!(matches!(
            steps_for(2e-2),
            Err(SolverError::TimeStepTooLarge(_))
        ));
        assert_eq!(steps_for(1e-2).unwrap(), 100);
    }
}
