//! Synthesis of the finite-dimensional feedback operator.
//!
//! The operator maps an initial discrepancy `v0` to dictionary coefficients
//! `c` minimizing `1/2 ||c||^2 + (1/delta) ||Pi_N (L v0 + A c)||^2`, where
//! `L` is the linearized time-1 flow around the reference trajectory and
//! `A` maps dictionary coefficients to the linearized response at time 1.
//! The normal equations `(I + (2/delta) A^T Pi_N A) c = -(2/delta) A^T Pi_N L v0`
//! are symmetric positive definite and solved in closed form.
//!
//! The blocks `Pi_N L` and `Pi_N A` are assembled from `2N` adjoint solves
//! (one per real direction of `H_N`) through the exact discrete duality
//! pairing, so a full operator build costs `2N + 1` time-1 solves instead of
//! `2M + m` forward ones. The full matrices remain available for the
//! certificate sweep, which checks the largest singular value of
//! `L + A Phi` directly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exec;
use crate::noise::{NoiseBasis, NoiseError, RenderedForcing};
use crate::solver::{
    solve_adjoint, solve_linearized, time_one_map, time_one_map_traj, AdjointSolution,
    ForcingProfile, SolverError, Trajectory,
};
use crate::spectral::{SpectralVelocity, WaveGrid};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("bad control parameters: {0}")]
    BadParams(String),
}

/// Rows of the isometric real coordinates belonging to the first `n` Stokes
/// modes, ordered by rank.
pub fn pi_n_rows(grid: &WaveGrid, n: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(2 * n);
    for r in 0..n {
        let i = grid.eigen_index(r);
        rows.push(2 * i);
        rows.push(2 * i + 1);
    }
    rows
}

/// Unit field of real direction `i` of `H_N` (rank-ordered real/imag pairs).
pub fn h_n_basis_field(grid: &Arc<WaveGrid>, i: usize) -> SpectralVelocity {
    let mut x = vec![0.0; 2 * grid.mode_count()];
    let rows = pi_n_rows(grid, i / 2 + 1);
    x[rows[i]] = 1.0;
    SpectralVelocity::from_real(grid, &x)
}

/// Dense linearized time-1 flow `v0 -> w(1)` in isometric real coordinates.
pub struct LinearizedFlowMatrix {
    pub matrix: DMatrix<f64>,
}

/// Assemble `L` column by column (one linearized solve per real direction).
pub fn assemble_l(
    uhat: &Trajectory,
    nu: f64,
) -> Result<LinearizedFlowMatrix, ControlError> {
    let grid = uhat.initial().grid().clone();
    let dim = 2 * grid.mode_count();
    let cols = exec::map_indexed(dim, |j| {
        let mut x = vec![0.0; dim];
        x[j] = 1.0;
        let v0 = SpectralVelocity::from_real(&grid, &x);
        solve_linearized(&v0, None, uhat, nu).map(|w| w.terminal().to_real())
    });
    let mut matrix = DMatrix::zeros(dim, dim);
    for (j, col) in cols.into_iter().enumerate() {
        matrix.set_column(j, &DVector::from_vec(col?));
    }
    Ok(LinearizedFlowMatrix { matrix })
}

/// Dense control-to-state map: dictionary coefficients to `w(1)`.
pub struct ControlToStateMatrix {
    pub matrix: DMatrix<f64>,
}

/// Assemble `A` column by column (one linearized solve forced by each
/// dictionary element).
pub fn assemble_a(
    uhat: &Trajectory,
    basis: &Arc<NoiseBasis>,
    m: usize,
    nu: f64,
) -> Result<ControlToStateMatrix, ControlError> {
    if m > basis.len() {
        return Err(ControlError::BadParams(format!(
            "m={m} exceeds dictionary size {}",
            basis.len()
        )));
    }
    let grid = uhat.initial().grid().clone();
    let dim = 2 * grid.mode_count();
    let zero = SpectralVelocity::zero(&grid);
    let cols = exec::map_indexed(m, |j| {
        let mut c = vec![0.0; basis.len()];
        c[j] = 1.0;
        let forcing = ForcingProfile::zero().with(Arc::new(basis.render(&c)));
        let series = forcing.sample_series(&grid, uhat.dt())?;
        solve_linearized(&zero, Some(&series), uhat, nu).map(|w| w.terminal().to_real())
    });
    let mut matrix = DMatrix::zeros(dim, m);
    for (j, col) in cols.into_iter().enumerate() {
        matrix.set_column(j, &DVector::from_vec(col?));
    }
    Ok(ControlToStateMatrix { matrix })
}

/// The adjoint-assembled control system: `g = Pi_N A` and `pi_n_l = Pi_N L`,
/// rows ordered by Stokes rank (nested in `N`).
pub struct AdjointSystem {
    pub g: DMatrix<f64>,
    pub pi_n_l: DMatrix<f64>,
    pub n_modes: usize,
    pub m: usize,
}

/// Build the `2N x m` and `2N x 2M` blocks from `2N` adjoint solves.
pub fn assemble_adjoint_system(
    uhat: &Trajectory,
    basis: &Arc<NoiseBasis>,
    n_modes: usize,
    m: usize,
    nu: f64,
) -> Result<AdjointSystem, ControlError> {
    let grid = uhat.initial().grid().clone();
    if n_modes == 0 || n_modes > grid.mode_count() {
        return Err(ControlError::BadParams(format!(
            "N={n_modes} outside 1..={}",
            grid.mode_count()
        )));
    }
    if m > basis.len() {
        return Err(ControlError::BadParams(format!(
            "m={m} exceeds dictionary size {}",
            basis.len()
        )));
    }
    let dim = 2 * grid.mode_count();
    let rows = exec::map_indexed(2 * n_modes, |i| -> Result<_, ControlError> {
        let e = h_n_basis_field(&grid, i);
        let adj = solve_adjoint(&e, uhat, nu)?;
        let l_row = adj.initial().to_real();
        let g_row = pair_adjoint_with_dictionary(&adj, basis, m);
        Ok((l_row, g_row))
    });
    let mut g = DMatrix::zeros(2 * n_modes, m);
    let mut pi_n_l = DMatrix::zeros(2 * n_modes, dim);
    for (i, row) in rows.into_iter().enumerate() {
        let (l_row, g_row) = row?;
        pi_n_l.set_row(i, &DVector::from_vec(l_row).transpose());
        g.set_row(i, &DVector::from_vec(g_row).transpose());
    }
    Ok(AdjointSystem {
        g,
        pi_n_l,
        n_modes,
        m,
    })
}

/// `<A e_j, terminal datum of adj>` for `j < m`, via the exact duality
/// pairing. Separability of the dictionary reduces the cost to one weighted
/// trajectory accumulation per distinct time frequency.
fn pair_adjoint_with_dictionary(
    adj: &AdjointSolution,
    basis: &Arc<NoiseBasis>,
    m: usize,
) -> Vec<f64> {
    let theta = &adj.theta;
    let steps = theta.steps();
    let dt = theta.dt();
    let grid = theta.initial().grid();
    let time_modes: Vec<u32> = {
        let mut v: Vec<u32> = (0..m).map(|j| basis.element(j).time_mode).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut accum: Vec<SpectralVelocity> = Vec::with_capacity(time_modes.len());
    for &a in &time_modes {
        let mut y = SpectralVelocity::zero(grid);
        for n in 0..steps {
            let w = 0.5 * dt * basis.time_factor_mode(a, theta.t(n));
            if w != 0.0 {
                y.axpy(w, &adj.predictors[n]);
            }
        }
        for n in 1..=steps {
            let w = 0.5 * dt * basis.time_factor_mode(a, theta.t(n));
            if w != 0.0 {
                y.axpy(w, theta.at(n));
            }
        }
        accum.push(y);
    }
    (0..m)
        .map(|j| {
            let a = basis.element(j).time_mode;
            let idx = time_modes.binary_search(&a).unwrap();
            basis.spatial_field(j).inner(&accum[idx])
        })
        .collect()
}

/// Minimize `1/2 ||c||^2 + (1/delta) ||Pi_N (L v0 + A c)||^2` by the SPD
/// normal equations.
pub fn solve_quadratic_min(
    a: &ControlToStateMatrix,
    l: &LinearizedFlowMatrix,
    v0: &DVector<f64>,
    n_modes: usize,
    delta: f64,
    grid: &WaveGrid,
) -> Result<DVector<f64>, ControlError> {
    if delta <= 0.0 {
        return Err(ControlError::BadParams(format!("delta={delta} must be > 0")));
    }
    let rows = pi_n_rows(grid, n_modes);
    let g = a.matrix.select_rows(rows.iter());
    let lv = &l.matrix * v0;
    let lv_n = DVector::from_iterator(rows.len(), rows.iter().map(|&r| lv[r]));
    solve_normal_equations(&g, &lv_n, delta)
}

fn solve_normal_equations(
    g: &DMatrix<f64>,
    lv_n: &DVector<f64>,
    delta: f64,
) -> Result<DVector<f64>, ControlError> {
    let m = g.ncols();
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    let two_over_delta = 2.0 / delta;
    let k = DMatrix::identity(m, m) + two_over_delta * g.transpose() * g;
    let rhs = -two_over_delta * g.transpose() * lv_n;
    let chol = nalgebra::Cholesky::new(k.clone())
        .ok_or_else(|| ControlError::BadParams("normal equations not SPD".into()))?;
    let c = chol.solve(&rhs);
    debug_assert!({
        let res = (&k * &c - &rhs).norm();
        res <= 1e-10 * rhs.norm().max(1.0)
    });
    Ok(c)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ControlParams {
    pub n_modes: usize,
    pub delta: f64,
    pub m: usize,
    pub q: f64,
    pub d: f64,
}

/// The feedback operator: an `m x 2M` matrix taking a discrepancy field to
/// dictionary coefficients, with the certificate recorded at build time.
pub struct ControlOperator {
    grid: Arc<WaveGrid>,
    basis: Arc<NoiseBasis>,
    pub phi: DMatrix<f64>,
    pub params: ControlParams,
    pub traj_digest: String,
    /// verified `||Pi_N (L + A Phi)||`
    pub pi_n_norm: f64,
    pub phi_norm: f64,
}

impl ControlOperator {
    /// Dictionary coefficients of the control for the discrepancy `v0`.
    pub fn apply(&self, v0: &SpectralVelocity) -> Vec<f64> {
        let x = DVector::from_vec(v0.to_real());
        (&self.phi * x).data.into()
    }

    /// The control as a forcing term: `sum_j c_j psi_j`, rendered.
    pub fn control_forcing(&self, v0: &SpectralVelocity) -> RenderedForcing {
        let mut c = self.apply(v0);
        c.resize(self.basis.len(), 0.0);
        self.basis.render(&c)
    }

    pub fn grid(&self) -> &Arc<WaveGrid> {
        &self.grid
    }

    pub fn basis(&self) -> &Arc<NoiseBasis> {
        &self.basis
    }

    /// L2(D_1) norm of the control function for coefficients `c`.
    pub fn control_l2_norm(&self, c: &[f64]) -> f64 {
        let gram = self.basis.gram_matrix();
        let mut full = c.to_vec();
        full.resize(self.basis.len(), 0.0);
        let v = DVector::from_vec(full);
        (v.transpose() * gram * v)[(0, 0)].max(0.0).sqrt()
    }
}

/// Build the feedback operator around the trajectory of `(uhat0, h)`.
/// `2N + 1` time-1 solves; the closed form is
/// `Phi = -(2/delta) (I + (2/delta) G^T G)^{-1} G^T (Pi_N L)`.
pub fn build_phi(
    h: &ForcingProfile,
    uhat0: &SpectralVelocity,
    basis: &Arc<NoiseBasis>,
    params: ControlParams,
    nu: f64,
    dt: f64,
) -> Result<(ControlOperator, Trajectory), ControlError> {
    let uhat = time_one_map_traj(uhat0, h, nu, dt)?;
    let op = build_phi_around(&uhat, basis, params, nu)?;
    Ok((op, uhat))
}

/// Same, around an already-computed reference trajectory.
pub fn build_phi_around(
    uhat: &Trajectory,
    basis: &Arc<NoiseBasis>,
    params: ControlParams,
    nu: f64,
) -> Result<ControlOperator, ControlError> {
    let grid = uhat.initial().grid().clone();
    let dim = 2 * grid.mode_count();
    if params.m == 0 {
        // no actuators: the empty operator
        let sys = assemble_adjoint_system(uhat, basis, params.n_modes, 0, nu)?;
        let pi_n_norm = sys.pi_n_l.singular_values().max();
        return Ok(ControlOperator {
            grid,
            basis: basis.clone(),
            phi: DMatrix::zeros(0, dim),
            params,
            traj_digest: uhat.digest(),
            pi_n_norm,
            phi_norm: 0.0,
        });
    }
    let sys = assemble_adjoint_system(uhat, basis, params.n_modes, params.m, nu)?;
    let phi = phi_from_system(&sys, params.delta)?;
    let pi_n_norm = (&sys.pi_n_l + &sys.g * &phi).singular_values().max();
    let phi_norm = phi.singular_values().max();
    Ok(ControlOperator {
        grid,
        basis: basis.clone(),
        phi,
        params,
        traj_digest: uhat.digest(),
        pi_n_norm,
        phi_norm,
    })
}

fn phi_from_system(sys: &AdjointSystem, delta: f64) -> Result<DMatrix<f64>, ControlError> {
    if delta <= 0.0 {
        return Err(ControlError::BadParams(format!("delta={delta} must be > 0")));
    }
    let m = sys.m;
    let two_over_delta = 2.0 / delta;
    let k = DMatrix::identity(m, m) + two_over_delta * sys.g.transpose() * &sys.g;
    let chol = nalgebra::Cholesky::new(k)
        .ok_or_else(|| ControlError::BadParams("normal equations not SPD".into()))?;
    let rhs = -two_over_delta * sys.g.transpose() * &sys.pi_n_l;
    Ok(chol.solve(&rhs))
}

/// One step of the certificate sweep trace.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepPoint {
    pub n_modes: usize,
    pub m: usize,
    pub delta: f64,
    pub sigma: f64,
    pub pi_n_norm: f64,
}

/// Emitted when the sweep exhausts without certifying the contraction.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ObstructionReport {
    pub q_half: f64,
    pub trace: Vec<SweepPoint>,
    pub best_sigma: f64,
}

impl std::fmt::Display for ObstructionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "observability obstruction: no (N, delta, m) reached sigma <= {:.4}; best {:.4}",
            self.q_half, self.best_sigma
        )?;
        for p in &self.trace {
            writeln!(
                f,
                "  N={:>3} m={:>3} delta={:<8.1e} sigma={:.5} pi_n={:.2e}",
                p.n_modes, p.m, p.delta, p.sigma, p.pi_n_norm
            )?;
        }
        Ok(())
    }
}

/// A certified operator: `sigma = ||L + A Phi|| <= q/2` verified by SVD.
pub struct CertifiedControl {
    pub op: ControlOperator,
    pub sigma: f64,
    pub trace: Vec<SweepPoint>,
}

/// Parameter sweep: growing `N` (with `m = m(N)`), shrinking `delta`, until
/// the SVD certificate holds. Returns the obstruction trace otherwise.
#[allow(clippy::too_many_arguments)]
pub fn certify_contraction(
    uhat: &Trajectory,
    basis: &Arc<NoiseBasis>,
    q: f64,
    d: f64,
    n_list: &[usize],
    delta_list: &[f64],
    m_of_n: impl Fn(usize) -> usize,
    nu: f64,
) -> Result<Result<CertifiedControl, ObstructionReport>, ControlError> {
    let grid = uhat.initial().grid().clone();
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    let m_max = n_list
        .iter()
        .map(|&n| m_of_n(n).min(basis.len()))
        .max()
        .unwrap_or(0);
    if n_max == 0 || n_max > grid.mode_count() {
        return Err(ControlError::BadParams(format!(
            "sweep N list invalid (max {n_max})"
        )));
    }
    let l_full = assemble_l(uhat, nu)?;
    let a_full = assemble_a(uhat, basis, m_max, nu)?;
    let big = assemble_adjoint_system(uhat, basis, n_max, m_max, nu)?;

    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    for &n in n_list {
        if n > grid.mode_count() {
            continue;
        }
        let m = m_of_n(n).min(basis.len());
        let rows: Vec<usize> = (0..2 * n).collect();
        let g = big.g.select_rows(rows.iter()).columns(0, m).into_owned();
        let pi_n_l = big.pi_n_l.select_rows(rows.iter());
        for &delta in delta_list {
            let sys = AdjointSystem {
                g: g.clone(),
                pi_n_l: pi_n_l.clone(),
                n_modes: n,
                m,
            };
            let phi = phi_from_system(&sys, delta)?;
            let t = &l_full.matrix + a_full.matrix.columns(0, m) * &phi;
            let sigma = t.singular_values().max();
            let pi_n_norm = (&sys.pi_n_l + &sys.g * &phi).singular_values().max();
            trace.push(SweepPoint {
                n_modes: n,
                m,
                delta,
                sigma,
                pi_n_norm,
            });
            best = best.min(sigma);
            if sigma <= q / 2.0 {
                let op = ControlOperator {
                    grid: grid.clone(),
                    basis: basis.clone(),
                    phi,
                    params: ControlParams {
                        n_modes: n,
                        delta,
                        m,
                        q,
                        d,
                    },
                    traj_digest: uhat.digest(),
                    pi_n_norm,
                    phi_norm: 0.0,
                };
                let phi_norm = op.phi.singular_values().max();
                let mut op = op;
                op.phi_norm = phi_norm;
                return Ok(Ok(CertifiedControl {
                    op,
                    sigma,
                    trace,
                }));
            }
        }
    }
    Ok(Err(ObstructionReport {
        q_half: q / 2.0,
        trace,
        best_sigma: best,
    }))
}

/// Per-trial record of the nonlinear contraction check.
#[derive(Debug, Clone)]
pub struct ContractionTrial {
    pub v0_norm: f64,
    pub ratio: f64,
    pub remainder: f64,
    pub control_cost: f64,
}

#[derive(Debug, Clone)]
pub struct ContractionStats {
    pub trials: Vec<ContractionTrial>,
    pub success_rate: f64,
    pub worst_ratio: f64,
    /// log-log slope of remainder vs discrepancy magnitude
    pub remainder_slope: Option<f64>,
}

/// Run the nonlinear map with feedback from random initial pairs and report
/// contraction statistics against the factor `q`.
#[allow(clippy::too_many_arguments)]
pub fn verify_contraction(
    op: &ControlOperator,
    h: &ForcingProfile,
    uhat0: &SpectralVelocity,
    trials: usize,
    q: f64,
    d: f64,
    nu: f64,
    dt: f64,
    master_seed: u64,
) -> Result<ContractionStats, ControlError> {
    let grid = uhat0.grid().clone();
    let uhat = time_one_map_traj(uhat0, h, nu, dt)?;
    let reference = uhat.terminal().clone();
    let results = exec::map_indexed(trials, |i| -> Result<ContractionTrial, ControlError> {
        let mut rng = exec::derive_rng(master_seed, 0xC0, i as u64, 0);
        let magnitude = if i == 0 {
            0.0
        } else {
            use rand::Rng;
            d * rng.gen_range(0.1..=1.0)
        };
        let v0 = random_direction(&grid, &mut rng, magnitude);
        run_contraction_trial(op, h, uhat0, &uhat, &reference, &v0, nu, dt)
    });
    let mut trials_out = Vec::with_capacity(trials);
    for r in results {
        trials_out.push(r?);
    }
    let active: Vec<&ContractionTrial> =
        trials_out.iter().filter(|t| t.v0_norm > 0.0).collect();
    let success = active.iter().filter(|t| t.ratio <= q).count();
    let success_rate = if active.is_empty() {
        1.0
    } else {
        success as f64 / active.len() as f64
    };
    let worst_ratio = active.iter().map(|t| t.ratio).fold(0.0, f64::max);
    let remainder_slope = fit_remainder_slope(&trials_out);
    Ok(ContractionStats {
        trials: trials_out,
        success_rate,
        worst_ratio,
        remainder_slope,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_contraction_trial(
    op: &ControlOperator,
    h: &ForcingProfile,
    uhat0: &SpectralVelocity,
    uhat: &Trajectory,
    reference: &SpectralVelocity,
    v0: &SpectralVelocity,
    nu: f64,
    dt: f64,
) -> Result<ContractionTrial, ControlError> {
    let grid = uhat0.grid().clone();
    let v0_norm = v0.norm_l2();
    if v0_norm == 0.0 {
        return Ok(ContractionTrial {
            v0_norm: 0.0,
            ratio: 0.0,
            remainder: 0.0,
            control_cost: 0.0,
        });
    }
    let mut u0 = uhat0.clone();
    u0.axpy(1.0, v0);
    let c = op.apply(v0);
    let control = op.control_forcing(v0);
    let forced = h.clone().with(Arc::new(control.clone()));
    let controlled = time_one_map(&u0, &forced, nu, dt)?;
    let mut diff = controlled.clone();
    diff.axpy(-1.0, reference);
    let ratio = diff.norm_l2() / v0_norm;
    // remainder against the linearized response
    let series = ForcingProfile::zero()
        .with(Arc::new(control))
        .sample_series(&grid, dt)?;
    let w = solve_linearized(v0, Some(&series), uhat, nu)?;
    let mut z = diff;
    z.axpy(-1.0, w.terminal());
    Ok(ContractionTrial {
        v0_norm,
        ratio,
        remainder: z.norm_l2(),
        control_cost: op.control_l2_norm(&c),
    })
}

fn fit_remainder_slope(trials: &[ContractionTrial]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = trials
        .iter()
        .filter(|t| t.v0_norm > 0.0 && t.remainder > 1e-300)
        .map(|t| (t.v0_norm.ln(), t.remainder.ln()))
        .collect();
    if pts.len() < 5 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

pub fn random_direction(
    grid: &Arc<WaveGrid>,
    rng: &mut impl rand::Rng,
    magnitude: f64,
) -> SpectralVelocity {
    let mut x: Vec<f64> = (0..2 * grid.mode_count())
        .map(|i| {
            let decay = 1.0 / (1.0 + grid.alpha(i / 2));
            rng.gen_range(-1.0..1.0) * decay
        })
        .collect();
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut x {
            *v *= magnitude / norm;
        }
    }
    SpectralVelocity::from_real(grid, &x)
}

/// Empirical calibration of the contraction radius `d`: measure the
/// quadratic remainder constant on probe magnitudes and set
/// `d = (q/2) / C4` with a safety factor.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_d(
    op: &ControlOperator,
    h: &ForcingProfile,
    uhat0: &SpectralVelocity,
    nu: f64,
    dt: f64,
    q: f64,
    master_seed: u64,
) -> Result<(f64, f64), ControlError> {
    let grid = uhat0.grid().clone();
    let uhat = time_one_map_traj(uhat0, h, nu, dt)?;
    let reference = uhat.terminal().clone();
    let magnitudes = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    let trials = exec::map_indexed(magnitudes.len() * 4, |i| {
        let mag = magnitudes[i / 4];
        let mut rng = exec::derive_rng(master_seed, 0xCA, i as u64, 0);
        let v0 = random_direction(&grid, &mut rng, mag);
        run_contraction_trial(op, h, uhat0, &uhat, &reference, &v0, nu, dt)
    });
    let mut c4: f64 = 0.0;
    for t in trials {
        let t = t?;
        if t.v0_norm > 0.0 {
            c4 = c4.max(t.remainder / (t.v0_norm * t.v0_norm));
        }
    }
    let d = if c4 > 0.0 {
        ((q / 2.0) / c4 * 0.8).clamp(1e-4, 1.0)
    } else {
        1.0
    };
    Ok((d, c4))
}

/// Observability of `H_N` through the first `m` dictionary functionals.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ObservabilityReport {
    pub n_modes: usize,
    pub m: usize,
    pub rank: usize,
    pub required_rank: usize,
    /// `max ||g(0)|| / ||P_m(chi g)||` over unit terminal data; `None` on
    /// rank deficiency.
    pub c_obs: Option<f64>,
}

/// Assemble `g(1) in H_N -> (<chi g, phi_j>)_j` via adjoint solves and
/// trapezoid quadrature of the dictionary pairings, compose with
/// `g(1) -> g(0)`, and bound the ratio by singular value analysis.
pub fn observability_check(
    uhat: &Trajectory,
    basis: &Arc<NoiseBasis>,
    n_modes: usize,
    m: usize,
    nu: f64,
) -> Result<ObservabilityReport, ControlError> {
    let grid = uhat.initial().grid().clone();
    if n_modes == 0 || n_modes > grid.mode_count() {
        return Err(ControlError::BadParams(format!(
            "N={n_modes} outside 1..={}",
            grid.mode_count()
        )));
    }
    if m > basis.len() {
        return Err(ControlError::BadParams(format!(
            "m={m} exceeds dictionary size {}",
            basis.len()
        )));
    }
    let dim = 2 * grid.mode_count();
    let cols = exec::map_indexed(2 * n_modes, |i| -> Result<_, ControlError> {
        let e = h_n_basis_field(&grid, i);
        let adj = solve_adjoint(&e, uhat, nu)?;
        let obs_col = observation_functionals(&adj, basis, m);
        Ok((adj.initial().to_real(), obs_col))
    });
    let mut z0 = DMatrix::zeros(dim, 2 * n_modes);
    let mut obs = DMatrix::zeros(m, 2 * n_modes);
    for (i, col) in cols.into_iter().enumerate() {
        let (z_col, o_col) = col?;
        z0.set_column(i, &DVector::from_vec(z_col));
        obs.set_column(i, &DVector::from_vec(o_col));
    }
    let svd = obs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (m.max(2 * n_modes) as f64);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < 2 * n_modes {
        return Ok(ObservabilityReport {
            n_modes,
            m,
            rank,
            required_rank: 2 * n_modes,
            c_obs: None,
        });
    }
    // C = max ||Z0 y|| / ||Obs y||: substitute z = S V^T y
    let v_t = svd.v_t.expect("svd computed");
    let mut vsinv = v_t.transpose();
    for (j, s) in svd.singular_values.iter().enumerate() {
        let mut col = vsinv.column_mut(j);
        col /= *s;
    }
    let c_obs = (z0 * vsinv).singular_values().max();
    Ok(ObservabilityReport {
        n_modes,
        m,
        rank,
        required_rank: 2 * n_modes,
        c_obs: Some(c_obs),
    })
}

/// Trapezoid quadrature of `<theta(t), psi_j>_{L2(D_1)}` for `j < m`, which
/// are the coefficients of `P_m(chi g)` since the `phi_j` are orthonormal.
fn observation_functionals(
    adj: &AdjointSolution,
    basis: &Arc<NoiseBasis>,
    m: usize,
) -> Vec<f64> {
    let theta = &adj.theta;
    let steps = theta.steps();
    let dt = theta.dt();
    let grid = theta.initial().grid();
    let time_modes: Vec<u32> = {
        let mut v: Vec<u32> = (0..m).map(|j| basis.element(j).time_mode).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut accum: Vec<SpectralVelocity> = Vec::with_capacity(time_modes.len());
    for &a in &time_modes {
        let mut y = SpectralVelocity::zero(grid);
        for n in 0..=steps {
            let w = if n == 0 || n == steps { 0.5 * dt } else { dt };
            let tf = basis.time_factor_mode(a, theta.t(n));
            if tf != 0.0 {
                y.axpy(w * tf, theta.at(n));
            }
        }
        accum.push(y);
    }
    (0..m)
        .map(|j| {
            let a = basis.element(j).time_mode;
            let idx = time_modes.binary_search(&a).unwrap();
            basis.spatial_field(j).inner(&accum[idx])
        })
        .collect()
}
