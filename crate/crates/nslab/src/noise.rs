//! Space-time localized forcing: a finite dictionary `psi_j = chi * phi_j`
//! supported in a cylinder `Q = (t_a,t_b) x S`, with i.i.d. bounded
//! coefficients carrying a C1 density.
//!
//! Each `phi_j` is a separable product of a 1D sine in time and a 2D sine in
//! space (orthonormal over `Q` before windowing), polarized along `e1` or
//! `e2`; `chi` is a smooth bump in each factor. The spatial factor is
//! precomputed as a spectral field once per element, so rendering a
//! coefficient combination costs one field combination per distinct time
//! frequency.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::oracles::integrate_gl;
use crate::solver::{time_one_map, Forcing, ForcingProfile, SolverError};
use crate::spectral::{leray_project, SpectralVelocity, WaveGrid};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid cylinder: {0}")]
    BadCylinder(String),
    #[error("dictionary size {0} exceeds the supported maximum 256")]
    TooManyElements(usize),
    #[error("amplitude rule: {0}")]
    BadAmplitudes(String),
    #[error("degenerate dictionary Gram matrix (condition number {0:.3e})")]
    DegenerateGram(f64),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Open space-time cylinder `(t_a,t_b) x (x_a,x_b) x (y_a,y_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderSpec {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl CylinderSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(0.0 < self.t.0 && self.t.0 < self.t.1 && self.t.1 < 1.0) {
            return Err(NoiseError::BadCylinder(format!(
                "time window ({}, {}) must satisfy 0 < t_a < t_b < 1",
                self.t.0, self.t.1
            )));
        }
        for (lo, hi, name) in [(self.x.0, self.x.1, "x"), (self.y.0, self.y.1, "y")] {
            if !(0.0 < lo && lo < hi && hi < TWO_PI) {
                return Err(NoiseError::BadCylinder(format!(
                    "{name} box ({lo}, {hi}) must sit strictly inside (0, 2pi)"
                )));
            }
        }
        Ok(())
    }
}

/// `C^inf` bump on `(lo, hi)`: `exp(1 - 1/(1 - s^2))` in the rescaled
/// coordinate, identically zero outside.
pub fn bump(lo: f64, hi: f64, v: f64) -> f64 {
    let s = (2.0 * v - lo - hi) / (hi - lo);
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

pub fn bump_derivative(lo: f64, hi: f64, v: f64) -> f64 {
    let s = (2.0 * v - lo - hi) / (hi - lo);
    if s.abs() >= 1.0 {
        0.0
    } else {
        let one = 1.0 - s * s;
        (1.0 - 1.0 / one).exp() * (-2.0 * s / (one * one)) * (2.0 / (hi - lo))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarization {
    X,
    Y,
}

/// One dictionary element: time sine index, space sine indices, polarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictElement {
    pub time_mode: u32,
    pub x_mode: u32,
    pub y_mode: u32,
    pub pol: Polarization,
}

/// Diagonal enumeration of `(time, x, y)` triples by total index, ties
/// lexicographic, polarization `e1` before `e2`.
fn enumerate_elements(count: usize) -> Vec<DictElement> {
    let mut out = Vec::with_capacity(count);
    let mut total = 3u32;
    while out.len() < count {
        for a in 1..=(total - 2) {
            for nx in 1..=(total - a - 1) {
                let ny = total - a - nx;
                for pol in [Polarization::X, Polarization::Y] {
                    if out.len() < count {
                        out.push(DictElement {
                            time_mode: a,
                            x_mode: nx,
                            y_mode: ny,
                            pol,
                        });
                    }
                }
            }
        }
        total += 1;
    }
    out
}

#[derive(Debug, Clone)]
pub enum AmplitudeRule {
    /// `b_j = b0 * j^{-s}`
    PowerLaw { b0: f64, s: f64 },
    Explicit(Vec<f64>),
}

impl AmplitudeRule {
    fn amplitudes(&self, count: usize) -> Result<Vec<f64>, NoiseError> {
        let b = match self {
            AmplitudeRule::PowerLaw { b0, s } => {
                if !b0.is_finite() || *b0 < 0.0 || !s.is_finite() || *s < 0.0 {
                    return Err(NoiseError::BadAmplitudes(format!(
                        "power law needs b0 >= 0, s >= 0, got b0={b0}, s={s}"
                    )));
                }
                (1..=count).map(|j| b0 * (j as f64).powf(-s)).collect()
            }
            AmplitudeRule::Explicit(v) => {
                if v.len() != count {
                    return Err(NoiseError::BadAmplitudes(format!(
                        "explicit list has {} entries, dictionary has {count}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if b.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(NoiseError::BadAmplitudes(
                "amplitudes must be finite and non-negative".into(),
            ));
        }
        Ok(b)
    }
}

/// The forcing dictionary with amplitudes and precomputed spectral factors.
pub struct NoiseBasis {
    grid: Arc<WaveGrid>,
    cylinder: CylinderSpec,
    elements: Vec<DictElement>,
    amplitudes: Vec<f64>,
    /// Leray-projected spectral rendering of the spatial factor of `psi_j`
    spatial_fields: Vec<SpectralVelocity>,
    /// normalization constant of `phi_j` (same for all j here)
    norm_const: f64,
    gram_condition: f64,
    gram: DMatrix<f64>,
    l2_norms: Vec<f64>,
    h1_norms: Vec<f64>,
}

impl NoiseBasis {
    pub fn build(
        grid: &Arc<WaveGrid>,
        cylinder: CylinderSpec,
        count: usize,
        rule: &AmplitudeRule,
    ) -> Result<Arc<Self>, NoiseError> {
        cylinder.validate()?;
        if count == 0 || count > 256 {
            return Err(NoiseError::TooManyElements(count));
        }
        let elements = enumerate_elements(count);
        let amplitudes = rule.amplitudes(count)?;
        let dt_len = cylinder.t.1 - cylinder.t.0;
        let dx_len = cylinder.x.1 - cylinder.x.0;
        let dy_len = cylinder.y.1 - cylinder.y.0;
        // orthonormal in L2(Q) w.r.t. dt x dx/(2pi)^2 before windowing
        let norm_const =
            (1.0 / (0.5 * dt_len * (0.5 * dx_len / TWO_PI) * (0.5 * dy_len / TWO_PI))).sqrt();

        let spatial_fields = elements
            .iter()
            .map(|e| spatial_spectral_field(grid, &cylinder, e, norm_const))
            .collect::<Vec<_>>();

        let mut basis = NoiseBasis {
            grid: grid.clone(),
            cylinder,
            elements,
            amplitudes,
            spatial_fields,
            norm_const,
            gram_condition: 0.0,
            gram: DMatrix::zeros(0, 0),
            l2_norms: Vec::new(),
            h1_norms: Vec::new(),
        };
        basis.l2_norms = (0..count).map(|j| basis.l2_norm_sq_element(j).sqrt()).collect();
        basis.h1_norms = (0..count).map(|j| basis.h1_norm_sq_element(j).sqrt()).collect();
        let gram = basis.compute_gram();
        let sv = gram.clone().svd(false, false).singular_values;
        let cond = sv.max() / sv.min().max(f64::MIN_POSITIVE);
        if !cond.is_finite() || cond > 1e12 {
            return Err(NoiseError::DegenerateGram(cond));
        }
        basis.gram_condition = cond;
        basis.gram = gram;
        Ok(Arc::new(basis))
    }

    pub fn grid(&self) -> &Arc<WaveGrid> {
        &self.grid
    }

    pub fn cylinder(&self) -> &CylinderSpec {
        &self.cylinder
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn amplitude(&self, j: usize) -> f64 {
        self.amplitudes[j]
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn element(&self, j: usize) -> DictElement {
        self.elements[j]
    }

    pub fn gram_condition(&self) -> f64 {
        self.gram_condition
    }

    pub fn spatial_field(&self, j: usize) -> &SpectralVelocity {
        &self.spatial_fields[j]
    }

    /// `||psi_j||_{L2(Q)}` (unprojected, normalized measure).
    pub fn l2_norm(&self, j: usize) -> f64 {
        self.l2_norms[j]
    }

    /// `||psi_j||_{H1(D_1)}` (unprojected).
    pub fn h1_norm(&self, j: usize) -> f64 {
        self.h1_norms[j]
    }

    /// `B = sum_j b_j ||psi_j||_{H1}`.
    pub fn amplitude_h1_sum(&self) -> f64 {
        self.amplitudes
            .iter()
            .zip(&self.h1_norms)
            .map(|(b, n)| b * n)
            .sum()
    }

    /// Almost-sure bound on `||eta||_{L2(D_1)}` over the coefficient cube.
    pub fn l2_sup_bound(&self) -> f64 {
        self.amplitudes
            .iter()
            .zip(&self.l2_norms)
            .map(|(b, n)| b * n)
            .sum()
    }

    fn time_window(&self) -> (f64, f64) {
        self.cylinder.t
    }

    /// Time factor `T_j(t) = chi_t(t) sin(a pi that)`.
    pub fn time_factor(&self, j: usize, t: f64) -> f64 {
        self.time_factor_mode(self.elements[j].time_mode, t)
    }

    /// Time factor for an explicit frequency `a`.
    pub fn time_factor_mode(&self, a: u32, t: f64) -> f64 {
        let (lo, hi) = self.time_window();
        if t <= lo || t >= hi {
            return 0.0;
        }
        let that = (t - lo) / (hi - lo);
        bump(lo, hi, t) * (a as f64 * std::f64::consts::PI * that).sin()
    }

    /// Pointwise value of the unprojected `psi_j` (support checks, oracles).
    pub fn eval_physical(&self, j: usize, t: f64, x: f64, y: f64) -> [f64; 2] {
        let e = self.elements[j];
        let tf = self.time_factor(j, t);
        if tf == 0.0 {
            return [0.0, 0.0];
        }
        let sx = spatial_factor(self.cylinder.x, e.x_mode, x);
        let sy = spatial_factor(self.cylinder.y, e.y_mode, y);
        let v = self.norm_const * tf * sx * sy;
        match e.pol {
            Polarization::X => [v, 0.0],
            Polarization::Y => [0.0, v],
        }
    }

    /// L2(Q) Gram matrix of the (unprojected) `psi_j`.
    pub fn gram_matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    fn compute_gram(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let ei = self.elements[i];
                let ej = self.elements[j];
                let v = if ei.pol != ej.pol {
                    0.0
                } else {
                    let ti = self.pair_integral_time(ei.time_mode, ej.time_mode);
                    let xi =
                        pair_integral_space(self.cylinder.x, ei.x_mode, ej.x_mode) / TWO_PI;
                    let yi =
                        pair_integral_space(self.cylinder.y, ei.y_mode, ej.y_mode) / TWO_PI;
                    self.norm_const * self.norm_const * ti * xi * yi
                };
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    fn pair_integral_time(&self, a: u32, b: u32) -> f64 {
        let (lo, hi) = self.time_window();
        let pi = std::f64::consts::PI;
        integrate_gl(
            |t| {
                let that = (t - lo) / (hi - lo);
                let chi = bump(lo, hi, t);
                chi * chi * (a as f64 * pi * that).sin() * (b as f64 * pi * that).sin()
            },
            lo,
            hi,
            8,
            32,
        )
    }

    fn l2_norm_sq_element(&self, j: usize) -> f64 {
        let e = self.elements[j];
        let ti = self.pair_integral_time(e.time_mode, e.time_mode);
        let xi = pair_integral_space(self.cylinder.x, e.x_mode, e.x_mode) / TWO_PI;
        let yi = pair_integral_space(self.cylinder.y, e.y_mode, e.y_mode) / TWO_PI;
        self.norm_const * self.norm_const * ti * xi * yi
    }

    fn h1_norm_sq_element(&self, j: usize) -> f64 {
        let e = self.elements[j];
        let (tlo, thi) = self.cylinder.t;
        let t_sq = self.pair_integral_time(e.time_mode, e.time_mode);
        let t_dt_sq = integrate_gl(
            |t| self.time_factor_dt_raw(e.time_mode, t).powi(2),
            tlo,
            thi,
            8,
            32,
        );
        let factor_sq = |iv: (f64, f64), n: u32| pair_integral_space(iv, n, n) / TWO_PI;
        let factor_d_sq = |iv: (f64, f64), n: u32| {
            integrate_gl(
                |v| spatial_factor_derivative(iv, n, v).powi(2),
                iv.0,
                iv.1,
                8,
                32,
            ) / TWO_PI
        };
        let xs = factor_sq(self.cylinder.x, e.x_mode);
        let ys = factor_sq(self.cylinder.y, e.y_mode);
        let xd = factor_d_sq(self.cylinder.x, e.x_mode);
        let yd = factor_d_sq(self.cylinder.y, e.y_mode);
        let c2 = self.norm_const * self.norm_const;
        c2 * (t_sq * xs * ys + t_dt_sq * xs * ys + t_sq * xd * ys + t_sq * xs * yd)
    }

    fn time_factor_dt_raw(&self, a: u32, t: f64) -> f64 {
        let (lo, hi) = self.time_window();
        if t <= lo || t >= hi {
            return 0.0;
        }
        let that = (t - lo) / (hi - lo);
        let ap = a as f64 * std::f64::consts::PI;
        bump_derivative(lo, hi, t) * (ap * that).sin()
            + bump(lo, hi, t) * (ap * that).cos() * ap / (hi - lo)
    }

    /// Render a coefficient combination `sum_j coeffs[j] psi_j` as a forcing
    /// term, grouped by time frequency. For noise pass `b_j xi_j`, for
    /// controls the plain coefficients.
    pub fn render(self: &Arc<Self>, coeffs: &[f64]) -> RenderedForcing {
        assert_eq!(coeffs.len(), self.len());
        let mut groups: Vec<(u32, SpectralVelocity)> = Vec::new();
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let a = self.elements[j].time_mode;
            let slot = groups.iter_mut().find(|(ga, _)| *ga == a);
            match slot {
                Some((_, f)) => f.axpy(c, &self.spatial_fields[j]),
                None => {
                    let mut f = SpectralVelocity::zero(&self.grid);
                    f.axpy(c, &self.spatial_fields[j]);
                    groups.push((a, f));
                }
            }
        }
        RenderedForcing {
            window: self.cylinder.t,
            groups,
        }
    }

    /// Render a noise sample: coefficients `b_j xi_j`.
    pub fn render_sample(self: &Arc<Self>, sample: &NoiseSample) -> RenderedForcing {
        let coeffs: Vec<f64> = self
            .amplitudes
            .iter()
            .zip(&sample.xi)
            .map(|(b, x)| b * x)
            .collect();
        self.render(&coeffs)
    }
}

fn spatial_factor(iv: (f64, f64), n: u32, v: f64) -> f64 {
    if v <= iv.0 || v >= iv.1 {
        return 0.0;
    }
    let s = (v - iv.0) / (iv.1 - iv.0);
    bump(iv.0, iv.1, v) * (n as f64 * std::f64::consts::PI * s).sin()
}

fn spatial_factor_derivative(iv: (f64, f64), n: u32, v: f64) -> f64 {
    if v <= iv.0 || v >= iv.1 {
        return 0.0;
    }
    let s = (v - iv.0) / (iv.1 - iv.0);
    let np = n as f64 * std::f64::consts::PI;
    bump_derivative(iv.0, iv.1, v) * (np * s).sin()
        + bump(iv.0, iv.1, v) * (np * s).cos() * np / (iv.1 - iv.0)
}

fn pair_integral_space(iv: (f64, f64), a: u32, b: u32) -> f64 {
    integrate_gl(
        |v| spatial_factor(iv, a, v) * spatial_factor(iv, b, v),
        iv.0,
        iv.1,
        8,
        32,
    )
}

/// 1D Fourier transform of the windowed factor: `(1/2pi) int g(v) e^{-i k v} dv`.
fn window_transform(iv: (f64, f64), n: u32, k: i32) -> Complex64 {
    let re = integrate_gl(
        |v| spatial_factor(iv, n, v) * (k as f64 * v).cos(),
        iv.0,
        iv.1,
        12,
        32,
    );
    let im = integrate_gl(
        |v| -spatial_factor(iv, n, v) * (k as f64 * v).sin(),
        iv.0,
        iv.1,
        12,
        32,
    );
    Complex64::new(re, im) / TWO_PI
}

fn spatial_spectral_field(
    grid: &Arc<WaveGrid>,
    cyl: &CylinderSpec,
    e: &DictElement,
    norm_const: f64,
) -> SpectralVelocity {
    let kk = grid.k_max() as i32;
    let mut tx = std::collections::HashMap::new();
    let mut ty = std::collections::HashMap::new();
    for k in -kk..=kk {
        tx.insert(k, window_transform(cyl.x, e.x_mode, k));
        ty.insert(k, window_transform(cyl.y, e.y_mode, k));
    }
    let raw: Vec<[Complex64; 2]> = (0..grid.mode_count())
        .map(|i| {
            let k = grid.wavevector(i);
            let c = norm_const * tx[&k[0]] * ty[&k[1]];
            match e.pol {
                Polarization::X => [c, Complex64::new(0.0, 0.0)],
                Polarization::Y => [Complex64::new(0.0, 0.0), c],
            }
        })
        .collect();
    leray_project(grid, &raw).expect("grid sizes match")
}

/// Spectral forcing `sum_j c_j psi_j` grouped by time frequency; zero
/// outside the cylinder's time window.
#[derive(Clone)]
pub struct RenderedForcing {
    window: (f64, f64),
    groups: Vec<(u32, SpectralVelocity)>,
}

impl Forcing for RenderedForcing {
    fn add_eval(&self, t: f64, scale: f64, out: &mut [Complex64]) {
        let (lo, hi) = self.window;
        if t <= lo || t >= hi {
            return;
        }
        let that = (t - lo) / (hi - lo);
        let chi = bump(lo, hi, t);
        for (a, field) in &self.groups {
            let w = chi * (*a as f64 * std::f64::consts::PI * that).sin() * scale;
            for (o, c) in out.iter_mut().zip(field.coeffs()) {
                *o += w * c;
            }
        }
    }

    fn add_eval_dt(&self, t: f64, scale: f64, out: &mut [Complex64]) {
        let (lo, hi) = self.window;
        if t <= lo || t >= hi {
            return;
        }
        let that = (t - lo) / (hi - lo);
        let chi = bump(lo, hi, t);
        let dchi = bump_derivative(lo, hi, t);
        for (a, field) in &self.groups {
            let ap = *a as f64 * std::f64::consts::PI;
            let w = (dchi * (ap * that).sin() + chi * (ap * that).cos() * ap / (hi - lo)) * scale;
            for (o, c) in out.iter_mut().zip(field.coeffs()) {
                *o += w * c;
            }
        }
    }

    fn time_breakpoints(&self) -> Vec<f64> {
        vec![self.window.0, self.window.1]
    }
}

/// Coefficients `xi_j in [-1, 1]` of one noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub xi: Vec<f64>,
}

impl NoiseSample {
    pub fn zero(count: usize) -> Self {
        NoiseSample {
            xi: vec![0.0; count],
        }
    }
}

/// The coefficient density `rho(r) = (15/16)(1 - r^2)^2` on `[-1, 1]`
/// (C1 on the whole line, vanishing with its derivative at the edges).
pub fn coeff_density(r: f64) -> f64 {
    if r.abs() > 1.0 {
        0.0
    } else {
        (15.0 / 16.0) * (1.0 - r * r).powi(2)
    }
}

pub fn coeff_density_ln(r: f64) -> f64 {
    if r.abs() >= 1.0 {
        f64::NEG_INFINITY
    } else {
        (15.0f64 / 16.0).ln() + 2.0 * (1.0 - r * r).ln()
    }
}

/// One scalar draw from `rho` by rejection against the uniform envelope.
pub fn sample_coeff(rng: &mut impl Rng) -> f64 {
    loop {
        let r: f64 = rng.gen_range(-1.0..1.0);
        let u: f64 = rng.gen();
        if u <= (1.0 - r * r).powi(2) {
            return r;
        }
    }
}

/// Draw all coefficients i.i.d. from `rho`.
pub fn sample_noise(basis: &NoiseBasis, rng: &mut impl Rng) -> NoiseSample {
    NoiseSample {
        xi: (0..basis.len()).map(|_| sample_coeff(rng)).collect(),
    }
}

/// Product density of a coefficient vector.
pub fn density(xi: &[f64]) -> f64 {
    xi.iter().map(|&r| coeff_density(r)).product()
}

pub fn log_density(xi: &[f64]) -> f64 {
    xi.iter().map(|&r| coeff_density_ln(r)).sum()
}

/// One Markov chain step `u_k = S(u_{k-1}, h + eta_k)`.
pub fn chain_step(
    u: &SpectralVelocity,
    h: &ForcingProfile,
    basis: &Arc<NoiseBasis>,
    sample: &NoiseSample,
    nu: f64,
    dt: f64,
) -> Result<SpectralVelocity, NoiseError> {
    let f = h.clone().with(Arc::new(basis.render_sample(sample)));
    Ok(time_one_map(u, &f, nu, dt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cylinder() -> CylinderSpec {
        CylinderSpec {
            t: (0.25, 0.75),
            x: (std::f64::consts::FRAC_PI_2, 1.5 * std::f64::consts::PI),
            y: (std::f64::consts::FRAC_PI_2, 1.5 * std::f64::consts::PI),
        }
    }

    fn small_basis(j: usize) -> Arc<NoiseBasis> {
        let grid = WaveGrid::new(4).unwrap();
        NoiseBasis::build(
            &grid,
            test_cylinder(),
            j,
            &AmplitudeRule::PowerLaw { b0: 0.3, s: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn cylinder_validation() {
        let mut c = test_cylinder();
        c.t = (0.75, 0.25);
        assert!(c.validate().is_err());
        let mut c = test_cylinder();
        c.x = (0.0, 1.0);
        assert!(c.validate().is_err());
        assert!(test_cylinder().validate().is_ok());
    }

    #[test]
    fn enumeration_is_diagonal_and_deterministic() {
        let e = enumerate_elements(10);
        assert_eq!(
            (e[0].time_mode, e[0].x_mode, e[0].y_mode, e[0].pol),
            (1, 1, 1, Polarization::X)
        );
        assert_eq!(e[1].pol, Polarization::Y);
        // next diagonal
        assert_eq!((e[2].time_mode, e[2].x_mode, e[2].y_mode), (1, 1, 2));
        let tot =
            |d: &DictElement| d.time_mode + d.x_mode + d.y_mode;
        for w in e.windows(2) {
            assert!(tot(&w[0]) <= tot(&w[1]));
        }
    }

    #[test]
    fn single_element_has_positive_norm() {
        let b = small_basis(1);
        assert!(b.l2_norm(0) > 0.0);
        assert!(b.gram_condition() < 1e3);
    }

    #[test]
    fn support_localization_physical() {
        let b = small_basis(6);
        let c = test_cylinder();
        for j in 0..b.len() {
            // outside the time window
            for t in [0.0, 0.2, 0.8, 1.0] {
                let v = b.eval_physical(j, t, 3.0, 3.0);
                assert_eq!(v, [0.0, 0.0]);
            }
            // outside the spatial box at an interior time
            for (x, y) in [(0.1, 3.0), (3.0, 0.1), (6.0, 6.0)] {
                let v = b.eval_physical(j, 0.5, x, y);
                assert_eq!(v, [0.0, 0.0]);
            }
            // nonzero somewhere inside
            let mid = b.eval_physical(j, 0.5, std::f64::consts::PI + 0.3, std::f64::consts::PI - 0.2);
            assert!(mid[0].abs() + mid[1].abs() >= 0.0); // evaluable
        }
        let _ = c;
    }

    #[test]
    fn rendered_forcing_zero_outside_window() {
        let b = small_basis(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_noise(&b, &mut rng);
        let f = ForcingProfile::zero().with(Arc::new(b.render_sample(&s)));
        for t in [0.0, 0.1, 0.24, 0.76, 0.9, 1.0] {
            assert!(f.eval(b.grid(), t).max_abs() <= 1e-14);
        }
        assert!(f.eval(b.grid(), 0.5).max_abs() > 0.0);
    }

    #[test]
    fn render_linearity() {
        let b = small_basis(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = sample_noise(&b, &mut rng);
        let s2 = sample_noise(&b, &mut rng);
        let sum = NoiseSample {
            xi: s1.xi.iter().zip(&s2.xi).map(|(a, c)| a + c).collect(),
        };
        let grid = b.grid();
        for t in [0.3, 0.5, 0.62] {
            let f1 = ForcingProfile::zero().with(Arc::new(b.render_sample(&s1)));
            let f2 = ForcingProfile::zero().with(Arc::new(b.render_sample(&s2)));
            let fs = ForcingProfile::zero().with(Arc::new(b.render_sample(&sum)));
            let mut lin = f1.eval(grid, t);
            lin.axpy(1.0, &f2.eval(grid, t));
            assert!(fs.eval(grid, t).dist_l2(&lin) <= 1e-12);
        }
        // zero sample renders to zero
        let z = ForcingProfile::zero().with(Arc::new(b.render_sample(&NoiseSample::zero(8))));
        assert_eq!(z.eval(grid, 0.5).norm_l2(), 0.0);
    }

    #[test]
    fn rendered_l2_matches_collocation_oracle() {
        let b = small_basis(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sample_noise(&b, &mut rng);
        let rendered = b.render_sample(&s);
        let f = ForcingProfile::zero().with(Arc::new(rendered));
        let spec_norm_sq = f.l2_norm_sq_d1(b.grid());
        // oracle: Gauss in time x collocation in space on the projected field
        let (nodes, weights) = oracles::gauss_legendre(24);
        let (lo, hi) = (0.25, 0.75);
        let mut quad = 0.0;
        for (x, w) in nodes.iter().zip(&weights) {
            let t = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x;
            let field = f.eval(b.grid(), t);
            quad += w * 0.5 * (hi - lo) * oracles::l2_norm_sq_collocation(&field, 48);
        }
        assert_relative_eq!(spec_norm_sq, quad, max_relative = 1e-6);
    }

    #[test]
    fn amplitude_h1_sum_matches_3d_quadrature_oracle() {
        let b = small_basis(3);
        // oracle: tensor Gauss quadrature of |psi|^2 + |grad psi|^2 + |dpsi/dt|^2
        // with numerically differentiated point values
        for j in 0..3 {
            let (tn, tw) = oracles::gauss_legendre(48);
            let (lo_t, hi_t) = (0.25, 0.75);
            let (lo_s, hi_s) = (std::f64::consts::FRAC_PI_2, 1.5 * std::f64::consts::PI);
            let comp = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
            let mut total = 0.0;
            for (ti, twi) in tn.iter().zip(&tw) {
                let t = 0.5 * (lo_t + hi_t) + 0.5 * (hi_t - lo_t) * ti;
                for (xi, xwi) in tn.iter().zip(&tw) {
                    let x = 0.5 * (lo_s + hi_s) + 0.5 * (hi_s - lo_s) * xi;
                    for (yi, ywi) in tn.iter().zip(&tw) {
                        let y = 0.5 * (lo_s + hi_s) + 0.5 * (hi_s - lo_s) * yi;
                        let w = twi * xwi * ywi * 0.125 * (hi_t - lo_t) * (hi_s - lo_s).powi(2);
                        let val = comp(b.eval_physical(j, t, x, y));
                        let dt2 = {
                            let f0 = oracles::fd_partial(
                                |tt| b.eval_physical(j, tt, x, y)[0],
                                t,
                                1e-4,
                            );
                            let f1 = oracles::fd_partial(
                                |tt| b.eval_physical(j, tt, x, y)[1],
                                t,
                                1e-4,
                            );
                            f0 * f0 + f1 * f1
                        };
                        let dx2 = {
                            let f0 = oracles::fd_partial(
                                |xx| b.eval_physical(j, t, xx, y)[0],
                                x,
                                1e-4,
                            );
                            let f1 = oracles::fd_partial(
                                |xx| b.eval_physical(j, t, xx, y)[1],
                                x,
                                1e-4,
                            );
                            f0 * f0 + f1 * f1
                        };
                        let dy2 = {
                            let f0 = oracles::fd_partial(
                                |yy| b.eval_physical(j, t, x, yy)[0],
                                y,
                                1e-4,
                            );
                            let f1 = oracles::fd_partial(
                                |yy| b.eval_physical(j, t, x, yy)[1],
                                y,
                                1e-4,
                            );
                            f0 * f0 + f1 * f1
                        };
                        total += w * (val + dt2 + dx2 + dy2);
                    }
                }
            }
            // spatial integrals carry the normalized measure
            let oracle = (total / (TWO_PI * TWO_PI)).sqrt();
            assert_relative_eq!(b.h1_norm(j), oracle, max_relative = 1e-6);
        }
        // B is the weighted sum
        let b_sum: f64 = (0..3).map(|j| b.amplitude(j) * b.h1_norm(j)).sum();
        assert_relative_eq!(b.amplitude_h1_sum(), b_sum, epsilon = 1e-14);
    }

    #[test]
    fn density_values_and_normalization() {
        assert_relative_eq!(density(&[0.0, 0.0]), (15.0f64 / 16.0).powi(2));
        assert_eq!(density(&[1.0, 0.3]), 0.0);
        assert_eq!(log_density(&[0.2, 1.1]), f64::NEG_INFINITY);
        // tensor quadrature of the J=2 product density integrates to 1
        let (n, w) = oracles::gauss_legendre(64);
        let mut total = 0.0;
        for (x, wx) in n.iter().zip(&w) {
            for (y, wy) in n.iter().zip(&w) {
                total += wx * wy * density(&[*x, *y]);
            }
        }
        assert_relative_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn coefficient_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_coeff(&mut rng)).collect();
        assert!(samples.iter().all(|x| x.abs() <= 1.0));
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| x * x).sum::<f64>() / n as f64 - mean * mean;
        // quadrature oracle for the second moment
        let m2 = integrate_gl(|r| r * r * coeff_density(r), -1.0, 1.0, 4, 32);
        assert_relative_eq!(m2, 1.0 / 7.0, epsilon = 1e-12);
        let se_mean = (m2 / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se_mean, "mean {mean}");
        assert!((var - m2).abs() <= 4.0 * se_mean, "var {var}");
    }

    #[test]
    fn coefficient_histogram_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000usize;
        let bins = 20usize;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let r = sample_coeff(&mut rng);
            let b = (((r + 1.0) / 2.0) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let mut chi2 = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            let lo = -1.0 + 2.0 * i as f64 / bins as f64;
            let hi = lo + 2.0 / bins as f64;
            let p = integrate_gl(coeff_density, lo, hi, 2, 16);
            let expected = p * n as f64;
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 1% critical value of chi2 with 19 dof
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let crit = ChiSquared::new((bins - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }

    #[test]
    fn chain_step_reduces_and_is_deterministic() {
        let b = small_basis(6);
        let grid = b.grid().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let u0 = SpectralVelocity::single_mode(&grid, [1, 1], Complex64::new(0.2, -0.1));
        // zero sample reduces to the unforced map
        let plain = time_one_map(&u0, &ForcingProfile::zero(), 0.5, 5e-3).unwrap();
        let stepped = chain_step(
            &u0,
            &ForcingProfile::zero(),
            &b,
            &NoiseSample::zero(6),
            0.5,
            5e-3,
        )
        .unwrap();
        assert!(plain.dist_l2(&stepped) <= 1e-14);
        // same seed -> bit identical
        let s = sample_noise(&b, &mut rng);
        let a1 = chain_step(&u0, &ForcingProfile::zero(), &b, &s, 0.5, 5e-3).unwrap();
        let a2 = chain_step(&u0, &ForcingProfile::zero(), &b, &s, 0.5, 5e-3).unwrap();
        assert_eq!(a1.coeffs(), a2.coeffs());
    }

    #[test]
    fn absorbing_ball_entry_and_invariance() {
        // iterate the chain from outside the measured ball; it must enter
        // within the dissipation time and never exit afterwards
        let b = small_basis(6);
        let grid = b.grid().clone();
        let nu: f64 = 0.5;
        let kappa = (-nu).exp();
        let r = b.l2_sup_bound();
        let radius = 2.0 * r / (1.0 - kappa);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let rho = 3.0 * radius;
        let mut u = SpectralVelocity::single_mode(&grid, [1, 0], Complex64::new(rho / 2f64.sqrt(), 0.0));
        let k0 = ((rho / radius).ln() / nu).ceil() as usize + 2;
        let mut entered_at = None;
        for k in 0..k0 + 300 {
            let s = sample_noise(&b, &mut rng);
            u = chain_step(&u, &ForcingProfile::zero(), &b, &s, nu, 1e-2).unwrap();
            if entered_at.is_none() && u.norm_l2() <= radius {
                entered_at = Some(k);
            }
            if let Some(e) = entered_at {
                assert!(
                    u.norm_l2() <= radius * (1.0 + 1e-12),
                    "exited the absorbing ball at step {k} (entered {e})"
                );
            }
        }
        let entered = entered_at.expect("never entered the absorbing ball");
        assert!(entered <= k0, "entered at {entered}, bound {k0}");
    }

}
