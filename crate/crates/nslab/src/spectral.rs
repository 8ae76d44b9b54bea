//! Divergence-free Fourier Galerkin representation on the periodic box
//! `[0, 2pi)^2` with mean-zero fields.
//!
//! Each velocity field is stored as one complex amplitude per conjugate-pair
//! representative wavevector, taken along the unit divergence-free direction
//! `sigma_k = k_perp / |k|`. All L2 quantities use the normalized measure
//! `dx / (2pi)^2`, so Parseval reads `||u||^2 = sum_k 2 |a_k|^2`.

use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("max wavenumber K={0} outside the supported range 1..=64")]
    KOutOfRange(u32),
    #[error("operands live on different grids (K={0} vs K={1})")]
    GridMismatch(u32, u32),
    #[error("projection rank N={n} outside 1..={max}")]
    ProjectionRange { n: usize, max: usize },
    #[error("coefficient vector has length {got}, grid has {want} modes")]
    CoeffLength { got: usize, want: usize },
}

/// One entry of the precomputed convolution table: output representative
/// mode `k = p + q` receives `i * c * u_p * v_q` summed over full-mode pairs.
#[derive(Clone, Copy)]
struct PairEntry {
    p: u32,
    q: u32,
    /// geometric factor of the advection term `(u.grad) v`
    c_adv: f64,
    /// geometric factor of the adjoint kernel `(u.grad) w - (grad u)^T w`
    c_adj: f64,
}

/// Wavevector bookkeeping shared by every field on the same grid.
///
/// `wavevectors` holds one representative per `+-k` pair, sorted
/// lexicographically; `eigen_order[r]` is the index of the mode of rank `r`
/// in the Stokes ordering (sort by `|k|^2`, ties lexicographic).
pub struct WaveGrid {
    k_max: u32,
    wavevectors: Vec<[i32; 2]>,
    eigen_order: Vec<usize>,
    /// full set: `full[i] = wavevectors[i]` for `i < M`, `-wavevectors[i-M]` after
    full: Vec<[i32; 2]>,
    sigma: Vec<[f64; 2]>,
    alpha_full: Vec<f64>,
    pair_offsets: Vec<u32>,
    pair_entries: Vec<PairEntry>,
}

impl std::fmt::Debug for WaveGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WaveGrid")
            .field("k_max", &self.k_max)
            .field("modes", &self.wavevectors.len())
            .finish()
    }
}

fn is_representative(k: [i32; 2]) -> bool {
    k[0] > 0 || (k[0] == 0 && k[1] > 0)
}

impl WaveGrid {
    pub fn new(k_max: u32) -> Result<Arc<Self>, SpectralError> {
        if !(1..=64).contains(&k_max) {
            return Err(SpectralError::KOutOfRange(k_max));
        }
        let kk = k_max as i32;
        let mut reps = Vec::new();
        for k1 in -kk..=kk {
            for k2 in -kk..=kk {
                if (k1 != 0 || k2 != 0) && is_representative([k1, k2]) {
                    reps.push([k1, k2]);
                }
            }
        }
        reps.sort_unstable();
        let m = reps.len();
        debug_assert_eq!(m, (((2 * k_max + 1) * (2 * k_max + 1) - 1) / 2) as usize);

        let mut eigen_order: Vec<usize> = (0..m).collect();
        eigen_order.sort_by_key(|&i| {
            let k = reps[i];
            (k[0] * k[0] + k[1] * k[1], k[0], k[1])
        });

        let mut full = Vec::with_capacity(2 * m);
        full.extend_from_slice(&reps);
        full.extend(reps.iter().map(|k| [-k[0], -k[1]]));
        let sigma: Vec<[f64; 2]> = full
            .iter()
            .map(|k| {
                let n = ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt();
                [-(k[1] as f64) / n, k[0] as f64 / n]
            })
            .collect();
        let alpha_full: Vec<f64> = full
            .iter()
            .map(|k| (k[0] * k[0] + k[1] * k[1]) as f64)
            .collect();

        let mut grid = WaveGrid {
            k_max,
            wavevectors: reps,
            eigen_order,
            full,
            sigma,
            alpha_full,
            pair_offsets: Vec::new(),
            pair_entries: Vec::new(),
        };
        grid.build_pair_table();
        Ok(Arc::new(grid))
    }

    fn build_pair_table(&mut self) {
        let kk = self.k_max as i32;
        let side = (2 * kk + 1) as usize;
        let mut lut = vec![u32::MAX; side * side];
        for (i, k) in self.full.iter().enumerate() {
            lut[((k[0] + kk) as usize) * side + (k[1] + kk) as usize] = i as u32;
        }
        let m = self.wavevectors.len();
        let f = self.full.len();
        let mut offsets = Vec::with_capacity(m + 1);
        let mut entries = Vec::new();
        offsets.push(0u32);
        for ki in 0..m {
            let k = self.wavevectors[ki];
            let k_len = self.alpha_full[ki].sqrt();
            let sig_k = self.sigma[ki];
            for p_idx in 0..f {
                let p = self.full[p_idx];
                let q = [k[0] - p[0], k[1] - p[1]];
                if q[0].abs() > kk || q[1].abs() > kk || (q[0] == 0 && q[1] == 0) {
                    continue;
                }
                let q_idx = lut[((q[0] + kk) as usize) * side + (q[1] + kk) as usize];
                let p_len = self.alpha_full[p_idx].sqrt();
                let q_len = self.alpha_full[q_idx as usize].sqrt();
                let cross_pq = (p[0] * q[1] - p[1] * q[0]) as f64;
                let dot_qk = (q[0] * k[0] + q[1] * k[1]) as f64;
                let dot_pq = (p[0] * q[0] + p[1] * q[1]) as f64;
                let pf = p[0] as f64;
                let pg = p[1] as f64;
                // p . sigma_k = cross(k, p) / |k|
                let p_dot_sig_k = pf * sig_k[0] + pg * sig_k[1];
                let denom = p_len * q_len;
                let c_adv = cross_pq * dot_qk / (denom * k_len);
                let c_adj = c_adv - dot_pq / denom * p_dot_sig_k;
                if c_adv != 0.0 || c_adj != 0.0 {
                    entries.push(PairEntry {
                        p: p_idx as u32,
                        q: q_idx,
                        c_adv,
                        c_adj,
                    });
                }
            }
            offsets.push(entries.len() as u32);
        }
        self.pair_offsets = offsets;
        self.pair_entries = entries;
    }

    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    /// Number of conjugate-pair representatives `M = ((2K+1)^2 - 1) / 2`.
    pub fn mode_count(&self) -> usize {
        self.wavevectors.len()
    }

    pub fn full_count(&self) -> usize {
        self.full.len()
    }

    pub fn wavevector(&self, i: usize) -> [i32; 2] {
        self.wavevectors[i]
    }

    pub fn wavevectors(&self) -> &[[i32; 2]] {
        &self.wavevectors
    }

    /// Stokes eigenvalue `|k|^2` of representative mode `i` (grid order).
    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha_full[i]
    }

    /// Index (grid order) of the mode of Stokes rank `r` (0-based).
    pub fn eigen_index(&self, r: usize) -> usize {
        self.eigen_order[r]
    }

    /// Eigenvalue of the mode of Stokes rank `r` (0-based), nondecreasing in `r`.
    pub fn alpha_of_rank(&self, r: usize) -> f64 {
        self.alpha_full[self.eigen_order[r]]
    }

    /// Unit divergence-free direction of representative mode `i`.
    pub fn sigma(&self, i: usize) -> [f64; 2] {
        self.sigma[i]
    }

    fn check_same(&self, other: &WaveGrid) -> Result<(), SpectralError> {
        if self.k_max != other.k_max {
            return Err(SpectralError::GridMismatch(self.k_max, other.k_max));
        }
        Ok(())
    }
}

/// Divergence-free velocity field as one complex amplitude per representative
/// mode along `sigma_k`.
#[derive(Clone, Debug)]
pub struct SpectralVelocity {
    grid: Arc<WaveGrid>,
    coeffs: Vec<Complex64>,
}

impl SpectralVelocity {
    pub fn zero(grid: &Arc<WaveGrid>) -> Self {
        SpectralVelocity {
            grid: grid.clone(),
            coeffs: vec![Complex64::new(0.0, 0.0); grid.mode_count()],
        }
    }

    pub fn from_coeffs(grid: &Arc<WaveGrid>, coeffs: Vec<Complex64>) -> Result<Self, SpectralError> {
        if coeffs.len() != grid.mode_count() {
            return Err(SpectralError::CoeffLength {
                got: coeffs.len(),
                want: grid.mode_count(),
            });
        }
        Ok(SpectralVelocity {
            grid: grid.clone(),
            coeffs,
        })
    }

    /// Field with a single representative mode set to `amp`.
    pub fn single_mode(grid: &Arc<WaveGrid>, k: [i32; 2], amp: Complex64) -> Self {
        let mut v = Self::zero(grid);
        let i = grid
            .wavevectors
            .binary_search(&k)
            .expect("wavevector not a representative of this grid");
        v.coeffs[i] = amp;
        v
    }

    pub fn grid(&self) -> &Arc<WaveGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn norm_l2_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| 2.0 * c.norm_sqr()).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_l2_sq().sqrt()
    }

    /// H1 seminorm: `sum_k 2 |k|^2 |a_k|^2`, then sqrt.
    pub fn norm_h1(&self) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| 2.0 * self.grid.alpha_full[i] * c.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn inner(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.grid.k_max, other.grid.k_max);
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| 2.0 * (a.re * b.re + a.im * b.im))
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Self) {
        debug_assert_eq!(self.grid.k_max, other.grid.k_max);
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += s * o;
        }
    }

    pub fn dist_l2(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| 2.0 * (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Isometric real coordinates `[sqrt2 Re a_0, sqrt2 Im a_0, ...]`:
    /// the Euclidean norm equals the L2 norm of the field.
    pub fn to_real(&self) -> Vec<f64> {
        let s = std::f64::consts::SQRT_2;
        let mut out = Vec::with_capacity(2 * self.coeffs.len());
        for c in &self.coeffs {
            out.push(s * c.re);
            out.push(s * c.im);
        }
        out
    }

    pub fn from_real(grid: &Arc<WaveGrid>, x: &[f64]) -> Self {
        assert_eq!(x.len(), 2 * grid.mode_count());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let coeffs = x
            .chunks_exact(2)
            .map(|p| Complex64::new(s * p[0], s * p[1]))
            .collect();
        SpectralVelocity {
            grid: grid.clone(),
            coeffs,
        }
    }

    /// Keep the `n` modes lowest in the Stokes ordering, zero the rest.
    pub fn project_n(&self, n: usize) -> Result<Self, SpectralError> {
        let m = self.grid.mode_count();
        if n == 0 || n > m {
            return Err(SpectralError::ProjectionRange { n, max: m });
        }
        let mut out = Self::zero(&self.grid);
        for r in 0..n {
            let i = self.grid.eigen_order[r];
            out.coeffs[i] = self.coeffs[i];
        }
        Ok(out)
    }

    /// Expand the representatives into the full conjugate-symmetric set.
    pub fn to_full(&self) -> Vec<Complex64> {
        let m = self.coeffs.len();
        let mut full = vec![Complex64::new(0.0, 0.0); 2 * m];
        for i in 0..m {
            full[i] = self.coeffs[i];
            full[m + i] = -self.coeffs[i].conj();
        }
        full
    }

    pub fn from_full(grid: &Arc<WaveGrid>, full: &[Complex64]) -> Self {
        let m = grid.mode_count();
        SpectralVelocity {
            grid: grid.clone(),
            coeffs: full[..m].to_vec(),
        }
    }

    /// Pointwise values of the real velocity field on an `n x n` uniform grid.
    pub fn sample_physical(&self, n: usize) -> Vec<[f64; 2]> {
        let full = self.to_full();
        let grid = &self.grid;
        let mut out = vec![[0.0; 2]; n * n];
        let h = 2.0 * std::f64::consts::PI / n as f64;
        for (idx, val) in out.iter_mut().enumerate() {
            let x = (idx / n) as f64 * h;
            let y = (idx % n) as f64 * h;
            let mut vx = 0.0;
            let mut vy = 0.0;
            for (i, k) in grid.full.iter().enumerate() {
                let phase = k[0] as f64 * x + k[1] as f64 * y;
                let e = Complex64::new(phase.cos(), phase.sin());
                let c = full[i] * e;
                vx += c.re * grid.sigma[i][0];
                vy += c.re * grid.sigma[i][1];
            }
            *val = [vx, vy];
        }
        out
    }
}

/// Leray projection of a raw vector-coefficient field: keeps the component
/// along `sigma_k`, drops the gradient direction.
pub fn leray_project(
    grid: &Arc<WaveGrid>,
    raw: &[[Complex64; 2]],
) -> Result<SpectralVelocity, SpectralError> {
    if raw.len() != grid.mode_count() {
        return Err(SpectralError::CoeffLength {
            got: raw.len(),
            want: grid.mode_count(),
        });
    }
    let coeffs = raw
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = grid.sigma[i];
            v[0] * s[0] + v[1] * s[1]
        })
        .collect();
    Ok(SpectralVelocity {
        grid: grid.clone(),
        coeffs,
    })
}

/// `Pi ((u.grad) v)` by mode-space convolution truncated to the grid.
pub fn bilinear(
    u: &SpectralVelocity,
    v: &SpectralVelocity,
) -> Result<SpectralVelocity, SpectralError> {
    u.grid.check_same(&v.grid)?;
    let uf = u.to_full();
    let vf = v.to_full();
    let mut out = SpectralVelocity::zero(&u.grid);
    bilinear_full(&u.grid, &uf, &vf, out.coeffs_mut());
    Ok(out)
}

/// Convolution kernels operating on full-mode arrays; `out` is in grid order
/// over representatives. These are the solver's hot loops.
pub fn bilinear_full(grid: &WaveGrid, u: &[Complex64], v: &[Complex64], out: &mut [Complex64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let lo = grid.pair_offsets[k] as usize;
        let hi = grid.pair_offsets[k + 1] as usize;
        let mut re = 0.0;
        let mut im = 0.0;
        for e in &grid.pair_entries[lo..hi] {
            let a = u[e.p as usize];
            let b = v[e.q as usize];
            re += e.c_adv * (a.re * b.re - a.im * b.im);
            im += e.c_adv * (a.re * b.im + a.im * b.re);
        }
        // multiply by i
        *o = Complex64::new(-im, re);
    }
}

/// `Pi ((u.grad) v + (v.grad) u)` in one pass over the pair table.
pub fn linearized_advection_full(
    grid: &WaveGrid,
    u: &[Complex64],
    v: &[Complex64],
    out: &mut [Complex64],
) {
    for (k, o) in out.iter_mut().enumerate() {
        let lo = grid.pair_offsets[k] as usize;
        let hi = grid.pair_offsets[k + 1] as usize;
        let mut re = 0.0;
        let mut im = 0.0;
        for e in &grid.pair_entries[lo..hi] {
            let up = u[e.p as usize];
            let vq = v[e.q as usize];
            let vp = v[e.p as usize];
            let uq = u[e.q as usize];
            let pr = up.re * vq.re - up.im * vq.im + vp.re * uq.re - vp.im * uq.im;
            let pi = up.re * vq.im + up.im * vq.re + vp.re * uq.im + vp.im * uq.re;
            re += e.c_adv * pr;
            im += e.c_adv * pi;
        }
        *o = Complex64::new(-im, re);
    }
}

/// Adjoint of the linearized advection w.r.t. the L2 inner product:
/// `Pi ((u.grad) w - (grad u)^T w)`.
pub fn adjoint_advection_full(
    grid: &WaveGrid,
    u: &[Complex64],
    w: &[Complex64],
    out: &mut [Complex64],
) {
    for (k, o) in out.iter_mut().enumerate() {
        let lo = grid.pair_offsets[k] as usize;
        let hi = grid.pair_offsets[k + 1] as usize;
        let mut re = 0.0;
        let mut im = 0.0;
        for e in &grid.pair_entries[lo..hi] {
            let a = u[e.p as usize];
            let b = w[e.q as usize];
            re += e.c_adj * (a.re * b.re - a.im * b.im);
            im += e.c_adj * (a.re * b.im + a.im * b.re);
        }
        *o = Complex64::new(-im, re);
    }
}
