//! Independent verification routes used by the test suites.
//!
//! Everything here deliberately avoids the production code paths it checks:
//! quadratures run on collocation grids with direct Fourier summation,
//! derivatives come from finite differences, and the transport bound is the
//! combinatorial min-cut formula rather than the simplex solver.

use num_complex::Complex64;

use crate::spectral::SpectralVelocity;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Newton from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Integrate `f` over `[a, b]` with composite Gauss-Legendre panels.
pub fn integrate_gl(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (x, w) in nodes.iter().zip(&weights) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    total * 0.5 * h
}

fn physical_values(u: &SpectralVelocity, n: usize, dx_order: [i32; 2]) -> Vec<[f64; 2]> {
    let grid = u.grid();
    let full = u.to_full();
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let mut out = vec![[0.0; 2]; n * n];
    let wavevectors: Vec<[i32; 2]> = (0..grid.mode_count())
        .map(|i| grid.wavevector(i))
        .collect();
    for (idx, val) in out.iter_mut().enumerate() {
        let x = (idx / n) as f64 * h;
        let y = (idx % n) as f64 * h;
        let mut vx = Complex64::new(0.0, 0.0);
        let mut vy = Complex64::new(0.0, 0.0);
        for (i, k) in wavevectors.iter().enumerate() {
            for (sign, coeff) in [(1.0, full[i]), (-1.0, full[grid.mode_count() + i])] {
                let kx = sign * k[0] as f64;
                let ky = sign * k[1] as f64;
                let phase = kx * x + ky * y;
                let mut e = Complex64::new(phase.cos(), phase.sin());
                for _ in 0..dx_order[0] {
                    e *= Complex64::new(0.0, kx);
                }
                for _ in 0..dx_order[1] {
                    e *= Complex64::new(0.0, ky);
                }
                let s = [sign * grid.sigma(i)[0], sign * grid.sigma(i)[1]];
                vx += coeff * e * s[0];
                vy += coeff * e * s[1];
            }
        }
        *val = [vx.re, vy.re];
    }
    out
}

/// `||u||^2` by the mean of `|u|^2` over an `n x n` collocation grid
/// (normalized measure).
pub fn l2_norm_sq_collocation(u: &SpectralVelocity, n: usize) -> f64 {
    let vals = physical_values(u, n, [0, 0]);
    vals.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / (n * n) as f64
}

/// `<(u.grad) v, w>` by collocation quadrature with spectral point values.
pub fn advection_inner_collocation(
    u: &SpectralVelocity,
    v: &SpectralVelocity,
    w: &SpectralVelocity,
    n: usize,
) -> f64 {
    let uv = physical_values(u, n, [0, 0]);
    let vx = physical_values(v, n, [1, 0]);
    let vy = physical_values(v, n, [0, 1]);
    let wv = physical_values(w, n, [0, 0]);
    let mut total = 0.0;
    for i in 0..n * n {
        let ax = uv[i][0] * vx[i][0] + uv[i][1] * vy[i][0];
        let ay = uv[i][0] * vx[i][1] + uv[i][1] * vy[i][1];
        total += ax * wv[i][0] + ay * wv[i][1];
    }
    total / (n * n) as f64
}

/// Central finite-difference gradient of a scalar function of a vector.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Richardson 4th-order numerical partial derivative of a scalar field.
pub fn fd_partial(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// Total variation `1/2 int |p - q|` for 1D densities via piecewise
/// Gauss-Legendre split at the supplied crossing points.
pub fn tv_1d(p: impl Fn(f64) -> f64, q: impl Fn(f64) -> f64, breaks: &[f64]) -> f64 {
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += integrate_gl(|x| (p(x) - q(x)).abs(), w[0], w[1], 8, 32);
    }
    0.5 * total
}

/// Total variation for 2D product densities on a tensor Simpson grid.
pub fn tv_2d(
    p: impl Fn(f64, f64) -> f64,
    q: impl Fn(f64, f64) -> f64,
    xr: (f64, f64),
    yr: (f64, f64),
    n: usize,
) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let hx = (xr.1 - xr.0) / n as f64;
    let hy = (yr.1 - yr.0) / n as f64;
    let simpson_w = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut total = 0.0;
    for i in 0..=n {
        let x = xr.0 + i as f64 * hx;
        let wi = simpson_w(i);
        for j in 0..=n {
            let y = yr.0 + j as f64 * hy;
            total += wi * simpson_w(j) * (p(x, y) - q(x, y)).abs();
        }
    }
    0.5 * total * hx * hy / 9.0
}

/// Closed-form total variation between the coefficient density
/// `rho(r) = (15/16)(1-r^2)^2` and its shift by `kappa`:
/// `TV = F(kappa/2) - F(-kappa/2)` with `F` the cdf of `rho`.
pub fn tv_shift_closed_form(kappa: f64) -> f64 {
    let a = 0.5 * kappa.abs().min(2.0);
    let anti = |r: f64| (15.0 / 16.0) * (r - 2.0 * r.powi(3) / 3.0 + r.powi(5) / 5.0);
    let a = a.min(1.0);
    2.0 * anti(a)
}

/// Brute-force epsilon-optimal transport cost for 0/1 threshold costs via
/// max-flow = min-cut over row subsets: the optimal cost equals
/// `1 - min_A [ mu1(A^c) + mu2(N(A)) ]` where `N(A)` collects the columns
/// reachable through zero-cost cells from rows in `A`.
pub fn threshold_cost_mincut(zero_cost: &[Vec<bool>], mu1: &[f64], mu2: &[f64]) -> f64 {
    let nr = mu1.len();
    assert!(nr <= 20, "mincut oracle limited to 2^20 subsets");
    let total1: f64 = mu1.iter().sum();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << nr) {
        let mut cut = 0.0;
        for (i, &w) in mu1.iter().enumerate() {
            if mask & (1 << i) == 0 {
                cut += w;
            }
        }
        let mut cols = vec![false; mu2.len()];
        for i in 0..nr {
            if mask & (1 << i) != 0 {
                for (j, &z) in zero_cost[i].iter().enumerate() {
                    if z {
                        cols[j] = true;
                    }
                }
            }
        }
        cut += cols
            .iter()
            .zip(mu2)
            .filter(|(c, _)| **c)
            .map(|(_, w)| w)
            .sum::<f64>();
        best = best.min(cut);
    }
    total1 - best.min(total1)
}

/// Least-squares exponential fit oracle used to cross-check the production
/// fit on synthetic data (independent implementation, normal equations).
pub fn exp_fit_direct(ks: &[f64], values: &[f64]) -> (f64, f64) {
    let n = ks.len() as f64;
    let sx: f64 = ks.iter().sum();
    let sy: f64 = values.iter().map(|v| v.ln()).sum();
    let sxx: f64 = ks.iter().map(|k| k * k).sum();
    let sxy: f64 = ks.iter().zip(values).map(|(k, v)| k * v.ln()).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (-slope, intercept.exp())
}

/// Kolmogorov-Smirnov statistic of a sample against a cdf.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sample.iter().enumerate() {
        let c = cdf(*x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i as f64 + 1.0) / n - c).abs());
    }
    d
}

/// Asymptotic Kolmogorov distribution tail `P(sqrt(n) D > lambda)`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let lambda = (n as f64).sqrt() * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        p += 2.0 * (-1.0f64).powi(j + 1) * (-2.0 * jf * jf * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> (f64, f64) {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        let fa = i as f64 / a.len() as f64;
        let fb = j as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    (d, ks_p_value(d, ne.round() as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gl_integrates_polynomials_exactly() {
        let (n, w) = gauss_legendre(8);
        let val: f64 = n.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert_relative_eq!(val, 2.0 / 11.0, epsilon = 1e-13);
        let smooth = integrate_gl(|x| (3.0 * x).sin().powi(2), 0.0, 1.0, 4, 32);
        let exact = 0.5 - (6.0f64).sin() / 12.0;
        assert_relative_eq!(smooth, exact, epsilon = 1e-12);
    }

    #[test]
    fn mincut_simple_cases() {
        // identical point masses -> cost 0
        let c = vec![vec![true]];
        assert_relative_eq!(threshold_cost_mincut(&c, &[1.0], &[1.0]), 0.0);
        // disjoint supports -> cost 1
        let c = vec![vec![false]];
        assert_relative_eq!(threshold_cost_mincut(&c, &[1.0], &[1.0]), 1.0);
        // half the mass can be matched
        let c = vec![vec![true, false], vec![false, false]];
        let cost = threshold_cost_mincut(&c, &[0.5, 0.5], &[0.5, 0.5]);
        assert_relative_eq!(cost, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn tv_quadrature_close_to_closed_form() {
        let rho = |r: f64| {
            if r.abs() <= 1.0 {
                (15.0 / 16.0) * (1.0 - r * r).powi(2)
            } else {
                0.0
            }
        };
        for kappa in [0.01, 0.05, 0.1] {
            // split at the sign crossing and at both support edges
            let q = tv_1d(
                |x| rho(x),
                move |x| rho(x - kappa),
                &[-1.0, kappa - 1.0, kappa / 2.0, 1.0, 1.0 + kappa],
            );
            assert_relative_eq!(q, tv_shift_closed_form(kappa), epsilon = 1e-9);
        }
    }
}
