//! Discrete optimal transport by the transportation simplex.
//!
//! Solves `min sum pi_ij c_ij` over couplings of two weighted point sets,
//! returning the optimal plan together with the dual potentials, so the
//! Kantorovich duality `primal = dual` can be checked as an exact
//! finite-dimensional identity. Used for the epsilon-optimal cost (0/1
//! threshold costs) and for W1 distances between ensemble clouds.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("support size {0} exceeds the limit {1}")]
    SupportTooLarge(usize, usize),
    #[error("weights invalid: {0}")]
    BadWeights(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("simplex failed to converge after {0} pivots")]
    Stalled(usize),
}

/// Finitely supported probability measure.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, TransportError> {
        if points.len() != weights.len() {
            return Err(TransportError::Dimension(format!(
                "{} points vs {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(TransportError::BadWeights(
                "weights must be non-negative and finite".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TransportError::BadWeights(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        if let Some(d) = points.first().map(|p| p.len()) {
            if points.iter().any(|p| p.len() != d) {
                return Err(TransportError::Dimension(
                    "points have inconsistent dimensions".into(),
                ));
            }
        }
        Ok(DiscreteMeasure { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self, TransportError> {
        let n = points.len();
        let w = vec![1.0 / n as f64; n];
        DiscreteMeasure::new(points, w)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Optimal plan with dual potentials `(u, v)`: `u_i + v_j <= c_ij` with
/// equality on the support, and `sum u_i a_i + sum v_j b_j = primal`.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub plan: Vec<(usize, usize, f64)>,
    pub primal: f64,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
}

impl TransportSolution {
    pub fn dual_value(&self, a: &[f64], b: &[f64]) -> f64 {
        let ra: f64 = self
            .row_potentials
            .iter()
            .zip(a)
            .map(|(u, w)| u * w)
            .sum();
        let rb: f64 = self
            .col_potentials
            .iter()
            .zip(b)
            .map(|(v, w)| v * w)
            .sum();
        ra + rb
    }
}

/// Transportation simplex with Bland's anti-cycling rule.
pub fn solve_transport(
    cost: &DMatrix<f64>,
    a: &[f64],
    b: &[f64],
) -> Result<TransportSolution, TransportError> {
    let (nr, nc) = (a.len(), b.len());
    if cost.nrows() != nr || cost.ncols() != nc {
        return Err(TransportError::Dimension(format!(
            "cost is {}x{}, marginals are {nr}/{nc}",
            cost.nrows(),
            cost.ncols()
        )));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(TransportError::BadWeights(format!(
            "unbalanced marginals: {sa} vs {sb}"
        )));
    }

    // northwest-corner initial basis: exactly nr + nc - 1 cells
    let mut flow = DMatrix::<f64>::zeros(nr, nc);
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(nr + nc - 1);
    let mut ra: Vec<f64> = a.to_vec();
    let mut rb: Vec<f64> = b.to_vec();
    let (mut i, mut j) = (0usize, 0usize);
    while basis.len() < nr + nc - 1 {
        let q = ra[i].min(rb[j]);
        flow[(i, j)] = q;
        basis.push((i, j));
        ra[i] -= q;
        rb[j] -= q;
        if i + 1 < nr && (ra[i] <= rb[j] || j + 1 == nc) {
            i += 1;
        } else if j + 1 < nc {
            j += 1;
        } else {
            break;
        }
    }

    let tol = 1e-12
        * cost
            .iter()
            .fold(1.0f64, |m, c| m.max(c.abs()));
    let max_pivots = 200 * (nr + nc) * (nr + nc);
    let mut pivots = 0usize;
    loop {
        // potentials from the basis tree: u_0 = 0
        let (u, v) = potentials(&basis, cost, nr, nc);
        // Bland: first cell with negative reduced cost in row-major order
        let mut entering = None;
        'outer: for r in 0..nr {
            for c in 0..nc {
                if cost[(r, c)] - u[r] - v[c] < -tol.max(1e-12) && flow[(r, c)] == 0.0 {
                    entering = Some((r, c));
                    break 'outer;
                }
            }
        }
        let Some((er, ec)) = entering else {
            break;
        };
        pivots += 1;
        if pivots > max_pivots {
            return Err(TransportError::Stalled(pivots));
        }
        // unique cycle: path in the basis tree from column ec back to row er
        let cycle = find_cycle(&basis, (er, ec), nr, nc);
        // odd positions in the cycle lose flow
        let mut theta = f64::INFINITY;
        let mut leave = None;
        for (pos, &(r, c)) in cycle.iter().enumerate() {
            if pos % 2 == 1 {
                let f = flow[(r, c)];
                if f < theta - 1e-15 || (f <= theta + 1e-15 && leave.is_none()) {
                    theta = f;
                    leave = Some((r, c));
                }
            }
        }
        // Bland on the leaving side: smallest (r, c) among minimizers
        let mut best: Option<(usize, usize)> = None;
        for (pos, &(r, c)) in cycle.iter().enumerate() {
            if pos % 2 == 1 && (flow[(r, c)] - theta).abs() <= 1e-15 {
                if best.is_none() || (r, c) < best.unwrap() {
                    best = Some((r, c));
                }
            }
        }
        let leave = best.or(leave).expect("cycle has an odd position");
        for (pos, &(r, c)) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                flow[(r, c)] += theta;
            } else {
                flow[(r, c)] -= theta;
            }
        }
        flow[(er, ec)] = theta.max(flow[(er, ec)]);
        basis.retain(|&cell| cell != leave);
        basis.push((er, ec));
        flow[leave] = 0.0;
    }

    let (u, v) = potentials(&basis, cost, nr, nc);
    let mut plan = Vec::new();
    let mut primal = 0.0;
    for r in 0..nr {
        for c in 0..nc {
            if flow[(r, c)] > 0.0 {
                plan.push((r, c, flow[(r, c)]));
                primal += flow[(r, c)] * cost[(r, c)];
            }
        }
    }
    Ok(TransportSolution {
        plan,
        primal,
        row_potentials: u,
        col_potentials: v,
    })
}

fn potentials(
    basis: &[(usize, usize)],
    cost: &DMatrix<f64>,
    nr: usize,
    nc: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; nr];
    let mut v = vec![f64::NAN; nc];
    u[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for &(r, c) in basis {
            if u[r].is_nan() && !v[c].is_nan() {
                u[r] = cost[(r, c)] - v[c];
                changed = true;
            } else if !u[r].is_nan() && v[c].is_nan() {
                v[c] = cost[(r, c)] - u[r];
                changed = true;
            }
        }
    }
    // disconnected components can only arise transiently; pin them
    for x in u.iter_mut() {
        if x.is_nan() {
            *x = 0.0;
        }
    }
    for x in v.iter_mut() {
        if x.is_nan() {
            *x = 0.0;
        }
    }
    (u, v)
}

/// Alternating cycle starting with the entering cell `(er, ec)`: found as
/// the unique tree path from column node `ec` to row node `er`.
fn find_cycle(
    basis: &[(usize, usize)],
    enter: (usize, usize),
    nr: usize,
    nc: usize,
) -> Vec<(usize, usize)> {
    // nodes: rows 0..nr, cols nr..nr+nc; edges = basis cells
    let n = nr + nc;
    let mut adj: Vec<Vec<(usize, (usize, usize))>> = vec![Vec::new(); n];
    for &(r, c) in basis {
        adj[r].push((nr + c, (r, c)));
        adj[nr + c].push((r, (r, c)));
    }
    // BFS from column node of the entering cell to its row node
    let start = nr + enter.1;
    let goal = enter.0;
    let mut prev: Vec<Option<(usize, (usize, usize))>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        for &(next, cell) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                prev[next] = Some((node, cell));
                queue.push_back(next);
            }
        }
    }
    // walk back: path of basis cells from goal to start
    let mut path_cells = Vec::new();
    let mut node = goal;
    while node != start {
        let (p, cell) = prev[node].expect("basis tree is connected");
        path_cells.push(cell);
        node = p;
    }
    // cycle: entering cell (gets +theta) followed by the tree path, which
    // alternates -,+,-,... by construction
    let mut cycle = vec![enter];
    cycle.extend(path_cells);
    cycle
}

/// Report for the epsilon-optimal cost with the 0/1 threshold cost
/// `d_eps(x, y) = 1 if dist > eps else 0`.
#[derive(Debug, Clone)]
pub struct EpsCostReport {
    pub primal: f64,
    pub dual: f64,
    pub plan: Vec<(usize, usize, f64)>,
}

pub const MAX_SUPPORT: usize = 64;

/// Solve the finite transport program for the threshold cost and return the
/// primal cost together with the Kantorovich dual value.
pub fn epsilon_optimal_cost(
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    eps: f64,
) -> Result<EpsCostReport, TransportError> {
    if mu1.len() > MAX_SUPPORT || mu2.len() > MAX_SUPPORT {
        return Err(TransportError::SupportTooLarge(
            mu1.len().max(mu2.len()),
            MAX_SUPPORT,
        ));
    }
    let cost = DMatrix::from_fn(mu1.len(), mu2.len(), |i, j| {
        if euclidean(&mu1.points[i], &mu2.points[j]) > eps {
            1.0
        } else {
            0.0
        }
    });
    let sol = solve_transport(&cost, &mu1.weights, &mu2.weights)?;
    let dual = sol.dual_value(&mu1.weights, &mu2.weights);
    Ok(EpsCostReport {
        primal: sol.primal,
        dual,
        plan: sol.plan,
    })
}

/// Zero-cost adjacency used by the brute-force min-cut oracle.
pub fn threshold_adjacency(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure, eps: f64) -> Vec<Vec<bool>> {
    (0..mu1.len())
        .map(|i| {
            (0..mu2.len())
                .map(|j| euclidean(&mu1.points[i], &mu2.points[j]) <= eps)
                .collect()
        })
        .collect()
}

/// W1 distance between two discrete measures (Euclidean ground cost).
pub fn w1_distance(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<f64, TransportError> {
    if mu1.len() > MAX_SUPPORT || mu2.len() > MAX_SUPPORT {
        return Err(TransportError::SupportTooLarge(
            mu1.len().max(mu2.len()),
            MAX_SUPPORT,
        ));
    }
    let cost = DMatrix::from_fn(mu1.len(), mu2.len(), |i, j| {
        euclidean(&mu1.points[i], &mu2.points[j])
    });
    Ok(solve_transport(&cost, &mu1.weights, &mu2.weights)?.primal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::threshold_cost_mincut;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_measures_cost_zero() {
        let m = DiscreteMeasure::uniform(vec![vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        for eps in [0.0, 0.5, 2.0] {
            let r = epsilon_optimal_cost(&m, &m, eps).unwrap();
            assert_relative_eq!(r.primal, 0.0, epsilon = 1e-12);
            assert_relative_eq!(r.dual, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_point_threshold() {
        let m1 = DiscreteMeasure::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let m2 = DiscreteMeasure::new(vec![vec![1.0]], vec![1.0]).unwrap();
        assert_relative_eq!(epsilon_optimal_cost(&m1, &m2, 2.0).unwrap().primal, 0.0);
        assert_relative_eq!(epsilon_optimal_cost(&m1, &m2, 0.5).unwrap().primal, 1.0);
    }

    #[test]
    fn weight_validation() {
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![-1.0, 2.0]).is_err());
        let too_many: Vec<Vec<f64>> = (0..65).map(|i| vec![i as f64]).collect();
        let m = DiscreteMeasure::uniform(too_many).unwrap();
        assert!(matches!(
            epsilon_optimal_cost(&m, &m, 1.0),
            Err(TransportError::SupportTooLarge(..))
        ));
    }

    #[test]
    fn random_five_point_vs_mincut_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..50 {
            let n1 = rng.gen_range(2..=5);
            let n2 = rng.gen_range(2..=5);
            let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect()
            };
            let wts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|w| w / s).collect()
            };
            let m1 = DiscreteMeasure::new(pts(&mut rng, n1), wts(&mut rng, n1)).unwrap();
            let m2 = DiscreteMeasure::new(pts(&mut rng, n2), wts(&mut rng, n2)).unwrap();
            let eps = rng.gen_range(0.2..2.0);
            let r = epsilon_optimal_cost(&m1, &m2, eps).unwrap();
            let oracle = threshold_cost_mincut(
                &threshold_adjacency(&m1, &m2, eps),
                &m1.weights,
                &m2.weights,
            );
            assert!(
                (r.primal - oracle).abs() <= 1e-9,
                "case {case}: primal {} vs oracle {oracle}",
                r.primal
            );
            assert!((r.primal - r.dual).abs() <= 1e-9, "case {case}: gap");
        }
    }

    #[test]
    fn w1_matches_1d_cdf_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m1 = DiscreteMeasure::uniform(xs.iter().map(|x| vec![*x]).collect()).unwrap();
            let m2 = DiscreteMeasure::uniform(ys.iter().map(|y| vec![*y]).collect()).unwrap();
            let w1 = w1_distance(&m1, &m2).unwrap();
            // oracle: sorted-coordinate matching is optimal in 1D
            let mut xs = xs;
            let mut ys = ys;
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n as f64;
            assert_relative_eq!(w1, oracle, epsilon = 1e-10, max_relative = 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn plan_has_exact_marginals(
            seed in 0u64..1000,
            n1 in 2usize..7,
            n2 in 2usize..7,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect()
            };
            let wts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|w| w / s).collect()
            };
            let m1 = DiscreteMeasure::new(pts(&mut rng, n1), wts(&mut rng, n1)).unwrap();
            let m2 = DiscreteMeasure::new(pts(&mut rng, n2), wts(&mut rng, n2)).unwrap();
            let cost = DMatrix::from_fn(n1, n2, |i, j| {
                (m1.points[i][0] - m2.points[j][0]).abs()
            });
            let sol = solve_transport(&cost, &m1.weights, &m2.weights).unwrap();
            let mut row = vec![0.0; n1];
            let mut col = vec![0.0; n2];
            for &(i, j, f) in &sol.plan {
                prop_assert!(f >= 0.0);
                row[i] += f;
                col[j] += f;
            }
            for i in 0..n1 {
                prop_assert!((row[i] - m1.weights[i]).abs() <= 1e-10);
            }
            for j in 0..n2 {
                prop_assert!((col[j] - m2.weights[j]).abs() <= 1e-10);
            }
            // dual feasibility and strong duality
            for i in 0..n1 {
                for j in 0..n2 {
                    prop_assert!(
                        sol.row_potentials[i] + sol.col_potentials[j]
                            <= cost[(i, j)] + 1e-9
                    );
                }
            }
            let dual = sol.dual_value(&m1.weights, &m2.weights);
            prop_assert!((sol.primal - dual).abs() <= 1e-9);
        }
    }
}
