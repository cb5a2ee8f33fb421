//! Evaluation metrics: exact tabular KL, a k-nearest-neighbour KL estimator
//! for 2-D samples, and expected return under a reference reward.

use crate::divergence::DENSITY_FLOOR;
use crate::soft_solver::{SoftSolution, SolverError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K: usize = 3;
const DISTANCE_JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("kNN estimate needs more than {k} samples from p and at least {k} from q (got {n_p}, {n_q})")]
    InsufficientSamples { k: usize, n_p: usize, n_q: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("length mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    Exact,
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub method: KlMethod,
    pub k: usize,
    pub n_p: usize,
    pub n_q: usize,
}

/// `Σ p ln(p / q)` with `q` floored where `p > 0`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::Shape(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(DENSITY_FLOOR)).ln())
        .sum())
}

/// Points sorted by x for k-nearest-neighbour queries.
struct SortedPoints {
    points: Vec<[f64; 2]>,
    /// Original index of each sorted point.
    order: Vec<usize>,
}

impl SortedPoints {
    fn new(points: &[[f64; 2]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
        Self {
            points: order.iter().map(|&i| points[i]).collect(),
            order,
        }
    }

    /// Distance to the k-th nearest point, skipping original index `skip`.
    fn kth_distance(&self, query: [f64; 2], k: usize, skip: Option<usize>) -> f64 {
        // Max-heap of squared distances, kept small by linear insertion.
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let start = self.points.partition_point(|p| p[0] < query[0]);
        let consider = |idx: usize, best: &mut Vec<f64>| {
            if Some(self.order[idx]) == skip {
                return;
            }
            let p = self.points[idx];
            let d2 = (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2);
            if best.len() < k {
                let pos = best.partition_point(|&b| b <= d2);
                best.insert(pos, d2);
            } else if d2 < best[k - 1] {
                let pos = best.partition_point(|&b| b <= d2);
                best.insert(pos, d2);
                best.truncate(k);
            }
        };
        let bound = |best: &Vec<f64>| {
            if best.len() < k {
                f64::INFINITY
            } else {
                best[k - 1]
            }
        };
        let (mut lo, mut hi) = (start, start);
        loop {
            let left_open = lo > 0;
            let right_open = hi < self.points.len();
            if !left_open && !right_open {
                break;
            }
            let dl = if left_open {
                (query[0] - self.points[lo - 1][0]).powi(2)
            } else {
                f64::INFINITY
            };
            let dr = if right_open {
                (self.points[hi][0] - query[0]).powi(2)
            } else {
                f64::INFINITY
            };
            if dl.min(dr) > bound(&best) {
                break;
            }
            if dl <= dr {
                lo -= 1;
                consider(lo, &mut best);
            } else {
                consider(hi, &mut best);
                hi += 1;
            }
        }
        best[k - 1].sqrt()
    }
}

/// Kozachenko–Leonenko estimate of `KL(p ‖ q)` from 2-D samples:
/// `(d/n) Σ_i ln(ν_k(i) / ρ_k(i)) + ln(m / (n - 1))`.
pub fn knn_kl(
    samples_p: &[[f64; 2]],
    samples_q: &[[f64; 2]],
    k: usize,
) -> Result<KlEstimate, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let (n, m) = (samples_p.len(), samples_q.len());
    if n <= k || m < k {
        return Err(EvalError::InsufficientSamples { k, n_p: n, n_q: m });
    }
    let within = SortedPoints::new(samples_p);
    let across = SortedPoints::new(samples_q);
    let dim = 2.0;
    let log_sum: f64 = samples_p
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let rho = within.kth_distance(x, k, Some(i)) + DISTANCE_JITTER;
            let nu = across.kth_distance(x, k, None) + DISTANCE_JITTER;
            (nu / rho).ln()
        })
        .sum();
    let value = dim / n as f64 * log_sum + (m as f64 / (n as f64 - 1.0)).ln();
    Ok(KlEstimate {
        value,
        method: KlMethod::Knn,
        k,
        n_p: n,
        n_q: m,
    })
}

/// Maps visited states to their coordinates plus seeded uniform jitter of
/// half a cell in each direction.
pub fn jittered_coords(
    coords: &[[f64; 2]],
    states: &[usize],
    cell_width: f64,
    seed: u64,
) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 * cell_width;
    states
        .iter()
        .map(|&s| {
            let c = coords[s];
            [
                c[0] + rng.random_range(-half..half),
                c[1] + rng.random_range(-half..half),
            ]
        })
        .collect()
}

/// Exact expected undiscounted return `Σ_{t=1}^T Σ_s ρ_t(s) r(s)`.
pub fn policy_return(sol: &SoftSolution, gt_reward: &[f64]) -> Result<f64, EvalError> {
    if !sol.has_marginals() {
        return Err(SolverError::MissingMarginals.into());
    }
    if gt_reward.len() != sol.n_states() {
        return Err(EvalError::Shape(gt_reward.len(), sol.n_states()));
    }
    Ok(sol
        .marginals_t
        .iter()
        .map(|rho| rho.iter().zip(gt_reward).map(|(p, r)| p * r).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::testing::{chain3, random_mdp};
    use crate::soft_solver::{solve, SolverConfig};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::LN_2;

    fn gaussian(n: usize, mean: [f64; 2], seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [mean[0] + a, mean[1] + b]
            })
            .collect()
    }

    fn brute_kth(points: &[[f64; 2]], q: [f64; 2], k: usize, skip: Option<usize>) -> f64 {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    }

    #[test]
    fn exact_kl_examples() {
        assert_eq!(exact_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let forward = exact_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((forward - LN_2).abs() < 1e-15);
        let backward = exact_kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(backward > 10.0 && (backward - forward).abs() > 1.0);
    }

    #[test]
    fn neighbour_search_matches_brute_force() {
        let p = gaussian(300, [0.0, 0.0], 1);
        let q = gaussian(200, [0.5, 0.0], 2);
        let sp = SortedPoints::new(&p);
        let sq = SortedPoints::new(&q);
        for (i, &x) in p.iter().enumerate().step_by(7) {
            assert_eq!(sp.kth_distance(x, 3, Some(i)), brute_kth(&p, x, 3, Some(i)));
            assert_eq!(sq.kth_distance(x, 3, None), brute_kth(&q, x, 3, None));
        }
    }

    #[test]
    fn knn_identical_distributions() {
        let p = gaussian(5000, [0.0, 0.0], 10);
        let q = gaussian(5000, [0.0, 0.0], 11);
        let est = knn_kl(&p, &q, 3).unwrap();
        assert!(est.value.abs() < 0.05, "{}", est.value);
        assert_eq!((est.n_p, est.n_q, est.k), (5000, 5000, 3));
    }

    #[test]
    fn knn_shifted_gaussians() {
        let mut values: Vec<f64> = (0..5)
            .map(|seed| {
                let p = gaussian(10_000, [0.0, 0.0], 100 + seed);
                let q = gaussian(10_000, [1.0, 0.0], 200 + seed);
                knn_kl(&p, &q, 3).unwrap().value
            })
            .collect();
        values.sort_by(f64::total_cmp);
        assert!((values[2] - 0.5).abs() < 0.08, "median {}", values[2]);
    }

    #[test]
    fn knn_rejects_small_samples() {
        let p = gaussian(3, [0.0, 0.0], 0);
        assert!(matches!(
            knn_kl(&p, &p, 3),
            Err(EvalError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn jitter_stays_in_cell() {
        let coords = [[0.5, 0.5], [1.5, 0.5]];
        let pts = jittered_coords(&coords, &[0, 1, 1, 0], 1.0, 3);
        for (p, s) in pts.iter().zip([0, 1, 1, 0]) {
            assert!((p[0] - coords[s][0]).abs() <= 0.5 && (p[1] - coords[s][1]).abs() <= 0.5);
        }
        assert_eq!(pts, jittered_coords(&coords, &[0, 1, 1, 0], 1.0, 3));
    }

    #[test]
    fn policy_return_examples() {
        let mdp = chain3(2);
        let sol = solve(&mdp, &[0.0, 1.0, 2.0], &SolverConfig::default()).unwrap();
        assert!((policy_return(&sol, &[0.0, 1.0, 2.0]).unwrap() - 3.0).abs() < 1e-12);
        let mdp = random_mdp(4, 2, 5, 1);
        let sol = solve(&mdp, &[0.3, -0.2, 0.0, 1.0], &SolverConfig::default()).unwrap();
        assert_eq!(policy_return(&sol, &[0.0; 4]).unwrap(), 0.0);
        assert!((policy_return(&sol, &[1.0; 4]).unwrap() - 5.0).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_kl_nonnegative(raw_p in prop::collection::vec(0.01f64..1.0, 5), raw_q in prop::collection::vec(0.01f64..1.0, 5)) {
            let zp: f64 = raw_p.iter().sum();
            let zq: f64 = raw_q.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / zp).collect();
            let q: Vec<f64> = raw_q.iter().map(|v| v / zq).collect();
            prop_assert!(exact_kl(&p, &q).unwrap() >= -1e-15);
        }

        #[test]
        fn knn_permutation_invariant(seed in 0u64..1000) {
            let p = gaussian(60, [0.0, 0.0], seed);
            let q = gaussian(50, [0.3, 0.1], seed + 1);
            let mut p_rev = p.clone();
            p_rev.reverse();
            let mut q_rot = q.clone();
            q_rot.rotate_left(17);
            let a = knn_kl(&p, &q, 3).unwrap().value;
            let b = knn_kl(&p_rev, &q_rot, 3).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn return_is_linear(seed in 0u64..1000, scale in -3.0f64..3.0) {
            let mdp = random_mdp(3, 2, 4, seed);
            let sol = solve(&mdp, &[0.1, 0.5, -0.4], &SolverConfig::default()).unwrap();
            let r1 = [1.0, -2.0, 0.5];
            let r2 = [0.3, 0.3, 4.0];
            let combo: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| scale * a + b).collect();
            let lhs = policy_return(&sol, &combo).unwrap();
            let rhs = scale * policy_return(&sol, &r1).unwrap() + policy_return(&sol, &r2).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
