//! Reference implementations written directly from the definitions, kept
//! separate from the library so the integration tests compare against
//! something that does not share its code paths.

#![allow(dead_code)]

use firl_core::{FDivKind, FiniteMdp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RefSolution {
    /// `policy[t][s][a]` for t = 0..T-1.
    pub policy: Vec<Vec<Vec<f64>>>,
    /// `marginals[t-1][s]` for t = 1..T.
    pub marginals: Vec<Vec<f64>>,
}

impl RefSolution {
    pub fn average(&self) -> Vec<f64> {
        let n = self.marginals[0].len();
        let horizon = self.marginals.len() as f64;
        (0..n)
            .map(|s| self.marginals.iter().map(|m| m[s]).sum::<f64>() / horizon)
            .collect()
    }
}

/// Soft value iteration with a transition reward `reward(t, s, next)`
/// credited on arrival, followed by the forward recursion.
pub fn ref_solve_with(
    mdp: &FiniteMdp,
    alpha: f64,
    reward: impl Fn(usize, usize, usize) -> f64,
) -> RefSolution {
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut value_next = vec![0.0; n_s];
    let mut policy = vec![vec![vec![0.0; n_a]; n_s]; horizon];
    for t in (0..horizon).rev() {
        let mut value = vec![0.0; n_s];
        for s in 0..n_s {
            let q: Vec<f64> = (0..n_a)
                .map(|a| {
                    (0..n_s)
                        .map(|next| mdp.prob(s, a, next) * (reward(t, s, next) + value_next[next]))
                        .sum()
                })
                .collect();
            let peak = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = q.iter().map(|v| ((v - peak) / alpha).exp()).sum();
            value[s] = peak + alpha * z.ln();
            for a in 0..n_a {
                policy[t][s][a] = ((q[a] - value[s]) / alpha).exp();
            }
        }
        value_next = value;
    }
    let mut dist = mdp.init_dist().to_vec();
    let mut marginals = Vec::with_capacity(horizon);
    for step in policy.iter() {
        let mut next = vec![0.0; n_s];
        for s in 0..n_s {
            for a in 0..n_a {
                let w = dist[s] * step[s][a];
                for (j, slot) in next.iter_mut().enumerate() {
                    *slot += w * mdp.prob(s, a, j);
                }
            }
        }
        marginals.push(next.clone());
        dist = next;
    }
    RefSolution { policy, marginals }
}

pub fn ref_solve(mdp: &FiniteMdp, reward: &[f64], alpha: f64) -> RefSolution {
    ref_solve_with(mdp, alpha, |_, _, next| reward[next])
}

/// `Σ_t Σ_s ρ_t(s) r(s)`.
pub fn ref_return(sol: &RefSolution, reward: &[f64]) -> f64 {
    sol.marginals
        .iter()
        .map(|m| m.iter().zip(reward).map(|(p, r)| p * r).sum::<f64>())
        .sum()
}

/// `D_f(P ‖ Q)` written out per divergence. Zero-mass conventions:
/// `0 ln 0 = 0`, and FKL/JS ignore states where both vanish.
pub fn ref_divergence(kind: FDivKind, p: &[f64], q: &[f64]) -> f64 {
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    p.iter()
        .zip(q)
        .map(|(&pe, &qa)| match kind {
            FDivKind::Fkl => xlogy(pe, pe / qa),
            FDivKind::Rkl => xlogy(qa, qa / pe),
            FDivKind::Js => {
                let m = 0.5 * (pe + qa);
                xlogy(pe, pe / m) + xlogy(qa, qa / m)
            }
        })
        .sum()
}

/// Covariance of `Σ_{t≥1} x(s_t)` with the visit count of every state,
/// by walking every state sequence under the policy.
pub fn ref_enumerated_covariance(mdp: &FiniteMdp, policy: &[Vec<Vec<f64>>], x: &[f64]) -> Vec<f64> {
    let n_s = mdp.n_states();
    let horizon = policy.len();
    let mut moments = vec![0.0; n_s];
    let mut mean_counts = vec![0.0; n_s];
    let mut mean_x = 0.0;
    let mut stack: Vec<(Vec<usize>, f64)> = (0..n_s)
        .filter(|&s| mdp.init_dist()[s] > 0.0)
        .map(|s| (vec![s], mdp.init_dist()[s]))
        .collect();
    while let Some((seq, prob)) = stack.pop() {
        let t = seq.len() - 1;
        if t == horizon {
            let visited = &seq[1..];
            let total_x: f64 = visited.iter().map(|&s| x[s]).sum();
            mean_x += prob * total_x;
            for &s in visited {
                mean_counts[s] += prob;
                moments[s] += prob * total_x;
            }
            continue;
        }
        let s = seq[t];
        for next in 0..n_s {
            let step: f64 = (0..mdp.n_actions())
                .map(|a| policy[t][s][a] * mdp.prob(s, a, next))
                .sum();
            if step > 0.0 {
                let mut longer = seq.clone();
                longer.push(next);
                stack.push((longer, prob * step));
            }
        }
    }
    (0..n_s)
        .map(|j| moments[j] - mean_x * mean_counts[j])
        .collect()
}

/// Random dense dynamics and a spread-out initial distribution.
pub fn stochastic_mdp(n_states: usize, n_actions: usize, horizon: usize, seed: u64) -> FiniteMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        transitions.extend(row.iter().map(|p| p / z));
    }
    let init: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.1..1.0)).collect();
    let z: f64 = init.iter().sum();
    let init = init.iter().map(|p| p / z).collect();
    let coords = (0..n_states).map(|s| [s as f64, 0.0]).collect();
    FiniteMdp::new(n_states, n_actions, transitions, init, horizon, coords).unwrap()
}

/// One random successor per (state, action) and one start state.
pub fn deterministic_mdp(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    seed: u64,
) -> FiniteMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut transitions = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        transitions[sa * n_states + rng.random_range(0..n_states)] = 1.0;
    }
    let mut init = vec![0.0; n_states];
    init[rng.random_range(0..n_states)] = 1.0;
    let coords = (0..n_states).map(|s| [s as f64, 0.0]).collect();
    FiniteMdp::new(n_states, n_actions, transitions, init, horizon, coords).unwrap()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}
