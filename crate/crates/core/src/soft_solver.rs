//! Exact finite-horizon MaxEnt RL.
//!
//! Rewards are credited on the *arrived* state: a step `s_t -> s_{t+1}` earns
//! `r(s_{t+1})`, so a trajectory earns `Σ_{t=1}^T r(s_t)` and the initial state
//! never contributes. The backward pass uses `V_T = 0`.

use crate::mdp::{FiniteMdp, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on `n_states^(T+1)` for [`enumerate_trajectories`].
pub const ENUMERATION_CAP: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("temperature alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("reward has {got} entries, expected {expected}")]
    RewardShape { expected: usize, got: usize },
    #[error("reward entry {index} is not finite ({value})")]
    NonFiniteReward { index: usize, value: f64 },
    #[error("marginals have not been computed for this solution")]
    MissingMarginals,
    #[error("enumeration needs {needed} sequences, above the cap of {cap}")]
    EnumerationCap { needed: f64, cap: usize },
    #[error("need at least one trajectory")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub alpha: f64,
}

impl SolverConfig {
    pub fn new(alpha: f64) -> Result<Self, SolverError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(SolverError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution {
    n_states: usize,
    n_actions: usize,
    /// `policy[t][s * A + a] = π_t(a|s)` for t = 0..T-1.
    pub policy: Vec<Vec<f64>>,
    /// `soft_q[t][s * A + a]` for t = 0..T-1.
    pub soft_q: Vec<Vec<f64>>,
    /// `soft_v[t][s]` for t = 0..T, with `soft_v[T] = 0`.
    pub soft_v: Vec<Vec<f64>>,
    /// `marginals_t[t - 1] = ρ_{θ,t}` for t = 1..T; empty until filled.
    pub marginals_t: Vec<Vec<f64>>,
    /// Time-averaged marginal over t = 1..T; empty until filled.
    pub marginal_avg: Vec<f64>,
}

impl SoftSolution {
    pub fn horizon(&self) -> usize {
        self.policy.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn pi(&self, t: usize, s: usize, a: usize) -> f64 {
        self.policy[t][s * self.n_actions + a]
    }

    pub fn has_marginals(&self) -> bool {
        !self.marginal_avg.is_empty()
    }

    /// State-to-state kernel `M_t(i, j) = Σ_a π_t(a|i) P(j|i,a)`, row-major.
    pub fn state_kernel(&self, mdp: &FiniteMdp, t: usize) -> Vec<f64> {
        let (n_s, n_a) = (self.n_states, self.n_actions);
        let mut kernel = vec![0.0; n_s * n_s];
        for i in 0..n_s {
            let row = &mut kernel[i * n_s..(i + 1) * n_s];
            for a in 0..n_a {
                let w = self.pi(t, i, a);
                if w == 0.0 {
                    continue;
                }
                for (dst, &p) in row.iter_mut().zip(mdp.next_dist(i, a)) {
                    *dst += w * p;
                }
            }
        }
        kernel
    }
}

fn check_reward(mdp: &FiniteMdp, reward: &[f64]) -> Result<(), SolverError> {
    if reward.len() != mdp.n_states() {
        return Err(SolverError::RewardShape {
            expected: mdp.n_states(),
            got: reward.len(),
        });
    }
    if let Some((index, &value)) = reward.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(SolverError::NonFiniteReward { index, value });
    }
    Ok(())
}

/// Soft value iteration for a state reward credited on arrival.
pub fn soft_backward(
    mdp: &FiniteMdp,
    reward: &[f64],
    cfg: &SolverConfig,
) -> Result<SoftSolution, SolverError> {
    check_reward(mdp, reward)?;
    SolverConfig::new(cfg.alpha)?;
    let n_s = mdp.n_states();
    let mut target = vec![0.0; n_s];
    Ok(backward_impl(mdp, cfg.alpha, |_, v_next, s, a| {
        // Σ_{s'} P(s'|s,a) (r(s') + V_{t+1}(s')), target cached per t.
        if s == 0 && a == 0 {
            for (dst, (r, v)) in target.iter_mut().zip(reward.iter().zip(v_next)) {
                *dst = r + v;
            }
        }
        dot(mdp.next_dist(s, a), &target)
    }))
}

/// Soft value iteration for a time-indexed transition reward `R_t(s, s')`.
pub fn soft_backward_with<F>(
    mdp: &FiniteMdp,
    cfg: &SolverConfig,
    step_reward: F,
) -> Result<SoftSolution, SolverError>
where
    F: Fn(usize, usize, usize) -> f64,
{
    SolverConfig::new(cfg.alpha)?;
    let mut non_finite = None;
    let sol = backward_impl(mdp, cfg.alpha, |t, v_next, s, a| {
        let mut q = 0.0;
        for (next, &p) in mdp.next_dist(s, a).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let r = step_reward(t, s, next);
            if !r.is_finite() && non_finite.is_none() {
                non_finite = Some((next, r));
            }
            q += p * (r + v_next[next]);
        }
        q
    });
    if let Some((index, value)) = non_finite {
        return Err(SolverError::NonFiniteReward { index, value });
    }
    Ok(sol)
}

fn backward_impl<F>(mdp: &FiniteMdp, alpha: f64, mut q_of: F) -> SoftSolution
where
    F: FnMut(usize, &[f64], usize, usize) -> f64,
{
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut soft_v = vec![vec![0.0; n_s]; horizon + 1];
    let mut soft_q = vec![vec![0.0; n_s * n_a]; horizon];
    let mut policy = vec![vec![0.0; n_s * n_a]; horizon];
    for t in (0..horizon).rev() {
        let (head, tail) = soft_v.split_at_mut(t + 1);
        let v_next = &tail[0];
        let v_t = &mut head[t];
        let q_t = &mut soft_q[t];
        let pi_t = &mut policy[t];
        for s in 0..n_s {
            for a in 0..n_a {
                q_t[s * n_a + a] = q_of(t, v_next, s, a);
            }
            let q_row = &q_t[s * n_a..(s + 1) * n_a];
            let q_max = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = q_row.iter().map(|q| ((q - q_max) / alpha).exp()).sum();
            let v = q_max + alpha * z.ln();
            v_t[s] = v;
            let pi_row = &mut pi_t[s * n_a..(s + 1) * n_a];
            for (p, q) in pi_row.iter_mut().zip(q_row) {
                *p = ((q - q_max) / alpha).exp() / z;
            }
        }
    }
    SoftSolution {
        n_states: n_s,
        n_actions: n_a,
        policy,
        soft_q,
        soft_v,
        marginals_t: Vec::new(),
        marginal_avg: Vec::new(),
    }
}

/// Fills `marginals_t` and `marginal_avg` by pushing `ρ0` through the policy.
pub fn forward_marginals(mdp: &FiniteMdp, sol: &mut SoftSolution) {
    let (n_s, horizon) = (mdp.n_states(), sol.horizon());
    let mut current = mdp.init_dist().to_vec();
    let mut marginals = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let kernel = sol.state_kernel(mdp, t);
        current = push_forward(&current, &kernel, n_s);
        marginals.push(current.clone());
    }
    let mut avg = vec![0.0; n_s];
    for m in &marginals {
        for (a, p) in avg.iter_mut().zip(m) {
            *a += p;
        }
    }
    for a in &mut avg {
        *a /= horizon as f64;
    }
    sol.marginals_t = marginals;
    sol.marginal_avg = avg;
}

/// Backward pass followed by the forward marginal pass.
pub fn solve(
    mdp: &FiniteMdp,
    reward: &[f64],
    cfg: &SolverConfig,
) -> Result<SoftSolution, SolverError> {
    let mut sol = soft_backward(mdp, reward, cfg)?;
    forward_marginals(mdp, &mut sol);
    Ok(sol)
}

pub(crate) fn push_forward(dist: &[f64], kernel: &[f64], n_s: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_s];
    for (i, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, &k) in out.iter_mut().zip(&kernel[i * n_s..(i + 1) * n_s]) {
            *o += p * k;
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Joint tables `ρ(s_t = i, s_{t'} = j)` for `1 ≤ t ≤ t' ≤ T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMarginals {
    horizon: usize,
    n_states: usize,
    tables: Vec<f64>,
}

impl PairwiseMarginals {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn offset(&self, t: usize, t_later: usize) -> usize {
        assert!(1 <= t && t <= t_later && t_later <= self.horizon);
        // Pairs are stored by t, then by t' = t..T.
        let before: usize = (1..t).map(|k| self.horizon - k + 1).sum();
        (before + (t_later - t)) * self.n_states * self.n_states
    }

    /// Row-major `S x S` table for times `t ≤ t_later` (1-based).
    pub fn table(&self, t: usize, t_later: usize) -> &[f64] {
        let off = self.offset(t, t_later);
        &self.tables[off..off + self.n_states * self.n_states]
    }

    /// `ρ(s_t = i, s_{t'} = j)` for any ordering of the two times.
    pub fn joint(&self, t1: usize, i: usize, t2: usize, j: usize) -> f64 {
        if t1 <= t2 {
            self.table(t1, t2)[i * self.n_states + j]
        } else {
            self.table(t2, t1)[j * self.n_states + i]
        }
    }

    /// `E[(Σ_t x(s_t)) (Σ_t' y(s_t'))]` over the agent's trajectory law.
    pub fn cross_moment(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.n_states;
        let mut total = 0.0;
        for t in 1..=self.horizon {
            for t2 in t..=self.horizon {
                let tab = self.table(t, t2);
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let p = tab[i * n + j];
                        if p != 0.0 {
                            acc += p * (x[i] * y[j] + if t2 > t { y[i] * x[j] } else { 0.0 });
                        }
                    }
                }
                total += acc;
            }
        }
        total
    }
}

pub fn pairwise_marginals(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
) -> Result<PairwiseMarginals, SolverError> {
    if !sol.has_marginals() {
        return Err(SolverError::MissingMarginals);
    }
    let (n_s, horizon) = (mdp.n_states(), sol.horizon());
    // Kernel from s_k to s_{k+1} uses π_k, k = 1..T-1.
    let kernels: Vec<Vec<f64>> = (0..horizon).map(|k| sol.state_kernel(mdp, k)).collect();
    let mut tables = Vec::with_capacity(horizon * (horizon + 1) / 2 * n_s * n_s);
    for t in 1..=horizon {
        let mut joint = vec![0.0; n_s * n_s];
        for (i, &p) in sol.marginals_t[t - 1].iter().enumerate() {
            joint[i * n_s + i] = p;
        }
        tables.extend_from_slice(&joint);
        for k in t..horizon {
            let kernel = &kernels[k];
            let mut next = vec![0.0; n_s * n_s];
            for i in 0..n_s {
                let src = &joint[i * n_s..(i + 1) * n_s];
                let dst = &mut next[i * n_s..(i + 1) * n_s];
                for (m, &p) in src.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (d, &kv) in dst.iter_mut().zip(&kernel[m * n_s..(m + 1) * n_s]) {
                        *d += p * kv;
                    }
                }
            }
            joint = next;
            tables.extend_from_slice(&joint);
        }
    }
    Ok(PairwiseMarginals {
        horizon,
        n_states: n_s,
        tables,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Empirical time-averaged marginal over t = 1..T.
    pub fn empirical_marginal(&self, n_states: usize) -> Vec<f64> {
        let mut counts = vec![0.0; n_states];
        let mut total = 0.0;
        for traj in &self.trajectories {
            for &s in traj.visited() {
                counts[s] += 1.0;
                total += 1.0;
            }
        }
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        counts
    }

    /// All visited states (t ≥ 1), in trajectory order.
    pub fn visited_states(&self) -> Vec<usize> {
        self.trajectories
            .iter()
            .flat_map(|t| t.visited().iter().copied())
            .collect()
    }
}

#[inline]
pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last index with nonzero mass.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Rolls out `n` trajectories. Trajectory `i` draws from its own ChaCha
/// stream, so the batch does not depend on how the work is scheduled.
pub fn sample_trajectories(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch, SolverError> {
    if n == 0 {
        return Err(SolverError::EmptyBatch);
    }
    let (n_a, horizon) = (mdp.n_actions(), sol.horizon());
    let trajectories = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut s = sample_categorical(&mut rng, mdp.init_dist());
            let mut states = Vec::with_capacity(horizon + 1);
            states.push(s);
            for t in 0..horizon {
                let a = sample_categorical(&mut rng, &sol.policy[t][s * n_a..(s + 1) * n_a]);
                s = sample_categorical(&mut rng, mdp.next_dist(s, a));
                states.push(s);
            }
            Trajectory::new(states)
        })
        .collect();
    Ok(TrajectoryBatch { trajectories, seed })
}

/// Every positive-probability state sequence with its probability under the
/// soft-optimal policy (actions marginalized). Test oracle only.
pub fn enumerate_trajectories(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
) -> Result<Vec<(Trajectory, f64)>, SolverError> {
    enumerate_trajectories_capped(mdp, sol, ENUMERATION_CAP)
}

pub fn enumerate_trajectories_capped(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    cap: usize,
) -> Result<Vec<(Trajectory, f64)>, SolverError> {
    let (n_s, horizon) = (mdp.n_states(), sol.horizon());
    let needed = (n_s as f64).powi(horizon as i32 + 1);
    if needed > cap as f64 {
        return Err(SolverError::EnumerationCap { needed, cap });
    }
    let kernels: Vec<Vec<f64>> = (0..horizon).map(|k| sol.state_kernel(mdp, k)).collect();
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(horizon + 1);
    for (s0, &p0) in mdp.init_dist().iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        prefix.push(s0);
        extend(&kernels, n_s, horizon, &mut prefix, p0, &mut out);
        prefix.pop();
    }
    Ok(out)
}

fn extend(
    kernels: &[Vec<f64>],
    n_s: usize,
    horizon: usize,
    prefix: &mut Vec<usize>,
    prob: f64,
    out: &mut Vec<(Trajectory, f64)>,
) {
    let t = prefix.len() - 1;
    if t == horizon {
        out.push((Trajectory::new(prefix.clone()), prob));
        return;
    }
    let s = prefix[t];
    for next in 0..n_s {
        let p = kernels[t][s * n_s + next];
        if p == 0.0 {
            continue;
        }
        prefix.push(next);
        extend(kernels, n_s, horizon, prefix, prob * p, out);
        prefix.pop();
    }
}
