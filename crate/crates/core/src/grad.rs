//! Reward gradients of the state-marginal f-divergence and the baselines.
//!
//! Every estimator reduces to per-state coefficients `c(j)` with
//! `∇_θ = Σ_j c(j) ∇_θ r(j)`; the coefficients are kept in the report so
//! callers can inspect them or reuse them across parameter steps.

use crate::density_ratio::{importance_weights, RatioError, RatioEstimator};
use crate::divergence::{
    divergence_exact, h_f_clipped, h_f_unchecked, DivergenceError, ExpertDensity, FDivKind,
    DENSITY_FLOOR,
};
use crate::mdp::{FiniteMdp, MdpError, Trajectory};
use crate::reward::{FeatureMap, RewardError, RewardModel};
use crate::soft_solver::{solve, SoftSolution, SolverConfig, SolverError, TrajectoryBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Parameter count above which the finite-difference oracle refuses to run.
pub const FD_PARAM_CAP: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Ratio(#[from] RatioError),
    #[error("{0} needs a normalized expert density")]
    Unnormalized(FDivKind),
    #[error(
        "expert density is zero at state {0} where the agent has mass; the divergence is infinite"
    )]
    InfiniteDivergence(usize),
    #[error("covariance needs at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("trajectory {index} has horizon {got}, expected {expected}")]
    HorizonMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("expert density has {got} states, model has {expected}")]
    Shape { expected: usize, got: usize },
    #[error("finite-difference oracle is capped at {cap} parameters, model has {got}")]
    OracleCap { cap: usize, got: usize },
    #[error("importance-sampled MaxEnt IRL needs an agent density model")]
    MissingDensityModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    Mc,
    Mixture,
    Ipm,
    Maxentirl,
    FdOracle,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Mc => "mc",
            EstimatorKind::Mixture => "mixture",
            EstimatorKind::Ipm => "ipm",
            EstimatorKind::Maxentirl => "maxentirl",
            EstimatorKind::FdOracle => "fd_oracle",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(EstimatorKind::Exact),
            "mc" => Ok(EstimatorKind::Mc),
            "mixture" => Ok(EstimatorKind::Mixture),
            "ipm" => Ok(EstimatorKind::Ipm),
            "maxentirl" => Ok(EstimatorKind::Maxentirl),
            "fd_oracle" | "fd" => Ok(EstimatorKind::FdOracle),
            other => Err(format!(
                "unknown estimator '{other}' (expected exact, mc, mixture, ipm, maxentirl or fd_oracle)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDiagnostics {
    /// Range of `h_f` (or the critic) over the states that enter the estimate.
    pub score_min: f64,
    pub score_max: f64,
    /// `Σ_j c(j) ∇r(j)` coefficients, already scaled.
    pub state_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// Descent direction of the divergence for the f-divergence and IPM
    /// estimators; ascent direction of the likelihood for MaxEnt IRL.
    pub grad: Vec<f64>,
    pub estimator: EstimatorKind,
    /// Trajectories used; zero for exact estimators.
    pub n_samples: usize,
    pub diagnostics: GradDiagnostics,
}

fn check_expert(kind: FDivKind, rho_e: &ExpertDensity, n_states: usize) -> Result<(), GradError> {
    if rho_e.len() != n_states {
        return Err(GradError::Shape {
            expected: n_states,
            got: rho_e.len(),
        });
    }
    if kind != FDivKind::Rkl && !rho_e.is_normalized() {
        return Err(GradError::Unnormalized(kind));
    }
    Ok(())
}

/// Per-state `h_f(ρ_E / ρ_θ)` under the exact marginal. States with no agent
/// mass never enter a covariance and get zero.
fn exact_scores(kind: FDivKind, rho_e: &ExpertDensity, rho: &[f64]) -> Result<Vec<f64>, GradError> {
    rho_e
        .values()
        .iter()
        .zip(rho)
        .enumerate()
        .map(|(s, (&e, &a))| {
            if a <= 0.0 {
                return Ok(0.0);
            }
            let u = e / a.max(DENSITY_FLOOR);
            if u > 0.0 {
                Ok(h_f_unchecked(kind, u))
            } else {
                match kind {
                    FDivKind::Rkl => Err(GradError::InfiniteDivergence(s)),
                    // lim_{u→0} h(u) = 0 for FKL and JS.
                    _ => Ok(0.0),
                }
            }
        })
        .collect()
}

/// `c(j) = Cov(Σ_t x(s_t), Σ_t 1{s_t = j})` under the solved policy, in
/// O(T·S²) without materializing the pairwise marginals.
///
/// `F_t(j) = Σ_{t0≤t} E[x(s_{t0}) 1{s_t=j}]` is pushed forward through the
/// policy kernels and `G_t(j) = E[Σ_{t1>t} x(s_{t1}) | s_t = j]` is pulled
/// backward; each `(t0, t1)` pair is counted exactly once.
pub fn visitation_covariance(mdp: &FiniteMdp, sol: &SoftSolution, x: &[f64]) -> Vec<f64> {
    let n_s = mdp.n_states();
    let horizon = sol.horizon();
    let kernels: Vec<Vec<f64>> = (1..horizon).map(|t| sol.state_kernel(mdp, t)).collect();
    let rho_t = &sol.marginals_t;

    // Backward: g[t-1] = G_t for t = 1..T.
    let mut g = vec![vec![0.0; n_s]; horizon];
    for t in (1..horizon).rev() {
        let kernel = &kernels[t - 1];
        let (head, tail) = g.split_at_mut(t);
        let next = &tail[0];
        let cur = &mut head[t - 1];
        for i in 0..n_s {
            let row = &kernel[i * n_s..(i + 1) * n_s];
            cur[i] = row
                .iter()
                .enumerate()
                .map(|(j, &m)| m * (x[j] + next[j]))
                .sum();
        }
    }

    let mut weights = vec![0.0; n_s];
    let mut forward = vec![0.0; n_s];
    let mut mean_total = 0.0;
    for t in 1..=horizon {
        if t > 1 {
            let kernel = &kernels[t - 2];
            let mut pushed = vec![0.0; n_s];
            for i in 0..n_s {
                let fi = forward[i];
                if fi == 0.0 {
                    continue;
                }
                for (p, &m) in pushed.iter_mut().zip(&kernel[i * n_s..(i + 1) * n_s]) {
                    *p += fi * m;
                }
            }
            forward = pushed;
        }
        let rho = &rho_t[t - 1];
        for j in 0..n_s {
            forward[j] += rho[j] * x[j];
            weights[j] += forward[j] + rho[j] * g[t - 1][j];
        }
        mean_total += rho.iter().zip(x).map(|(r, v)| r * v).sum::<f64>();
    }
    let visits = &sol.marginal_avg;
    let horizon_f = horizon as f64;
    weights
        .iter()
        .zip(visits)
        .map(|(w, r)| w - mean_total * horizon_f * r)
        .collect()
}

fn score_range(scores: impl Iterator<Item = f64>) -> (f64, f64) {
    scores.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Exact `∇_θ D_f(ρ_E ‖ ρ_θ) = (1/(αT)) Cov(Σ_t h_f(u(s_t)), Σ_t ∇r(s_t))`.
///
/// `h_f` is centered at its `ρ_θ`-mean before contraction; the covariance is
/// unchanged analytically and the result no longer depends on additive
/// shifts such as the `-ln c` produced by a scaled RKL expert.
pub fn analytic_grad_exact(
    mdp: &FiniteMdp,
    model: &RewardModel,
    cfg: &SolverConfig,
    kind: FDivKind,
    rho_e: &ExpertDensity,
) -> Result<GradReport, GradError> {
    check_expert(kind, rho_e, mdp.n_states())?;
    let sol = solve(mdp, &model.rewards(), cfg)?;
    analytic_grad_exact_from(mdp, &sol, model, cfg, kind, rho_e)
}

/// [`analytic_grad_exact`] reusing a solution already computed for `model`.
pub fn analytic_grad_exact_from(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    model: &RewardModel,
    cfg: &SolverConfig,
    kind: FDivKind,
    rho_e: &ExpertDensity,
) -> Result<GradReport, GradError> {
    check_expert(kind, rho_e, mdp.n_states())?;
    if !sol.has_marginals() {
        return Err(SolverError::MissingMarginals.into());
    }
    let rho = &sol.marginal_avg;
    let scores = exact_scores(kind, rho_e, rho)?;
    let mean: f64 = scores.iter().zip(rho).map(|(h, r)| h * r).sum();
    let centered: Vec<f64> = scores.iter().map(|h| h - mean).collect();
    let scale = 1.0 / (cfg.alpha * sol.horizon() as f64);
    let state_weights: Vec<f64> = visitation_covariance(mdp, sol, &centered)
        .into_iter()
        .map(|c| c * scale)
        .collect();
    let (score_min, score_max) = score_range(
        scores
            .iter()
            .zip(rho)
            .filter(|(_, r)| **r > 0.0)
            .map(|(h, _)| *h),
    );
    Ok(GradReport {
        grad: model.weighted_grad(&state_weights),
        estimator: EstimatorKind::Exact,
        n_samples: 0,
        diagnostics: GradDiagnostics {
            score_min,
            score_max,
            state_weights,
        },
    })
}

fn check_horizons(trajs: &[&Trajectory], horizon: usize) -> Result<(), GradError> {
    for (index, t) in trajs.iter().enumerate() {
        let got = t.states.len().saturating_sub(1);
        if got != horizon {
            return Err(GradError::HorizonMismatch {
                index,
                expected: horizon,
                got,
            });
        }
    }
    Ok(())
}

/// Unbiased sample covariance `c(j)` between per-trajectory score sums and
/// visit counts. Since `Σ_i (A_i - Ā) = 0`, the count mean drops out.
fn sample_covariance(trajs: &[&Trajectory], score: &[f64], n_states: usize) -> Vec<f64> {
    let n = trajs.len() as f64;
    let sums: Vec<f64> = trajs
        .iter()
        .map(|t| t.visited().iter().map(|&s| score[s]).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / n;
    let mut weights = vec![0.0; n_states];
    for (t, a) in trajs.iter().zip(&sums) {
        let dev = a - mean;
        for &s in t.visited() {
            weights[s] += dev;
        }
    }
    weights.iter_mut().for_each(|w| *w /= n - 1.0);
    weights
}

fn sampled_report(
    trajs: &[&Trajectory],
    score: &[f64],
    model: &RewardModel,
    scale: f64,
    estimator: EstimatorKind,
) -> GradReport {
    let n_states = model.n_states();
    let state_weights: Vec<f64> = sample_covariance(trajs, score, n_states)
        .into_iter()
        .map(|c| c * scale)
        .collect();
    let (score_min, score_max) = score_range(
        trajs
            .iter()
            .flat_map(|t| t.visited().iter().map(|&s| score[s])),
    );
    GradReport {
        grad: model.weighted_grad(&state_weights),
        estimator,
        n_samples: trajs.len(),
        diagnostics: GradDiagnostics {
            score_min,
            score_max,
            state_weights,
        },
    }
}

fn batch_horizon(batch: &TrajectoryBatch) -> Result<usize, GradError> {
    let first = batch
        .trajectories
        .first()
        .ok_or(GradError::TooFewTrajectories(0))?;
    Ok(first.states.len().saturating_sub(1))
}

/// Monte Carlo covariance estimate from agent rollouts.
pub fn analytic_grad_mc(
    batch: &TrajectoryBatch,
    model: &RewardModel,
    alpha: f64,
    kind: FDivKind,
    ratio: &RatioEstimator,
) -> Result<GradReport, GradError> {
    SolverConfig::new(alpha)?;
    if batch.len() < 2 {
        return Err(GradError::TooFewTrajectories(batch.len()));
    }
    let horizon = batch_horizon(batch)?;
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    check_horizons(&trajs, horizon)?;
    let score: Vec<f64> = (0..model.n_states())
        .map(|s| h_f_clipped(kind, ratio.ratio(s)))
        .collect();
    let scale = 1.0 / (alpha * horizon as f64);
    Ok(sampled_report(
        &trajs,
        &score,
        model,
        scale,
        EstimatorKind::Mc,
    ))
}

/// Covariance over the pooled agent and expert batches, the expert side
/// resampled with replacement to the agent batch size.
pub fn analytic_grad_mixture(
    agent: &TrajectoryBatch,
    expert: &[Trajectory],
    model: &RewardModel,
    alpha: f64,
    kind: FDivKind,
    ratio: &RatioEstimator,
    seed: u64,
) -> Result<GradReport, GradError> {
    SolverConfig::new(alpha)?;
    if agent.len() < 2 {
        return Err(GradError::TooFewTrajectories(agent.len()));
    }
    if expert.is_empty() {
        return Err(GradError::TooFewTrajectories(0));
    }
    let horizon = batch_horizon(agent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pooled: Vec<&Trajectory> = agent.trajectories.iter().collect();
    for _ in 0..agent.len() {
        pooled.push(&expert[rng.random_range(0..expert.len())]);
    }
    check_horizons(&pooled, horizon)?;
    let score: Vec<f64> = (0..model.n_states())
        .map(|s| h_f_clipped(kind, ratio.ratio(s)))
        .collect();
    let scale = 1.0 / (alpha * horizon as f64);
    let mut report = sampled_report(&pooled, &score, model, scale, EstimatorKind::Mixture);
    report.n_samples = agent.len();
    Ok(report)
}

/// Expert-side input for [`maxentirl_grad`].
#[derive(Debug, Clone, Copy)]
pub enum MaxEntExpert<'a> {
    /// Expected reward gradient under the expert density itself.
    Density(&'a ExpertDensity),
    /// Importance-sampled from agent states with weights `ρ_E / ρ̂_θ`.
    /// Without `agent_states` the expectation over `ρ_θ` is taken exactly.
    ImportanceSampled {
        rho_e: &'a ExpertDensity,
        agent_density: Option<&'a [f64]>,
        agent_states: Option<&'a [usize]>,
    },
}

/// MaxEnt IRL log-likelihood gradient `(T/α)(E_ρE[∇r] - E_ρθ[∇r])`.
///
/// Unlike the divergence estimators this is an *ascent* direction: the
/// trainer negates it before stepping.
pub fn maxentirl_grad(
    expert: MaxEntExpert<'_>,
    sol: &SoftSolution,
    model: &RewardModel,
    cfg: &SolverConfig,
) -> Result<GradReport, GradError> {
    if !sol.has_marginals() {
        return Err(SolverError::MissingMarginals.into());
    }
    let n_s = model.n_states();
    let rho = &sol.marginal_avg;
    let mut state_weights = vec![0.0; n_s];
    match expert {
        MaxEntExpert::Density(rho_e) => {
            if rho_e.len() != n_s {
                return Err(GradError::Shape {
                    expected: n_s,
                    got: rho_e.len(),
                });
            }
            let rho_e = rho_e.to_normalized()?;
            for s in 0..n_s {
                state_weights[s] = rho_e.values()[s] - rho[s];
            }
        }
        MaxEntExpert::ImportanceSampled {
            rho_e,
            agent_density,
            agent_states,
        } => {
            let density = agent_density.ok_or(GradError::MissingDensityModel)?;
            match agent_states {
                Some(states) => {
                    let weights = importance_weights(rho_e, density, states)?;
                    let n = states.len() as f64;
                    for (&s, w) in states.iter().zip(&weights) {
                        state_weights[s] += (w - 1.0) / n;
                    }
                }
                None => {
                    let all: Vec<usize> = (0..n_s).collect();
                    let weights = importance_weights(rho_e, density, &all)?;
                    for s in 0..n_s {
                        state_weights[s] = rho[s] * (weights[s] - 1.0);
                    }
                }
            }
        }
    }
    let scale = sol.horizon() as f64 / cfg.alpha;
    state_weights.iter_mut().for_each(|w| *w *= scale);
    let (score_min, score_max) = score_range(state_weights.iter().copied());
    Ok(GradReport {
        grad: model.weighted_grad(&state_weights),
        estimator: EstimatorKind::Maxentirl,
        n_samples: match expert {
            MaxEntExpert::ImportanceSampled {
                agent_states: Some(s),
                ..
            } => s.len(),
            _ => 0,
        },
        diagnostics: GradDiagnostics {
            score_min,
            score_max,
            state_weights,
        },
    })
}

/// Linear IPM critic `D(s) = w·φ(s)` with `w ∝ E_ρE[φ] - E_ρθ[φ]`, the
/// maximizer of `E_ρE[D] - E_ρθ[D]` over the unit ball. Zero when the
/// feature means already agree.
pub fn linear_ipm_critic(features: &FeatureMap, rho_e: &ExpertDensity, rho: &[f64]) -> Vec<f64> {
    let dim = features.dim();
    let mut w = vec![0.0; dim];
    for (s, row) in features.rows.iter().enumerate() {
        let diff = rho_e.values()[s] - rho[s];
        for (wi, f) in w.iter_mut().zip(row) {
            *wi += diff * f;
        }
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-300 {
        return vec![0.0; features.rows.len()];
    }
    features
        .rows
        .iter()
        .map(|row| row.iter().zip(&w).map(|(f, wi)| f * wi).sum::<f64>() / norm)
        .collect()
}

/// IPM gradient `-(1/(αT)) Cov(Σ_t D(s_t), Σ_t ∇r(s_t))` from agent rollouts
/// and a fixed per-state critic.
pub fn ipm_grad(
    batch: &TrajectoryBatch,
    critic: &[f64],
    model: &RewardModel,
    alpha: f64,
) -> Result<GradReport, GradError> {
    SolverConfig::new(alpha)?;
    if batch.len() < 2 {
        return Err(GradError::TooFewTrajectories(batch.len()));
    }
    if critic.len() != model.n_states() {
        return Err(GradError::Shape {
            expected: model.n_states(),
            got: critic.len(),
        });
    }
    let horizon = batch_horizon(batch)?;
    let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
    check_horizons(&trajs, horizon)?;
    let scale = -1.0 / (alpha * horizon as f64);
    Ok(sampled_report(
        &trajs,
        critic,
        model,
        scale,
        EstimatorKind::Ipm,
    ))
}

/// Exact-marginal counterpart of [`ipm_grad`].
pub fn ipm_grad_exact(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    critic: &[f64],
    model: &RewardModel,
    cfg: &SolverConfig,
) -> Result<GradReport, GradError> {
    if !sol.has_marginals() {
        return Err(SolverError::MissingMarginals.into());
    }
    if critic.len() != mdp.n_states() {
        return Err(GradError::Shape {
            expected: mdp.n_states(),
            got: critic.len(),
        });
    }
    let scale = -1.0 / (cfg.alpha * sol.horizon() as f64);
    let state_weights: Vec<f64> = visitation_covariance(mdp, sol, critic)
        .into_iter()
        .map(|c| c * scale)
        .collect();
    let (score_min, score_max) = score_range(critic.iter().copied());
    Ok(GradReport {
        grad: model.weighted_grad(&state_weights),
        estimator: EstimatorKind::Ipm,
        n_samples: 0,
        diagnostics: GradDiagnostics {
            score_min,
            score_max,
            state_weights,
        },
    })
}

/// `D_f(ρ_E ‖ ρ_θ)` for the model's current reward.
pub fn objective(
    mdp: &FiniteMdp,
    model: &RewardModel,
    cfg: &SolverConfig,
    kind: FDivKind,
    rho_e: &ExpertDensity,
) -> Result<f64, GradError> {
    let sol = solve(mdp, &model.rewards(), cfg)?;
    Ok(divergence_exact(kind, rho_e, &sol.marginal_avg)?)
}

/// Central finite differences of [`objective`]. Test oracle only.
pub fn fd_grad_oracle(
    mdp: &FiniteMdp,
    model: &RewardModel,
    cfg: &SolverConfig,
    kind: FDivKind,
    rho_e: &ExpertDensity,
    eps: f64,
) -> Result<GradReport, GradError> {
    check_expert(kind, rho_e, mdp.n_states())?;
    let n = model.n_params();
    if n > FD_PARAM_CAP {
        return Err(GradError::OracleCap {
            cap: FD_PARAM_CAP,
            got: n,
        });
    }
    let mut grad = vec![0.0; n];
    let mut params = model.params().to_vec();
    for i in 0..n {
        let orig = params[i];
        params[i] = orig + eps;
        let plus = objective(mdp, &model.with_params(params.clone())?, cfg, kind, rho_e)?;
        params[i] = orig - eps;
        let minus = objective(mdp, &model.with_params(params.clone())?, cfg, kind, rho_e)?;
        params[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(GradReport {
        grad,
        estimator: EstimatorKind::FdOracle,
        n_samples: 0,
        diagnostics: GradDiagnostics {
            score_min: f64::NAN,
            score_max: f64::NAN,
            state_weights: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::build_gridworld;
    use crate::mdp::testing::{random_deterministic_mdp, random_mdp};
    use crate::soft_solver::{enumerate_trajectories, pairwise_marginals, sample_trajectories};
    use proptest::prelude::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn random_reward(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_expert(n: usize, seed: u64) -> ExpertDensity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpertDensity::from_weights((0..n).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap()
    }

    /// Brute-force covariance over all trajectories.
    fn enumerated_covariance(mdp: &FiniteMdp, sol: &SoftSolution, x: &[f64]) -> Vec<f64> {
        let n_s = mdp.n_states();
        let paths = enumerate_trajectories(mdp, sol).unwrap();
        let mut ea = 0.0;
        let mut eb = vec![0.0; n_s];
        let mut eab = vec![0.0; n_s];
        for (traj, p) in &paths {
            let a: f64 = traj.visited().iter().map(|&s| x[s]).sum();
            ea += p * a;
            for &s in traj.visited() {
                eb[s] += p;
                eab[s] += p * a;
            }
        }
        (0..n_s).map(|j| eab[j] - ea * eb[j]).collect()
    }

    #[test]
    fn streaming_covariance_matches_enumeration_and_pairwise() {
        let mdp = random_mdp(3, 2, 4, 7);
        let sol = solve(&mdp, &random_reward(3, 1), &SolverConfig::new(0.7).unwrap()).unwrap();
        let x = [0.3, -1.2, 2.0];
        let streamed = visitation_covariance(&mdp, &sol, &x);
        let brute = enumerated_covariance(&mdp, &sol, &x);
        assert!(max_abs_diff(&streamed, &brute) < 1e-10);

        let pairs = pairwise_marginals(&mdp, &sol).unwrap();
        for j in 0..3 {
            let mut indicator = [0.0; 3];
            indicator[j] = 1.0;
            let sum_mean: f64 = 4.0
                * x.iter()
                    .zip(&sol.marginal_avg)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let cov = pairs.cross_moment(&x, &indicator) - sum_mean * 4.0 * sol.marginal_avg[j];
            assert!((cov - streamed[j]).abs() < 1e-10, "state {j}");
        }
    }

    #[test]
    fn exact_matches_finite_differences_tabular() {
        let mdp = random_deterministic_mdp(4, 3, 5, 11).unwrap();
        let cfg = SolverConfig::new(0.8).unwrap();
        let model = RewardModel::tabular_from(random_reward(4, 2)).unwrap();
        let expert = random_expert(4, 3);
        for kind in FDivKind::ALL {
            let exact = analytic_grad_exact(&mdp, &model, &cfg, kind, &expert).unwrap();
            let fd = fd_grad_oracle(&mdp, &model, &cfg, kind, &expert, 1e-5).unwrap();
            assert!(max_abs_diff(&exact.grad, &fd.grad) < 1e-6, "{kind}");
        }
    }

    #[test]
    fn exact_matches_finite_differences_mlp() {
        let mdp = build_gridworld(3, 3, 0.0, 0, 6).unwrap();
        let cfg = SolverConfig::new(1.0).unwrap();
        let model = RewardModel::mlp(FeatureMap::normalized_coords(&mdp), &[8, 8], 5);
        let expert = random_expert(9, 4);
        let exact = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Fkl, &expert).unwrap();
        let fd = fd_grad_oracle(&mdp, &model, &cfg, FDivKind::Fkl, &expert, 1e-5).unwrap();
        assert!(max_abs_diff(&exact.grad, &fd.grad) < 1e-6);
    }

    /// The covariance form is the gradient of `p(τ) e^{R/α} / Z`. The causal
    /// soft-optimal law only has that form when dynamics and the start state
    /// are deterministic, so on a slippery MDP the two must disagree.
    #[test]
    fn stochastic_dynamics_break_the_covariance_identity() {
        let mdp = random_mdp(4, 3, 4, 11);
        let cfg = SolverConfig::default();
        let model = RewardModel::tabular_from(random_reward(4, 2)).unwrap();
        let expert = random_expert(4, 3);
        let exact = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Fkl, &expert).unwrap();
        let fd = fd_grad_oracle(&mdp, &model, &cfg, FDivKind::Fkl, &expert, 1e-5).unwrap();
        assert!(max_abs_diff(&exact.grad, &fd.grad) > 1e-4);
    }

    #[test]
    fn zero_gradient_when_expert_matches_agent() {
        let mdp = random_mdp(4, 2, 5, 3);
        let cfg = SolverConfig::default();
        let model = RewardModel::tabular_from(random_reward(4, 9)).unwrap();
        let sol = solve(&mdp, &model.rewards(), &cfg).unwrap();
        let expert = ExpertDensity::normalized(sol.marginal_avg.clone())
            .unwrap_or_else(|_| ExpertDensity::from_weights(sol.marginal_avg.clone()).unwrap());
        for kind in FDivKind::ALL {
            let g = analytic_grad_exact(&mdp, &model, &cfg, kind, &expert).unwrap();
            assert!(
                g.grad.iter().all(|v| v.abs() < 1e-10),
                "{kind}: {:?}",
                g.grad
            );
        }
    }

    #[test]
    fn rkl_invariant_to_expert_scale() {
        let mdp = random_mdp(5, 3, 4, 21);
        let cfg = SolverConfig::new(0.5).unwrap();
        let model = RewardModel::tabular_from(random_reward(5, 4)).unwrap();
        let expert = random_expert(5, 8);
        let base = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Rkl, &expert).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = expert.scaled(c).unwrap();
            let g = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Rkl, &scaled).unwrap();
            assert!(max_abs_diff(&base.grad, &g.grad) < 1e-12, "c = {c}");
        }
        assert!(matches!(
            analytic_grad_exact(
                &mdp,
                &model,
                &cfg,
                FDivKind::Fkl,
                &expert.scaled(2.0).unwrap()
            ),
            Err(GradError::Unnormalized(FDivKind::Fkl))
        ));
    }

    #[test]
    fn mc_converges_to_exact() {
        let mdp = random_mdp(3, 2, 4, 5);
        let cfg = SolverConfig::default();
        let model = RewardModel::tabular_from(random_reward(3, 6)).unwrap();
        let expert = random_expert(3, 7);
        let sol = solve(&mdp, &model.rewards(), &cfg).unwrap();
        let exact = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Fkl, &expert).unwrap();
        let ratio = RatioEstimator::exact(&expert, &sol.marginal_avg);
        let batch = sample_trajectories(&mdp, &sol, 200_000, 42).unwrap();
        let mc = analytic_grad_mc(&batch, &model, cfg.alpha, FDivKind::Fkl, &ratio).unwrap();
        let scale = exact.grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max_abs_diff(&exact.grad, &mc.grad) < 0.02 * scale.max(1e-3));
        assert_eq!(mc.n_samples, 200_000);
    }

    #[test]
    fn mc_needs_two_trajectories() {
        let mdp = random_mdp(3, 2, 3, 1);
        let sol = solve(&mdp, &[0.0; 3], &SolverConfig::default()).unwrap();
        let batch = sample_trajectories(&mdp, &sol, 1, 0).unwrap();
        let ratio = RatioEstimator::constant(1.0, 3);
        let model = RewardModel::tabular(3);
        assert_eq!(
            analytic_grad_mc(&batch, &model, 1.0, FDivKind::Fkl, &ratio),
            Err(GradError::TooFewTrajectories(1))
        );
    }

    #[test]
    fn ipm_critic_sign_relations() {
        let mdp = random_mdp(3, 2, 4, 13);
        let cfg = SolverConfig::default();
        let model = RewardModel::tabular_from(random_reward(3, 14)).unwrap();
        let sol = solve(&mdp, &model.rewards(), &cfg).unwrap();
        let expert = random_expert(3, 15);
        let ratio = RatioEstimator::exact(&expert, &sol.marginal_avg);
        let batch = sample_trajectories(&mdp, &sol, 500, 3).unwrap();
        let h: Vec<f64> = (0..3)
            .map(|s| h_f_clipped(FDivKind::Fkl, ratio.ratio(s)))
            .collect();
        let neg_h: Vec<f64> = h.iter().map(|v| -v).collect();
        let mc = analytic_grad_mc(&batch, &model, 1.0, FDivKind::Fkl, &ratio).unwrap();
        let via_neg = ipm_grad(&batch, &neg_h, &model, 1.0).unwrap();
        let via_pos = ipm_grad(&batch, &h, &model, 1.0).unwrap();
        assert!(max_abs_diff(&mc.grad, &via_neg.grad) < 1e-12);
        let flipped: Vec<f64> = mc.grad.iter().map(|v| -v).collect();
        assert!(max_abs_diff(&flipped, &via_pos.grad) < 1e-12);
    }

    #[test]
    fn linear_critic_prefers_expert_features() {
        let mdp = build_gridworld(3, 1, 0.0, 0, 2).unwrap();
        let features = FeatureMap::normalized_coords(&mdp);
        let expert = ExpertDensity::normalized(vec![0.0, 0.0, 1.0]).unwrap();
        let critic = linear_ipm_critic(&features, &expert, &[1.0, 0.0, 0.0]);
        assert!(critic[2] > critic[0]);
        assert_eq!(
            linear_ipm_critic(&features, &expert, &[0.0, 0.0, 1.0]),
            vec![0.0; 3]
        );
    }

    #[test]
    fn maxentirl_branches_agree_without_samples() {
        let mdp = random_mdp(4, 2, 5, 17);
        let cfg = SolverConfig::new(0.9).unwrap();
        let model = RewardModel::tabular_from(random_reward(4, 18)).unwrap();
        let sol = solve(&mdp, &model.rewards(), &cfg).unwrap();
        let expert = random_expert(4, 19);
        let direct = maxentirl_grad(MaxEntExpert::Density(&expert), &sol, &model, &cfg).unwrap();
        let is = maxentirl_grad(
            MaxEntExpert::ImportanceSampled {
                rho_e: &expert,
                agent_density: Some(&sol.marginal_avg),
                agent_states: None,
            },
            &sol,
            &model,
            &cfg,
        )
        .unwrap();
        assert!(max_abs_diff(&direct.grad, &is.grad) < 1e-10);
        let missing = maxentirl_grad(
            MaxEntExpert::ImportanceSampled {
                rho_e: &expert,
                agent_density: None,
                agent_states: None,
            },
            &sol,
            &model,
            &cfg,
        );
        assert_eq!(missing, Err(GradError::MissingDensityModel));
    }

    #[test]
    fn fd_oracle_parameter_cap() {
        let mdp = build_gridworld(3, 3, 0.0, 0, 3).unwrap();
        let model = RewardModel::mlp(FeatureMap::normalized_coords(&mdp), &[64, 64], 0);
        let expert = random_expert(9, 1);
        assert!(matches!(
            fd_grad_oracle(
                &mdp,
                &model,
                &SolverConfig::default(),
                FDivKind::Fkl,
                &expert,
                1e-5
            ),
            Err(GradError::OracleCap { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exact_equals_enumerated_covariance(seed in 0u64..10_000, alpha in 0.2f64..3.0) {
            let mdp = random_mdp(3, 2, 3, seed);
            let cfg = SolverConfig::new(alpha).unwrap();
            let model = RewardModel::tabular_from(random_reward(3, seed + 1)).unwrap();
            let expert = random_expert(3, seed + 2);
            let sol = solve(&mdp, &model.rewards(), &cfg).unwrap();
            let report = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Js, &expert).unwrap();
            let scores = exact_scores(FDivKind::Js, &expert, &sol.marginal_avg).unwrap();
            let brute: Vec<f64> = enumerated_covariance(&mdp, &sol, &scores)
                .into_iter()
                .map(|c| c / (alpha * 3.0))
                .collect();
            prop_assert!(max_abs_diff(&report.grad, &brute) < 1e-10);
        }

        #[test]
        fn gradient_is_shift_invariant_in_h(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let mdp = random_mdp(3, 2, 4, seed);
            let sol = solve(&mdp, &random_reward(3, seed), &SolverConfig::default()).unwrap();
            let x = random_reward(3, seed + 5);
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let a = visitation_covariance(&mdp, &sol, &x);
            let b = visitation_covariance(&mdp, &sol, &shifted);
            prop_assert!(max_abs_diff(&a, &b) < 1e-9 * (1.0 + shift.abs()));
        }
    }
}
