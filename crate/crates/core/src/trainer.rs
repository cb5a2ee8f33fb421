//! The outer reward-learning loop, its optimizer, and reward shaping.
//!
//! Each iteration solves the soft-optimal policy for the current reward
//! exactly, estimates the density ratio, forms a reward gradient and takes
//! `grad_steps_per_iter` optimizer steps.

use crate::density_ratio::{
    discriminator_fit, kde_fit, DiscriminatorConfig, RatioError, RatioEstimator, RatioMode,
    DEFAULT_BANDWIDTH,
};
use crate::divergence::{divergence_exact, DivergenceError, ExpertDensity, FDivKind};
use crate::grad::{
    analytic_grad_exact_from, analytic_grad_mc, analytic_grad_mixture, maxentirl_grad,
    visitation_covariance, GradError, GradReport, MaxEntExpert,
};
use crate::kl_eval::{exact_kl, jittered_coords, knn_kl, policy_return, EvalError, DEFAULT_K};
use crate::mdp::{FiniteMdp, Trajectory};
use crate::reward::{FeatureMap, RewardError, RewardModel};
use crate::soft_solver::{
    forward_marginals, sample_categorical, sample_trajectories, soft_backward_with, solve,
    SoftSolution, SolverConfig, SolverError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Side length of a state's cell in coordinate units.
pub const CELL_WIDTH: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Ratio(#[from] RatioError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Mismatch(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("optimizer state has {expected} parameters, gradient has {got}")]
    OptimizerShape { expected: usize, got: usize },
    #[error("prior weight must be nonnegative, got {0}")]
    NegativeWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Plain,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainEstimator {
    Exact,
    Mc,
    Mixture,
    Maxentirl,
}

impl std::str::FromStr for TrainEstimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(TrainEstimator::Exact),
            "mc" => Ok(TrainEstimator::Mc),
            "mixture" => Ok(TrainEstimator::Mixture),
            "maxentirl" => Ok(TrainEstimator::Maxentirl),
            other => Err(format!(
                "unknown estimator '{other}' (expected exact, mc, mixture or maxentirl)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: FDivKind,
    pub alpha: f64,
    pub iterations: usize,
    pub reward_lr: f64,
    pub grad_steps_per_iter: usize,
    pub estimator: TrainEstimator,
    pub batch_size: usize,
    pub ratio_mode: RatioMode,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// L2 penalty added to the gradient; meant for MLP rewards.
    pub weight_decay: f64,
    pub kde_bandwidth: f64,
    pub discriminator: DiscriminatorConfig,
    /// Reuse the previous iteration's discriminator as the starting point.
    pub warm_start: bool,
    /// kNN KL estimates every `eval_every` iterations; 0 disables them.
    pub eval_every: usize,
    pub eval_expert_samples: usize,
    pub eval_agent_trajectories: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: FDivKind::Fkl,
            alpha: 1.0,
            iterations: 300,
            reward_lr: 1e-3,
            grad_steps_per_iter: 1,
            estimator: TrainEstimator::Exact,
            batch_size: 1000,
            ratio_mode: RatioMode::ExactTable,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            kde_bandwidth: DEFAULT_BANDWIDTH,
            discriminator: DiscriminatorConfig::default(),
            warm_start: false,
            eval_every: 0,
            eval_expert_samples: 10_000,
            eval_agent_trajectories: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.reward_lr > 0.0) || !self.reward_lr.is_finite() {
            return bad("reward_lr must be positive");
        }
        if self.grad_steps_per_iter == 0 {
            return bad("grad_steps_per_iter must be positive");
        }
        let sampled =
            self.estimator != TrainEstimator::Exact || self.ratio_mode != RatioMode::ExactTable;
        if sampled && self.batch_size < 2 {
            return bad("batch_size must be at least 2 for sampled estimators");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.kde_bandwidth > 0.0) {
            return bad("kde_bandwidth must be positive");
        }
        if self.eval_every > 0
            && (self.eval_expert_samples <= DEFAULT_K || self.eval_agent_trajectories == 0)
        {
            return bad(
                "kNN evaluation needs more than k expert samples and at least one agent trajectory",
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self {
            kind,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One optimizer update. Returns the new state and the parameter delta
/// (already negated, so `θ ← θ + delta` descends).
pub fn optimizer_step(
    state: &OptimizerState,
    grad: &[f64],
    lr: f64,
) -> Result<(OptimizerState, Vec<f64>), TrainError> {
    if grad.len() != state.first_moment.len() {
        return Err(TrainError::OptimizerShape {
            expected: state.first_moment.len(),
            got: grad.len(),
        });
    }
    let mut next = state.clone();
    next.step_count += 1;
    let delta = match state.kind {
        OptimizerKind::Plain => grad.iter().map(|g| -lr * g).collect(),
        OptimizerKind::Adam => {
            let (b1, b2) = (state.beta1, state.beta2);
            let k = next.step_count as i32;
            let c1 = 1.0 - b1.powi(k);
            let c2 = 1.0 - b2.powi(k);
            grad.iter()
                .enumerate()
                .map(|(i, &g)| {
                    let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
                    let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
                    next.first_moment[i] = m;
                    next.second_moment[i] = v;
                    -lr * (m / c1) / ((v / c2).sqrt() + state.epsilon)
                })
                .collect()
        }
    };
    Ok((next, delta))
}

/// A time-indexed transition reward
/// `R_t(s, s') = r(s') + w (γ Φ(s') - Φ(s))`, optionally minus `w γ Φ(s_T)`
/// on the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedReward {
    pub base: Vec<f64>,
    pub potential: Vec<f64>,
    pub weight: f64,
    pub gamma: f64,
    /// Cancel the final `γ Φ(s_T)` so the shaping telescopes to `-Φ(s_0)`.
    pub terminal_compensation: bool,
}

impl ShapedReward {
    #[inline]
    pub fn value(&self, t: usize, horizon: usize, s: usize, next: usize) -> f64 {
        let shaping = self.gamma * self.potential[next] - self.potential[s];
        let mut r = self.base[next] + self.weight * shaping;
        if self.terminal_compensation && t + 1 == horizon {
            r -= self.weight * self.gamma * self.potential[next];
        }
        r
    }

    pub fn with_terminal_compensation(mut self, on: bool) -> Self {
        self.terminal_compensation = on;
        self
    }
}

/// Potential-based shaping with the terminal convention switched on.
pub fn potential_shape(
    reward: &[f64],
    phi: &[f64],
    gamma: f64,
) -> Result<ShapedReward, TrainError> {
    if reward.len() != phi.len() {
        return Err(TrainError::Mismatch(format!(
            "reward has {} states, potential has {}",
            reward.len(),
            phi.len()
        )));
    }
    if let Some(v) = phi.iter().find(|v| !v.is_finite()) {
        return Err(TrainError::Mismatch(format!(
            "potential entry {v} is not finite"
        )));
    }
    Ok(ShapedReward {
        base: reward.to_vec(),
        potential: phi.to_vec(),
        weight: 1.0,
        gamma,
        terminal_compensation: true,
    })
}

/// `r_task(s') + λ (γ r_prior(s') - r_prior(s))`, without terminal
/// compensation.
pub fn shaped_prior_reward(
    r_task: &[f64],
    r_prior: &[f64],
    lambda: f64,
    gamma: f64,
) -> Result<ShapedReward, TrainError> {
    if !(lambda >= 0.0) {
        return Err(TrainError::NegativeWeight(lambda));
    }
    let mut shaped = potential_shape(r_task, r_prior, gamma)?;
    shaped.weight = lambda;
    shaped.terminal_compensation = false;
    Ok(shaped)
}

/// Solves the soft-optimal policy and marginals under a shaped reward.
pub fn solve_shaped(
    mdp: &FiniteMdp,
    shaped: &ShapedReward,
    cfg: &SolverConfig,
) -> Result<SoftSolution, TrainError> {
    if shaped.base.len() != mdp.n_states() {
        return Err(TrainError::Mismatch(format!(
            "shaped reward has {} states, MDP has {}",
            shaped.base.len(),
            mdp.n_states()
        )));
    }
    let horizon = mdp.horizon();
    let mut sol = soft_backward_with(mdp, cfg, |t, s, next| shaped.value(t, horizon, s, next))?;
    forward_marginals(mdp, &mut sol);
    Ok(sol)
}

/// What the expert provides.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertInput {
    Density(ExpertDensity),
    Trajectories(Vec<Trajectory>),
}

impl ExpertInput {
    /// Normalized state marginal: the density itself or the visit frequency.
    pub fn marginal(&self, n_states: usize) -> Result<ExpertDensity, TrainError> {
        match self {
            ExpertInput::Density(d) => Ok(d.to_normalized()?),
            ExpertInput::Trajectories(trajs) => {
                let mut counts = vec![0.0; n_states];
                for t in trajs {
                    for &s in t.visited() {
                        if s >= n_states {
                            return Err(TrainError::Mismatch(format!(
                                "expert state {s} out of range"
                            )));
                        }
                        counts[s] += 1.0;
                    }
                }
                Ok(ExpertDensity::from_weights(counts)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Exact training objective `D_f(ρ_E ‖ ρ_θ)` before this iteration's update.
    pub loss: f64,
    pub exact_fkl: f64,
    pub exact_rkl: f64,
    pub fkl_estimate: Option<f64>,
    pub rkl_estimate: Option<f64>,
    pub grad_norm: f64,
    pub return_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub model: RewardModel,
    pub metrics: Vec<IterationMetrics>,
    /// Soft-optimal solution for the final reward.
    pub final_solution: SoftSolution,
    pub wall_clock_secs: f64,
}

/// Optional extras for [`run_firl`].
#[derive(Debug, Clone, Default)]
pub struct TrainHooks<'a> {
    /// Reference reward used for the per-iteration return column.
    pub gt_reward: Option<&'a [f64]>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_input(cfg: &TrainConfig, expert: &ExpertInput) -> Result<(), TrainError> {
    let mismatch = |msg: &str| Err(TrainError::Mismatch(msg.to_string()));
    match (cfg.ratio_mode, expert) {
        (RatioMode::ExactTable | RatioMode::KdePair, ExpertInput::Trajectories(_)) => {
            return mismatch("exact_table and kde_pair ratio modes need an expert density");
        }
        (RatioMode::Discriminator, ExpertInput::Density(_)) => {
            return mismatch("discriminator ratio mode needs expert trajectories");
        }
        _ => {}
    }
    if cfg.estimator == TrainEstimator::Mixture && !matches!(expert, ExpertInput::Trajectories(_)) {
        return mismatch("the mixture estimator needs expert trajectories");
    }
    if let ExpertInput::Trajectories(t) = expert {
        if t.is_empty() {
            return mismatch("expert trajectory set is empty");
        }
    }
    Ok(())
}

/// Per-iteration randomness, drawn from one master stream.
struct IterationSeeds {
    rollout: u64,
    mixture: u64,
    eval: u64,
}

fn sample_from_density(density: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| sample_categorical(rng, density)).collect()
}

/// Trains a reward to match the expert state marginal.
pub fn run_firl(
    mdp: &FiniteMdp,
    expert: &ExpertInput,
    init_model: RewardModel,
    cfg: &TrainConfig,
    hooks: &TrainHooks<'_>,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    check_input(cfg, expert)?;
    if init_model.n_states() != mdp.n_states() {
        return Err(TrainError::Mismatch(format!(
            "reward model covers {} states, MDP has {}",
            init_model.n_states(),
            mdp.n_states()
        )));
    }
    let started = Instant::now();
    let solver = SolverConfig::new(cfg.alpha)?;
    let n_s = mdp.n_states();
    let expert_marginal = expert.marginal(n_s)?;
    let training_density = match expert {
        ExpertInput::Density(d) => d.clone(),
        ExpertInput::Trajectories(_) => expert_marginal.clone(),
    };
    let expert_trajs: &[Trajectory] = match expert {
        ExpertInput::Trajectories(t) => t,
        ExpertInput::Density(_) => &[],
    };
    let expert_states: Vec<usize> = expert_trajs
        .iter()
        .flat_map(|t| t.visited().iter().copied())
        .collect();
    let features = FeatureMap::normalized_coords(mdp);
    let cell_width = CELL_WIDTH;

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model;
    let mut optimizer = OptimizerState::new(cfg.optimizer, model.n_params());
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut discriminator = None;

    for iteration in 0..cfg.iterations {
        let seeds = IterationSeeds {
            rollout: master.random(),
            mixture: master.random(),
            eval: master.random(),
        };
        let sol = solve(mdp, &model.rewards(), &solver)?;
        let rho = &sol.marginal_avg;
        let loss = divergence_exact(cfg.kind, &training_density, rho)?;
        let exact_fkl = exact_kl(expert_marginal.values(), rho)?;
        let exact_rkl = exact_kl(rho, expert_marginal.values())?;
        let return_value = hooks
            .gt_reward
            .map(|r| policy_return(&sol, r))
            .transpose()?;

        let (fkl_estimate, rkl_estimate) = if cfg.eval_every > 0
            && (iteration % cfg.eval_every == 0 || iteration + 1 == cfg.iterations)
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.eval);
            let e_states =
                sample_from_density(expert_marginal.values(), cfg.eval_expert_samples, &mut rng);
            let batch = sample_trajectories(mdp, &sol, cfg.eval_agent_trajectories, rng.random())?;
            let a_states = batch.visited_states();
            let e_pts = jittered_coords(mdp.coords(), &e_states, cell_width, rng.random());
            let a_pts = jittered_coords(mdp.coords(), &a_states, cell_width, rng.random());
            let fkl = knn_kl(&e_pts, &a_pts, DEFAULT_K)?.value;
            let rkl = knn_kl(&a_pts, &e_pts, DEFAULT_K)?.value;
            (Some(fkl), Some(rkl))
        } else {
            (None, None)
        };

        let needs_batch = cfg.estimator != TrainEstimator::Exact
            && cfg.estimator != TrainEstimator::Maxentirl
            || cfg.ratio_mode != RatioMode::ExactTable;
        let batch = if needs_batch {
            Some(sample_trajectories(
                mdp,
                &sol,
                cfg.batch_size,
                seeds.rollout,
            )?)
        } else {
            None
        };

        let ratio = match cfg.ratio_mode {
            RatioMode::ExactTable => RatioEstimator::exact(&training_density, rho),
            RatioMode::KdePair => {
                let batch = batch.as_ref().expect("batch sampled for kde mode");
                let pts = jittered_coords(
                    mdp.coords(),
                    &batch.visited_states(),
                    cell_width,
                    seeds.rollout ^ 0x5eed,
                );
                let kde = kde_fit(&pts, cfg.kde_bandwidth)?;
                RatioEstimator::kde_pair(&expert_marginal, &kde, mdp.coords(), 0.5 * cell_width)?
            }
            RatioMode::Discriminator => {
                let batch = batch
                    .as_ref()
                    .expect("batch sampled for discriminator mode");
                let warm = if cfg.warm_start {
                    discriminator.as_ref()
                } else {
                    None
                };
                let d = discriminator_fit(
                    &expert_states,
                    &batch.visited_states(),
                    &features,
                    &cfg.discriminator,
                    warm,
                )?;
                discriminator = Some(d.clone());
                RatioEstimator::Discriminator(d)
            }
        };

        let report = iteration_gradient(
            mdp,
            &sol,
            &model,
            cfg,
            &solver,
            &training_density,
            expert_trajs,
            &ratio,
            batch.as_ref(),
            seeds.mixture,
        )?;
        let grad_norm = l2(&report.grad);
        let mut grad = report.grad.clone();
        let exact_resolve = matches!(
            cfg.estimator,
            TrainEstimator::Exact | TrainEstimator::Maxentirl
        ) && cfg.ratio_mode == RatioMode::ExactTable;
        for step in 0..cfg.grad_steps_per_iter {
            if step > 0 {
                grad = if exact_resolve {
                    let sol = solve(mdp, &model.rewards(), &solver)?;
                    let ratio = RatioEstimator::exact(&training_density, &sol.marginal_avg);
                    iteration_gradient(
                        mdp,
                        &sol,
                        &model,
                        cfg,
                        &solver,
                        &training_density,
                        expert_trajs,
                        &ratio,
                        None,
                        seeds.mixture,
                    )?
                    .grad
                } else {
                    model.weighted_grad(&report.diagnostics.state_weights)
                };
            }
            if cfg.weight_decay > 0.0 {
                for (g, p) in grad.iter_mut().zip(model.params()) {
                    *g += cfg.weight_decay * p;
                }
            }
            let (next, delta) = optimizer_step(&optimizer, &grad, cfg.reward_lr)?;
            optimizer = next;
            model = model.apply_update(&delta)?;
        }

        metrics.push(IterationMetrics {
            iteration,
            loss,
            exact_fkl,
            exact_rkl,
            fkl_estimate,
            rkl_estimate,
            grad_norm,
            return_value,
        });
    }
    let final_solution = solve(mdp, &model.rewards(), &solver)?;
    Ok(TrainResult {
        model,
        metrics,
        final_solution,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Descent-direction gradient for one iteration; the state weights carry
/// the same sign so later steps can reuse them.
#[allow(clippy::too_many_arguments)]
fn iteration_gradient(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    model: &RewardModel,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    density: &ExpertDensity,
    expert_trajs: &[Trajectory],
    ratio: &RatioEstimator,
    batch: Option<&crate::soft_solver::TrajectoryBatch>,
    mixture_seed: u64,
) -> Result<GradReport, TrainError> {
    Ok(match cfg.estimator {
        TrainEstimator::Exact if cfg.ratio_mode == RatioMode::ExactTable => {
            analytic_grad_exact_from(mdp, sol, model, solver, cfg.kind, density)?
        }
        TrainEstimator::Exact => {
            exact_covariance_with_ratio(mdp, sol, model, solver, cfg.kind, ratio)
        }
        TrainEstimator::Mc => {
            analytic_grad_mc(batch.expect("batch"), model, cfg.alpha, cfg.kind, ratio)?
        }
        TrainEstimator::Mixture => analytic_grad_mixture(
            batch.expect("batch"),
            expert_trajs,
            model,
            cfg.alpha,
            cfg.kind,
            ratio,
            mixture_seed,
        )?,
        TrainEstimator::Maxentirl => {
            let mut report = maxentirl_grad(MaxEntExpert::Density(density), sol, model, solver)?;
            report.grad.iter_mut().for_each(|g| *g = -*g);
            report
                .diagnostics
                .state_weights
                .iter_mut()
                .for_each(|w| *w = -*w);
            report
        }
    })
}

/// Exact trajectory covariance with `h_f` taken from an estimated ratio.
fn exact_covariance_with_ratio(
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    model: &RewardModel,
    solver: &SolverConfig,
    kind: FDivKind,
    ratio: &RatioEstimator,
) -> GradReport {
    let n_s = mdp.n_states();
    let scores: Vec<f64> = (0..n_s)
        .map(|s| crate::divergence::h_f_clipped(kind, ratio.ratio(s)))
        .collect();
    let mean: f64 = scores
        .iter()
        .zip(&sol.marginal_avg)
        .map(|(h, r)| h * r)
        .sum();
    let centered: Vec<f64> = scores.iter().map(|h| h - mean).collect();
    let scale = 1.0 / (solver.alpha * sol.horizon() as f64);
    let state_weights: Vec<f64> = visitation_covariance(mdp, sol, &centered)
        .into_iter()
        .map(|c| c * scale)
        .collect();
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    GradReport {
        grad: model.weighted_grad(&state_weights),
        estimator: crate::grad::EstimatorKind::Exact,
        n_samples: 0,
        diagnostics: crate::grad::GradDiagnostics {
            score_min: lo,
            score_max: hi,
            state_weights,
        },
    }
}
