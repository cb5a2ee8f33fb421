//! Desk-scale experiment suites on gridworlds: density matching, IRL from
//! sampled expert trajectories, prior-reward shaping on a sparse task,
//! transfer across changed dynamics, and reward-recovery fits.

use crate::divergence::{DivergenceError, ExpertDensity};
use crate::kl_eval::{policy_return, EvalError};
use crate::mdp::{
    build_gridworld, modify_dynamics, DynamicsPerturbation, FiniteMdp, MdpError, Trajectory,
};
use crate::reward::{FeatureMap, RewardModel};
use crate::soft_solver::{sample_trajectories, solve, SolverConfig, SolverError};
use crate::trainer::{
    run_firl, shaped_prior_reward, solve_shaped, ExpertInput, TrainConfig, TrainError, TrainHooks,
    TrainResult,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("mean ({x}, {y}) lies outside the {width}x{height} grid")]
    MeanOutsideGrid {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("cell ({x}, {y}) is outside the {width}x{height} grid")]
    CellOutsideGrid {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("state spaces differ: {0} vs {1} states")]
    StateSpaceMismatch(usize, usize),
    #[error("reward has {got} entries, expected {expected}")]
    RewardShape { expected: usize, got: usize },
    #[error("need at least one expert trajectory")]
    NoTrajectories,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub slip: f64,
    /// Start cell `[x, y]`.
    pub start: [usize; 2],
    pub horizon: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<FiniteMdp, ScenarioError> {
        let [x, y] = self.start;
        if x >= self.width || y >= self.height {
            return Err(ScenarioError::CellOutsideGrid {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(build_gridworld(
            self.width,
            self.height,
            self.slip,
            y * self.width + x,
            self.horizon,
        )?)
    }
}

/// Named expert state densities over grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticDensity {
    Gaussian { mean: [f64; 2], sigma: f64 },
    Mixture2 { means: [[f64; 2]; 2], sigma: f64 },
    Uniform,
}

fn check_mean(mean: [f64; 2], mdp: &FiniteMdp) -> Result<(), ScenarioError> {
    let (width, height) = mdp
        .grid()
        .map_or((mdp.n_states(), 1), |g| (g.width, g.height));
    let inside =
        (0.0..=width as f64).contains(&mean[0]) && (0.0..=height as f64).contains(&mean[1]);
    if !inside {
        return Err(ScenarioError::MeanOutsideGrid {
            x: mean[0],
            y: mean[1],
            width,
            height,
        });
    }
    Ok(())
}

/// Evaluates the density at each cell center and normalizes.
pub fn discretize_density(
    spec: &AnalyticDensity,
    mdp: &FiniteMdp,
) -> Result<ExpertDensity, ScenarioError> {
    let gauss = |c: [f64; 2], mean: [f64; 2], sigma: f64| {
        let d2 = (c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2);
        (-0.5 * d2 / (sigma * sigma)).exp()
    };
    let weights: Vec<f64> = match spec {
        AnalyticDensity::Uniform => vec![1.0; mdp.n_states()],
        AnalyticDensity::Gaussian { mean, sigma } => {
            check_mean(*mean, mdp)?;
            if !(*sigma > 0.0) {
                return Err(ScenarioError::BadSigma(*sigma));
            }
            mdp.coords()
                .iter()
                .map(|&c| gauss(c, *mean, *sigma))
                .collect()
        }
        AnalyticDensity::Mixture2 { means, sigma } => {
            for m in means {
                check_mean(*m, mdp)?;
            }
            if !(*sigma > 0.0) {
                return Err(ScenarioError::BadSigma(*sigma));
            }
            mdp.coords()
                .iter()
                .map(|&c| 0.5 * gauss(c, means[0], *sigma) + 0.5 * gauss(c, means[1], *sigma))
                .collect()
        }
    };
    Ok(ExpertDensity::from_weights(weights)?)
}

/// How to parameterize the learned reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    #[default]
    Tabular,
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        init_seed: u64,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl RewardSpec {
    pub fn build(&self, mdp: &FiniteMdp) -> RewardModel {
        match self {
            RewardSpec::Tabular => RewardModel::tabular(mdp.n_states()),
            RewardSpec::Linear => RewardModel::linear(FeatureMap::normalized_coords(mdp)),
            RewardSpec::Mlp { hidden, init_seed } => {
                RewardModel::mlp(FeatureMap::normalized_coords(mdp), hidden, *init_seed)
            }
        }
    }
}

/// Ground-truth state rewards for the IRL and transfer suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GtRewardSpec {
    /// `scale * (1 - d(s, goal) / d_max)` with Euclidean cell distance.
    GoalDistance {
        goal: [usize; 2],
        scale: f64,
    },
    Table {
        values: Vec<f64>,
    },
}

impl GtRewardSpec {
    pub fn build(&self, mdp: &FiniteMdp) -> Result<Vec<f64>, ScenarioError> {
        match self {
            GtRewardSpec::Table { values } => {
                if values.len() != mdp.n_states() {
                    return Err(ScenarioError::RewardShape {
                        expected: mdp.n_states(),
                        got: values.len(),
                    });
                }
                Ok(values.clone())
            }
            GtRewardSpec::GoalDistance { goal, scale } => {
                let grid = mdp.grid().ok_or(MdpError::NoGrid)?;
                if goal[0] >= grid.width || goal[1] >= grid.height {
                    return Err(ScenarioError::CellOutsideGrid {
                        x: goal[0],
                        y: goal[1],
                        width: grid.width,
                        height: grid.height,
                    });
                }
                let target = [goal[0] as f64 + 0.5, goal[1] as f64 + 0.5];
                let dist: Vec<f64> = mdp
                    .coords()
                    .iter()
                    .map(|c| ((c[0] - target[0]).powi(2) + (c[1] - target[1]).powi(2)).sqrt())
                    .collect();
                let d_max = dist.iter().copied().fold(0.0, f64::max).max(1e-12);
                Ok(dist.iter().map(|d| scale * (1.0 - d / d_max)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatchingScenario {
    pub mdp: FiniteMdp,
    pub expert: ExpertDensity,
}

pub fn density_matching(
    spec: &AnalyticDensity,
    grid: &GridConfig,
) -> Result<DensityMatchingScenario, ScenarioError> {
    let mdp = grid.build()?;
    let expert = discretize_density(spec, &mdp)?;
    Ok(DensityMatchingScenario { mdp, expert })
}

impl DensityMatchingScenario {
    pub fn run(
        &self,
        reward: &RewardSpec,
        cfg: &TrainConfig,
    ) -> Result<TrainResult, ScenarioError> {
        Ok(run_firl(
            &self.mdp,
            &ExpertInput::Density(self.expert.clone()),
            reward.build(&self.mdp),
            cfg,
            &TrainHooks::default(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlScenario {
    pub mdp: FiniteMdp,
    pub gt_reward: Vec<f64>,
    pub expert_alpha: f64,
    pub expert_trajectories: Vec<Trajectory>,
    /// Exact expected gt return of the gt soft-optimal policy.
    pub expert_return: f64,
}

/// Pool size for the top-return selection when few demonstrations are kept.
const SMALL_N_POOL_FACTOR: usize = 10;

/// Samples expert demonstrations from the gt soft-optimal policy. For
/// `n ≤ 4` a pool ten times larger is drawn and the highest-return
/// trajectories are kept.
pub fn irl_from_trajectories(
    mdp: FiniteMdp,
    gt_reward: Vec<f64>,
    n_expert_traj: usize,
    expert_alpha: f64,
    seed: u64,
) -> Result<IrlScenario, ScenarioError> {
    if n_expert_traj == 0 {
        return Err(ScenarioError::NoTrajectories);
    }
    if gt_reward.len() != mdp.n_states() {
        return Err(ScenarioError::RewardShape {
            expected: mdp.n_states(),
            got: gt_reward.len(),
        });
    }
    let cfg = SolverConfig::new(expert_alpha)?;
    let sol = solve(&mdp, &gt_reward, &cfg)?;
    let expert_return = policy_return(&sol, &gt_reward)?;
    let pool = if n_expert_traj <= 4 {
        n_expert_traj * SMALL_N_POOL_FACTOR
    } else {
        n_expert_traj
    };
    let mut trajs = sample_trajectories(&mdp, &sol, pool, seed)?.trajectories;
    if pool > n_expert_traj {
        let ret = |t: &Trajectory| t.visited().iter().map(|&s| gt_reward[s]).sum::<f64>();
        // Stable sort keeps sampling order among ties.
        trajs.sort_by(|a, b| ret(b).total_cmp(&ret(a)));
        trajs.truncate(n_expert_traj);
    }
    Ok(IrlScenario {
        mdp,
        gt_reward,
        expert_alpha,
        expert_trajectories: trajs,
        expert_return,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlOutcome {
    pub train: TrainResult,
    pub learned_reward: Vec<f64>,
    /// Gt return of a policy solved from scratch on the frozen learned reward.
    pub retrained_return: f64,
    pub return_ratio: f64,
    /// Visit frequency of the expert demonstrations.
    pub expert_marginal: Vec<f64>,
    /// Exact marginal of the gt soft-optimal policy.
    pub gt_marginal: Vec<f64>,
}

impl IrlScenario {
    pub fn run(&self, reward: &RewardSpec, cfg: &TrainConfig) -> Result<IrlOutcome, ScenarioError> {
        let expert = ExpertInput::Trajectories(self.expert_trajectories.clone());
        let hooks = TrainHooks {
            gt_reward: Some(&self.gt_reward),
        };
        let train = run_firl(&self.mdp, &expert, reward.build(&self.mdp), cfg, &hooks)?;
        let learned_reward = train.model.rewards();
        let solver = SolverConfig::new(self.expert_alpha)?;
        let retrained = solve(&self.mdp, &learned_reward, &solver)?;
        let retrained_return = policy_return(&retrained, &self.gt_reward)?;
        let gt_marginal = solve(&self.mdp, &self.gt_reward, &solver)?.marginal_avg;
        Ok(IrlOutcome {
            expert_marginal: expert.marginal(self.mdp.n_states())?.values().to_vec(),
            train,
            learned_reward,
            retrained_return,
            return_ratio: retrained_return / self.expert_return,
            gt_marginal,
        })
    }
}

/// Sparse-reward task: a far goal and two nearby low-value distractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardTaskSpec {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub goal_reward: f64,
    pub distractions: Vec<[usize; 2]>,
    pub distraction_reward: f64,
    pub gamma: f64,
}

impl Default for HardTaskSpec {
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            horizon: 30,
            start: [0, 0],
            goal: [5, 5],
            goal_reward: 1.0,
            distractions: vec![[5, 0], [0, 5]],
            distraction_reward: 0.1,
            gamma: 0.99,
        }
    }
}

impl HardTaskSpec {
    pub fn grid(&self) -> GridConfig {
        GridConfig {
            width: self.width,
            height: self.height,
            slip: 0.0,
            start: self.start,
            horizon: self.horizon,
        }
    }

    pub fn build(&self) -> Result<(FiniteMdp, Vec<f64>), ScenarioError> {
        let mdp = self.grid().build()?;
        let mut reward = vec![0.0; mdp.n_states()];
        let index = |c: [usize; 2]| -> Result<usize, ScenarioError> {
            if c[0] >= self.width || c[1] >= self.height {
                return Err(ScenarioError::CellOutsideGrid {
                    x: c[0],
                    y: c[1],
                    width: self.width,
                    height: self.height,
                });
            }
            Ok(c[1] * self.width + c[0])
        };
        for &d in &self.distractions {
            reward[index(d)?] = self.distraction_reward;
        }
        reward[index(self.goal)?] = self.goal_reward;
        Ok((mdp, reward))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHeatmap {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `returns[i][j]`: expected task return at `alphas[i]`, `lambdas[j]`.
    pub returns: Vec<Vec<f64>>,
}

impl PriorHeatmap {
    /// Cells with `λ > 0` whose return strictly beats the `λ = 0` control
    /// at the same temperature.
    pub fn improvements(&self) -> Vec<(f64, f64, f64)> {
        let Some(control) = self.lambdas.iter().position(|&l| l == 0.0) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (i, row) in self.returns.iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                if self.lambdas[j] > 0.0 && value > row[control] {
                    out.push((self.alphas[i], self.lambdas[j], value - row[control]));
                }
            }
        }
        out
    }
}

/// Expected task return for every `(α, λ)` when solving exactly under
/// `r_task(s') + λ(γ r_prior(s') - r_prior(s))`.
pub fn prior_reward_downstream(
    mdp: &FiniteMdp,
    task_reward: &[f64],
    prior: &[f64],
    lambdas: &[f64],
    alphas: &[f64],
    gamma: f64,
) -> Result<PriorHeatmap, ScenarioError> {
    if prior.len() != mdp.n_states() {
        return Err(ScenarioError::RewardShape {
            expected: mdp.n_states(),
            got: prior.len(),
        });
    }
    let mut returns = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = SolverConfig::new(alpha)?;
        let mut row = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let shaped = shaped_prior_reward(task_reward, prior, lambda, gamma)?;
            let sol = solve_shaped(mdp, &shaped, &cfg)?;
            row.push(policy_return(&sol, task_reward)?);
        }
        returns.push(row);
    }
    Ok(PriorHeatmap {
        lambdas: lambdas.to_vec(),
        alphas: alphas.to_vec(),
        returns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub learned_return: f64,
    pub gt_return: f64,
    pub ratio: f64,
}

/// Solves on the target dynamics with the learned and the gt reward and
/// compares their gt returns.
pub fn dynamics_transfer(
    learned_reward: &[f64],
    gt_reward: &[f64],
    mdp_source: &FiniteMdp,
    mdp_target: &FiniteMdp,
    alpha: f64,
) -> Result<TransferRecord, ScenarioError> {
    if mdp_source.n_states() != mdp_target.n_states() {
        return Err(ScenarioError::StateSpaceMismatch(
            mdp_source.n_states(),
            mdp_target.n_states(),
        ));
    }
    let cfg = SolverConfig::new(alpha)?;
    let learned_sol = solve(mdp_target, learned_reward, &cfg)?;
    let gt_sol = solve(mdp_target, gt_reward, &cfg)?;
    let learned_return = policy_return(&learned_sol, gt_reward)?;
    let gt_return = policy_return(&gt_sol, gt_reward)?;
    Ok(TransferRecord {
        learned_return,
        gt_return,
        ratio: learned_return / gt_return,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDynamics {
    pub slip: Option<f64>,
    #[serde(default)]
    pub disabled_actions: Vec<usize>,
}

impl TargetDynamics {
    pub fn apply(&self, source: &FiniteMdp) -> Result<FiniteMdp, ScenarioError> {
        let perturbation = DynamicsPerturbation {
            slip: self.slip,
            remap: self
                .disabled_actions
                .iter()
                .flat_map(|&a| DynamicsPerturbation::disable(a).remap)
                .collect(),
        };
        Ok(modify_dynamics(source, &perturbation)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryFit {
    /// Weighted mean of `learned - gt`.
    pub offset: f64,
    /// `1 - SS(learned - gt - offset) / SS(learned - mean)`.
    pub offset_r2: f64,
    pub slope: f64,
    pub intercept: f64,
    pub affine_r2: f64,
    /// Largest `|learned - gt - offset|` over positively weighted states.
    pub max_residual: f64,
    /// Whether the affine slope is 1 within 1e-6.
    pub unit_slope: bool,
    /// The weighted gt variance is zero, so the R² values are undefined.
    pub degenerate: bool,
}

/// Weighted fit of `learned ≈ gt + c`, with the affine fit for reference.
pub fn reward_recovery_check(
    learned: &[f64],
    gt: &[f64],
    support_weights: &[f64],
) -> Result<RecoveryFit, ScenarioError> {
    if learned.len() != gt.len() || gt.len() != support_weights.len() {
        return Err(ScenarioError::RewardShape {
            expected: gt.len(),
            got: learned.len().min(support_weights.len()),
        });
    }
    let total: f64 = support_weights.iter().sum();
    let mean = |v: &dyn Fn(usize) -> f64| -> f64 {
        (0..gt.len())
            .map(|s| support_weights[s] * v(s))
            .sum::<f64>()
            / total
    };
    let offset = mean(&|s| learned[s] - gt[s]);
    let learned_mean = mean(&|s| learned[s]);
    let gt_mean = mean(&|s| gt[s]);
    let ss_tot = mean(&|s| (learned[s] - learned_mean).powi(2));
    let ss_offset = mean(&|s| (learned[s] - gt[s] - offset).powi(2));
    let var_gt = mean(&|s| (gt[s] - gt_mean).powi(2));
    let cov = mean(&|s| (gt[s] - gt_mean) * (learned[s] - learned_mean));
    let degenerate = !(var_gt > 1e-300);
    let (slope, intercept, affine_r2, offset_r2) = if degenerate {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let slope = cov / var_gt;
        let intercept = learned_mean - slope * gt_mean;
        let ss_affine = mean(&|s| (learned[s] - slope * gt[s] - intercept).powi(2));
        let r2 = |ss: f64| if ss_tot > 0.0 { 1.0 - ss / ss_tot } else { 1.0 };
        (slope, intercept, r2(ss_affine), r2(ss_offset))
    };
    let max_residual = (0..gt.len())
        .filter(|&s| support_weights[s] > 0.0)
        .map(|s| (learned[s] - gt[s] - offset).abs())
        .fold(0.0, f64::max);
    Ok(RecoveryFit {
        offset,
        offset_r2,
        slope,
        intercept,
        affine_r2,
        max_residual,
        unit_slope: (slope - 1.0).abs() < 1e-6,
        degenerate,
    })
}

/// Zeroes the weights at or below the given quantile of all weights, so
/// only states strictly above it keep their weight.
pub fn restrict_to_quantile(weights: &[f64], quantile: f64) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() - 1) as f64 * quantile).floor() as usize;
    let cut = sorted[idx];
    weights
        .iter()
        .map(|&w| if w > cut { w } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> GridConfig {
        GridConfig {
            width: w,
            height: h,
            slip: 0.0,
            start: [0, 0],
            horizon: 5,
        }
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    #[test]
    fn uniform_density_is_flat() {
        let mdp = grid(5, 5).build().unwrap();
        let d = discretize_density(&AnalyticDensity::Uniform, &mdp).unwrap();
        assert!(d.values().iter().all(|v| (v - 0.04).abs() < 1e-15));
    }

    #[test]
    fn wide_gaussian_approaches_uniform() {
        let mdp = grid(5, 5).build().unwrap();
        let uniform = vec![0.04; 25];
        let mut last = f64::INFINITY;
        for sigma in [0.5, 1.0, 2.0, 5.0, 50.0] {
            let d = discretize_density(
                &AnalyticDensity::Gaussian {
                    mean: [1.0, 4.0],
                    sigma,
                },
                &mdp,
            )
            .unwrap();
            let dist = tv(d.values(), &uniform);
            assert!(dist < last);
            last = dist;
        }
        assert!(last < 0.01);
    }

    #[test]
    fn symmetric_mixture_is_reflection_symmetric() {
        let mdp = grid(5, 5).build().unwrap();
        let spec = AnalyticDensity::Mixture2 {
            means: [[1.0, 2.5], [4.0, 2.5]],
            sigma: 0.8,
        };
        let d = discretize_density(&spec, &mdp).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let a = d.values()[y * 5 + x];
                let b = d.values()[y * 5 + (4 - x)];
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mean_outside_grid_is_rejected() {
        let mdp = grid(3, 3).build().unwrap();
        let spec = AnalyticDensity::Gaussian {
            mean: [3.5, 1.0],
            sigma: 1.0,
        };
        assert!(matches!(
            discretize_density(&spec, &mdp),
            Err(ScenarioError::MeanOutsideGrid { .. })
        ));
    }

    #[test]
    fn recovery_fit_examples() {
        let gt = [0.0, 1.0, 2.0, 3.0];
        let w = [0.25; 4];
        let shifted: Vec<f64> = gt.iter().map(|g| g + 5.0).collect();
        let fit = reward_recovery_check(&shifted, &gt, &w).unwrap();
        assert!((fit.offset - 5.0).abs() < 1e-12);
        assert!((fit.offset_r2 - 1.0).abs() < 1e-12 && fit.max_residual < 1e-12);
        assert!(fit.unit_slope);

        let doubled: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        let fit = reward_recovery_check(&doubled, &gt, &w).unwrap();
        assert!((fit.affine_r2 - 1.0).abs() < 1e-12);
        assert!((fit.slope - 2.0).abs() < 1e-12 && !fit.unit_slope);
        assert!(fit.offset_r2 < 1.0);

        let flat = reward_recovery_check(&gt, &[1.0; 4], &w).unwrap();
        assert!(flat.degenerate && flat.offset_r2.is_nan());
    }

    #[test]
    fn quantile_restriction() {
        let w = restrict_to_quantile(&[0.0, 0.1, 0.2, 0.3, 0.4], 0.5);
        assert_eq!(w, vec![0.0, 0.0, 0.0, 0.3, 0.4]);
        let w = restrict_to_quantile(&[0.0, 0.0, 0.5, 0.5], 0.1);
        assert_eq!(w, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn prior_heatmap_control_and_zero_prior() {
        let spec = HardTaskSpec {
            horizon: 10,
            ..Default::default()
        };
        let (mdp, task) = spec.build().unwrap();
        let lambdas = [0.0, 0.3, 1.0];
        let alphas = [0.3, 1.0];
        let zero =
            prior_reward_downstream(&mdp, &task, &vec![0.0; 36], &lambdas, &alphas, 0.99).unwrap();
        for (row, &alpha) in zero.returns.iter().zip(&alphas) {
            let plain = policy_return(
                &solve(&mdp, &task, &SolverConfig::new(alpha).unwrap()).unwrap(),
                &task,
            )
            .unwrap();
            assert!((row[0] - plain).abs() < 1e-12);
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
        assert!(zero.improvements().is_empty());
    }

    #[test]
    fn transfer_degenerate_cases() {
        let source = grid(4, 4).build().unwrap();
        let gt = GtRewardSpec::GoalDistance {
            goal: [3, 3],
            scale: 1.0,
        }
        .build(&source)
        .unwrap();
        let target = TargetDynamics {
            slip: Some(0.3),
            disabled_actions: vec![1],
        }
        .apply(&source)
        .unwrap();
        let same = dynamics_transfer(&gt, &gt, &source, &target, 1.0).unwrap();
        assert!((same.ratio - 1.0).abs() < 1e-12);
        let small = grid(2, 2).build().unwrap();
        assert!(matches!(
            dynamics_transfer(&gt, &gt, &small, &target, 1.0),
            Err(ScenarioError::StateSpaceMismatch(4, 16))
        ));
    }

    #[test]
    fn irl_with_gt_reward_has_unit_ratio() {
        let mdp = grid(4, 4).build().unwrap();
        let gt = GtRewardSpec::GoalDistance {
            goal: [3, 3],
            scale: 2.0,
        }
        .build(&mdp)
        .unwrap();
        let scenario = irl_from_trajectories(mdp.clone(), gt.clone(), 4, 1.0, 9).unwrap();
        assert_eq!(scenario.expert_trajectories.len(), 4);
        let sol = solve(&mdp, &gt, &SolverConfig::default()).unwrap();
        let ratio = policy_return(&sol, &gt).unwrap() / scenario.expert_return;
        assert!((ratio - 1.0).abs() < 1e-15);
    }
}
