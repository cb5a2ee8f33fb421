//! Executes a [`RunConfig`] into a run directory.

use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;
use thiserror::Error;

use crate::divergence::{divergence_exact, ExpertDensity, FDivKind};
use crate::grad::GradError;
use crate::gradcheck::{run_gradcheck, GradcheckRecord};
use crate::io::{
    gradcheck_csv, heatmap_csv, load_density_csv, load_trajectories, metrics_csv,
    prior_heatmap_csv, read_reward, resolve_out_dir, trajectories_to_text, ExpertSource, IoError,
    RewardArtifact, RunConfig, RunDir, ScenarioConfig,
};
use crate::kl_eval::{jittered_coords, knn_kl, policy_return, EvalError, KlEstimate, DEFAULT_K};
use crate::mdp::FiniteMdp;
use crate::reward::RewardModel;
use crate::scenarios::{
    density_matching, discretize_density, dynamics_transfer, irl_from_trajectories,
    prior_reward_downstream, restrict_to_quantile, reward_recovery_check, AnalyticDensity,
    IrlScenario, PriorHeatmap, RecoveryFit, ScenarioError, TargetDynamics, TransferRecord,
};
use crate::soft_solver::{sample_trajectories, solve, SolverConfig, SolverError};
use crate::trainer::{
    run_firl, ExpertInput, TrainError, TrainEstimator, TrainHooks, TrainResult, CELL_WIDTH,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{0}")]
    Usage(String),
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub estimator: Option<TrainEstimator>,
    pub divergence: Option<FDivKind>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), RunError> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(est) = self.estimator {
            cfg.train.estimator = est;
        }
        if let Some(kind) = self.divergence {
            cfg.train.kind = kind;
        }
        cfg.sync_seed();
        cfg.validate()?;
        Ok(())
    }
}

/// Everything a config resolves to before training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mdp: FiniteMdp,
    pub expert: ExpertInput,
    pub gt_reward: Option<Vec<f64>>,
    pub irl: Option<IrlScenario>,
    /// Sparse task reward for the prior-downstream scenario.
    pub task_reward: Option<Vec<f64>>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, RunError> {
    match &cfg.scenario {
        ScenarioConfig::DensityMatching { grid, expert } => {
            let mdp = grid.build()?;
            let expert = match expert {
                ExpertSource::Analytic(spec) => {
                    ExpertInput::Density(density_matching(spec, grid)?.expert)
                }
                ExpertSource::DensityCsv { path } => {
                    ExpertInput::Density(load_density_csv(path, mdp.n_states(), cfg.train.kind)?)
                }
                ExpertSource::Trajectories { path } => {
                    ExpertInput::Trajectories(load_trajectories(path, &mdp)?)
                }
            };
            Ok(Prepared {
                mdp,
                expert,
                gt_reward: None,
                irl: None,
                task_reward: None,
            })
        }
        ScenarioConfig::Irl {
            grid,
            gt_reward,
            n_trajectories,
            expert_alpha,
            ..
        } => {
            let mdp = grid.build()?;
            let gt = gt_reward.build(&mdp)?;
            let irl = irl_from_trajectories(
                mdp.clone(),
                gt.clone(),
                *n_trajectories,
                *expert_alpha,
                cfg.seed,
            )?;
            Ok(Prepared {
                expert: ExpertInput::Trajectories(irl.expert_trajectories.clone()),
                mdp,
                gt_reward: Some(gt),
                irl: Some(irl),
                task_reward: None,
            })
        }
        ScenarioConfig::PriorDownstream { task, .. } => {
            let (mdp, task_reward) = task.build()?;
            let uniform = discretize_density(&AnalyticDensity::Uniform, &mdp)?;
            Ok(Prepared {
                mdp,
                expert: ExpertInput::Density(uniform),
                gt_reward: None,
                irl: None,
                task_reward: Some(task_reward),
            })
        }
        ScenarioConfig::Transfer {
            grid, gt_reward, ..
        } => {
            let mdp = grid.build()?;
            let gt = gt_reward.build(&mdp)?;
            let rho = solve(&mdp, &gt, &SolverConfig::new(cfg.train.alpha)?)?.marginal_avg;
            Ok(Prepared {
                expert: ExpertInput::Density(
                    ExpertDensity::from_weights(rho).map_err(TrainError::from)?,
                ),
                mdp,
                gt_reward: Some(gt),
                irl: None,
                task_reward: None,
            })
        }
    }
}

pub fn train(cfg: &RunConfig, prepared: &Prepared) -> Result<TrainResult, RunError> {
    let hooks = TrainHooks {
        gt_reward: prepared.gt_reward.as_deref(),
    };
    let init = cfg.reward.build(&prepared.mdp);
    Ok(run_firl(
        &prepared.mdp,
        &prepared.expert,
        init,
        &cfg.train,
        &hooks,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_exact_fkl: f64,
    pub final_exact_rkl: f64,
    pub final_grad_norm: f64,
}

impl TrainSummary {
    fn of(result: &TrainResult) -> Self {
        let first = result.metrics.first();
        let last = result.metrics.last();
        let pick =
            |f: fn(&crate::trainer::IterationMetrics) -> f64| last.map(f).unwrap_or(f64::NAN);
        Self {
            iterations: result.metrics.len(),
            initial_loss: first.map(|m| m.loss).unwrap_or(f64::NAN),
            final_loss: pick(|m| m.loss),
            final_exact_fkl: pick(|m| m.exact_fkl),
            final_exact_rkl: pick(|m| m.exact_rkl),
            final_grad_norm: pick(|m| m.grad_norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScenarioReport {
    DensityMatching {
        train: TrainSummary,
        /// Exact divergences of the final marginal, after the last update.
        final_marginal_fkl: f64,
        final_marginal_rkl: f64,
    },
    Irl {
        train: TrainSummary,
        n_trajectories: usize,
        expert_return: f64,
        retrained_return: f64,
        return_ratio: f64,
        recovery: RecoveryFit,
    },
    PriorDownstream {
        train: TrainSummary,
        heatmap: PriorHeatmap,
        /// `(alpha, lambda, gain)` for every cell beating its λ = 0 control.
        improvements: Vec<(f64, f64, f64)>,
    },
    Transfer {
        train: TrainSummary,
        target: TargetDynamics,
        in_domain: TransferRecord,
        transfer: TransferRecord,
    },
}

/// Output of a config-driven command.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: Option<ScenarioReport>,
}

fn start_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<RunDir, RunError> {
    let now = Utc::now();
    Ok(RunDir::create(resolve_out_dir(out, &cfg.name, now), now)?)
}

fn write_training(
    run: &mut RunDir,
    prepared: &Prepared,
    result: &TrainResult,
) -> Result<(), RunError> {
    run.write("metrics.csv", metrics_csv(&result.metrics).as_bytes())?;
    run.write_json(
        "reward.json",
        &RewardArtifact {
            model: result.model.clone(),
            rewards: result.model.rewards(),
        },
    )?;
    run.write(
        "heatmap.csv",
        heatmap_csv(&result.model, &prepared.mdp).as_bytes(),
    )?;
    Ok(())
}

/// `train`: learning curve, learned reward and its heatmap.
pub fn run_train(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutput, RunError> {
    let prepared = prepare(cfg)?;
    let mut run = start_dir(cfg, out)?;
    let result = train(cfg, &prepared)?;
    write_training(&mut run, &prepared, &result)?;
    let dir = run.path().to_path_buf();
    run.finish("train", cfg.seed, Some(cfg))?;
    Ok(RunOutput { dir, report: None })
}

/// `scenario`: training plus the scenario's own evaluation in `summary.json`.
pub fn run_scenario(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutput, RunError> {
    let prepared = prepare(cfg)?;
    let mut run = start_dir(cfg, out)?;
    let report = scenario_report(cfg, &prepared, &mut run)?;
    run.write_json("summary.json", &report)?;
    let dir = run.path().to_path_buf();
    run.finish("scenario", cfg.seed, Some(cfg))?;
    Ok(RunOutput {
        dir,
        report: Some(report),
    })
}

/// `transfer`: needs a transfer scenario; `target` replaces its target dynamics.
pub fn run_transfer(
    cfg: &RunConfig,
    target: Option<TargetDynamics>,
    out: Option<&Path>,
) -> Result<RunOutput, RunError> {
    let mut cfg = cfg.clone();
    match (&mut cfg.scenario, target) {
        (ScenarioConfig::Transfer { target: t, .. }, Some(new)) => *t = new,
        (ScenarioConfig::Transfer { .. }, None) => {}
        _ => {
            return Err(RunError::Usage(
                "transfer needs a config with scenario type \"transfer\"".into(),
            ))
        }
    }
    let prepared = prepare(&cfg)?;
    let mut run = start_dir(&cfg, out)?;
    let report = scenario_report(&cfg, &prepared, &mut run)?;
    run.write_json("transfer.json", &report)?;
    let dir = run.path().to_path_buf();
    run.finish("transfer", cfg.seed, Some(&cfg))?;
    Ok(RunOutput {
        dir,
        report: Some(report),
    })
}

fn scenario_report(
    cfg: &RunConfig,
    prepared: &Prepared,
    run: &mut RunDir,
) -> Result<ScenarioReport, RunError> {
    let result = train(cfg, prepared)?;
    write_training(run, prepared, &result)?;
    let summary = TrainSummary::of(&result);
    let learned = result.model.rewards();
    let report = match &cfg.scenario {
        ScenarioConfig::DensityMatching { .. } => {
            let rho_e = prepared.expert.marginal(prepared.mdp.n_states())?;
            let rho = &result.final_solution.marginal_avg;
            ScenarioReport::DensityMatching {
                train: summary,
                final_marginal_fkl: divergence_exact(FDivKind::Fkl, &rho_e, rho)
                    .map_err(TrainError::from)?,
                final_marginal_rkl: divergence_exact(FDivKind::Rkl, &rho_e, rho)
                    .map_err(TrainError::from)?,
            }
        }
        ScenarioConfig::Irl {
            support_quantile,
            n_trajectories,
            expert_alpha,
            ..
        } => {
            let irl = prepared.irl.as_ref().expect("irl scenario prepared");
            run.write(
                "expert_trajectories.txt",
                trajectories_to_text(&irl.expert_trajectories).as_bytes(),
            )?;
            let retrained = solve(&prepared.mdp, &learned, &SolverConfig::new(*expert_alpha)?)?;
            let retrained_return = policy_return(&retrained, &irl.gt_reward)?;
            let expert_marginal = prepared.expert.marginal(prepared.mdp.n_states())?;
            let weights = restrict_to_quantile(expert_marginal.values(), *support_quantile);
            ScenarioReport::Irl {
                train: summary,
                n_trajectories: *n_trajectories,
                expert_return: irl.expert_return,
                retrained_return,
                return_ratio: retrained_return / irl.expert_return,
                recovery: reward_recovery_check(&learned, &irl.gt_reward, &weights)?,
            }
        }
        ScenarioConfig::PriorDownstream {
            task,
            lambdas,
            alphas,
        } => {
            let task_reward = prepared
                .task_reward
                .as_deref()
                .expect("prior scenario prepared");
            let heatmap = prior_reward_downstream(
                &prepared.mdp,
                task_reward,
                &learned,
                lambdas,
                alphas,
                task.gamma,
            )?;
            run.write("prior_heatmap.csv", prior_heatmap_csv(&heatmap).as_bytes())?;
            ScenarioReport::PriorDownstream {
                train: summary,
                improvements: heatmap.improvements(),
                heatmap,
            }
        }
        ScenarioConfig::Transfer { target, .. } => {
            let gt = prepared
                .gt_reward
                .as_deref()
                .expect("transfer scenario prepared");
            let target_mdp = target.apply(&prepared.mdp)?;
            let alpha = cfg.train.alpha;
            ScenarioReport::Transfer {
                train: summary,
                target: target.clone(),
                in_domain: dynamics_transfer(&learned, gt, &prepared.mdp, &prepared.mdp, alpha)?,
                transfer: dynamics_transfer(&learned, gt, &prepared.mdp, &target_mdp, alpha)?,
            }
        }
    };
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub exact_fkl: f64,
    pub exact_rkl: f64,
    pub knn_fkl: Option<KlEstimate>,
    pub knn_rkl: Option<KlEstimate>,
    pub gt_return: Option<f64>,
}

/// `eval`: scores a saved reward against the config's expert without training.
pub fn run_eval(cfg: &RunConfig, reward: &Path, out: Option<&Path>) -> Result<RunOutput, RunError> {
    let prepared = prepare(cfg)?;
    let model: RewardModel = read_reward(reward)?;
    if model.n_states() != prepared.mdp.n_states() {
        return Err(RunError::Usage(format!(
            "{} has {} states, the config's MDP has {}",
            reward.display(),
            model.n_states(),
            prepared.mdp.n_states()
        )));
    }
    let mut run = start_dir(cfg, out)?;
    let sol = solve(
        &prepared.mdp,
        &model.rewards(),
        &SolverConfig::new(cfg.train.alpha)?,
    )?;
    let rho_e = prepared.expert.marginal(prepared.mdp.n_states())?;
    let rho = &sol.marginal_avg;
    let (knn_fkl, knn_rkl) = knn_pair(cfg, &prepared, &rho_e, &sol)?;
    let report = EvalReport {
        exact_fkl: divergence_exact(FDivKind::Fkl, &rho_e, rho).map_err(TrainError::from)?,
        exact_rkl: divergence_exact(FDivKind::Rkl, &rho_e, rho).map_err(TrainError::from)?,
        knn_fkl,
        knn_rkl,
        gt_return: match &prepared.gt_reward {
            Some(gt) => Some(policy_return(&sol, gt)?),
            None => None,
        },
    };
    run.write_json("eval.json", &report)?;
    let dir = run.path().to_path_buf();
    run.finish("eval", cfg.seed, Some(cfg))?;
    Ok(RunOutput { dir, report: None })
}

fn knn_pair(
    cfg: &RunConfig,
    prepared: &Prepared,
    rho_e: &ExpertDensity,
    sol: &crate::soft_solver::SoftSolution,
) -> Result<(Option<KlEstimate>, Option<KlEstimate>), RunError> {
    use rand::{Rng, SeedableRng};
    let n_expert = cfg.train.eval_expert_samples;
    let n_agent = cfg.train.eval_agent_trajectories;
    if n_expert <= DEFAULT_K || n_agent == 0 {
        return Ok((None, None));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = prepared.mdp.coords();
    let batch = sample_trajectories(&prepared.mdp, sol, n_agent, rng.random())?;
    let agent_states: Vec<usize> = batch
        .trajectories
        .iter()
        .flat_map(|t| t.visited().to_vec())
        .collect();
    let expert_states: Vec<usize> = (0..n_expert)
        .map(|_| crate::soft_solver::sample_categorical(&mut rng, rho_e.values()))
        .collect();
    let agent_pts = jittered_coords(coords, &agent_states, CELL_WIDTH, rng.random());
    let expert_pts = jittered_coords(coords, &expert_states, CELL_WIDTH, rng.random());
    Ok((
        Some(knn_kl(&expert_pts, &agent_pts, DEFAULT_K)?),
        Some(knn_kl(&agent_pts, &expert_pts, DEFAULT_K)?),
    ))
}

#[derive(Debug)]
pub struct GradcheckOutput {
    pub dir: PathBuf,
    pub records: Vec<GradcheckRecord>,
    pub csv: String,
    pub all_pass: bool,
}

pub fn run_gradcheck_cmd(
    seed: u64,
    instances: usize,
    tol: f64,
    out: Option<&Path>,
) -> Result<GradcheckOutput, RunError> {
    let now = Utc::now();
    let mut run = RunDir::create(resolve_out_dir(out, "gradcheck", now), now)?;
    let records = run_gradcheck(seed, instances)?;
    let csv = gradcheck_csv(&records);
    run.write("gradcheck.csv", csv.as_bytes())?;
    let dir = run.path().to_path_buf();
    run.finish("gradcheck", seed, None)?;
    Ok(GradcheckOutput {
        dir,
        all_pass: records.iter().all(|r| r.passes(tol)),
        records,
        csv,
    })
}
