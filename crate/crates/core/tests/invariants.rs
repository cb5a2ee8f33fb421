mod common;

use common::*;
use firl_core::density_ratio::{discriminator_fit, DiscriminatorConfig};
use firl_core::grad::{analytic_grad_exact, analytic_grad_mc};
use firl_core::io::{RunConfig, ScenarioConfig};
use firl_core::mdp::{modify_dynamics, DynamicsPerturbation};
use firl_core::scenarios::density_matching;
use firl_core::soft_solver::sample_trajectories;
use firl_core::{
    build_gridworld, divergence_exact, solve, ExpertDensity, FDivKind, FeatureMap, RatioEstimator,
    RewardModel, SolverConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows_are_distributions(mdp: &firl_core::FiniteMdp) -> bool {
    (0..mdp.n_states()).all(|s| {
        (0..mdp.n_actions()).all(|a| {
            let row = mdp.next_dist(s, a);
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12
        })
    })
}

fn random_density(n: usize, rng: &mut ChaCha8Rng) -> ExpertDensity {
    ExpertDensity::from_weights((0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_rows_sum_to_one(width in 1usize..6, height in 1usize..6, slip in 0.0f64..0.9, horizon in 1usize..8) {
        let mdp = build_gridworld(width, height, slip, 0, horizon).unwrap();
        prop_assert!(rows_are_distributions(&mdp));
    }

    #[test]
    fn modify_dynamics_keeps_shape(slip in 0.0f64..0.9, new_slip in 0.0f64..0.9, disabled in 0usize..5, start in 0usize..16) {
        let mdp = build_gridworld(4, 4, slip, start, 6).unwrap();
        let perturbation = DynamicsPerturbation { slip: Some(new_slip), ..DynamicsPerturbation::disable(disabled) };
        let out = modify_dynamics(&mdp, &perturbation).unwrap();
        prop_assert_eq!(out.n_states(), mdp.n_states());
        prop_assert_eq!(out.n_actions(), mdp.n_actions());
        prop_assert_eq!(out.horizon(), mdp.horizon());
        prop_assert_eq!(out.init_dist(), mdp.init_dist());
        prop_assert!(rows_are_distributions(&out));
    }

    #[test]
    fn solver_outputs_are_distributions(seed in any::<u64>(), n_s in 2usize..7, n_a in 1usize..4, horizon in 1usize..7, alpha in 0.1f64..3.0) {
        let mdp = stochastic_mdp(n_s, n_a, horizon, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reward: Vec<f64> = (0..n_s).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sol = solve(&mdp, &reward, &SolverConfig::new(alpha).unwrap()).unwrap();
        for step in &sol.policy {
            for s in 0..n_s {
                let row = &step[s * n_a..(s + 1) * n_a];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!((sol.marginal_avg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let reference = ref_solve(&mdp, &reward, alpha).average();
        for (a, b) in sol.marginal_avg.iter().zip(&reference) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergences_are_nonnegative_and_match_reference(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_density(n, &mut rng);
        let q = random_density(n, &mut rng);
        for kind in FDivKind::ALL {
            let value = divergence_exact(kind, &p, q.values()).unwrap();
            prop_assert!(value >= -1e-15);
            prop_assert!((value - ref_divergence(kind, p.values(), q.values())).abs() < 1e-12);
            prop_assert!(divergence_exact(kind, &p, p.values()).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn constant_ratio_gives_zero_mc_gradient(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mdp = stochastic_mdp(4, 2, 4, seed);
        let model = RewardModel::tabular(4);
        let sol = solve(&mdp, &model.rewards(), &SolverConfig::default()).unwrap();
        let batch = sample_trajectories(&mdp, &sol, 50, seed).unwrap();
        for kind in FDivKind::ALL {
            let grad = analytic_grad_mc(&batch, &model, 1.0, kind, &RatioEstimator::constant(c, 4)).unwrap().grad;
            prop_assert!(l2(&grad) < 1e-12);
        }
    }
}

struct Fixture {
    mdp: firl_core::FiniteMdp,
    model: RewardModel,
    expert: ExpertDensity,
    exact: Vec<f64>,
    table: RatioEstimator,
    sol: firl_core::SoftSolution,
}

fn fixture(seed: u64) -> Fixture {
    let mdp = stochastic_mdp(4, 2, 5, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let model =
        RewardModel::tabular_from((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let expert = random_density(4, &mut rng);
    let cfg = SolverConfig::default();
    let sol = solve(&mdp, &model.rewards(), &cfg).unwrap();
    let exact = analytic_grad_exact(&mdp, &model, &cfg, FDivKind::Fkl, &expert)
        .unwrap()
        .grad;
    let table = RatioEstimator::exact(&expert, &sol.marginal_avg);
    Fixture {
        mdp,
        model,
        expert,
        exact,
        table,
        sol,
    }
}

#[test]
fn mc_error_shrinks_with_batch_size() {
    let f = fixture(11);
    let error = |n: usize, seed: u64| {
        let batch = sample_trajectories(&f.mdp, &f.sol, n, seed).unwrap();
        let mc = analytic_grad_mc(&batch, &f.model, 1.0, FDivKind::Fkl, &f.table)
            .unwrap()
            .grad;
        l2_diff(&mc, &f.exact)
    };
    let small = median((0..10).map(|seed| error(500, seed)).collect());
    let large = median((0..10).map(|seed| error(2000, 100 + seed)).collect());
    assert!(large < small, "median error {large} at 4n vs {small} at n");
}

#[test]
fn mc_matches_exact_at_200k() {
    for seed in [3, 4] {
        let f = fixture(seed);
        let batch = sample_trajectories(&f.mdp, &f.sol, 200_000, seed).unwrap();
        let mc = analytic_grad_mc(&batch, &f.model, 1.0, FDivKind::Fkl, &f.table)
            .unwrap()
            .grad;
        let rel = l2_diff(&mc, &f.exact) / l2(&f.exact);
        assert!(rel < 1e-2, "relative L2 error {rel}");
    }
}

#[test]
fn discriminator_ratio_converges_to_exact_ratio() {
    let f = fixture(21);
    let features = FeatureMap::normalized_coords(&f.mdp);
    let sampled_expert = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..n)
            .map(|_| {
                let mut u: f64 = rng.random();
                for (s, p) in f.expert.values().iter().enumerate() {
                    if u < *p {
                        return s;
                    }
                    u -= p;
                }
                3
            })
            .collect()
    };
    let gap = |n: usize, seed: u64| {
        let batch = sample_trajectories(&f.mdp, &f.sol, n, seed).unwrap();
        let agent = batch.visited_states();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe);
        let expert = sampled_expert(agent.len(), &mut rng);
        let disc = discriminator_fit(
            &expert,
            &agent,
            &features,
            &DiscriminatorConfig::default(),
            None,
        )
        .unwrap();
        let plug_in = analytic_grad_mc(
            &batch,
            &f.model,
            1.0,
            FDivKind::Fkl,
            &RatioEstimator::Discriminator(disc),
        )
        .unwrap()
        .grad;
        let exact = analytic_grad_mc(&batch, &f.model, 1.0, FDivKind::Fkl, &f.table)
            .unwrap()
            .grad;
        l2_diff(&plug_in, &exact)
    };
    let gaps: Vec<f64> = [250, 500, 1000, 2000]
        .iter()
        .map(|&n| median((0..7).map(|seed| gap(n, 1000 * n as u64 + seed)).collect()))
        .collect();
    for w in gaps.windows(2) {
        assert!(w[1] < w[0], "median gaps {gaps:?}");
    }
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&scenario_path(name)).unwrap()
}

#[test]
fn exact_training_loss_trends_down() {
    let cfg = load("gaussian_fkl.json");
    let ScenarioConfig::DensityMatching { grid, expert } = &cfg.scenario else {
        panic!("density matching config expected")
    };
    let firl_core::io::ExpertSource::Analytic(spec) = expert else {
        panic!("analytic expert expected")
    };
    let result = density_matching(spec, grid)
        .unwrap()
        .run(&cfg.reward, &cfg.train)
        .unwrap();
    let losses: Vec<f64> = result.metrics.iter().map(|m| m.loss).collect();
    let initial = losses[0];
    let last = *losses.last().unwrap();
    let argmin = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(last < 0.1 * initial, "final {last} vs initial {initial}");
    assert!(
        argmin >= 3 * losses.len() / 4,
        "minimum at iteration {argmin} of {}",
        losses.len()
    );
}

#[test]
fn fkl_covers_both_modes() {
    let cfg = load("mixture_fkl.json");
    let ScenarioConfig::DensityMatching { grid, expert } = &cfg.scenario else {
        panic!("density matching config expected")
    };
    let firl_core::io::ExpertSource::Analytic(spec) = expert else {
        panic!("analytic expert expected")
    };
    let firl_core::scenarios::AnalyticDensity::Mixture2 { means, .. } = spec else {
        panic!("bimodal expert expected")
    };
    let scenario = density_matching(spec, grid).unwrap();
    let result = scenario.run(&cfg.reward, &cfg.train).unwrap();
    let rho = ref_solve(&scenario.mdp, &result.model.rewards(), cfg.train.alpha).average();
    for mean in means {
        // Everything closer to this mean than to the other one.
        let other = means.iter().find(|m| *m != mean).unwrap();
        let dist = |c: &[f64; 2], m: &[f64; 2]| (c[0] - m[0]).hypot(c[1] - m[1]);
        let mass: f64 = scenario
            .mdp
            .coords()
            .iter()
            .zip(&rho)
            .filter(|(c, _)| dist(c, mean) < dist(c, other))
            .map(|(_, p)| p)
            .sum();
        assert!(mass >= 0.2, "mass {mass} near mode {mean:?}");
    }
}
