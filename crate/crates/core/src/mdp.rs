//! Finite-horizon tabular MDPs and the gridworld family used by the experiments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("grid must have at least one cell (got {width}x{height})")]
    EmptyGrid { width: usize, height: usize },
    #[error("slip probability {0} outside [0, 1)")]
    InvalidSlip(f64),
    #[error("state index {index} out of range for {n_states} states")]
    StateOutOfRange { index: usize, n_states: usize },
    #[error("action index {index} out of range for {n_actions} actions")]
    ActionOutOfRange { index: usize, n_actions: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("table shape mismatch: expected {expected} entries for {what}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1")]
    NotStochastic {
        state: usize,
        action: usize,
        sum: f64,
    },
    #[error("transition entry (s={state}, a={action}, s'={next}) is {value}")]
    NegativeTransition {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    #[error("initial distribution entry {index} is {value}")]
    NegativeInit { index: usize, value: f64 },
    #[error("initial distribution sums to {0}, expected 1")]
    InitNotNormalized(f64),
    #[error("slip override requires grid geometry, this MDP was built from raw tables")]
    NoGrid,
    #[error("trajectory has {got} states, expected horizon+1 = {expected}")]
    TrajectoryLength { expected: usize, got: usize },
    #[error("trajectory step {step}: state {to} is unreachable from {from}")]
    Unreachable { step: usize, from: usize, to: usize },
}

/// Gridworld actions. `Stay` never slips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridAction {
    Stay = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [
        GridAction::Stay,
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
    ];
    const MOVES: [GridAction; 4] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (i64, i64) {
        match self {
            GridAction::Stay => (0, 0),
            GridAction::Up => (0, 1),
            GridAction::Down => (0, -1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
        }
    }
}

/// Geometry retained for grids so dynamics can be rebuilt under a new slip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub slip_prob: f64,
}

impl GridSpec {
    pub fn state_of(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_of(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// Flattened `(state, action, next_state)` table.
    transitions: Vec<f64>,
    init_dist: Vec<f64>,
    horizon: usize,
    coords: Vec<[f64; 2]>,
    grid: Option<GridSpec>,
}

impl FiniteMdp {
    /// Builds an MDP from raw tables and validates it.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        init_dist: Vec<f64>,
        horizon: usize,
        coords: Vec<[f64; 2]>,
    ) -> Result<Self, MdpError> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            init_dist,
            horizon,
            coords,
            grid: None,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.grid.as_ref()
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// `P(· | s, a)` as a slice over next states.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Returns a copy with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self, MdpError> {
        if horizon == 0 {
            return Err(MdpError::ZeroHorizon);
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    /// Returns a copy with a different initial distribution.
    pub fn with_init_dist(&self, init_dist: Vec<f64>) -> Result<Self, MdpError> {
        let mut out = self.clone();
        out.init_dist = init_dist;
        out.validate()?;
        Ok(out)
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), MdpError> {
        if self.horizon == 0 {
            return Err(MdpError::ZeroHorizon);
        }
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 {
            return Err(MdpError::Shape {
                what: "states",
                expected: 1,
                got: 0,
            });
        }
        if a == 0 {
            return Err(MdpError::Shape {
                what: "actions",
                expected: 1,
                got: 0,
            });
        }
        check_len("transitions", s * a * s, self.transitions.len())?;
        check_len("init_dist", s, self.init_dist.len())?;
        check_len("coords", s, self.coords.len())?;
        for st in 0..s {
            for ac in 0..a {
                let row = self.next_dist(st, ac);
                let mut sum = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if !(p >= 0.0) || !p.is_finite() {
                        return Err(MdpError::NegativeTransition {
                            state: st,
                            action: ac,
                            next,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(MdpError::NotStochastic {
                        state: st,
                        action: ac,
                        sum,
                    });
                }
            }
        }
        let mut total = 0.0;
        for (index, &p) in self.init_dist.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(MdpError::NegativeInit { index, value: p });
            }
            total += p;
        }
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MdpError::InitNotNormalized(total));
        }
        Ok(())
    }

    /// Whether `to` can follow `from` under some action.
    pub fn reachable(&self, from: usize, to: usize) -> bool {
        (0..self.n_actions).any(|a| self.prob(from, a, to) > 0.0)
    }

    pub fn check_state(&self, s: usize) -> Result<(), MdpError> {
        if s >= self.n_states {
            return Err(MdpError::StateOutOfRange {
                index: s,
                n_states: self.n_states,
            });
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), MdpError> {
    if expected != got {
        return Err(MdpError::Shape {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Rectangular gridworld with 5 actions (stay + 4 moves).
///
/// A move succeeds with probability `1 - slip_prob`; otherwise one of the three
/// other moves is executed uniformly. Moving into a wall leaves the agent in
/// place. State `y * width + x` sits at coordinate `(x + 0.5, y + 0.5)`.
pub fn build_gridworld(
    width: usize,
    height: usize,
    slip_prob: f64,
    init_state: usize,
    horizon: usize,
) -> Result<FiniteMdp, MdpError> {
    if width == 0 || height == 0 {
        return Err(MdpError::EmptyGrid { width, height });
    }
    let n_states = width * height;
    if init_state >= n_states {
        return Err(MdpError::StateOutOfRange {
            index: init_state,
            n_states,
        });
    }
    let mut init_dist = vec![0.0; n_states];
    init_dist[init_state] = 1.0;
    build_gridworld_with_init(width, height, slip_prob, init_dist, horizon)
}

/// Same as [`build_gridworld`] with an arbitrary initial distribution.
pub fn build_gridworld_with_init(
    width: usize,
    height: usize,
    slip_prob: f64,
    init_dist: Vec<f64>,
    horizon: usize,
) -> Result<FiniteMdp, MdpError> {
    if width == 0 || height == 0 {
        return Err(MdpError::EmptyGrid { width, height });
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(MdpError::InvalidSlip(slip_prob));
    }
    if horizon == 0 {
        return Err(MdpError::ZeroHorizon);
    }
    let grid = GridSpec {
        width,
        height,
        slip_prob,
    };
    let n_states = width * height;
    let coords = (0..n_states)
        .map(|s| {
            let (x, y) = grid.cell_of(s);
            [x as f64 + 0.5, y as f64 + 0.5]
        })
        .collect();
    let mdp = FiniteMdp {
        n_states,
        n_actions: GridAction::ALL.len(),
        transitions: grid_transitions(&grid),
        init_dist,
        horizon,
        coords,
        grid: Some(grid),
    };
    mdp.validate()?;
    Ok(mdp)
}

fn grid_step(grid: &GridSpec, s: usize, action: GridAction) -> usize {
    let (x, y) = grid.cell_of(s);
    let (dx, dy) = action.delta();
    let nx = x as i64 + dx;
    let ny = y as i64 + dy;
    if nx < 0 || ny < 0 || nx >= grid.width as i64 || ny >= grid.height as i64 {
        s
    } else {
        grid.state_of(nx as usize, ny as usize)
    }
}

fn grid_transitions(grid: &GridSpec) -> Vec<f64> {
    let n_states = grid.width * grid.height;
    let n_actions = GridAction::ALL.len();
    let mut table = vec![0.0; n_states * n_actions * n_states];
    for s in 0..n_states {
        for action in GridAction::ALL {
            let row = &mut table[(s * n_actions + action.index()) * n_states..][..n_states];
            if action == GridAction::Stay || grid.slip_prob == 0.0 {
                row[grid_step(grid, s, action)] += 1.0;
                continue;
            }
            row[grid_step(grid, s, action)] += 1.0 - grid.slip_prob;
            let share = grid.slip_prob / 3.0;
            for other in GridAction::MOVES.iter().filter(|&&m| m != action) {
                row[grid_step(grid, s, *other)] += share;
            }
        }
    }
    table
}

/// Changes applied by [`modify_dynamics`]: an optional new slip probability
/// (grids only), then a list of `(action, replacement)` remaps under which
/// `action` behaves exactly like `replacement`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPerturbation {
    #[serde(default)]
    pub slip: Option<f64>,
    #[serde(default)]
    pub remap: Vec<(usize, usize)>,
}

impl DynamicsPerturbation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn disable(action: usize) -> Self {
        Self {
            slip: None,
            remap: vec![(action, GridAction::Stay.index())],
        }
    }
}

/// Returns a perturbed copy; states, actions, horizon and `init_dist` are kept.
pub fn modify_dynamics(
    mdp: &FiniteMdp,
    perturbation: &DynamicsPerturbation,
) -> Result<FiniteMdp, MdpError> {
    for &(from, to) in &perturbation.remap {
        for index in [from, to] {
            if index >= mdp.n_actions {
                return Err(MdpError::ActionOutOfRange {
                    index,
                    n_actions: mdp.n_actions,
                });
            }
        }
    }
    let mut out = mdp.clone();
    if let Some(slip) = perturbation.slip {
        let grid = mdp.grid.as_ref().ok_or(MdpError::NoGrid)?;
        if !(0.0..1.0).contains(&slip) {
            return Err(MdpError::InvalidSlip(slip));
        }
        let grid = GridSpec {
            slip_prob: slip,
            ..grid.clone()
        };
        out.transitions = grid_transitions(&grid);
        out.grid = Some(grid);
    }
    // Remaps read from the pre-remap table so chains do not compound.
    let source = out.transitions.clone();
    let (n_s, n_a) = (out.n_states, out.n_actions);
    for &(from, to) in &perturbation.remap {
        for s in 0..n_s {
            let dst = (s * n_a + from) * n_s;
            let src = (s * n_a + to) * n_s;
            out.transitions[dst..dst + n_s].copy_from_slice(&source[src..src + n_s]);
        }
    }
    out.validate()?;
    Ok(out)
}

/// A state sequence `s_0..s_T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>) -> Self {
        Self { states }
    }

    /// Checks length and one-step reachability against `mdp`.
    pub fn validate(&self, mdp: &FiniteMdp) -> Result<(), MdpError> {
        let expected = mdp.horizon() + 1;
        if self.states.len() != expected {
            return Err(MdpError::TrajectoryLength {
                expected,
                got: self.states.len(),
            });
        }
        for &s in &self.states {
            mdp.check_state(s)?;
        }
        for (step, w) in self.states.windows(2).enumerate() {
            if !mdp.reachable(w[0], w[1]) {
                return Err(MdpError::Unreachable {
                    step,
                    from: w[0],
                    to: w[1],
                });
            }
        }
        Ok(())
    }

    /// States visited at t = 1..T (the initial state is excluded).
    pub fn visited(&self) -> &[usize] {
        &self.states[1..]
    }

    /// Visitation count `η_τ(s)` over t = 1..T.
    pub fn visit_counts(&self, n_states: usize) -> Vec<f64> {
        let mut counts = vec![0.0; n_states];
        for &s in self.visited() {
            counts[s] += 1.0;
        }
        counts
    }
}

/// Random successor per (state, action) and a single start state.
///
/// Deterministic dynamics with a fixed start are the setting in which the
/// covariance gradient is exact, so these instances back the gradient check.
pub fn random_deterministic_mdp(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    seed: u64,
) -> Result<FiniteMdp, MdpError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        transitions[sa * n_states + rng.random_range(0..n_states)] = 1.0;
    }
    let mut init = vec![0.0; n_states];
    init[rng.random_range(0..n_states)] = 1.0;
    let coords = (0..n_states)
        .map(|s| [s as f64, (s * s) as f64 * 0.1])
        .collect();
    FiniteMdp::new(n_states, n_actions, transitions, init, horizon, coords)
}
