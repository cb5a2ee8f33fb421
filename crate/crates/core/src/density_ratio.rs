//! Estimators for the ratio `ρ_E(s) / ρ_θ(s)`.
//!
//! Two routes: fit a density model to agent samples when the expert density
//! is known, or fit a logistic discriminator between expert and agent states
//! and read the ratio off its odds `D / (1 - D)`.

use crate::divergence::{clip_ratio, ExpertDensity, DENSITY_FLOOR, RATIO_CLIP};
use crate::reward::FeatureMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BANDWIDTH: f64 = 0.2;
pub const LOGIT_CLIP: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatioError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("state {index} out of range for {n_states} states")]
    StateOutOfRange { index: usize, n_states: usize },
    #[error("expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
}

/// Product-form 2-D Epanechnikov kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    points: Vec<[f64; 2]>,
    bandwidth: f64,
}

#[inline]
fn epanechnikov(v: f64) -> f64 {
    if v.abs() <= 1.0 {
        0.75 * (1.0 - v * v)
    } else {
        0.0
    }
}

/// CDF of the Epanechnikov kernel.
#[inline]
fn epanechnikov_cdf(v: f64) -> f64 {
    if v <= -1.0 {
        0.0
    } else if v >= 1.0 {
        1.0
    } else {
        0.5 + 0.75 * v - 0.25 * v * v * v
    }
}

pub fn kde_fit(samples: &[[f64; 2]], bandwidth: f64) -> Result<Kde, RatioError> {
    if samples.len() < 2 {
        return Err(RatioError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(RatioError::BadBandwidth(bandwidth));
    }
    Ok(Kde {
        points: samples.to_vec(),
        bandwidth,
    })
}

pub fn kde_eval(model: &Kde, point: [f64; 2]) -> f64 {
    model.density(point)
}

impl Kde {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn density(&self, point: [f64; 2]) -> f64 {
        let bw = self.bandwidth;
        let total: f64 = self
            .points
            .iter()
            .map(|p| epanechnikov((point[0] - p[0]) / bw) * epanechnikov((point[1] - p[1]) / bw))
            .sum();
        total / (self.points.len() as f64 * bw * bw)
    }

    /// Probability mass of the axis-aligned square `center ± half_width`.
    pub fn cell_mass(&self, center: [f64; 2], half_width: f64) -> f64 {
        let bw = self.bandwidth;
        let total: f64 = self
            .points
            .iter()
            .map(|p| {
                let mut m = 1.0;
                for d in 0..2 {
                    let hi = (center[d] + half_width - p[d]) / bw;
                    let lo = (center[d] - half_width - p[d]) / bw;
                    m *= epanechnikov_cdf(hi) - epanechnikov_cdf(lo);
                }
                m
            })
            .sum();
        total / self.points.len() as f64
    }

    /// Per-state masses over square cells centered on `coords`.
    pub fn cell_masses(&self, coords: &[[f64; 2]], half_width: f64) -> Vec<f64> {
        coords
            .iter()
            .map(|&c| self.cell_mass(c, half_width))
            .collect()
    }
}

/// `w_i = ρ_E(s_i) / ρ̂_θ(s_i)`, with the density floored and the weight
/// capped at the upper ratio clip.
pub fn importance_weights(
    rho_e: &ExpertDensity,
    agent_density: &[f64],
    samples: &[usize],
) -> Result<Vec<f64>, RatioError> {
    if agent_density.len() != rho_e.len() {
        return Err(RatioError::Shape {
            expected: rho_e.len(),
            got: agent_density.len(),
        });
    }
    samples
        .iter()
        .map(|&s| {
            if s >= rho_e.len() {
                return Err(RatioError::StateOutOfRange {
                    index: s,
                    n_states: rho_e.len(),
                });
            }
            let w = rho_e.values()[s] / agent_density[s].max(DENSITY_FLOOR);
            Ok(w.min(RATIO_CLIP.1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorFeatures {
    /// One weight per state; the optimum is the empirical `ρ̂_E / (ρ̂_E + ρ̂_θ)`.
    OneHot,
    /// Logistic regression on normalized coordinates plus bias.
    Coords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub features: DiscriminatorFeatures,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub logit_clip: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            features: DiscriminatorFeatures::OneHot,
            max_steps: 200,
            grad_tol: 1e-6,
            logit_clip: LOGIT_CLIP,
        }
    }
}

/// Logistic discriminator `D(s) = σ(clip(w·φ(s)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    weights: Vec<f64>,
    features: Vec<Vec<f64>>,
    logit_clip: f64,
    /// Newton steps taken and the final gradient norm.
    pub steps: usize,
    pub grad_norm: f64,
}

impl Discriminator {
    pub fn logit(&self, s: usize) -> f64 {
        let z: f64 = self
            .weights
            .iter()
            .zip(&self.features[s])
            .map(|(w, f)| w * f)
            .sum();
        z.clamp(-self.logit_clip, self.logit_clip)
    }

    pub fn prob(&self, s: usize) -> f64 {
        sigmoid(self.logit(s))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_states(&self) -> usize {
        self.features.len()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn empirical(states: &[usize], n_states: usize) -> Result<Vec<f64>, RatioError> {
    let mut freq = vec![0.0; n_states];
    for &s in states {
        if s >= n_states {
            return Err(RatioError::StateOutOfRange { index: s, n_states });
        }
        freq[s] += 1.0;
    }
    let n = states.len() as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    Ok(freq)
}

/// Fits the binary cross-entropy objective
/// `max_w E_expert[log D] + E_agent[log(1 - D)]` by damped Newton ascent
/// until the projected gradient norm drops below `grad_tol`.
///
/// With one-hot features the weights are boxed to `±logit_clip`, so a state
/// seen by only one side saturates at the clip instead of diverging.
pub fn discriminator_fit(
    expert_states: &[usize],
    agent_states: &[usize],
    features: &FeatureMap,
    cfg: &DiscriminatorConfig,
    warm_start: Option<&Discriminator>,
) -> Result<Discriminator, RatioError> {
    let n_states = features.rows.len();
    if expert_states.is_empty() || agent_states.is_empty() {
        return Err(RatioError::TooFewSamples { needed: 1, got: 0 });
    }
    let p_e = empirical(expert_states, n_states)?;
    let p_a = empirical(agent_states, n_states)?;
    let phi: Vec<Vec<f64>> = match cfg.features {
        DiscriminatorFeatures::OneHot => (0..n_states)
            .map(|s| {
                let mut row = vec![0.0; n_states];
                row[s] = 1.0;
                row
            })
            .collect(),
        DiscriminatorFeatures::Coords => features.rows.clone(),
    };
    let dim = phi.first().map_or(0, Vec::len);
    let boxed = cfg.features == DiscriminatorFeatures::OneHot;
    let clip = cfg.logit_clip;
    let mut w = match warm_start {
        Some(d) if d.weights.len() == dim => d.weights.clone(),
        _ => vec![0.0; dim],
    };

    let objective = |w: &[f64]| -> f64 {
        (0..n_states)
            .map(|s| {
                let z: f64 = w.iter().zip(&phi[s]).map(|(a, b)| a * b).sum();
                let mut v = 0.0;
                if p_e[s] > 0.0 {
                    v += p_e[s] * log_sig(z);
                }
                if p_a[s] > 0.0 {
                    v += p_a[s] * log_sig(-z);
                }
                v
            })
            .sum()
    };

    let mut steps = 0;
    let mut grad_norm = f64::INFINITY;
    while steps < cfg.max_steps {
        let mut grad = vec![0.0; dim];
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for s in 0..n_states {
            let mass = p_e[s] + p_a[s];
            if mass == 0.0 {
                continue;
            }
            let z: f64 = w.iter().zip(&phi[s]).map(|(a, b)| a * b).sum();
            let d = sigmoid(z);
            let g = p_e[s] * (1.0 - d) - p_a[s] * d;
            let curv = mass * d * (1.0 - d);
            for i in 0..dim {
                if phi[s][i] == 0.0 {
                    continue;
                }
                grad[i] += g * phi[s][i];
                for j in 0..dim {
                    hess[(i, j)] += curv * phi[s][i] * phi[s][j];
                }
            }
        }
        // Coordinates pinned at the box with an outward gradient are done.
        let free: Vec<bool> = (0..dim)
            .map(|i| {
                !(boxed && ((w[i] >= clip && grad[i] > 0.0) || (w[i] <= -clip && grad[i] < 0.0)))
            })
            .collect();
        grad_norm = grad
            .iter()
            .zip(&free)
            .filter(|(_, f)| **f)
            .map(|(g, _)| g * g)
            .sum::<f64>()
            .sqrt();
        if grad_norm < cfg.grad_tol {
            break;
        }
        for i in 0..dim {
            hess[(i, i)] += 1e-12;
            if !free[i] {
                for j in 0..dim {
                    hess[(i, j)] = 0.0;
                    hess[(j, i)] = 0.0;
                }
                hess[(i, i)] = 1.0;
            }
        }
        let rhs = DVector::from_iterator(
            dim,
            grad.iter()
                .zip(&free)
                .map(|(g, f)| if *f { *g } else { 0.0 }),
        );
        let direction = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => rhs.clone(),
        };
        let current = objective(&w);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = w
                .iter()
                .zip(direction.iter())
                .map(|(wi, di)| {
                    let v = wi + step * di;
                    if boxed {
                        v.clamp(-clip, clip)
                    } else {
                        v
                    }
                })
                .collect();
            if objective(&trial) >= current - 1e-15 {
                w = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        steps += 1;
        if !accepted {
            break;
        }
    }
    Ok(Discriminator {
        weights: w,
        features: phi,
        logit_clip: clip,
        steps,
        grad_norm,
    })
}

#[inline]
fn log_sig(z: f64) -> f64 {
    // log σ(z), stable for large |z|.
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Discriminator odds `D / (1 - D) = exp(logit)`.
pub fn ratio_from_discriminator(d: &Discriminator, s: usize) -> f64 {
    d.logit(s).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    ExactTable,
    KdePair,
    Discriminator,
}

/// A per-state evaluator of `ρ_E(s) / ρ_θ(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum RatioEstimator {
    /// Ratios known exactly (or fixed by the caller).
    ExactTable {
        ratios: Vec<f64>,
    },
    /// Expert table over cells against KDE cell masses of agent samples.
    KdePair {
        expert: Vec<f64>,
        agent_mass: Vec<f64>,
    },
    Discriminator(Discriminator),
}

impl RatioEstimator {
    /// Exact ratio from the expert table and the agent marginal.
    pub fn exact(rho_e: &ExpertDensity, rho: &[f64]) -> Self {
        let ratios = rho_e
            .values()
            .iter()
            .zip(rho)
            .map(|(e, a)| e / a.max(DENSITY_FLOOR))
            .collect();
        RatioEstimator::ExactTable { ratios }
    }

    pub fn constant(value: f64, n_states: usize) -> Self {
        RatioEstimator::ExactTable {
            ratios: vec![value; n_states],
        }
    }

    /// Fits nothing itself: pairs the expert table with an agent KDE
    /// integrated over each state's cell.
    pub fn kde_pair(
        rho_e: &ExpertDensity,
        agent: &Kde,
        coords: &[[f64; 2]],
        cell_half_width: f64,
    ) -> Result<Self, RatioError> {
        if coords.len() != rho_e.len() {
            return Err(RatioError::Shape {
                expected: rho_e.len(),
                got: coords.len(),
            });
        }
        Ok(RatioEstimator::KdePair {
            expert: rho_e.values().to_vec(),
            agent_mass: agent.cell_masses(coords, cell_half_width),
        })
    }

    pub fn mode(&self) -> RatioMode {
        match self {
            RatioEstimator::ExactTable { .. } => RatioMode::ExactTable,
            RatioEstimator::KdePair { .. } => RatioMode::KdePair,
            RatioEstimator::Discriminator(_) => RatioMode::Discriminator,
        }
    }

    /// Ratio at `s`, clipped to the sampled-path range.
    pub fn ratio(&self, s: usize) -> f64 {
        let raw = match self {
            RatioEstimator::ExactTable { ratios } => ratios[s],
            RatioEstimator::KdePair { expert, agent_mass } => {
                expert[s] / agent_mass[s].max(DENSITY_FLOOR)
            }
            RatioEstimator::Discriminator(d) => ratio_from_discriminator(d, s),
        };
        clip_ratio(raw)
    }

    pub fn table(&self, n_states: usize) -> Vec<f64> {
        (0..n_states).map(|s| self.ratio(s)).collect()
    }
}
