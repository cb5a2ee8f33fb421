//! State-only reward functions with exact parameter gradients.

use crate::mdp::FiniteMdp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("update has {got} entries, model has {expected} parameters")]
    LengthMismatch { expected: usize, got: usize },
    #[error("parameter {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("state {index} out of range for {n_states} states")]
    StateOutOfRange { index: usize, n_states: usize },
    #[error("clamp range [{0}, {1}] is empty")]
    BadClamp(f64, f64),
    #[error("feature rows have inconsistent widths")]
    RaggedFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RewardKind {
    Tabular,
    Linear,
    /// Fully connected tanh network with a scalar linear output.
    Mlp {
        hidden: Vec<usize>,
    },
}

/// Per-state feature vectors plus a short description for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub description: String,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMap {
    /// Coordinates rescaled to [0, 1] per axis, plus a constant 1.
    pub fn normalized_coords(mdp: &FiniteMdp) -> Self {
        let coords = mdp.coords();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in coords {
            for d in 0..2 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        let rows = coords
            .iter()
            .map(|c| {
                let mut row = Vec::with_capacity(3);
                for d in 0..2 {
                    let span = hi[d] - lo[d];
                    row.push(if span > 0.0 {
                        (c[d] - lo[d]) / span
                    } else {
                        0.0
                    });
                }
                row.push(1.0);
                row
            })
            .collect();
        Self {
            description: "normalized_xy_bias".into(),
            rows,
        }
    }

    pub fn custom(
        description: impl Into<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, RewardError> {
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(RewardError::RaggedFeatures);
            }
        }
        Ok(Self {
            description: description.into(),
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub kind: RewardKind,
    params: Vec<f64>,
    n_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<FeatureMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clamp: Option<(f64, f64)>,
}

impl RewardModel {
    /// One parameter per state, initialized to zero.
    pub fn tabular(n_states: usize) -> Self {
        Self {
            kind: RewardKind::Tabular,
            params: vec![0.0; n_states],
            n_states,
            features: None,
            clamp: None,
        }
    }

    pub fn tabular_from(params: Vec<f64>) -> Result<Self, RewardError> {
        check_finite(&params)?;
        Ok(Self {
            kind: RewardKind::Tabular,
            n_states: params.len(),
            params,
            features: None,
            clamp: None,
        })
    }

    /// `θ · φ(s)`, initialized to zero.
    pub fn linear(features: FeatureMap) -> Self {
        Self {
            kind: RewardKind::Linear,
            params: vec![0.0; features.dim()],
            n_states: features.rows.len(),
            features: Some(features),
            clamp: None,
        }
    }

    /// Tanh MLP; weights drawn from `U(-1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn mlp(features: FeatureMap, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut fan_in = features.dim();
        for &width in hidden.iter().chain(std::iter::once(&1)) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..width * fan_in {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, width));
            fan_in = width;
        }
        Self {
            kind: RewardKind::Mlp {
                hidden: hidden.to_vec(),
            },
            params,
            n_states: features.rows.len(),
            features: Some(features),
            clamp: None,
        }
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Result<Self, RewardError> {
        if !(lo < hi) {
            return Err(RewardError::BadClamp(lo, hi));
        }
        self.clamp = Some((lo, hi));
        Ok(self)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self, RewardError> {
        if params.len() != self.params.len() {
            return Err(RewardError::LengthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        check_finite(&params)?;
        let mut out = self.clone();
        out.params = params;
        Ok(out)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn clamp(&self) -> Option<(f64, f64)> {
        self.clamp
    }

    pub fn features(&self) -> Option<&FeatureMap> {
        self.features.as_ref()
    }

    fn check_state(&self, s: usize) -> Result<(), RewardError> {
        if s >= self.n_states {
            return Err(RewardError::StateOutOfRange {
                index: s,
                n_states: self.n_states,
            });
        }
        Ok(())
    }

    fn raw(&self, s: usize) -> f64 {
        match &self.kind {
            RewardKind::Tabular => self.params[s],
            RewardKind::Linear => dot(&self.params, self.feature_row(s)),
            RewardKind::Mlp { hidden } => self.mlp_forward(hidden, s).output,
        }
    }

    fn feature_row(&self, s: usize) -> &[f64] {
        &self.features.as_ref().expect("feature-based reward").rows[s]
    }

    pub fn reward_of(&self, s: usize) -> Result<f64, RewardError> {
        self.check_state(s)?;
        let r = self.raw(s);
        Ok(match self.clamp {
            Some((lo, hi)) => r.clamp(lo, hi),
            None => r,
        })
    }

    /// Rewards for every state.
    pub fn rewards(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| self.reward_of(s).expect("index in range"))
            .collect()
    }

    pub fn reward_grad(&self, s: usize) -> Result<Vec<f64>, RewardError> {
        self.check_state(s)?;
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_grad(s, 1.0, &mut grad);
        Ok(grad)
    }

    /// `out += weight * ∂r(s)/∂θ`.
    pub fn accumulate_grad(&self, s: usize, weight: f64, out: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        if let Some((lo, hi)) = self.clamp {
            let r = self.raw(s);
            if r <= lo || r >= hi {
                return;
            }
        }
        match &self.kind {
            RewardKind::Tabular => out[s] += weight,
            RewardKind::Linear => {
                for (o, f) in out.iter_mut().zip(self.feature_row(s)) {
                    *o += weight * f;
                }
            }
            RewardKind::Mlp { hidden } => self.mlp_backward(hidden, s, weight, out),
        }
    }

    /// `Σ_s weights[s] ∇_θ r(s)`.
    pub fn weighted_grad(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        for (s, &w) in weights.iter().enumerate() {
            self.accumulate_grad(s, w, &mut out);
        }
        out
    }

    /// Pure update `θ + delta`.
    pub fn apply_update(&self, delta: &[f64]) -> Result<Self, RewardError> {
        if delta.len() != self.params.len() {
            return Err(RewardError::LengthMismatch {
                expected: self.params.len(),
                got: delta.len(),
            });
        }
        let params = self.params.iter().zip(delta).map(|(p, d)| p + d).collect();
        self.with_params(params)
    }

    fn layer_dims(&self, hidden: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = self.features.as_ref().map_or(0, FeatureMap::dim);
        for &w in hidden.iter().chain(std::iter::once(&1)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    fn mlp_forward(&self, hidden: &[usize], s: usize) -> MlpTrace {
        let dims = self.layer_dims(hidden);
        let mut activations = vec![self.feature_row(s).to_vec()];
        let mut offset = 0;
        let last = dims.len() - 1;
        for (layer, &(fan_in, width)) in dims.iter().enumerate() {
            let weights = &self.params[offset..offset + width * fan_in];
            let biases = &self.params[offset + width * fan_in..offset + width * (fan_in + 1)];
            offset += width * (fan_in + 1);
            let input = activations.last().unwrap();
            let out: Vec<f64> = (0..width)
                .map(|j| {
                    let z = dot(&weights[j * fan_in..(j + 1) * fan_in], input) + biases[j];
                    if layer == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            activations.push(out);
        }
        MlpTrace {
            output: activations.last().unwrap()[0],
            activations,
        }
    }

    fn mlp_backward(&self, hidden: &[usize], s: usize, weight: f64, out: &mut [f64]) {
        let dims = self.layer_dims(hidden);
        let trace = self.mlp_forward(hidden, s);
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &(fan_in, width) in &dims {
            offsets.push(offset);
            offset += width * (fan_in + 1);
        }
        // Gradient w.r.t. the pre-activation of the current layer.
        let mut delta = vec![weight];
        for layer in (0..dims.len()).rev() {
            let (fan_in, width) = dims[layer];
            let base = offsets[layer];
            let input = &trace.activations[layer];
            for j in 0..width {
                for i in 0..fan_in {
                    out[base + j * fan_in + i] += delta[j] * input[i];
                }
                out[base + width * fan_in + j] += delta[j];
            }
            if layer == 0 {
                break;
            }
            let weights = &self.params[base..base + width * fan_in];
            delta = (0..fan_in)
                .map(|i| {
                    let back: f64 = (0..width).map(|j| weights[j * fan_in + i] * delta[j]).sum();
                    back * (1.0 - input[i] * input[i])
                })
                .collect();
        }
    }
}

struct MlpTrace {
    output: f64,
    activations: Vec<Vec<f64>>,
}

fn check_finite(params: &[f64]) -> Result<(), RewardError> {
    if let Some((index, &value)) = params.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(RewardError::NonFinite { index, value });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
