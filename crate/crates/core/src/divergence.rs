//! f-divergence generators, their derivatives, and the `h_f` transform.
//!
//! | kind | f(u)                              | h_f(u)      |
//! |------|-----------------------------------|-------------|
//! | FKL  | u ln u                            | -u          |
//! | RKL  | -ln u                             | 1 - ln u    |
//! | JS   | u ln u - (1+u) ln((1+u)/2)        | -ln(1+u)    |
//!
//! For JS the analytic `f(u) - f'(u) u` is `ln 2 - ln(1+u)`; the constant is
//! dropped since it cannot change a covariance.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Floor applied to agent densities before forming a ratio.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Clip range for ratios in sampled estimators.
pub const RATIO_CLIP: (f64, f64) = (1e-8, 1e8);

const NORMALIZED_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("density ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("unknown divergence {0:?} (expected fkl, rkl or js)")]
    UnknownKind(String),
    #[error("density has a negative or non-finite entry at {index}: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("density sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("density has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("density has zero total mass")]
    ZeroMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FDivKind {
    Fkl,
    Rkl,
    Js,
}

impl FDivKind {
    pub const ALL: [FDivKind; 3] = [FDivKind::Fkl, FDivKind::Rkl, FDivKind::Js];

    pub fn as_str(self) -> &'static str {
        match self {
            FDivKind::Fkl => "fkl",
            FDivKind::Rkl => "rkl",
            FDivKind::Js => "js",
        }
    }

    /// Offset between `f(u) - f'(u) u` and [`h_f`].
    pub fn h_offset(self) -> f64 {
        match self {
            FDivKind::Js => std::f64::consts::LN_2,
            _ => 0.0,
        }
    }
}

impl fmt::Display for FDivKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FDivKind {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fkl" => Ok(FDivKind::Fkl),
            "rkl" => Ok(FDivKind::Rkl),
            "js" => Ok(FDivKind::Js),
            _ => Err(DivergenceError::UnknownKind(s.to_string())),
        }
    }
}

fn check_positive(u: f64) -> Result<(), DivergenceError> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(DivergenceError::NonPositiveRatio(u));
    }
    Ok(())
}

pub fn f_value(kind: FDivKind, u: f64) -> Result<f64, DivergenceError> {
    check_positive(u)?;
    Ok(match kind {
        FDivKind::Fkl => u * u.ln(),
        FDivKind::Rkl => -u.ln(),
        FDivKind::Js => u * u.ln() - (1.0 + u) * ((1.0 + u) / 2.0).ln(),
    })
}

/// Analytic `f'(u)`.
pub fn f_prime(kind: FDivKind, u: f64) -> Result<f64, DivergenceError> {
    check_positive(u)?;
    Ok(match kind {
        FDivKind::Fkl => u.ln() + 1.0,
        FDivKind::Rkl => -1.0 / u,
        FDivKind::Js => (2.0 * u / (1.0 + u)).ln(),
    })
}

pub fn h_f(kind: FDivKind, u: f64) -> Result<f64, DivergenceError> {
    check_positive(u)?;
    Ok(h_f_unchecked(kind, u))
}

#[inline]
pub(crate) fn h_f_unchecked(kind: FDivKind, u: f64) -> f64 {
    match kind {
        FDivKind::Fkl => -u,
        FDivKind::Rkl => 1.0 - u.ln(),
        FDivKind::Js => -u.ln_1p(),
    }
}

/// `h_f` of a ratio that has been clipped to [`RATIO_CLIP`].
#[inline]
pub fn h_f_clipped(kind: FDivKind, u: f64) -> f64 {
    h_f_unchecked(kind, clip_ratio(u))
}

#[inline]
pub fn clip_ratio(u: f64) -> f64 {
    if u.is_nan() {
        return RATIO_CLIP.0;
    }
    u.clamp(RATIO_CLIP.0, RATIO_CLIP.1)
}

/// Expert state density. Unnormalized densities are only meaningful under RKL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDensity {
    values: Vec<f64>,
    normalized: bool,
}

impl ExpertDensity {
    /// Validates a density that must sum to one.
    pub fn normalized(values: Vec<f64>) -> Result<Self, DivergenceError> {
        check_entries(&values)?;
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > NORMALIZED_TOL {
            return Err(DivergenceError::NotNormalized(total));
        }
        Ok(Self {
            values,
            normalized: true,
        })
    }

    /// Normalizes the given nonnegative weights.
    pub fn from_weights(values: Vec<f64>) -> Result<Self, DivergenceError> {
        check_entries(&values)?;
        let total: f64 = values.iter().sum();
        if !(total > 0.0) {
            return Err(DivergenceError::ZeroMass);
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / total).collect(),
            normalized: true,
        })
    }

    /// Keeps the weights as given (an energy-style table).
    pub fn unnormalized(values: Vec<f64>) -> Result<Self, DivergenceError> {
        check_entries(&values)?;
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, DivergenceError> {
        Self::unnormalized(self.values.iter().map(|v| v * c).collect())
    }

    pub fn to_normalized(&self) -> Result<Self, DivergenceError> {
        Self::from_weights(self.values.clone())
    }
}

fn check_entries(values: &[f64]) -> Result<(), DivergenceError> {
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(DivergenceError::InvalidEntry { index, value });
    }
    Ok(())
}

/// `Σ_s ρ(s) f(ρ_E(s) / ρ(s))`, with the perspective-function limits at
/// zeros. Under FKL a zero of `rho` where `rho_e > 0` yields `+∞`.
pub fn divergence_exact(
    kind: FDivKind,
    rho_e: &ExpertDensity,
    rho: &[f64],
) -> Result<f64, DivergenceError> {
    if rho.len() != rho_e.len() {
        return Err(DivergenceError::Shape {
            expected: rho_e.len(),
            got: rho.len(),
        });
    }
    check_entries(rho)?;
    let mut total = 0.0;
    for (&p, &q) in rho_e.values().iter().zip(rho) {
        total += divergence_term(kind, p, q);
    }
    Ok(total)
}

fn divergence_term(kind: FDivKind, p: f64, q: f64) -> f64 {
    match kind {
        FDivKind::Fkl => {
            if p == 0.0 {
                0.0
            } else if q == 0.0 {
                f64::INFINITY
            } else {
                p * (p / q).ln()
            }
        }
        FDivKind::Rkl => {
            if q == 0.0 {
                0.0
            } else if p == 0.0 {
                f64::INFINITY
            } else {
                q * (q / p).ln()
            }
        }
        FDivKind::Js => {
            let m = p + q;
            let a = if p == 0.0 {
                0.0
            } else {
                p * (2.0 * p / m).ln()
            };
            let b = if q == 0.0 {
                0.0
            } else {
                q * (2.0 * q / m).ln()
            };
            a + b
        }
    }
}
