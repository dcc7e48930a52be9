//! Scattered-energy objective, its state derivatives, and the smoothed L1
//! sparsity penalty on the design.

use faer::c64;
use serde::Serialize;

use crate::error::{CloakError, Result};
use crate::fem::sparse::SparseOperator;
use crate::mesh::Mesh;

/// Q(u) = ∫ |u|² over the observation region, with `mass` the observation
/// mass matrix (exact for P1 products).
pub fn scattered_energy(u: &[c64], mass: &SparseOperator) -> f64 {
    let mu = mass.matvec_complex(u);
    u.iter().zip(&mu).map(|(a, b)| (a.conj() * b).re).sum::<f64>().max(0.0)
}

/// ∂Q/∂u as the dual vector 2 M u, paired with a direction by Re⟨·, ·⟩.
pub fn q_state_gradient(u: &[c64], mass: &SparseOperator) -> Vec<c64> {
    mass.matvec_complex(u).into_iter().map(|z| z * 2.0).collect()
}

/// ∂²Q/∂u² applied to û; Q is quadratic so this is 2 M û at every u.
pub fn q_state_hessian_action(u_hat: &[c64], mass: &SparseOperator) -> Vec<c64> {
    q_state_gradient(u_hat, mass)
}

/// Smoothed L1 penalty ∫ (τ² + ε)^½ over CLOAK with P0 τ.
#[derive(Clone, Debug)]
pub struct Penalty {
    areas: Vec<f64>,
    epsilon: f64,
}

impl Penalty {
    pub fn new(mesh: &Mesh, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(CloakError::config(format!("penalty smoothing must be positive, got {epsilon}")));
        }
        let areas = mesh.cloak_cells().iter().map(|&t| mesh.areas()[t]).collect();
        Ok(Penalty { areas, epsilon })
    }

    pub fn from_areas(areas: Vec<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(CloakError::config(format!("penalty smoothing must be positive, got {epsilon}")));
        }
        Ok(Penalty { areas, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn value(&self, tau: &[f64]) -> f64 {
        self.areas.iter().zip(tau).map(|(a, t)| a * (t * t + self.epsilon).sqrt()).sum()
    }

    pub fn gradient(&self, tau: &[f64]) -> Vec<f64> {
        self.areas.iter().zip(tau).map(|(a, t)| a * t / (t * t + self.epsilon).sqrt()).collect()
    }

    /// Diagonal of the (diagonal) Hessian; strictly positive.
    pub fn hessian_diag(&self, tau: &[f64]) -> Vec<f64> {
        self.areas.iter().zip(tau).map(|(a, t)| a * self.epsilon / (t * t + self.epsilon).powf(1.5)).collect()
    }
}

/// Decomposed objective J = Σ_i (mean_i + β_V variance_i) + β_P penalty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveBreakdown {
    pub source_mean: Vec<f64>,
    pub source_variance: Vec<f64>,
    pub penalty: f64,
    pub beta_v: f64,
    pub beta_p: f64,
    pub epsilon: f64,
}

impl ObjectiveBreakdown {
    pub fn mean(&self) -> f64 {
        self.source_mean.iter().sum()
    }

    pub fn variance(&self) -> f64 {
        self.source_variance.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.mean() + self.beta_v * self.variance() + self.beta_p * self.penalty
    }
}
