//! Gaussian random fields on the cloak with covariance (-γΔ + δI)^-2 under
//! homogeneous Neumann conditions, discretized with P1 elements.
//!
//! Pairing convention: `apply_cov` consumes dual vectors (assembled
//! functionals) and returns nodal fields; `apply_precision` goes the other
//! way. With A = γK + δM this gives C = A⁻¹ M A⁻¹ and C⁻¹ = A M⁻¹ A.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CloakError, Result};
use crate::fem::envelope::EnvelopeCholesky;
use crate::fem::sparse::SparseOperator;
use crate::fem::{Coefficient, DofMap, FormAssembler, FormKind};
use crate::mesh::{Mesh, Region};

#[derive(Clone, Debug)]
pub struct GaussianMeasure {
    mean: Vec<f64>,
    gamma: f64,
    delta: f64,
    mass: SparseOperator,
    elliptic: SparseOperator,
    mass_factor: EnvelopeCholesky,
    elliptic_factor: EnvelopeCholesky,
}

impl GaussianMeasure {
    /// Zero-mean measure on the cloak vertices of `mesh`.
    pub fn new(mesh: &Mesh, gamma: f64, delta: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || !(delta > 0.0 && delta.is_finite()) {
            return Err(CloakError::config(format!(
                "random field needs positive gamma and delta, got {gamma} and {delta}"
            )));
        }
        let asm = FormAssembler::new(mesh, DofMap::cloak(mesh));
        if asm.dofs().is_empty() {
            return Err(CloakError::EmptyOperator("mesh has no CLOAK triangles".into()));
        }
        let cloak = [Region::Cloak];
        let one = Coefficient::Constant(1.0);
        let mass = asm.assemble(&cloak, one, FormKind::Mass)?;
        let mut elliptic = asm.zeros();
        asm.add_form(&mut elliptic, &cloak, one, FormKind::StiffnessX1, gamma);
        asm.add_form(&mut elliptic, &cloak, one, FormKind::StiffnessX2, gamma);
        asm.add_form(&mut elliptic, &cloak, one, FormKind::Mass, delta);
        let mass_factor = EnvelopeCholesky::new(&mass)?;
        let elliptic_factor = EnvelopeCholesky::new(&elliptic)?;
        Ok(GaussianMeasure {
            mean: vec![0.0; mass.dim()],
            gamma,
            delta,
            mass,
            elliptic,
            mass_factor,
            elliptic_factor,
        })
    }

    pub fn with_mean(mut self, mean: Vec<f64>) -> Result<Self> {
        self.check(mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn elliptic(&self) -> &SparseOperator {
        &self.elliptic
    }

    pub fn mass_factor(&self) -> &EnvelopeCholesky {
        &self.mass_factor
    }

    fn check(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(CloakError::Dimension { expected: self.dim(), got });
        }
        Ok(())
    }

    /// Standard normal noise of the right length.
    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// ζ̄ + A⁻¹ G ξ with G Gᵀ = M.
    pub fn sample_from_noise(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.check(xi.len())?;
        let colored = self.mass_factor.apply_factor(xi);
        let z = self.elliptic_factor.solve(&colored);
        Ok(self.mean.iter().zip(z).map(|(m, z)| m + z).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi = self.noise(rng);
        self.sample_from_noise(&xi).expect("noise has the measure's dimension")
    }

    /// C w = A⁻¹ M A⁻¹ w for a dual vector w.
    pub fn apply_cov(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check(w.len())?;
        let a = self.elliptic_factor.solve(w);
        Ok(self.elliptic_factor.solve(&self.mass.matvec(&a)))
    }

    /// C⁻¹ v = A M⁻¹ A v for a nodal field v.
    pub fn apply_precision(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v.len())?;
        let a = self.elliptic.matvec(v);
        Ok(self.elliptic.matvec(&self.mass_factor.solve(&a)))
    }

    /// Largest entry of G Gᵀ - M relative to the largest entry of M.
    pub fn mass_factor_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (r, c, m) in self.mass.triplets() {
            let inv = self.mass_factor.inverse_permutation();
            let (i, j) = (inv[r], inv[c]);
            let f = &self.mass_factor;
            let v: f64 = (0..=i.min(j)).map(|k| f.factor_entry(i, k) * f.factor_entry(j, k)).sum();
            worst = worst.max((v - m).abs());
        }
        worst / self.mass.max_abs()
    }
}
