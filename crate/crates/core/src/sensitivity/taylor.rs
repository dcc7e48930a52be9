//! Second-order Taylor approximation of the mean and variance of each
//! source's energy in ζ, and its design gradient.
//!
//! Per source, with ḡ the ζ-gradient and (λ_n, ψ_n) the dominant
//! generalized eigenpairs of the ζ-Hessian at the field mean:
//! mean ≈ Q̄ + ½ Σ λ_n and variance ≈ ⟨ḡ, C ḡ⟩ + ½ Σ λ_n². Eigenvalue
//! derivatives use ψ_nᵀ (∂H) ψ_n, a third derivative of Q in the log speed
//! that needs one extra forward and one extra adjoint solve per source
//! once the incremental states of every ψ_n are known.

use faer::c64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Incremental, StatePoint};
use crate::error::{CloakError, Result};
use crate::exec::{self, Execution};
use crate::helmholtz::{MediumState, ScatteringProblem, SolveKind};
use crate::random_field::GaussianMeasure;
use crate::spectral::{self, EigenPairs, SymmetricAction};

/// ζ-Hessian of one source's energy as an operator on nodal fields.
pub struct ZetaHessian<'a, 'p> {
    pub point: &'a StatePoint<'p>,
    pub source: usize,
}

impl SymmetricAction for ZetaHessian<'_, '_> {
    type Aux = Incremental;

    fn dim(&self) -> usize {
        self.point.problem().mesh().field_dof_count()
    }

    fn apply(&self, x: &[f64]) -> Result<(Vec<f64>, Incremental)> {
        self.point.zeta_hessian_action(self.source, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EigenMethod {
    /// Randomized solver with `oversampling` extra probes and a fixed seed.
    Randomized { oversampling: usize, seed: u64 },
    /// Explicit dense operators; only for small meshes.
    Dense { limit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorSettings {
    pub rank: usize,
    pub method: EigenMethod,
    pub beta_v: f64,
}

/// Expansion data for one source.
#[derive(Clone, Debug)]
pub struct SourceExpansion {
    pub q_bar: f64,
    pub g_bar: Vec<f64>,
    /// C ḡ as a nodal field.
    pub cov_g: Vec<f64>,
    pub pairs: EigenPairs,
    /// C⁻¹ ψ_n, used to project samples onto the eigenbasis.
    pub duals: Vec<Vec<f64>>,
    pub incrementals: Vec<Incremental>,
    pub mean: f64,
    pub variance: f64,
    pub warning: Option<String>,
}

impl SourceExpansion {
    /// First- and second-order expansions of Q at ζ̄ + δζ.
    pub fn evaluate(&self, delta_zeta: &[f64]) -> (f64, f64) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let t1 = self.q_bar + dot(&self.g_bar, delta_zeta);
        let quad: f64 = self.pairs.values.iter().zip(&self.duals).map(|(l, w)| l * dot(w, delta_zeta).powi(2)).sum();
        (t1, t1 + 0.5 * quad)
    }
}

/// State point at (τ, ζ̄) with the expansions of every source.
pub struct TaylorPoint<'p> {
    point: StatePoint<'p>,
    expansions: Vec<SourceExpansion>,
    beta_v: f64,
}

impl<'p> TaylorPoint<'p> {
    pub fn new(
        problem: &'p ScatteringProblem,
        measure: &GaussianMeasure,
        tau: Vec<f64>,
        settings: &TaylorSettings,
        exec: Execution,
    ) -> Result<Self> {
        if !(settings.beta_v >= 0.0 && settings.beta_v.is_finite()) {
            return Err(CloakError::config(format!("variance weight must be non-negative, got {}", settings.beta_v)));
        }
        let medium = MediumState { tau, zeta: measure.mean().to_vec() };
        let point = StatePoint::new(problem, medium, exec)?;
        let mut expansions = Vec::with_capacity(problem.source_count());
        for i in 0..problem.source_count() {
            expansions.push(expand(&point, measure, i, settings, exec)?);
        }
        Ok(TaylorPoint { point, expansions, beta_v: settings.beta_v })
    }

    pub fn point(&self) -> &StatePoint<'p> {
        &self.point
    }

    pub fn expansions(&self) -> &[SourceExpansion] {
        &self.expansions
    }

    pub fn means(&self) -> Vec<f64> {
        self.expansions.iter().map(|e| e.mean).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.expansions.iter().map(|e| e.variance).collect()
    }

    /// Design gradient of Σ_i (mean_i + β_V variance_i), without the penalty.
    pub fn tau_gradient(&self) -> Result<Vec<f64>> {
        let problem = self.point.problem();
        let cloak = problem.cloak();
        let parts = exec::try_map_range(self.point.execution(), self.expansions.len(), |i| self.source_gradient(i))?;
        let mut acc = vec![0.0; cloak.len()];
        for p in parts {
            for (a, g) in acc.iter_mut().zip(p) {
                *a += g;
            }
        }
        Ok(cloak.to_cells(&acc, problem.mesh().design_dof_count()))
    }

    /// Log-speed gradient at the points for one source.
    fn source_gradient(&self, i: usize) -> Result<Vec<f64>> {
        let sp = &self.point;
        let cloak = sp.problem().cloak();
        let e = &self.expansions[i];
        let st = sp.source(i);
        let ut = st.total_at_points();
        let pv = cloak.interpolate(st.v.as_ref().expect("adjoint computed at construction"));
        let beta = sp.beta(i);
        let nq = beta.len();
        let zero = c64::new(0.0, 0.0);
        let mut fwd = vec![zero; nq];
        let mut adj = vec![zero; nq];
        let mut g = sp.log_speed_gradient(i)?;
        for ((lam, psi), inc) in e.pairs.values.iter().zip(&e.pairs.vectors).zip(&e.incrementals) {
            let c = 0.5 + self.beta_v * lam;
            let sh = cloak.from_field(psi);
            let pu = cloak.interpolate(&inc.u);
            let pvh = cloak.interpolate(&inc.v);
            for q in 0..nq {
                let b = beta[q];
                let s = sh[q];
                fwd[q] += (pu[q] * 2.0 + ut[q] * (2.0 * s)) * (c * b * s);
                adj[q] += (pvh[q] * 2.0 + pv[q] * (2.0 * s)) * (c * b * s);
                let third = 4.0 * b * s * (pvh[q].conj() * ut[q]).re
                    + 4.0 * b * s * (pv[q].conj() * pu[q]).re
                    + 4.0 * b * s * s * (pv[q].conj() * ut[q]).re
                    + 2.0 * b * (pvh[q].conj() * pu[q]).re;
                g[q] += c * third;
            }
        }
        let a: Vec<f64> = cloak.from_field(&e.cov_g).into_iter().map(|x| -2.0 * self.beta_v * x).collect();
        for q in 0..nq {
            fwd[q] += ut[q] * (a[q] * beta[q]);
            adj[q] += pv[q] * (a[q] * beta[q]);
            g[q] += 2.0 * a[q] * beta[q] * (pv[q].conj() * ut[q]).re;
        }
        let rho = sp.solve(i, &sp.scatter(&fwd), SolveKind::MultiplierForward)?;
        let mut rhs = sp.scatter(&adj);
        for (r, m) in rhs.iter_mut().zip(sp.problem().observation_mass().matvec_complex(&rho)) {
            *r -= m * 2.0;
        }
        let alpha = sp.solve(i, &rhs, SolveKind::MultiplierAdjoint)?;
        let prho = cloak.interpolate(&rho);
        let palpha = cloak.interpolate(&alpha);
        for q in 0..nq {
            g[q] -= beta[q] * ((pv[q].conj() * prho[q]).re + (palpha[q].conj() * ut[q]).re);
        }
        Ok(g)
    }
}

fn expand(
    point: &StatePoint<'_>,
    measure: &GaussianMeasure,
    i: usize,
    settings: &TaylorSettings,
    exec: Execution,
) -> Result<SourceExpansion> {
    let op = ZetaHessian { point, source: i };
    let g_bar = point.zeta_gradient(i)?;
    let cov_g = measure.apply_cov(&g_bar)?;
    let (pairs, incrementals, warning) = match settings.method {
        _ if settings.rank == 0 => (EigenPairs { values: vec![], vectors: vec![], oversampling: 0 }, vec![], None),
        EigenMethod::Randomized { oversampling, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let res = spectral::randomized_gen_eig(&op, measure, settings.rank, oversampling, &mut rng, exec)?;
            let incs = res.coefficients.iter().map(|s| Incremental::combine(&res.basis_aux, s)).collect();
            (res.pairs, incs, res.warning)
        }
        EigenMethod::Dense { limit } => {
            let h = spectral::dense_from_action(&op, limit, exec)?;
            let c = spectral::dense_covariance(measure, limit, exec)?;
            let pairs = spectral::dense_gen_eig(&h, &c, limit)?.truncated(settings.rank);
            let cloak = point.problem().cloak();
            let incs = exec::try_map(exec, &pairs.vectors, |psi| point.incremental(i, &cloak.from_field(psi)))?;
            (pairs, incs, None)
        }
    };
    let duals = exec::try_map(exec, &pairs.vectors, |psi| measure.apply_precision(psi))?;
    let q_bar = point.source(i).q;
    let (mean, variance) = spectral::t2_moments(&pairs, &g_bar, measure, q_bar)?;
    Ok(SourceExpansion { q_bar, g_bar, cov_g, pairs, duals, incrementals, mean, variance, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::{ProblemSettings, Source};
    use crate::mesh::{build_disk_in_square, GeometrySpec, Mesh};
    use crate::sensitivity::fd;
    use std::sync::Arc;

    fn setup() -> (Arc<Mesh>, ScatteringProblem, GaussianMeasure) {
        let g = GeometrySpec::standard(0.5);
        let mesh = Arc::new(build_disk_in_square(&g).unwrap());
        let p = ScatteringProblem::new(
            mesh.clone(),
            &g,
            ProblemSettings::standard(2.0),
            vec![Source::new([1.0, 0.0], 1.0), Source::new([0.6, 0.8], 0.75)],
        )
        .unwrap();
        let measure = GaussianMeasure::new(&mesh, 1.0, 4.0).unwrap();
        (mesh, p, measure)
    }

    fn tau0(mesh: &Mesh) -> Vec<f64> {
        (0..mesh.design_dof_count()).map(|c| 0.15 * (c as f64 * 0.7).sin()).collect()
    }

    fn objective(t: &TaylorPoint<'_>, beta_v: f64) -> f64 {
        t.means().iter().zip(t.variances()).map(|(m, v)| m + beta_v * v).sum()
    }

    #[test]
    fn gradient_matches_central_difference() {
        let (mesh, p, measure) = setup();
        let settings = TaylorSettings { rank: 4, method: EigenMethod::Dense { limit: 1000 }, beta_v: 1.0 };
        let t0 = tau0(&mesh);
        let tp = TaylorPoint::new(&p, &measure, t0.clone(), &settings, Execution::default()).unwrap();
        let g = tp.tau_gradient().unwrap();
        let dir: Vec<f64> = (0..g.len()).map(|c| (c as f64 * 1.7).cos()).collect();
        let exact: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let j = |h: f64| {
            let tau = t0.iter().zip(&dir).map(|(t, d)| t + h * d).collect();
            Ok(objective(&TaylorPoint::new(&p, &measure, tau, &settings, Execution::default())?, 1.0))
        };
        let report = fd::central_sweep(&j, exact, 1e-2, 7).unwrap();
        assert!(report.passes(0.2, 1e-5), "{report:?}");
    }

    #[test]
    fn zero_rank_without_variance_is_deterministic() {
        let (mesh, p, measure) = setup();
        let bad = TaylorSettings { rank: 2, method: EigenMethod::Dense { limit: 1000 }, beta_v: -1.0 };
        assert!(TaylorPoint::new(&p, &measure, tau0(&mesh), &bad, Execution::default()).is_err());
        let zero = TaylorSettings { rank: 0, method: EigenMethod::Dense { limit: 1000 }, beta_v: 0.0 };
        let tp = TaylorPoint::new(&p, &measure, tau0(&mesh), &zero, Execution::default()).unwrap();
        let det = tp.point().tau_gradient().unwrap();
        let full = tp.tau_gradient().unwrap();
        let scale = det.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in det.iter().zip(&full) {
            assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
        }
        assert_eq!(tp.means(), tp.point().q_values());
        let settings = TaylorSettings { rank: 2, method: EigenMethod::Dense { limit: 1000 }, beta_v: 0.0 };
        let tp = TaylorPoint::new(&p, &measure, tau0(&mesh), &settings, Execution::default()).unwrap();
        for e in tp.expansions() {
            assert!((e.mean - e.q_bar - 0.5 * e.pairs.values.iter().sum::<f64>()).abs() < 1e-14 * e.mean.abs());
        }
    }

    #[test]
    fn randomized_expansion_agrees_with_dense_and_counts_solves() {
        let (mesh, p, measure) = setup();
        let (n, over) = (4, 26);
        let dense = TaylorSettings { rank: n, method: EigenMethod::Dense { limit: 1000 }, beta_v: 1.0 };
        let rand = TaylorSettings { rank: n, method: EigenMethod::Randomized { oversampling: over, seed: 11 }, beta_v: 1.0 };
        let a = TaylorPoint::new(&p, &measure, tau0(&mesh), &dense, Execution::default()).unwrap();
        let before = p.counters().snapshot();
        let b = TaylorPoint::new(&p, &measure, tau0(&mesh), &rand, Execution::default()).unwrap();
        let gb = b.tau_gradient().unwrap();
        let used = p.counters().snapshot().since(&before);
        let ns = p.source_count();
        assert_eq!(used.forward, ns);
        assert_eq!(used.adjoint, ns);
        assert_eq!(used.incremental_forward, 2 * (n + over) * ns);
        assert_eq!(used.incremental_adjoint, 2 * (n + over) * ns);
        assert_eq!(used.multiplier_forward, ns);
        assert_eq!(used.multiplier_adjoint, ns);
        for (ea, eb) in a.expansions().iter().zip(b.expansions()) {
            for (la, lb) in ea.pairs.values.iter().zip(&eb.pairs.values) {
                assert!((la - lb).abs() <= 3e-2 * la.abs().max(1e-3 * ea.pairs.values[0].abs()), "{la} vs {lb}");
            }
        }
        let ga = a.tau_gradient().unwrap();
        let num: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = ga.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num <= 5e-2 * den, "relative gradient gap {}", num / den);
    }

    #[test]
    fn expansion_is_exact_to_second_order() {
        let (mesh, p, measure) = setup();
        let settings = TaylorSettings { rank: measure.dim(), method: EigenMethod::Dense { limit: 1000 }, beta_v: 1.0 };
        let tp = TaylorPoint::new(&p, &measure, tau0(&mesh), &settings, Execution::default()).unwrap();
        let e = &tp.expansions()[0];
        let dir: Vec<f64> = (0..measure.dim()).map(|v| (v as f64 * 0.77).sin()).collect();
        let mut errs = Vec::new();
        for h in [4e-2, 2e-2, 1e-2] {
            let dz: Vec<f64> = dir.iter().map(|d| h * d).collect();
            let zeta = measure.mean().iter().zip(&dz).map(|(m, d)| m + d).collect();
            let q = StatePoint::forward(&p, MediumState { tau: tau0(&mesh), zeta }, Execution::default())
                .unwrap()
                .q_values()[0];
            let (t1, t2) = e.evaluate(&dz);
            errs.push(((q - t1).abs(), (q - t2).abs()));
        }
        for w in errs.windows(2) {
            assert!((w[0].0 / w[1].0).log2() > 1.7, "{errs:?}");
            assert!((w[0].1 / w[1].1).log2() > 2.7, "{errs:?}");
        }
    }
}
