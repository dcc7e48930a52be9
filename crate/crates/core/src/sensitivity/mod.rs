//! Adjoint derivatives of the scattered energy with respect to the log
//! sound speed, mapped to the random field ζ and the design τ.
//!
//! Everything is computed at the CLOAK quadrature points first. With
//! s = τ − ζ at a point and β = −2 w κ(s), the state operator changes by
//! Φᵀ diag(β ds) Φ and the load by −Φᵀ diag(β ds) u_inc, so the residual
//! derivative is Φᵀ diag(β ds) u_t with u_t the total field at the points.

pub mod fd;
pub mod taylor;

use faer::c64;

use crate::error::{CloakError, Result};
use crate::exec::{self, Execution};
use crate::fem::sparse::ComplexFactorization;
use crate::helmholtz::{MediumState, ScatteringProblem, SolveKind};
use crate::objective::scattered_energy;

fn re_dot(a: &[c64], b: &[c64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Forward state of one source and, once requested, its adjoint for the
/// unit-weight right-hand side: K^H v = −2 M_h u.
#[derive(Clone, Debug)]
pub struct SourceState {
    pub u: Vec<c64>,
    pub v: Option<Vec<c64>>,
    pub q: f64,
    /// Total field at the CLOAK points.
    total: Vec<c64>,
    /// Interpolated adjoint at the CLOAK points.
    adjoint_points: Option<Vec<c64>>,
}

impl SourceState {
    fn adjoint(&self) -> Result<(&[c64], &[c64])> {
        match (&self.v, &self.adjoint_points) {
            (Some(v), Some(p)) => Ok((v, p)),
            _ => Err(CloakError::Solver("adjoint state requested before it was computed".into())),
        }
    }

    pub fn total_at_points(&self) -> &[c64] {
        &self.total
    }
}

/// Incremental forward and adjoint states for one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Incremental {
    pub u: Vec<c64>,
    pub v: Vec<c64>,
}

impl Incremental {
    /// Σ_j coeffs[j] · items[j]; exact since both states are linear in the direction.
    pub fn combine(items: &[Incremental], coeffs: &[f64]) -> Incremental {
        let n = items.first().map_or(0, |i| i.u.len());
        let mut u = vec![c64::new(0.0, 0.0); n];
        let mut v = vec![c64::new(0.0, 0.0); n];
        for (it, &c) in items.iter().zip(coeffs) {
            for k in 0..n {
                u[k] += it.u[k] * c;
                v[k] += it.v[k] * c;
            }
        }
        Incremental { u, v }
    }
}

/// States and factorizations at one medium, shared by every derivative.
pub struct StatePoint<'p> {
    problem: &'p ScatteringProblem,
    medium: MediumState,
    /// β at each CLOAK point, per frequency group.
    beta: Vec<Vec<f64>>,
    factors: Vec<ComplexFactorization>,
    sources: Vec<SourceState>,
    exec: Execution,
}

impl<'p> StatePoint<'p> {
    /// Factorizes each frequency group and solves every forward problem.
    pub fn forward(problem: &'p ScatteringProblem, medium: MediumState, exec: Execution) -> Result<Self> {
        problem.check_medium(&medium)?;
        let cloak = problem.cloak();
        let s = cloak.log_speed(&medium);
        let factors = exec::try_map_range(exec, problem.group_count(), |g| problem.factorize(g, &s))?;
        let beta = (0..problem.group_count())
            .map(|g| {
                problem.kappa(g, &s).iter().zip(&cloak.points).map(|(k, p)| -2.0 * p.weight * k).collect()
            })
            .collect();
        let sources = exec::try_map_range(exec, problem.source_count(), |i| {
            let fact = &factors[problem.source_group(i)];
            let u = problem.solve_with(fact, &problem.complex_load(i, &s), SolveKind::Forward)?;
            let q = scattered_energy(&u, problem.observation_mass());
            let total = cloak
                .interpolate(&u)
                .into_iter()
                .zip(&cloak.points)
                .map(|(z, p)| z + problem.incident(i, p.position))
                .collect();
            Ok::<_, CloakError>(SourceState { u, v: None, q, total, adjoint_points: None })
        })?;
        Ok(StatePoint { problem, medium, beta, factors, sources, exec })
    }

    /// Forward and adjoint states.
    pub fn new(problem: &'p ScatteringProblem, medium: MediumState, exec: Execution) -> Result<Self> {
        let mut p = Self::forward(problem, medium, exec)?;
        p.ensure_adjoint()?;
        Ok(p)
    }

    pub fn ensure_adjoint(&mut self) -> Result<()> {
        let problem = self.problem;
        let factors = &self.factors;
        let pending: Vec<usize> = (0..self.sources.len()).filter(|&i| self.sources[i].v.is_none()).collect();
        let sources = &self.sources;
        let solved = exec::try_map_range(self.exec, pending.len(), |j| {
            let i = pending[j];
            let rhs: Vec<c64> = problem
                .observation_mass()
                .matvec_complex(&sources[i].u)
                .into_iter()
                .map(|z| z * -2.0)
                .collect();
            problem.solve_with(&factors[problem.source_group(i)], &rhs, SolveKind::Adjoint)
        })?;
        for (j, v) in solved.into_iter().enumerate() {
            let st = &mut self.sources[pending[j]];
            st.adjoint_points = Some(problem.cloak().interpolate(&v));
            st.v = Some(v);
        }
        Ok(())
    }

    pub fn problem(&self) -> &'p ScatteringProblem {
        self.problem
    }

    pub fn medium(&self) -> &MediumState {
        &self.medium
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn source(&self, i: usize) -> &SourceState {
        &self.sources[i]
    }

    pub fn q_values(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.q).collect()
    }

    pub fn beta(&self, i: usize) -> &[f64] {
        &self.beta[self.problem.source_group(i)]
    }

    fn factor(&self, i: usize) -> &ComplexFactorization {
        &self.factors[self.problem.source_group(i)]
    }

    /// Solves with the source's operator, counting the solve under `kind`.
    pub fn solve(&self, i: usize, rhs: &[c64], kind: SolveKind) -> Result<Vec<c64>> {
        self.problem.solve_with(self.factor(i), rhs, kind)
    }

    /// Φᵀ(values) as a state-sized vector.
    pub fn scatter(&self, values: &[c64]) -> Vec<c64> {
        self.problem.cloak().scatter(values, self.problem.state_len())
    }

    /// dQ_i/ds at every CLOAK point: Re(conj(Φv) β u_t).
    pub fn log_speed_gradient(&self, i: usize) -> Result<Vec<f64>> {
        let st = &self.sources[i];
        let (_, pv) = st.adjoint()?;
        let beta = self.beta(i);
        Ok((0..beta.len()).map(|q| (pv[q].conj() * st.total[q]).re * beta[q]).collect())
    }

    /// Incremental states for a log-speed direction: two solves.
    pub fn incremental(&self, i: usize, s_hat: &[f64]) -> Result<Incremental> {
        let st = &self.sources[i];
        let (_, pv) = st.adjoint()?;
        let beta = self.beta(i);
        let forcing: Vec<c64> = (0..beta.len()).map(|q| st.total[q] * (-beta[q] * s_hat[q])).collect();
        let u_hat = self.solve(i, &self.scatter(&forcing), SolveKind::IncrementalForward)?;
        let mut rhs = self.problem.observation_mass().matvec_complex(&u_hat);
        let coupling: Vec<c64> = (0..beta.len()).map(|q| pv[q] * (beta[q] * s_hat[q])).collect();
        let coupling = self.scatter(&coupling);
        for (r, c) in rhs.iter_mut().zip(coupling) {
            *r = *r * -2.0 - c;
        }
        let v_hat = self.solve(i, &rhs, SolveKind::IncrementalAdjoint)?;
        Ok(Incremental { u: u_hat, v: v_hat })
    }

    /// Hessian of Q_i in log speed applied to `s_hat`, given its incremental states.
    pub fn hessian_from(&self, i: usize, s_hat: &[f64], inc: &Incremental) -> Result<Vec<f64>> {
        let st = &self.sources[i];
        let (_, pv) = st.adjoint()?;
        let beta = self.beta(i);
        let cloak = self.problem.cloak();
        let pu = cloak.interpolate(&inc.u);
        let pvh = cloak.interpolate(&inc.v);
        Ok((0..beta.len())
            .map(|q| {
                let t = pvh[q].conj() * st.total[q]
                    + pv[q].conj() * pu[q]
                    + pv[q].conj() * st.total[q] * (2.0 * s_hat[q]);
                beta[q] * t.re
            })
            .collect())
    }

    pub fn log_speed_hessian_action(&self, i: usize, s_hat: &[f64]) -> Result<(Vec<f64>, Incremental)> {
        let inc = self.incremental(i, s_hat)?;
        let h = self.hessian_from(i, s_hat, &inc)?;
        Ok((h, inc))
    }

    fn field_len(&self) -> usize {
        self.problem.mesh().field_dof_count()
    }

    fn design_len(&self) -> usize {
        self.problem.mesh().design_dof_count()
    }

    /// Dual gradient of Q_i in ζ; s = τ − ζ so the sign flips.
    pub fn zeta_gradient(&self, i: usize) -> Result<Vec<f64>> {
        let g = self.log_speed_gradient(i)?;
        Ok(self.problem.cloak().to_field(&g, self.field_len()).into_iter().map(|x| -x).collect())
    }

    /// ζ-Hessian action; the two sign flips cancel.
    pub fn zeta_hessian_action(&self, i: usize, zeta_hat: &[f64]) -> Result<(Vec<f64>, Incremental)> {
        self.check_len(zeta_hat.len(), self.field_len())?;
        let s_hat = self.problem.cloak().from_field(zeta_hat);
        let (h, inc) = self.log_speed_hessian_action(i, &s_hat)?;
        Ok((self.problem.cloak().to_field(&h, self.field_len()), inc))
    }

    /// Σ_i w_i ∂Q_i/∂τ as a dual design vector.
    pub fn weighted_tau_gradient(&self, weights: &[f64]) -> Result<Vec<f64>> {
        let nq = self.problem.cloak().len();
        let mut acc = vec![0.0; nq];
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (a, g) in acc.iter_mut().zip(self.log_speed_gradient(i)?) {
                *a += w * g;
            }
        }
        Ok(self.problem.cloak().to_cells(&acc, self.design_len()))
    }

    /// Σ_i ∂Q_i/∂τ.
    pub fn tau_gradient(&self) -> Result<Vec<f64>> {
        self.weighted_tau_gradient(&vec![1.0; self.sources.len()])
    }

    /// Σ_i ∂²Q_i/∂τ² τ̂, one incremental pair per source.
    pub fn tau_hessian_action(&self, tau_hat: &[f64]) -> Result<Vec<f64>> {
        self.check_len(tau_hat.len(), self.design_len())?;
        let cloak = self.problem.cloak();
        let s_hat = cloak.from_cells(tau_hat);
        let parts = exec::try_map_range(self.exec, self.sources.len(), |i| {
            self.log_speed_hessian_action(i, &s_hat).map(|r| r.0)
        })?;
        let mut acc = vec![0.0; s_hat.len()];
        for p in parts {
            for (a, h) in acc.iter_mut().zip(p) {
                *a += h;
            }
        }
        Ok(cloak.to_cells(&acc, self.design_len()))
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(CloakError::Dimension { expected, got });
        }
        Ok(())
    }

    /// Re⟨a, M_h b⟩ over the observation region.
    pub fn state_pairing(&self, a: &[c64], b: &[c64]) -> f64 {
        re_dot(a, &self.problem.observation_mass().matvec_complex(b))
    }
}

/// Weights of each sample's gradient in the sample-average mean-variance
/// objective (1/M) Σ Q_m + β_V (1/M) Σ (Q_m − Q̄)². Returned with the
/// sign convention C_m = −(1/M)(1 + 2β_V (Q_m − Q̄)), so Σ C_m = −1.
pub fn saa_weights(q: &[f64], beta_v: f64) -> Vec<f64> {
    let m = q.len() as f64;
    let mean = q.iter().sum::<f64>() / m;
    q.iter().map(|qm| -(1.0 + 2.0 * beta_v * (qm - mean)) / m).collect()
}

/// Sample mean and (biased) sample variance, as used by the SAA objective.
pub fn saa_moments(q: &[f64]) -> (f64, f64) {
    let m = q.len() as f64;
    let mean = q.iter().sum::<f64>() / m;
    let var = q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
    (mean, var)
}

/// Gradient of Σ_i [mean_m Q_im + β_V var_m Q_im] over frozen samples, built
/// from per-sample state points (with adjoints). Returns the design dual
/// vector without the penalty.
pub fn saa_tau_gradient(points: &[StatePoint<'_>], beta_v: f64) -> Result<Vec<f64>> {
    let first = points.first().ok_or_else(|| CloakError::config("SAA needs at least one sample"))?;
    let nsrc = first.sources.len();
    let mut acc = vec![0.0; first.design_len()];
    for i in 0..nsrc {
        let q: Vec<f64> = points.iter().map(|p| p.sources[i].q).collect();
        let c = saa_weights(&q, beta_v);
        for (p, cm) in points.iter().zip(&c) {
            let mut w = vec![0.0; nsrc];
            w[i] = -cm;
            for (a, g) in acc.iter_mut().zip(p.weighted_tau_gradient(&w)?) {
                *a += g;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::{ProblemSettings, Source};
    use crate::mesh::{build_disk_in_square, GeometrySpec, Mesh};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn problem(h: f64) -> (Arc<Mesh>, ScatteringProblem) {
        let g = GeometrySpec::standard(h);
        let mesh = Arc::new(build_disk_in_square(&g).unwrap());
        let p = ScatteringProblem::new(
            mesh.clone(),
            &g,
            ProblemSettings::standard(2.0),
            vec![Source::new([1.0, 0.0], 1.0), Source::new([0.0, 1.0], 0.75)],
        )
        .unwrap();
        (mesh, p)
    }

    fn medium(mesh: &Mesh) -> MediumState {
        let tau = (0..mesh.design_dof_count()).map(|c| 0.1 * (c as f64 * 0.7).sin()).collect();
        let zeta = (0..mesh.field_dof_count()).map(|v| 0.05 * (v as f64 * 0.3).cos()).collect();
        MediumState { tau, zeta }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn saa_weights_by_hand() {
        let c = saa_weights(&[1.0, 3.0], 1.0);
        assert_eq!(c, vec![0.5, -1.5]);
        assert!(saa_weights(&[2.0, 7.0, 1.0], 0.0).iter().all(|x| (*x + 1.0 / 3.0).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn saa_weights_sum_to_minus_one(q in prop::collection::vec(0.0f64..100.0, 1..20), bv in 0.0f64..10.0) {
            let s: f64 = saa_weights(&q, bv).iter().sum();
            prop_assert!((s + 1.0).abs() < 1e-12 * (1.0 + bv * q.iter().cloned().fold(0.0, f64::max)));
        }
    }

    #[test]
    fn no_obstacle_gives_zero_states() {
        // Without an obstacle and with a homogeneous medium nothing scatters.
        let g = GeometrySpec::standard(0.6);
        let base = build_disk_in_square(&g).unwrap();
        let bare = Mesh::new(base.vertices().to_vec(), base.triangles().to_vec(), base.regions().to_vec(), vec![]);
        let mesh = Arc::new(bare.unwrap());
        let p = ScatteringProblem::new(mesh.clone(), &g, ProblemSettings::standard(2.0), vec![Source::new([1.0, 0.0], 1.0)])
            .unwrap();
        let sp = StatePoint::new(&p, MediumState::homogeneous(&mesh), Execution::default()).unwrap();
        assert!(sp.source(0).u.iter().all(|z| z.norm() == 0.0));
        assert!(sp.zeta_gradient(0).unwrap().iter().all(|x| *x == 0.0));
        assert!(sp.tau_gradient().unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zeta_gradient_matches_central_difference() {
        let (mesh, p) = problem(0.5);
        let m0 = medium(&mesh);
        let sp = StatePoint::new(&p, m0.clone(), Execution::default()).unwrap();
        let g = sp.zeta_gradient(0).unwrap();
        let dir: Vec<f64> = (0..mesh.field_dof_count()).map(|v| (v as f64 * 1.3).sin()).collect();
        let exact = dot(&g, &dir);
        let q = |h: f64| {
            let mut m = m0.clone();
            for (z, d) in m.zeta.iter_mut().zip(&dir) {
                *z += h * d;
            }
            Ok(StatePoint::forward(&p, m, Execution::default())?.q_values()[0])
        };
        let report = fd::central_sweep(&q, exact, 1e-2, 8).unwrap();
        assert!(report.passes(0.2, 1e-6), "{report:?}");
    }

    #[test]
    fn zeta_hessian_matches_gradient_difference_and_is_symmetric() {
        let (mesh, p) = problem(0.5);
        let m0 = medium(&mesh);
        let sp = StatePoint::new(&p, m0.clone(), Execution::default()).unwrap();
        let n = mesh.field_dof_count();
        let d1: Vec<f64> = (0..n).map(|v| (v as f64 * 0.9).cos()).collect();
        let d2: Vec<f64> = (0..n).map(|v| (v as f64 * 2.1).sin()).collect();
        let (h1, _) = sp.zeta_hessian_action(1, &d1).unwrap();
        let (h2, _) = sp.zeta_hessian_action(1, &d2).unwrap();
        let (a, b) = (dot(&h1, &d2), dot(&h2, &d1));
        assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()), "{a} vs {b}");
        let exact = dot(&h1, &d2);
        let gd = |h: f64| {
            let mut m = m0.clone();
            for (z, d) in m.zeta.iter_mut().zip(&d1) {
                *z += h * d;
            }
            let sp = StatePoint::new(&p, m, Execution::default())?;
            Ok(dot(&sp.zeta_gradient(1)?, &d2))
        };
        let report = fd::central_sweep(&gd, exact, 1e-2, 8).unwrap();
        assert!(report.passes(0.2, 1e-6), "{report:?}");
        let (zero, _) = sp.zeta_hessian_action(0, &vec![0.0; n]).unwrap();
        assert!(zero.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tau_derivatives_are_supported_on_cloak_and_consistent() {
        let (mesh, p) = problem(0.5);
        let m0 = medium(&mesh);
        let sp = StatePoint::new(&p, m0.clone(), Execution::default()).unwrap();
        let g = sp.tau_gradient().unwrap();
        assert_eq!(g.len(), mesh.design_dof_count());
        let d: Vec<f64> = (0..g.len()).map(|c| (c as f64 * 0.41).cos()).collect();
        let exact = dot(&g, &d);
        let j = |h: f64| {
            let mut m = m0.clone();
            for (t, x) in m.tau.iter_mut().zip(&d) {
                *t += h * x;
            }
            Ok(StatePoint::forward(&p, m, Execution::default())?.q_values().iter().sum())
        };
        let report = fd::central_sweep(&j, exact, 1e-2, 8).unwrap();
        assert!(report.passes(0.2, 1e-6), "{report:?}");
    }

    #[test]
    fn parallel_and_sequential_states_agree() {
        let (mesh, p) = problem(0.6);
        let a = StatePoint::new(&p, medium(&mesh), Execution::Parallel).unwrap();
        let b = StatePoint::new(&p, medium(&mesh), Execution::Sequential).unwrap();
        assert_eq!(a.q_values(), b.q_values());
        assert_eq!(a.tau_gradient().unwrap(), b.tau_gradient().unwrap());
    }

    #[test]
    fn solve_counts_per_evaluation() {
        let (mesh, p) = problem(0.6);
        let before = p.counters().snapshot();
        let sp = StatePoint::new(&p, medium(&mesh), Execution::default()).unwrap();
        let d = vec![1.0; mesh.design_dof_count()];
        sp.tau_hessian_action(&d).unwrap();
        let used = p.counters().snapshot().since(&before);
        assert_eq!(used.forward, 2);
        assert_eq!(used.adjoint, 2);
        assert_eq!(used.incremental_forward, 2);
        assert_eq!(used.incremental_adjoint, 2);
        assert_eq!(used.factorizations, 2);
    }
}
