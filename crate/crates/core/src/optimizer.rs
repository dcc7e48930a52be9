//! Line-search inexact Newton with Steihaug-truncated preconditioned CG.
//! Every variant shares the deterministic τ-Hessian at the field mean as
//! its curvature model, preconditioned by the penalty Hessian.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{CloakError, Result};
use crate::exec::{self, Execution};
use crate::helmholtz::{MediumState, ScatteringProblem, SolveSnapshot};
use crate::objective::{ObjectiveBreakdown, Penalty};
use crate::random_field::GaussianMeasure;
use crate::sensitivity::taylor::{EigenMethod, TaylorPoint, TaylorSettings};
use crate::sensitivity::{saa_moments, saa_tau_gradient, StatePoint};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CgTermination {
    Tolerance,
    Cap,
    NegativeCurvature,
}

impl CgTermination {
    pub fn label(self) -> &'static str {
        match self {
            CgTermination::Tolerance => "tolerance",
            CgTermination::Cap => "cap",
            CgTermination::NegativeCurvature => "negative_curvature",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub step: Vec<f64>,
    pub reason: CgTermination,
    /// Hessian actions applied.
    pub iterations: usize,
}

/// Approximately solves H x = b by CG preconditioned with diag(`precond`).
/// Stops when the preconditioned residual norm drops by `tol`, after `cap`
/// actions, or on non-positive curvature. Curvature failure on the first
/// direction returns the preconditioned right-hand side.
pub fn steihaug_pcg<F>(mut hessian: F, precond: &[f64], rhs: &[f64], tol: f64, cap: usize) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if precond.len() != rhs.len() {
        return Err(CloakError::Dimension { expected: rhs.len(), got: precond.len() });
    }
    if precond.iter().any(|p| !(*p > 0.0)) {
        return Err(CloakError::config("preconditioner must be strictly positive"));
    }
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(precond).map(|(a, p)| a / p).collect();
    let mut rz = dot(&r, &z);
    let r0 = rz.sqrt();
    if r0 == 0.0 {
        return Ok(CgResult { step: x, reason: CgTermination::Tolerance, iterations: 0 });
    }
    let mut d = z.clone();
    for it in 0..cap {
        let hd = hessian(&d)?;
        let curv = dot(&d, &hd);
        if curv <= 0.0 {
            if it == 0 {
                x = z;
            }
            return Ok(CgResult { step: x, reason: CgTermination::NegativeCurvature, iterations: it + 1 });
        }
        let a = rz / curv;
        for k in 0..n {
            x[k] += a * d[k];
            r[k] -= a * hd[k];
        }
        z = r.iter().zip(precond).map(|(a, p)| a / p).collect();
        let rz_new = dot(&r, &z);
        if rz_new.max(0.0).sqrt() <= tol * r0 {
            return Ok(CgResult { step: x, reason: CgTermination::Tolerance, iterations: it + 1 });
        }
        let b = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            d[k] = z[k] + b * d[k];
        }
    }
    Ok(CgResult { step: x, reason: CgTermination::Cap, iterations: cap })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NewtonConfig {
    pub max_newton: usize,
    pub max_cg: usize,
    pub max_line_search: usize,
    pub tol_newton: f64,
    pub tol_cg0: f64,
    pub armijo: f64,
    /// Largest change of τ in any cell allowed for the first trial step.
    pub max_step: f64,
    pub beta_v: f64,
    pub beta_p: f64,
    pub epsilon: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            max_newton: 10,
            max_cg: 10,
            max_line_search: 10,
            tol_newton: 1e-2,
            tol_cg0: 0.5,
            armijo: 1e-4,
            max_step: 1.0,
            beta_v: 1.0,
            beta_p: 1e-2,
            epsilon: 1e-4,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_newton == 0 || self.max_cg == 0 || self.max_line_search == 0 {
            return Err(CloakError::config("Newton, CG and line-search caps must be at least 1"));
        }
        if !(self.tol_newton > 0.0 && self.tol_cg0 > 0.0) {
            return Err(CloakError::config("tolerances must be positive"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(CloakError::config(format!("Armijo constant must lie in (0, 1), got {}", self.armijo)));
        }
        if !(self.max_step > 0.0) {
            return Err(CloakError::config("the step cap must be positive"));
        }
        if !(self.beta_p > 0.0) {
            return Err(CloakError::config("the penalty weight must be positive: it defines the preconditioner"));
        }
        if !(self.beta_v >= 0.0) {
            return Err(CloakError::config("the variance weight must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(CloakError::config("penalty smoothing must be positive"));
        }
        Ok(())
    }
}

/// Objective approximation to minimize.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// Energy at the field mean only.
    Deterministic,
    /// Sample average over frozen field samples.
    Saa { samples: Vec<Vec<f64>> },
    /// Quadratic Taylor moments with `rank` eigenpairs.
    Taylor { rank: usize, method: EigenMethod },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Deterministic => "deterministic",
            Variant::Saa { .. } => "saa",
            Variant::Taylor { .. } => "taylor",
        }
    }
}

/// Everything fixed during one optimization.
pub struct Objective<'a> {
    pub problem: &'a ScatteringProblem,
    pub measure: &'a GaussianMeasure,
    pub variant: Variant,
    pub penalty: Penalty,
    pub beta_v: f64,
    pub beta_p: f64,
    pub exec: Execution,
}

enum PointKind<'a> {
    Deterministic(StatePoint<'a>),
    Saa { samples: Vec<StatePoint<'a>>, center: Option<StatePoint<'a>> },
    Taylor(Box<TaylorPoint<'a>>),
}

/// The objective at one design, with cached states for its derivatives.
pub struct Evaluation<'a> {
    pub tau: Vec<f64>,
    pub breakdown: ObjectiveBreakdown,
    kind: PointKind<'a>,
}

impl<'a> Objective<'a> {
    pub fn new(
        problem: &'a ScatteringProblem,
        measure: &'a GaussianMeasure,
        variant: Variant,
        config: &NewtonConfig,
        exec: Execution,
    ) -> Result<Self> {
        config.validate()?;
        if let Variant::Saa { samples } = &variant {
            if samples.is_empty() {
                return Err(CloakError::config("SAA needs at least one sample"));
            }
            for s in samples {
                if s.len() != measure.dim() {
                    return Err(CloakError::Dimension { expected: measure.dim(), got: s.len() });
                }
            }
        }
        Ok(Objective {
            problem,
            measure,
            variant,
            penalty: Penalty::new(problem.mesh(), config.epsilon)?,
            beta_v: config.beta_v,
            beta_p: config.beta_p,
            exec,
        })
    }

    fn mean_medium(&self, tau: &[f64]) -> MediumState {
        MediumState { tau: tau.to_vec(), zeta: self.measure.mean().to_vec() }
    }

    /// Objective value; derivatives are prepared lazily.
    pub fn evaluate(&self, tau: &[f64]) -> Result<Evaluation<'a>> {
        let break_down = |mean: Vec<f64>, var: Vec<f64>| ObjectiveBreakdown {
            source_mean: mean,
            source_variance: var,
            penalty: self.penalty.value(tau),
            beta_v: self.beta_v,
            beta_p: self.beta_p,
            epsilon: self.penalty.epsilon(),
        };
        let nsrc = self.problem.source_count();
        let (breakdown, kind) = match &self.variant {
            Variant::Deterministic => {
                let sp = StatePoint::forward(self.problem, self.mean_medium(tau), self.exec)?;
                (break_down(sp.q_values(), vec![0.0; nsrc]), PointKind::Deterministic(sp))
            }
            Variant::Saa { samples } => {
                let points = exec::try_map(self.exec, samples, |z| {
                    StatePoint::forward(self.problem, MediumState { tau: tau.to_vec(), zeta: z.clone() }, self.exec)
                })?;
                let (mut mean, mut var) = (Vec::new(), Vec::new());
                for i in 0..nsrc {
                    let q: Vec<f64> = points.iter().map(|p| p.source(i).q).collect();
                    let (m, v) = saa_moments(&q);
                    mean.push(m);
                    var.push(v);
                }
                (break_down(mean, var), PointKind::Saa { samples: points, center: None })
            }
            Variant::Taylor { rank, method } => {
                let settings = TaylorSettings { rank: *rank, method: *method, beta_v: self.beta_v };
                let tp = TaylorPoint::new(self.problem, self.measure, tau.to_vec(), &settings, self.exec)?;
                (break_down(tp.means(), tp.variances()), PointKind::Taylor(Box::new(tp)))
            }
        };
        Ok(Evaluation { tau: tau.to_vec(), breakdown, kind })
    }

    /// Adjoint states for the gradient and the Hessian model.
    pub fn prepare(&self, eval: &mut Evaluation<'a>) -> Result<()> {
        match &mut eval.kind {
            PointKind::Deterministic(sp) => sp.ensure_adjoint(),
            PointKind::Saa { samples, center } => {
                for s in samples.iter_mut() {
                    s.ensure_adjoint()?;
                }
                if center.is_none() {
                    *center = Some(StatePoint::new(self.problem, self.mean_medium(&eval.tau), self.exec)?);
                }
                Ok(())
            }
            PointKind::Taylor(_) => Ok(()),
        }
    }

    /// Full design gradient including the penalty.
    pub fn gradient(&self, eval: &mut Evaluation<'a>) -> Result<Vec<f64>> {
        self.prepare(eval)?;
        let mut g = match &eval.kind {
            PointKind::Deterministic(sp) => sp.tau_gradient()?,
            PointKind::Saa { samples, .. } => saa_tau_gradient(samples, self.beta_v)?,
            PointKind::Taylor(tp) => tp.tau_gradient()?,
        };
        for (a, p) in g.iter_mut().zip(self.penalty.gradient(&eval.tau)) {
            *a += self.beta_p * p;
        }
        Ok(g)
    }

    /// Deterministic τ-Hessian at the field mean plus the penalty Hessian.
    pub fn hessian_action(&self, eval: &Evaluation<'a>, tau_hat: &[f64]) -> Result<Vec<f64>> {
        let center = match &eval.kind {
            PointKind::Deterministic(sp) => sp,
            PointKind::Saa { center, .. } => center
                .as_ref()
                .ok_or_else(|| CloakError::Solver("Hessian requested before derivatives were prepared".into()))?,
            PointKind::Taylor(tp) => tp.point(),
        };
        let mut h = center.tau_hessian_action(tau_hat)?;
        for ((a, d), t) in h.iter_mut().zip(self.penalty.hessian_diag(&eval.tau)).zip(tau_hat) {
            *a += self.beta_p * d * t;
        }
        Ok(h)
    }

    pub fn preconditioner(&self, tau: &[f64]) -> Vec<f64> {
        self.penalty.hessian_diag(tau).into_iter().map(|d| self.beta_p * d).collect()
    }

    /// The Taylor point behind an evaluation, when there is one.
    pub fn taylor_point<'e>(&self, eval: &'e Evaluation<'a>) -> Option<&'e TaylorPoint<'a>> {
        match &eval.kind {
            PointKind::Taylor(tp) => Some(tp),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Termination {
    Converged,
    IterationCap,
    LineSearchFailed,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub breakdown: ObjectiveBreakdown,
    pub objective: f64,
    /// ‖g‖ in the dual norm of the initial preconditioner, relative to its first value.
    pub gradient_metric: f64,
    pub cg_iterations: usize,
    pub cg_reason: Option<CgTermination>,
    pub step_length: f64,
    pub line_search: usize,
    pub solves: SolveSnapshot,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizationTrace {
    pub variant: String,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl OptimizationTrace {
    /// Newton steps taken (accepted iterates after the initial one).
    pub fn newton_iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn first(&self) -> &IterationRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace holds the initial record")
    }

    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].objective < w[0].objective)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,objective,mean,variance,penalty,gradient_metric,cg_iterations,cg_reason,step_length,line_search,\
             forward,adjoint,incremental_forward,incremental_adjoint,multiplier_forward,multiplier_adjoint,factorizations\n",
        );
        for r in &self.records {
            let c = &r.solves;
            let _ = writeln!(
                s,
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.6e},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.objective,
                r.breakdown.mean(),
                r.breakdown.variance(),
                r.breakdown.penalty,
                r.gradient_metric,
                r.cg_iterations,
                r.cg_reason.map_or("", CgTermination::label),
                r.step_length,
                r.line_search,
                c.forward,
                c.adjoint,
                c.incremental_forward,
                c.incremental_adjoint,
                c.multiplier_forward,
                c.multiplier_adjoint,
                c.factorizations
            );
        }
        s
    }
}

/// Runs the Newton iteration from `tau0`, returning the last accepted design.
pub fn minimize(objective: &Objective<'_>, config: &NewtonConfig, tau0: &[f64]) -> Result<(Vec<f64>, OptimizationTrace)> {
    config.validate()?;
    let ndesign = objective.problem.mesh().design_dof_count();
    if tau0.len() != ndesign {
        return Err(CloakError::Dimension { expected: ndesign, got: tau0.len() });
    }
    let start = objective.problem.counters().snapshot();
    let d0 = objective.preconditioner(tau0);
    let metric = |g: &[f64]| g.iter().zip(&d0).map(|(x, d)| x * x / d).sum::<f64>().sqrt();
    let mut eval = objective.evaluate(tau0)?;
    let mut g = objective.gradient(&mut eval)?;
    let g0 = metric(&g);
    let relative = |g: &[f64]| if g0 > 0.0 { metric(g) / g0 } else { 0.0 };
    let record = |it, eval: &Evaluation<'_>, g: &[f64], cg: Option<&CgResult>, alpha, ls| IterationRecord {
        iteration: it,
        objective: eval.breakdown.total(),
        breakdown: eval.breakdown.clone(),
        gradient_metric: relative(g),
        cg_iterations: cg.map_or(0, |c| c.iterations),
        cg_reason: cg.map(|c| c.reason),
        step_length: alpha,
        line_search: ls,
        solves: objective.problem.counters().snapshot().since(&start),
    };
    let mut records = vec![record(0, &eval, &g, None, 0.0, 0)];
    let mut termination = Termination::IterationCap;
    for it in 1..=config.max_newton {
        let rel = relative(&g);
        if rel <= config.tol_newton {
            termination = Termination::Converged;
            break;
        }
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let precond = objective.preconditioner(&eval.tau);
        let cg = steihaug_pcg(
            |d| objective.hessian_action(&eval, d),
            &precond,
            &rhs,
            config.tol_cg0.min(rel),
            config.max_cg,
        )?;
        let slope = dot(&g, &cg.step);
        let j0 = eval.breakdown.total();
        // Nearly flat directions of the indefinite model can produce huge
        // steps; start the backtracking from a capped length instead.
        let longest = cg.step.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut alpha = if longest > config.max_step { config.max_step / longest } else { 1.0 };
        let mut accepted = None;
        for ls in 1..=config.max_line_search {
            let trial: Vec<f64> = eval.tau.iter().zip(&cg.step).map(|(t, s)| t + alpha * s).collect();
            // A trial design whose system cannot be factorized is rejected like
            // any other failed step.
            match objective.evaluate(&trial) {
                Ok(te) if te.breakdown.total() <= j0 + config.armijo * alpha * slope => {
                    accepted = Some((te, ls));
                    break;
                }
                Ok(_) | Err(CloakError::Singular(_)) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        let Some((next, ls)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        eval = next;
        g = objective.gradient(&mut eval)?;
        records.push(record(it, &eval, &g, Some(&cg), alpha, ls));
        if it == config.max_newton && relative(&g) <= config.tol_newton {
            termination = Termination::Converged;
        }
    }
    let trace = OptimizationTrace { variant: objective.variant.name().to_string(), records, termination };
    Ok((eval.tau, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::{ProblemSettings, Source};
    use crate::mesh::{build_disk_in_square, GeometrySpec, Mesh};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn matvec(a: &[Vec<f64>]) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |x| Ok(a.iter().map(|r| dot(r, x)).collect())
    }

    #[test]
    fn cg_solves_spd_diagonal_exactly() {
        let a = vec![vec![2.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 0.5]];
        let r = steihaug_pcg(matvec(&a), &[1.0; 3], &[1.0, 1.0, 1.0], 1e-14, 100).unwrap();
        assert_eq!(r.reason, CgTermination::Tolerance);
        assert!(r.iterations <= 3);
        for (x, want) in r.step.iter().zip([0.5, 0.2, 2.0]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_with_exact_preconditioner_takes_one_step() {
        let a = vec![vec![3.0, 0.0], vec![0.0, 7.0]];
        let r = steihaug_pcg(matvec(&a), &[3.0, 7.0], &[1.0, -2.0], 1e-12, 10).unwrap();
        assert_eq!(r.iterations, 1);
        assert!((r.step[0] - 1.0 / 3.0).abs() < 1e-14 && (r.step[1] + 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn cg_negative_curvature_on_first_direction() {
        // d = M⁻¹ b = (1, 1) has curvature 1 − 3 < 0.
        let a = vec![vec![1.0, 0.0], vec![0.0, -3.0]];
        let r = steihaug_pcg(matvec(&a), &[2.0, 4.0], &[2.0, 4.0], 1e-12, 10).unwrap();
        assert_eq!(r.reason, CgTermination::NegativeCurvature);
        assert_eq!(r.step, vec![1.0, 1.0]);
    }

    #[test]
    fn cg_zero_rhs_and_bad_preconditioner() {
        let a = vec![vec![1.0]];
        let r = steihaug_pcg(matvec(&a), &[1.0], &[0.0], 1e-8, 5).unwrap();
        assert_eq!((r.step, r.reason, r.iterations), (vec![0.0], CgTermination::Tolerance, 0));
        assert!(steihaug_pcg(matvec(&a), &[0.0], &[1.0], 1e-8, 5).is_err());
    }

    proptest! {
        #[test]
        fn cg_step_is_descent(diag in prop::collection::vec(-2.0f64..5.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4), cap in 1usize..6) {
            prop_assume!(b.iter().any(|x| x.abs() > 1e-3));
            let a: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { diag[i] } else { 0.1 }).collect()).collect();
            let r = steihaug_pcg(matvec(&a), &[1.0, 2.0, 0.5, 1.5], &b, 1e-10, cap).unwrap();
            // rhs = −g, so descent means ⟨b, step⟩ > 0.
            prop_assert!(dot(&b, &r.step) > 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(NewtonConfig::default().validate().is_ok());
        let bad = NewtonConfig { armijo: 1.0, ..NewtonConfig::default() };
        assert!(matches!(bad.validate(), Err(CloakError::Config(_))));
        let bad = NewtonConfig { max_cg: 0, ..NewtonConfig::default() };
        assert!(bad.validate().is_err());
    }

    fn bare_problem() -> (Arc<Mesh>, ScatteringProblem) {
        let g = GeometrySpec::standard(0.6);
        let base = build_disk_in_square(&g).unwrap();
        let mesh = Arc::new(
            Mesh::new(base.vertices().to_vec(), base.triangles().to_vec(), base.regions().to_vec(), vec![]).unwrap(),
        );
        let p = ScatteringProblem::new(mesh.clone(), &g, ProblemSettings::standard(2.0), vec![Source::new([1.0, 0.0], 1.0)])
            .unwrap();
        (mesh, p)
    }

    #[test]
    fn penalty_only_problem_converges_to_zero() {
        let (mesh, p) = bare_problem();
        let measure = GaussianMeasure::new(&mesh, 1.0, 4.0).unwrap();
        let cfg = NewtonConfig { tol_newton: 1e-6, max_newton: 20, ..NewtonConfig::default() };
        let obj = Objective::new(&p, &measure, Variant::Deterministic, &cfg, Execution::default()).unwrap();
        let tau0 = vec![0.0; mesh.design_dof_count()];
        let e = obj.evaluate(&tau0).unwrap();
        let area: f64 = obj.penalty.areas().iter().sum();
        assert!((e.breakdown.total() - cfg.beta_p * area * cfg.epsilon.sqrt()).abs() < 1e-14);
        let start: Vec<f64> = (0..mesh.design_dof_count()).map(|c| 0.01 * (c as f64 * 0.9).sin()).collect();
        let (tau, trace) = minimize(&obj, &cfg, &start).unwrap();
        assert!(trace.is_monotone());
        assert!(tau.iter().all(|t| t.abs() < 1e-3), "{:?}", tau.iter().fold(0.0f64, |m, t| m.max(t.abs())));
    }

    #[test]
    fn deterministic_run_descends_on_small_problem() {
        let g = GeometrySpec::standard(0.5);
        let mesh = Arc::new(build_disk_in_square(&g).unwrap());
        let p = ScatteringProblem::new(mesh.clone(), &g, ProblemSettings::standard(2.0), vec![Source::new([1.0, 0.0], 1.0)])
            .unwrap();
        let measure = GaussianMeasure::new(&mesh, 1.0, 4.0).unwrap();
        let cfg = NewtonConfig { max_newton: 4, ..NewtonConfig::default() };
        let obj = Objective::new(&p, &measure, Variant::Deterministic, &cfg, Execution::default()).unwrap();
        let (_, trace) = minimize(&obj, &cfg, &vec![0.0; mesh.design_dof_count()]).unwrap();
        assert!(trace.newton_iterations() >= 1);
        assert!(trace.is_monotone());
        assert!(trace.last().breakdown.mean() < trace.first().breakdown.mean());
        let csv = trace.to_csv();
        assert_eq!(csv.lines().count(), trace.records.len() + 1);
    }
}
