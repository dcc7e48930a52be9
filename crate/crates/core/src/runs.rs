//! Run orchestration shared by the command-line front end and the
//! acceptance suite. Every run can write its resolved configuration, a
//! solve-counter summary and its tables into an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use faer::c64;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CloakError, Result};
use crate::exec;
use crate::export::{self, PointField};
use crate::helmholtz::{MediumState, ScatteringProblem, SolveSnapshot};
use crate::mesh::{build_disk_in_square, load_mesh, GeometrySpec, Mesh};
use crate::optimizer::{minimize, Objective, OptimizationTrace, Variant};
use crate::random_field::GaussianMeasure;
use crate::sensitivity::taylor::{TaylorPoint, TaylorSettings};
use crate::sensitivity::StatePoint;
use crate::spectral::{self, residual_row, EigenPairs, ResidualRow};

/// Random streams derived from the measure seed, one per purpose, so that
/// adding a study never perturbs the samples of another.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Saa = 1,
    TaylorStudy = 2,
    Robustness = 3,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Mesh, problem and measure for a configuration.
pub struct Setup {
    pub config: RunConfig,
    pub geometry: GeometrySpec,
    pub mesh: Arc<Mesh>,
    pub problem: ScatteringProblem,
    pub measure: GaussianMeasure,
}

pub fn build_mesh(config: &RunConfig) -> Result<Mesh> {
    let spec = config.geometry.spec();
    let mut mesh = match &config.mesh.path {
        Some(p) => load_mesh(p)?,
        None => build_disk_in_square(&spec)?,
    };
    for _ in 0..config.geometry.refinements {
        mesh = mesh.refine(&[spec.obstacle_radius, spec.cloak_radius])?;
    }
    Ok(mesh)
}

impl Setup {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mesh = Arc::new(build_mesh(config)?);
        Self::with_mesh(config, mesh)
    }

    pub fn with_mesh(config: &RunConfig, mesh: Arc<Mesh>) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry.spec();
        let problem = ScatteringProblem::new(mesh.clone(), &geometry, config.physics.settings()?, config.physics.sources())?;
        let measure = GaussianMeasure::new(&mesh, config.measure.gamma, config.measure.delta)?;
        let dim = measure.dim();
        let measure = measure.with_mean(vec![config.measure.mean; dim])?;
        Ok(Setup { config: config.clone(), geometry, mesh, problem, measure })
    }

    pub fn zero_design(&self) -> Vec<f64> {
        vec![0.0; self.mesh.design_dof_count()]
    }

    pub fn load_design(&self, path: &Path) -> Result<Vec<f64>> {
        export::load_design(path, self.mesh.design_dof_count())
    }

    pub fn draw_samples(&self, count: usize, stream: Stream) -> Vec<Vec<f64>> {
        let mut r = rng(self.config.measure.seed, stream);
        (0..count).map(|_| self.measure.sample(&mut r)).collect()
    }

    pub fn variant(&self) -> Result<Variant> {
        let v = &self.config.variant;
        Ok(match v.kind.as_str() {
            "deterministic" => Variant::Deterministic,
            "saa" => Variant::Saa { samples: self.draw_samples(v.samples, Stream::Saa) },
            "taylor" => Variant::Taylor { rank: v.rank, method: v.eigen_method() },
            other => return Err(CloakError::config(format!("unknown variant '{other}'"))),
        })
    }

    pub fn taylor_settings(&self) -> TaylorSettings {
        TaylorSettings {
            rank: self.config.variant.rank,
            method: self.config.variant.eigen_method(),
            beta_v: self.config.weights.beta_v,
        }
    }

    pub fn solves(&self) -> SolveSnapshot {
        self.problem.counters().snapshot()
    }
}

fn out_path(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

fn write_run_header(setup: &Setup, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out_path(out, "config.toml") {
        export::write(&p, &setup.config.to_toml())?;
    }
    Ok(())
}

fn write_solves(setup: &Setup, out: Option<&Path>, since: &SolveSnapshot) -> Result<()> {
    if let Some(p) = out_path(out, "solves.toml") {
        let used = setup.solves().since(since);
        export::write(&p, &toml::to_string(&used).expect("counters serialize"))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ForwardOutput {
    pub q: Vec<f64>,
    #[serde(skip)]
    pub scattered: Vec<Vec<c64>>,
    #[serde(skip)]
    pub incident: Vec<Vec<c64>>,
}

impl ForwardOutput {
    pub fn total(&self, i: usize) -> Vec<c64> {
        self.scattered[i].iter().zip(&self.incident[i]).map(|(a, b)| a + b).collect()
    }
}

/// Scattered, incident and total fields of every source at `tau` and the field mean.
pub fn run_forward(setup: &Setup, tau: &[f64], out: Option<&Path>, prefix: &str) -> Result<ForwardOutput> {
    let start = setup.solves();
    let medium = MediumState { tau: tau.to_vec(), zeta: setup.measure.mean().to_vec() };
    let sp = StatePoint::forward(&setup.problem, medium, setup.config.execution())?;
    let n = setup.problem.source_count();
    let scattered: Vec<Vec<c64>> = (0..n).map(|i| sp.source(i).u.clone()).collect();
    let incident: Vec<Vec<c64>> = (0..n).map(|i| setup.problem.incident_at_vertices(i)).collect();
    let result = ForwardOutput { q: sp.q_values(), scattered, incident };
    if out.is_some() {
        write_run_header(setup, out)?;
        let mut summary = String::from("source,direction_x,direction_y,frequency_factor,q\n");
        for (i, s) in setup.problem.sources().iter().enumerate() {
            let _ = writeln!(
                summary,
                "{i},{},{},{},{:.12e}",
                s.direction[0], s.direction[1], s.frequency_factor, result.q[i]
            );
            let total = result.total(i);
            let fields = [
                PointField::Complex("scattered", &result.scattered[i]),
                PointField::Complex("total", &total),
                PointField::Complex("incident", &result.incident[i]),
            ];
            if setup.config.output.vtk {
                let vtk = export::vtk_string(&setup.mesh, &fields, Some(tau))?;
                export::write(&out_path(out, &format!("{prefix}fields_{i}.vtk")).unwrap(), &vtk)?;
            }
            if setup.config.output.csv {
                let csv = export::nodal_csv(
                    &setup.mesh,
                    &[("scattered", &result.scattered[i]), ("total", &total), ("incident", &result.incident[i])],
                )?;
                export::write(&out_path(out, &format!("{prefix}fields_{i}.csv")).unwrap(), &csv)?;
            }
        }
        export::write(&out_path(out, &format!("{prefix}summary.csv")).unwrap(), &summary)?;
        write_solves(setup, out, &start)?;
    }
    Ok(result)
}

pub struct OptimizeOutput {
    pub tau: Vec<f64>,
    pub trace: OptimizationTrace,
}

/// Minimizes the configured variant from `tau0`.
pub fn run_optimize(setup: &Setup, tau0: &[f64], out: Option<&Path>) -> Result<OptimizeOutput> {
    let start = setup.solves();
    let cfg = setup.config.newton();
    let objective = Objective::new(&setup.problem, &setup.measure, setup.variant()?, &cfg, setup.config.execution())?;
    let (tau, trace) = minimize(&objective, &cfg, tau0)?;
    if out.is_some() {
        write_run_header(setup, out)?;
        export::write(&out_path(out, "trace.csv").unwrap(), &trace.to_csv())?;
        export::write(&out_path(out, "design.txt").unwrap(), &export::design_string(&tau))?;
        run_forward(setup, &tau, out, "optimum_")?;
        write_solves(setup, out, &start)?;
    }
    Ok(OptimizeOutput { tau, trace })
}

#[derive(Clone, Debug)]
pub struct EigenStudy {
    pub pairs: Vec<EigenPairs>,
    pub warnings: Vec<String>,
}

/// Dominant generalized eigenvalues of every source's ζ-Hessian at `tau`.
pub fn run_eig_study(setup: &Setup, tau: &[f64], out: Option<&Path>) -> Result<EigenStudy> {
    let start = setup.solves();
    let tp = TaylorPoint::new(&setup.problem, &setup.measure, tau.to_vec(), &setup.taylor_settings(), setup.config.execution())?;
    let pairs: Vec<EigenPairs> = tp.expansions().iter().map(|e| e.pairs.clone()).collect();
    let warnings = tp.expansions().iter().filter_map(|e| e.warning.clone()).collect();
    if out.is_some() {
        write_run_header(setup, out)?;
        for (i, p) in pairs.iter().enumerate() {
            export::write(&out_path(out, &format!("eigen_{i}.csv")).unwrap(), &export::eigen_csv(p))?;
        }
        write_solves(setup, out, &start)?;
    }
    Ok(EigenStudy { pairs, warnings })
}

/// Every generalized eigenvalue of one source's ζ-Hessian from explicit
/// dense operators; the size guard is `limit`.
pub fn dense_spectrum(setup: &Setup, tau: &[f64], source: usize, limit: usize) -> Result<EigenPairs> {
    let exec = setup.config.execution();
    let medium = MediumState { tau: tau.to_vec(), zeta: setup.measure.mean().to_vec() };
    let sp = StatePoint::new(&setup.problem, medium, exec)?;
    let op = crate::sensitivity::taylor::ZetaHessian { point: &sp, source };
    let h = spectral::dense_from_action(&op, limit, exec)?;
    let c = spectral::dense_covariance(&setup.measure, limit, exec)?;
    spectral::dense_gen_eig(&h, &c, limit)
}

#[derive(Clone, Debug, Serialize)]
pub struct TaylorStudyRow {
    pub source: usize,
    #[serde(flatten)]
    pub row: ResidualRow,
}

/// Monte Carlo comparison of Q with its first- and second-order expansions.
pub fn run_taylor_study(setup: &Setup, tau: &[f64], samples: usize, out: Option<&Path>) -> Result<Vec<TaylorStudyRow>> {
    let start = setup.solves();
    let exec = setup.config.execution();
    let tp = TaylorPoint::new(&setup.problem, &setup.measure, tau.to_vec(), &setup.taylor_settings(), exec)?;
    let zs = setup.draw_samples(samples, Stream::TaylorStudy);
    let qs = exec::try_map(exec, &zs, |z| {
        Ok::<_, CloakError>(StatePoint::forward(&setup.problem, MediumState { tau: tau.to_vec(), zeta: z.clone() }, exec)?.q_values())
    })?;
    let mean = setup.measure.mean();
    let mut rows = Vec::new();
    for (i, e) in tp.expansions().iter().enumerate() {
        let q: Vec<f64> = qs.iter().map(|v| v[i]).collect();
        let (t1, t2): (Vec<f64>, Vec<f64>) = zs
            .iter()
            .map(|z| {
                let dz: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
                e.evaluate(&dz)
            })
            .unzip();
        rows.push(TaylorStudyRow { source: i, row: residual_row(&q, &t1, &t2, e.q_bar)? });
    }
    if out.is_some() {
        write_run_header(setup, out)?;
        let mut s = String::from("source,samples,q_hat,mse_q,mse_q_t1,mse_q_t2,var_hat,mse_var,mse_var_t1,mse_var_t2\n");
        for r in &rows {
            let x = &r.row;
            let _ = writeln!(
                s,
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                r.source, x.samples, x.q_hat, x.mse_q, x.mse_q_t1, x.mse_q_t2, x.var_hat, x.mse_var, x.mse_var_t1, x.mse_var_t2
            );
        }
        export::write(&out_path(out, "taylor_study.csv").unwrap(), &s)?;
        write_solves(setup, out, &start)?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessRow {
    pub design: String,
    pub source: usize,
    /// Area average over the observation region of the pointwise standard deviation of u.
    pub mean_std: f64,
    /// Area average of |mean of u|.
    pub mean_abs_mean: f64,
    pub q_mean: f64,
    pub q_std: f64,
}

/// Statistics of the scattered field over shared field samples for each design.
pub fn run_robustness_study(
    setup: &Setup,
    designs: &[(String, Vec<f64>)],
    samples: usize,
    out: Option<&Path>,
) -> Result<Vec<RobustnessRow>> {
    if samples < 2 {
        return Err(CloakError::config("the robustness study needs at least two samples"));
    }
    let start = setup.solves();
    let exec = setup.config.execution();
    let zs = setup.draw_samples(samples, Stream::Robustness);
    let nv = setup.mesh.vertex_count();
    // Lumped observation-region weights normalize the spatial averages.
    let weights: Vec<f64> = setup.problem.observation_mass().matvec(&vec![1.0; nv]);
    let area: f64 = weights.iter().sum();
    let mut rows = Vec::new();
    if out.is_some() {
        write_run_header(setup, out)?;
    }
    for (name, tau) in designs {
        let points = exec::try_map(exec, &zs, |z| {
            let sp = StatePoint::forward(&setup.problem, MediumState { tau: tau.clone(), zeta: z.clone() }, exec)?;
            let fields: Vec<Vec<c64>> = (0..setup.problem.source_count()).map(|i| sp.source(i).u.clone()).collect();
            Ok::<_, CloakError>((sp.q_values(), fields))
        })?;
        let m = samples as f64;
        for i in 0..setup.problem.source_count() {
            let mut mean = vec![c64::new(0.0, 0.0); nv];
            for (_, f) in &points {
                for (a, b) in mean.iter_mut().zip(&f[i]) {
                    *a += b / m;
                }
            }
            let mut std = vec![0.0; nv];
            for (_, f) in &points {
                for ((s, b), a) in std.iter_mut().zip(&f[i]).zip(&mean) {
                    *s += (b - a).norm_sqr() / (m - 1.0);
                }
            }
            for s in std.iter_mut() {
                *s = s.sqrt();
            }
            let avg = |v: &mut dyn Iterator<Item = f64>| v.zip(&weights).map(|(x, w)| x * w).sum::<f64>() / area;
            let q: Vec<f64> = points.iter().map(|(q, _)| q[i]).collect();
            let q_mean = q.iter().sum::<f64>() / m;
            let q_std = (q.iter().map(|x| (x - q_mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            rows.push(RobustnessRow {
                design: name.clone(),
                source: i,
                mean_std: avg(&mut std.iter().copied()),
                mean_abs_mean: avg(&mut mean.iter().map(|z| z.norm())),
                q_mean,
                q_std,
            });
            if out.is_some() && setup.config.output.vtk {
                let vtk = export::vtk_string(
                    &setup.mesh,
                    &[PointField::Complex("mean", &mean), PointField::Real("std", &std)],
                    Some(tau),
                )?;
                export::write(&out_path(out, &format!("robustness_{name}_{i}.vtk")).unwrap(), &vtk)?;
            }
        }
    }
    if out.is_some() {
        let mut s = String::from("design,source,mean_std,mean_abs_mean,q_mean,q_std\n");
        for r in &rows {
            let _ = writeln!(s, "{},{},{:.6e},{:.6e},{:.6e},{:.6e}", r.design, r.source, r.mean_std, r.mean_abs_mean, r.q_mean, r.q_std);
        }
        export::write(&out_path(out, "robustness.csv").unwrap(), &s)?;
        write_solves(setup, out, &start)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig::from_toml_with_overrides(
            "",
            &[
                "geometry.mesh_size=0.6".into(),
                "physics.k0=2.0".into(),
                "variant.rank=3".into(),
                "variant.oversampling=4".into(),
                "newton.max_newton=2".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn forward_fields_decompose_and_export() {
        let setup = Setup::new(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = run_forward(&setup, &setup.zero_design(), Some(dir.path()), "").unwrap();
        let total = f.total(0);
        for ((t, s), i) in total.iter().zip(&f.scattered[0]).zip(&f.incident[0]) {
            assert!((t - s - i).norm() < 1e-12);
        }
        for (v, i) in setup.mesh.vertices().iter().zip(&f.incident[0]) {
            let phase = 2.0 * v[0];
            assert!((i.re - phase.cos()).abs() < 1e-14 && (i.im - phase.sin()).abs() < 1e-14);
        }
        for name in ["config.toml", "solves.toml", "summary.csv", "fields_0.vtk", "fields_0.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let cfg = RunConfig::load(Some(&dir.path().join("config.toml")), &[]).unwrap();
        assert_eq!(cfg, setup.config);
    }

    #[test]
    fn studies_are_seed_reproducible() {
        let setup = Setup::new(&small_config()).unwrap();
        let tau = setup.zero_design();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            run_taylor_study(&setup, &tau, 4, Some(d.path())).unwrap();
            run_robustness_study(&setup, &[("zero".into(), tau.clone())], 3, Some(d.path())).unwrap();
        }
        for name in ["taylor_study.csv", "robustness.csv", "robustness_zero_0.vtk"] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn nearly_deterministic_measure_has_no_spread() {
        let mut cfg = small_config();
        cfg.measure.delta = 1e8;
        let setup = Setup::new(&cfg).unwrap();
        let rows = run_robustness_study(&setup, &[("zero".into(), setup.zero_design())], 3, None).unwrap();
        assert!(rows[0].mean_std < 1e-6 * rows[0].mean_abs_mean, "{rows:?}");
    }

    #[test]
    fn optimize_writes_trace_and_design() {
        let mut cfg = small_config();
        cfg.variant.kind = "saa".into();
        cfg.variant.samples = 2;
        let setup = Setup::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_optimize(&setup, &setup.zero_design(), Some(dir.path())).unwrap();
        assert!(r.trace.is_monotone());
        let back = setup.load_design(&dir.path().join("design.txt")).unwrap();
        assert_eq!(back, r.tau);
        assert!(dir.path().join("trace.csv").exists() && dir.path().join("optimum_fields_0.vtk").exists());
    }
}
