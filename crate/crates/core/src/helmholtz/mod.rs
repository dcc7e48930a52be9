//! PML-truncated Helmholtz scattering off a sound-hard obstacle surrounded by
//! a cloak whose log sound speed is the design minus the random field.

pub mod analytic;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use faer::c64;
use serde::{Deserialize, Serialize};

use crate::error::{CloakError, Result};
use crate::fem::{
    facet_rule, Coefficient, ComplexFactorization, ComplexOperator, ComplexSymbolic, DofMap,
    Element, FormAssembler, FormKind, SparseOperator,
};
use crate::mesh::{GeometrySpec, Mesh, Region};

/// Incident plane wave e^{i k x.b} with k = factor * k0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub direction: [f64; 2],
    pub frequency_factor: f64,
}

impl Source {
    pub fn new(direction: [f64; 2], frequency_factor: f64) -> Self {
        Source { direction, frequency_factor }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    #[default]
    Host,
    HostAndPml,
}

impl Observation {
    pub fn regions(self) -> &'static [Region] {
        match self {
            Observation::Host => &[Region::Host],
            Observation::HostAndPml => &[Region::Host, Region::Pml],
        }
    }
}

/// Absorption profile sigma0 * ((|x_d| - start) / width)^exponent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmlProfile {
    pub sigma0: f64,
    pub start: f64,
    pub width: f64,
    pub exponent: f64,
}

impl PmlProfile {
    pub fn sigma(&self, x: [f64; 2]) -> (f64, f64) {
        let one = |t: f64| {
            let d = t.abs() - self.start;
            if d > 0.0 {
                self.sigma0 * (d / self.width).powf(self.exponent)
            } else {
                0.0
            }
        };
        (one(x[0]), one(x[1]))
    }
}

/// Pointwise stretched-coordinate coefficients for stretching factors
/// s_d = 1 + i sigma_d / k (outgoing waves e^{ikr} decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmlCoefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub b1: f64,
    pub b2: f64,
}

impl PmlCoefficients {
    pub fn new(k: f64, s1: f64, s2: f64) -> Self {
        let k2 = k * k;
        PmlCoefficients {
            a1: (k2 + s1 * s2) / (k2 + s1 * s1),
            a2: k * (s2 - s1) / (k2 + s1 * s1),
            a3: (k2 + s1 * s2) / (k2 + s2 * s2),
            a4: k * (s1 - s2) / (k2 + s2 * s2),
            b1: k2 - s1 * s2,
            b2: k * (s1 + s2),
        }
    }
}

/// Solve-count categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveKind {
    Forward,
    Adjoint,
    IncrementalForward,
    IncrementalAdjoint,
    MultiplierForward,
    MultiplierAdjoint,
}

#[derive(Debug, Default)]
pub struct SolveCounters {
    counts: [AtomicUsize; 6],
    factorizations: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SolveSnapshot {
    pub forward: usize,
    pub adjoint: usize,
    pub incremental_forward: usize,
    pub incremental_adjoint: usize,
    pub multiplier_forward: usize,
    pub multiplier_adjoint: usize,
    pub factorizations: usize,
}

impl SolveSnapshot {
    pub fn total_solves(&self) -> usize {
        self.forward
            + self.adjoint
            + self.incremental_forward
            + self.incremental_adjoint
            + self.multiplier_forward
            + self.multiplier_adjoint
    }

    pub fn since(&self, earlier: &SolveSnapshot) -> SolveSnapshot {
        SolveSnapshot {
            forward: self.forward - earlier.forward,
            adjoint: self.adjoint - earlier.adjoint,
            incremental_forward: self.incremental_forward - earlier.incremental_forward,
            incremental_adjoint: self.incremental_adjoint - earlier.incremental_adjoint,
            multiplier_forward: self.multiplier_forward - earlier.multiplier_forward,
            multiplier_adjoint: self.multiplier_adjoint - earlier.multiplier_adjoint,
            factorizations: self.factorizations - earlier.factorizations,
        }
    }
}

impl SolveCounters {
    fn index(kind: SolveKind) -> usize {
        match kind {
            SolveKind::Forward => 0,
            SolveKind::Adjoint => 1,
            SolveKind::IncrementalForward => 2,
            SolveKind::IncrementalAdjoint => 3,
            SolveKind::MultiplierForward => 4,
            SolveKind::MultiplierAdjoint => 5,
        }
    }

    pub fn record(&self, kind: SolveKind) {
        self.counts[Self::index(kind)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_factorization(&self) {
        self.factorizations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> SolveSnapshot {
        let c = |i: usize| self.counts[i].load(Ordering::Relaxed);
        SolveSnapshot {
            forward: c(0),
            adjoint: c(1),
            incremental_forward: c(2),
            incremental_adjoint: c(3),
            multiplier_forward: c(4),
            multiplier_adjoint: c(5),
            factorizations: self.factorizations.load(Ordering::Relaxed),
        }
    }
}

/// Real and imaginary parts of a P1 state.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl ComplexField {
    pub fn from_complex(u: &[c64]) -> Self {
        ComplexField { u1: u.iter().map(|z| z.re).collect(), u2: u.iter().map(|z| z.im).collect() }
    }

    pub fn to_complex(&self) -> Vec<c64> {
        self.u1.iter().zip(&self.u2).map(|(a, b)| c64::new(*a, *b)).collect()
    }

    pub fn len(&self) -> usize {
        self.u1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u1.is_empty()
    }
}

/// Design (one value per CLOAK cell) and random field (one value per CLOAK vertex).
#[derive(Clone, Debug, PartialEq)]
pub struct MediumState {
    pub tau: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl MediumState {
    pub fn homogeneous(mesh: &Mesh) -> Self {
        MediumState { tau: vec![0.0; mesh.design_dof_count()], zeta: vec![0.0; mesh.field_dof_count()] }
    }
}

/// One quadrature point of the CLOAK midpoint rule.
#[derive(Clone, Copy, Debug)]
pub struct CloakPoint {
    pub cell: usize,
    pub weight: f64,
    pub position: [f64; 2],
    /// Global vertices of the edge whose midpoint this is.
    pub edge: [usize; 2],
    /// Random-field dofs of the same vertices.
    pub field_edge: [usize; 2],
    /// Value slots of the 2x2 edge block in the state operator.
    slots: [usize; 4],
}

/// Quadrature data for every CLOAK point, in cell-major order.
#[derive(Clone, Debug)]
pub struct CloakQuadrature {
    pub points: Vec<CloakPoint>,
}

impl CloakQuadrature {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Values of a P1 state at the points.
    pub fn interpolate(&self, u: &[c64]) -> Vec<c64> {
        self.points.iter().map(|p| (u[p.edge[0]] + u[p.edge[1]]) * 0.5).collect()
    }

    /// Transpose of `interpolate`, scaled pointwise by `values`.
    pub fn scatter(&self, values: &[c64], n: usize) -> Vec<c64> {
        let mut out = vec![c64::new(0.0, 0.0); n];
        for (p, v) in self.points.iter().zip(values) {
            let h = *v * 0.5;
            out[p.edge[0]] += h;
            out[p.edge[1]] += h;
        }
        out
    }

    /// Log sound-speed perturbation tau_cell - zeta(x) at each point.
    pub fn log_speed(&self, medium: &MediumState) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| medium.tau[p.cell] - 0.5 * (medium.zeta[p.field_edge[0]] + medium.zeta[p.field_edge[1]]))
            .collect()
    }

    /// Maps a cellwise design direction to point values.
    pub fn from_cells(&self, cells: &[f64]) -> Vec<f64> {
        self.points.iter().map(|p| cells[p.cell]).collect()
    }

    /// Transpose of `from_cells`.
    pub fn to_cells(&self, values: &[f64], ncells: usize) -> Vec<f64> {
        let mut out = vec![0.0; ncells];
        for (p, v) in self.points.iter().zip(values) {
            out[p.cell] += v;
        }
        out
    }

    /// Maps a random-field direction to point values.
    pub fn from_field(&self, field: &[f64]) -> Vec<f64> {
        self.points.iter().map(|p| 0.5 * (field[p.field_edge[0]] + field[p.field_edge[1]])).collect()
    }

    /// Transpose of `from_field`.
    pub fn to_field(&self, values: &[f64], nfield: usize) -> Vec<f64> {
        let mut out = vec![0.0; nfield];
        for (p, v) in self.points.iter().zip(values) {
            out[p.field_edge[0]] += 0.5 * v;
            out[p.field_edge[1]] += 0.5 * v;
        }
        out
    }
}

/// Operator pieces that depend on the wavenumber only.
struct FrequencyData {
    k: f64,
    /// Complex operator with every term except the CLOAK mass.
    base: Vec<c64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemSettings {
    pub k0: f64,
    pub c0: f64,
    pub sigma0: f64,
    pub pml_exponent: f64,
    pub observation: Observation,
}

impl ProblemSettings {
    pub fn standard(k0: f64) -> Self {
        ProblemSettings { k0, c0: 1.0, sigma0: 2.0 * k0, pml_exponent: 2.0, observation: Observation::Host }
    }
}

pub struct ScatteringProblem {
    mesh: Arc<Mesh>,
    settings: ProblemSettings,
    pml: PmlProfile,
    sources: Vec<Source>,
    /// Index of each source's frequency group.
    source_group: Vec<usize>,
    groups: Vec<FrequencyData>,
    assembler: FormAssembler,
    symbolic: ComplexSymbolic,
    cloak: CloakQuadrature,
    observation_mass: SparseOperator,
    counters: Arc<SolveCounters>,
}

impl ScatteringProblem {
    pub fn new(
        mesh: Arc<Mesh>,
        geometry: &GeometrySpec,
        settings: ProblemSettings,
        sources: Vec<Source>,
    ) -> Result<Self> {
        if !(settings.k0 > 0.0) || !settings.k0.is_finite() {
            return Err(CloakError::config("k0 must be positive"));
        }
        if !(settings.c0 > 0.0) {
            return Err(CloakError::config("c0 must be positive"));
        }
        if !(settings.sigma0 >= 0.0) || !(settings.pml_exponent >= 0.0) {
            return Err(CloakError::config("PML amplitude and exponent must be non-negative"));
        }
        if sources.is_empty() {
            return Err(CloakError::config("at least one source is required"));
        }
        for s in &sources {
            let norm = s.direction[0].hypot(s.direction[1]);
            if (norm - 1.0).abs() > 1e-12 {
                return Err(CloakError::config(format!("source direction {:?} is not unit length", s.direction)));
            }
            if !(s.frequency_factor > 0.0) {
                return Err(CloakError::config("source frequencies must be positive"));
            }
        }
        let pml = PmlProfile {
            sigma0: settings.sigma0,
            start: geometry.pml_start(),
            width: geometry.pml_width,
            exponent: settings.pml_exponent,
        };
        for &t in mesh.cloak_cells() {
            for p in mesh.triangle_points(t) {
                if pml.sigma(p) != (0.0, 0.0) {
                    return Err(CloakError::MeshInvariant {
                        triangle: t,
                        reason: "CLOAK triangle reaches into the absorbing layer".into(),
                    });
                }
            }
        }

        let assembler = FormAssembler::new(&mesh, DofMap::vertices(&mesh));
        let structure = assembler.structure().clone();
        let symbolic = ComplexSymbolic::new(structure.clone())?;
        let cloak = build_cloak_quadrature(&mesh, &structure);

        let mut factors: Vec<f64> = Vec::new();
        let mut source_group = Vec::with_capacity(sources.len());
        for s in &sources {
            let g = match factors.iter().position(|f| *f == s.frequency_factor) {
                Some(g) => g,
                None => {
                    factors.push(s.frequency_factor);
                    factors.len() - 1
                }
            };
            source_group.push(g);
        }
        let groups = factors
            .iter()
            .map(|f| {
                let k = f * settings.k0;
                let blocks = assemble_blocks(&mesh, &assembler, &pml, k, None);
                let base = blocks.complex_values();
                FrequencyData { k, base }
            })
            .collect();

        let observation_mass =
            assembler.assemble(settings.observation.regions(), Coefficient::Constant(1.0), FormKind::Mass)?;
        Ok(ScatteringProblem {
            mesh,
            settings,
            pml,
            sources,
            source_group,
            groups,
            assembler,
            symbolic,
            cloak,
            observation_mass,
            counters: Arc::new(SolveCounters::default()),
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }
    pub fn settings(&self) -> &ProblemSettings {
        &self.settings
    }
    pub fn pml(&self) -> &PmlProfile {
        &self.pml
    }
    pub fn sources(&self) -> &[Source] {
        &self.sources
    }
    pub fn source_count(&self) -> usize {
        self.sources.len()
    }
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
    pub fn source_group(&self, i: usize) -> usize {
        self.source_group[i]
    }
    pub fn group_wavenumber(&self, g: usize) -> f64 {
        self.groups[g].k
    }
    pub fn wavenumber(&self, i: usize) -> f64 {
        self.groups[self.source_group[i]].k
    }
    pub fn cloak(&self) -> &CloakQuadrature {
        &self.cloak
    }
    pub fn observation_mass(&self) -> &SparseOperator {
        &self.observation_mass
    }
    pub fn counters(&self) -> &Arc<SolveCounters> {
        &self.counters
    }
    pub fn assembler(&self) -> &FormAssembler {
        &self.assembler
    }
    pub fn state_len(&self) -> usize {
        self.mesh.vertex_count()
    }

    /// Incident field e^{i k x.b} of source i.
    pub fn incident(&self, i: usize, x: [f64; 2]) -> c64 {
        let k = self.wavenumber(i);
        let b = self.sources[i].direction;
        let phase = k * (x[0] * b[0] + x[1] * b[1]);
        c64::new(phase.cos(), phase.sin())
    }

    pub fn incident_at_vertices(&self, i: usize) -> Vec<c64> {
        self.mesh.vertices().iter().map(|&x| self.incident(i, x)).collect()
    }

    /// Squared local wavenumber at the CLOAK points for a log-speed vector.
    pub fn kappa(&self, group: usize, log_speed: &[f64]) -> Vec<f64> {
        let k2 = self.groups[group].k.powi(2);
        log_speed.iter().map(|s| k2 * (2.0 * s).exp()).collect()
    }

    /// Complex state operator of a frequency group at the given log speed.
    pub fn complex_operator(&self, group: usize, log_speed: &[f64]) -> ComplexOperator {
        let kappa = self.kappa(group, log_speed);
        let mut values = self.groups[group].base.clone();
        for (p, kq) in self.cloak.points.iter().zip(&kappa) {
            let v = c64::new(0.25 * p.weight * kq, 0.0);
            for &s in &p.slots {
                values[s] -= v;
            }
        }
        ComplexOperator { structure: self.assembler.structure().clone(), values }
    }

    pub fn factorize(&self, group: usize, log_speed: &[f64]) -> Result<ComplexFactorization> {
        let op = self.complex_operator(group, log_speed);
        self.counters.record_factorization();
        ComplexFactorization::new(&self.symbolic, &op).map_err(|e| match e {
            CloakError::Singular(m) => CloakError::Singular(format!(
                "{m}; the discrete problem may be resonant at k = {}, perturb the frequency",
                self.groups[group].k
            )),
            other => other,
        })
    }

    /// Complex load vector of source i.
    pub fn complex_load(&self, i: usize, log_speed: &[f64]) -> Vec<c64> {
        let n = self.state_len();
        let k = self.wavenumber(i);
        let kappa = self.kappa(self.source_group[i], log_speed);
        let mut f = vec![c64::new(0.0, 0.0); n];
        for (p, kq) in self.cloak.points.iter().zip(&kappa) {
            let diff = kq - k * k;
            if diff == 0.0 {
                continue;
            }
            let v = self.incident(i, p.position) * (0.5 * p.weight * diff);
            f[p.edge[0]] += v;
            f[p.edge[1]] += v;
        }
        let b = self.sources[i].direction;
        let verts = self.mesh.vertices();
        for facet in self.mesh.facets() {
            let [a, c] = facet.vertices;
            let (pa, pc) = (verts[a], verts[c]);
            let len = (pc[0] - pa[0]).hypot(pc[1] - pa[1]);
            let bn = b[0] * facet.normal[0] + b[1] * facet.normal[1];
            for (t, w) in facet_rule() {
                let x = [pa[0] + t * (pc[0] - pa[0]), pa[1] + t * (pc[1] - pa[1])];
                // -grad(u_inc).n = -i k (b.n) u_inc
                let g = -c64::new(0.0, k * bn) * self.incident(i, x) * (w * len);
                f[a] += g * (1.0 - t);
                f[c] += g * t;
            }
        }
        f
    }

    /// Block operator [[R - B1, -(S - B2)], [S - B2, R - B1]] acting on (u1, u2).
    pub fn assemble_system(&self, medium: &MediumState, i: usize) -> Result<SparseOperator> {
        self.check_medium(medium)?;
        let s = self.cloak.log_speed(medium);
        let kappa = self.kappa(self.source_group[i], &s);
        let blocks = assemble_blocks(&self.mesh, &self.assembler, &self.pml, self.wavenumber(i), Some(&kappa));
        Ok(blocks.block_operator())
    }

    /// The four symmetric blocks R, S, B1, B2 used by `assemble_system`.
    pub fn assemble_blocks(&self, medium: &MediumState, i: usize) -> Result<SystemBlocks> {
        self.check_medium(medium)?;
        let s = self.cloak.log_speed(medium);
        let kappa = self.kappa(self.source_group[i], &s);
        Ok(assemble_blocks(&self.mesh, &self.assembler, &self.pml, self.wavenumber(i), Some(&kappa)))
    }

    /// Stacked (real, imaginary) load.
    pub fn assemble_load(&self, medium: &MediumState, i: usize) -> Result<Vec<f64>> {
        self.check_medium(medium)?;
        let f = self.complex_load(i, &self.cloak.log_speed(medium));
        Ok(f.iter().map(|z| z.re).chain(f.iter().map(|z| z.im)).collect())
    }

    pub fn solve_scattered(&self, medium: &MediumState, i: usize) -> Result<ComplexField> {
        self.check_medium(medium)?;
        let s = self.cloak.log_speed(medium);
        let fact = self.factorize(self.source_group[i], &s)?;
        let u = self.solve_with(&fact, &self.complex_load(i, &s), SolveKind::Forward)?;
        Ok(ComplexField::from_complex(&u))
    }

    pub fn solve_with(&self, fact: &ComplexFactorization, rhs: &[c64], kind: SolveKind) -> Result<Vec<c64>> {
        self.counters.record(kind);
        match kind {
            SolveKind::Forward | SolveKind::IncrementalForward | SolveKind::MultiplierForward => fact.solve(rhs),
            _ => fact.solve_adjoint(rhs),
        }
    }

    pub fn check_medium(&self, medium: &MediumState) -> Result<()> {
        if medium.tau.len() != self.mesh.design_dof_count() {
            return Err(CloakError::Dimension { expected: self.mesh.design_dof_count(), got: medium.tau.len() });
        }
        if medium.zeta.len() != self.mesh.field_dof_count() {
            return Err(CloakError::Dimension { expected: self.mesh.field_dof_count(), got: medium.zeta.len() });
        }
        Ok(())
    }
}

fn build_cloak_quadrature(mesh: &Mesh, structure: &crate::fem::Structure) -> CloakQuadrature {
    let mut points = Vec::with_capacity(3 * mesh.design_dof_count());
    for (cell, &t) in mesh.cloak_cells().iter().enumerate() {
        let el = Element::of(mesh, t);
        let tri = mesh.triangles()[t];
        let qp = el.quadrature_points();
        for (q, x) in qp.iter().enumerate() {
            let (a, b) = (tri[q], tri[(q + 1) % 3]);
            let slot = |r: usize, c: usize| structure.slot(r, c).expect("edge entry in pattern");
            points.push(CloakPoint {
                cell,
                weight: el.area / 3.0,
                position: *x,
                edge: [a, b],
                field_edge: [mesh.cloak_vertex_local(a).unwrap(), mesh.cloak_vertex_local(b).unwrap()],
                slots: [slot(a, a), slot(a, b), slot(b, a), slot(b, b)],
            });
        }
    }
    CloakQuadrature { points }
}

/// The symmetric real blocks of the state operator.
pub struct SystemBlocks {
    pub r: SparseOperator,
    pub s: SparseOperator,
    pub b1: SparseOperator,
    pub b2: SparseOperator,
}

impl SystemBlocks {
    pub fn complex_values(&self) -> Vec<c64> {
        (0..self.r.values.len())
            .map(|k| c64::new(self.r.values[k] - self.b1.values[k], self.s.values[k] - self.b2.values[k]))
            .collect()
    }

    pub fn block_operator(&self) -> SparseOperator {
        let n = self.r.dim();
        let mut t = Vec::with_capacity(4 * self.r.values.len());
        for (row, col, v) in self.r.triplets() {
            let d = v - self.b1.get(row, col);
            t.push((row, col, d));
            t.push((row + n, col + n, d));
        }
        for (row, col, v) in self.s.triplets() {
            let o = v - self.b2.get(row, col);
            t.push((row, col + n, -o));
            t.push((row + n, col, o));
        }
        SparseOperator::from_triplets(2 * n, &t)
    }
}

/// Assembles R = K1(a1) + K2(a3), S = K1(a2) + K2(a4), B1 = M(b1), B2 = M(b2)
/// at wavenumber k. With `cloak = None` the CLOAK mass term is left out.
fn assemble_blocks(
    mesh: &Mesh,
    asm: &FormAssembler,
    pml: &PmlProfile,
    k: f64,
    cloak_kappa: Option<&[f64]>,
) -> SystemBlocks {
    let coeffs = |x: [f64; 2]| {
        let (s1, s2) = pml.sigma(x);
        PmlCoefficients::new(k, s1, s2)
    };
    let a1 = move |x: [f64; 2]| coeffs(x).a1;
    let a2 = move |x: [f64; 2]| coeffs(x).a2;
    let a3 = move |x: [f64; 2]| coeffs(x).a3;
    let a4 = move |x: [f64; 2]| coeffs(x).a4;
    let b1 = move |x: [f64; 2]| coeffs(x).b1;
    let b2 = move |x: [f64; 2]| coeffs(x).b2;
    let outer = [Region::Host, Region::Pml];
    let mut r = asm.zeros();
    asm.add_form(&mut r, &outer, Coefficient::Pointwise(&a1), FormKind::StiffnessX1, 1.0);
    asm.add_form(&mut r, &outer, Coefficient::Pointwise(&a3), FormKind::StiffnessX2, 1.0);
    asm.add_form(&mut r, &[Region::Cloak], Coefficient::Constant(1.0), FormKind::StiffnessX1, 1.0);
    asm.add_form(&mut r, &[Region::Cloak], Coefficient::Constant(1.0), FormKind::StiffnessX2, 1.0);
    let mut s = asm.zeros();
    asm.add_form(&mut s, &[Region::Pml], Coefficient::Pointwise(&a2), FormKind::StiffnessX1, 1.0);
    asm.add_form(&mut s, &[Region::Pml], Coefficient::Pointwise(&a4), FormKind::StiffnessX2, 1.0);
    let mut bm1 = asm.zeros();
    asm.add_form(&mut bm1, &outer, Coefficient::Pointwise(&b1), FormKind::Mass, 1.0);
    let mut bm2 = asm.zeros();
    asm.add_form(&mut bm2, &[Region::Pml], Coefficient::Pointwise(&b2), FormKind::Mass, 1.0);
    if let Some(kappa) = cloak_kappa {
        // Point values are stored cell-major, three per CLOAK cell.
        let mut local = vec![usize::MAX; mesh.triangle_count()];
        for (c, &t) in mesh.cloak_cells().iter().enumerate() {
            local[t] = c;
        }
        let kq = move |t: usize, q: usize| kappa[3 * local[t] + q];
        asm.add_form(&mut bm1, &[Region::Cloak], Coefficient::Quadrature(&kq), FormKind::Mass, 1.0);
    }
    SystemBlocks { r, s, b1: bm1, b2: bm2 }
}
