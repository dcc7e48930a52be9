//! P1 finite-element plumbing: quadrature, variable-coefficient assembly,
//! sparse storage and direct solvers.

pub mod envelope;
pub mod sparse;

use std::sync::Arc;

use crate::error::{CloakError, Result};
use crate::mesh::{Mesh, Region};

pub use envelope::EnvelopeCholesky;
pub use sparse::{
    AssemblyPattern, ComplexFactorization, ComplexOperator, ComplexSymbolic, Factorization,
    SparseOperator, Structure,
};

/// Barycentric coordinates of the edge-midpoint rule, in the order
/// mid(v0, v1), mid(v1, v2), mid(v2, v0).
pub const EDGE_MIDPOINTS: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

/// Two-point Gauss rule on [0, 1]: (parameter, weight).
pub fn facet_rule() -> [(f64, f64); 2] {
    let d = 0.5 / 3f64.sqrt();
    [(0.5 - d, 0.5), (0.5 + d, 0.5)]
}

/// Affine data of one triangle.
#[derive(Clone, Copy, Debug)]
pub struct Element {
    pub points: [[f64; 2]; 3],
    pub area: f64,
    /// Gradients of the three barycentric basis functions.
    pub grads: [[f64; 2]; 3],
}

impl Element {
    pub fn new(points: [[f64; 2]; 3]) -> Self {
        let [p0, p1, p2] = points;
        let two_a = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let grads = [
            [(p1[1] - p2[1]) / two_a, (p2[0] - p1[0]) / two_a],
            [(p2[1] - p0[1]) / two_a, (p0[0] - p2[0]) / two_a],
            [(p0[1] - p1[1]) / two_a, (p1[0] - p0[0]) / two_a],
        ];
        Element { points, area: 0.5 * two_a, grads }
    }

    pub fn of(mesh: &Mesh, t: usize) -> Self {
        Element::new(mesh.triangle_points(t))
    }

    pub fn quadrature_points(&self) -> [[f64; 2]; 3] {
        let mut q = [[0.0; 2]; 3];
        for (k, bary) in EDGE_MIDPOINTS.iter().enumerate() {
            for a in 0..3 {
                q[k][0] += bary[a] * self.points[a][0];
                q[k][1] += bary[a] * self.points[a][1];
            }
        }
        q
    }

    pub fn barycentric(&self, x: [f64; 2]) -> [f64; 3] {
        let p0 = self.points[0];
        let l1 = self.grads[1][0] * (x[0] - p0[0]) + self.grads[1][1] * (x[1] - p0[1]);
        let l2 = self.grads[2][0] * (x[0] - p0[0]) + self.grads[2][1] * (x[1] - p0[1]);
        [1.0 - l1 - l2, l1, l2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    Mass,
    StiffnessX1,
    StiffnessX2,
}

/// Scalar coefficient multiplying a bilinear form.
#[derive(Clone, Copy)]
pub enum Coefficient<'a> {
    Constant(f64),
    /// One value per mesh triangle.
    Cellwise(&'a [f64]),
    Pointwise(&'a (dyn Fn([f64; 2]) -> f64 + Sync)),
    /// Value at (triangle, quadrature point index).
    Quadrature(&'a (dyn Fn(usize, usize) -> f64 + Sync)),
}

impl Coefficient<'_> {
    fn at(&self, t: usize, q: usize, x: [f64; 2]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Cellwise(v) => v[t],
            Coefficient::Pointwise(f) => f(x),
            Coefficient::Quadrature(f) => f(t, q),
        }
    }
}

/// Vertex-to-unknown numbering.
#[derive(Clone, Debug)]
pub struct DofMap {
    map: Vec<Option<usize>>,
    n: usize,
}

impl DofMap {
    /// One unknown per mesh vertex.
    pub fn vertices(mesh: &Mesh) -> Self {
        let n = mesh.vertex_count();
        DofMap { map: (0..n).map(Some).collect(), n }
    }

    /// Unknowns on vertices of CLOAK triangles, numbered in mesh order.
    pub fn cloak(mesh: &Mesh) -> Self {
        let map = (0..mesh.vertex_count()).map(|v| mesh.cloak_vertex_local(v)).collect();
        DofMap { map, n: mesh.field_dof_count() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.map[vertex]
    }

    pub fn element_dofs(&self, tri: [usize; 3]) -> [Option<usize>; 3] {
        [self.map[tri[0]], self.map[tri[1]], self.map[tri[2]]]
    }
}

/// Assembles forms over a fixed triangle set into one shared structure.
#[derive(Clone, Debug)]
pub struct FormAssembler {
    dofs: DofMap,
    pattern: AssemblyPattern,
    elements: Vec<Element>,
    regions: Vec<Region>,
}

impl FormAssembler {
    /// Pattern over every triangle that touches at least one dof.
    pub fn new(mesh: &Mesh, dofs: DofMap) -> Self {
        let tris: Vec<usize> = (0..mesh.triangle_count())
            .filter(|&t| dofs.element_dofs(mesh.triangles()[t]).iter().any(Option::is_some))
            .collect();
        let pattern =
            AssemblyPattern::new(dofs.len(), tris, &|t| dofs.element_dofs(mesh.triangles()[t]));
        let elements = pattern.triangles.iter().map(|&t| Element::of(mesh, t)).collect();
        let regions = pattern.triangles.iter().map(|&t| mesh.regions()[t]).collect();
        FormAssembler { dofs, pattern, elements, regions }
    }

    pub fn pattern(&self) -> &AssemblyPattern {
        &self.pattern
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn structure(&self) -> &Arc<Structure> {
        &self.pattern.structure
    }

    pub fn zeros(&self) -> SparseOperator {
        SparseOperator::zeros(self.pattern.structure.clone())
    }

    /// Adds `scale * form(coefficient)` restricted to `regions` into `op`.
    /// Returns the number of triangles visited.
    pub fn add_form(
        &self,
        op: &mut SparseOperator,
        regions: &[Region],
        coefficient: Coefficient<'_>,
        kind: FormKind,
        scale: f64,
    ) -> usize {
        assert!(Arc::ptr_eq(&op.structure, &self.pattern.structure));
        let mut visited = 0;
        for (e, (&t, slots)) in self.pattern.triangles.iter().zip(&self.pattern.slots).enumerate() {
            if !regions.contains(&self.regions[e]) {
                continue;
            }
            visited += 1;
            let local = element_matrix(&self.elements[e], t, coefficient, kind);
            for k in 0..9 {
                if slots[k] != usize::MAX {
                    op.values[slots[k]] += scale * local[k];
                }
            }
        }
        visited
    }

    pub fn assemble(
        &self,
        regions: &[Region],
        coefficient: Coefficient<'_>,
        kind: FormKind,
    ) -> Result<SparseOperator> {
        let mut op = self.zeros();
        if self.add_form(&mut op, regions, coefficient, kind, 1.0) == 0 {
            return Err(CloakError::EmptyOperator(format!(
                "no triangles in regions {:?}",
                regions.iter().map(|r| r.tag()).collect::<Vec<_>>()
            )));
        }
        Ok(op)
    }
}

/// Row-major 3x3 element matrix.
pub fn element_matrix(el: &Element, t: usize, coefficient: Coefficient<'_>, kind: FormKind) -> [f64; 9] {
    let qp = el.quadrature_points();
    let w = el.area / 3.0;
    let c: [f64; 3] = std::array::from_fn(|q| coefficient.at(t, q, qp[q]));
    let mut m = [0.0; 9];
    match kind {
        FormKind::Mass => {
            for q in 0..3 {
                let phi = EDGE_MIDPOINTS[q];
                for a in 0..3 {
                    for b in a..3 {
                        m[3 * a + b] += w * c[q] * phi[a] * phi[b];
                    }
                }
            }
        }
        FormKind::StiffnessX1 | FormKind::StiffnessX2 => {
            let d = if kind == FormKind::StiffnessX1 { 0 } else { 1 };
            let cint = w * (c[0] + c[1] + c[2]);
            for a in 0..3 {
                for b in a..3 {
                    m[3 * a + b] = cint * el.grads[a][d] * el.grads[b][d];
                }
            }
        }
    }
    // Mirror so the element matrix is bitwise symmetric.
    for a in 0..3 {
        for b in 0..a {
            m[3 * a + b] = m[3 * b + a];
        }
    }
    m
}

/// Assembles a scalar form over vertex dofs, restricted to `regions`.
pub fn assemble_scalar_form(
    mesh: &Mesh,
    regions: &[Region],
    coefficient: Coefficient<'_>,
    kind: FormKind,
) -> Result<SparseOperator> {
    FormAssembler::new(mesh, DofMap::vertices(mesh)).assemble(regions, coefficient, kind)
}

pub const ALL_REGIONS: [Region; 3] = [Region::Cloak, Region::Host, Region::Pml];

/// Evaluates a P1 field at a point of triangle `t`.
pub fn quadrature_eval(mesh: &Mesh, field: &[f64], t: usize, point: [f64; 2]) -> Result<f64> {
    if field.len() != mesh.vertex_count() {
        return Err(CloakError::Dimension { expected: mesh.vertex_count(), got: field.len() });
    }
    let el = Element::of(mesh, t);
    let l = el.barycentric(point);
    if l.iter().any(|&v| v < -1e-12) {
        return Err(CloakError::OutsideTriangle { triangle: t, x: point[0], y: point[1] });
    }
    let tri = mesh.triangles()[t];
    Ok(l[0] * field[tri[0]] + l[1] * field[tri[1]] + l[2] * field[tri[2]])
}
