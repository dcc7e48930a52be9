//! Triangular meshes of a square domain with an obstacle hole, region tags
//! and obstacle-boundary facets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::error::{CloakError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Cloak,
    Host,
    Pml,
}

impl Region {
    pub fn tag(self) -> &'static str {
        match self {
            Region::Cloak => "CLOAK",
            Region::Host => "HOST",
            Region::Pml => "PML",
        }
    }

    pub fn parse(tag: &str) -> Option<Region> {
        match tag {
            "CLOAK" => Some(Region::Cloak),
            "HOST" => Some(Region::Host),
            "PML" => Some(Region::Pml),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub obstacle_radius: f64,
    pub cloak_radius: f64,
    pub half_width: f64,
    pub pml_width: f64,
    pub mesh_size: f64,
}

impl GeometrySpec {
    /// Unit obstacle, cloak out to radius 3, domain [-6, 6]^2 with a PML of width 1.
    pub fn standard(mesh_size: f64) -> Self {
        GeometrySpec {
            obstacle_radius: 1.0,
            cloak_radius: 3.0,
            half_width: 6.0,
            pml_width: 1.0,
            mesh_size,
        }
    }

    pub fn pml_start(&self) -> f64 {
        self.half_width - self.pml_width
    }

    pub fn validate(&self) -> Result<()> {
        let g = self;
        let finite = [g.obstacle_radius, g.cloak_radius, g.half_width, g.pml_width, g.mesh_size]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(CloakError::config("geometry values must be finite"));
        }
        let tol = 1e-6 * g.half_width.abs().max(1.0);
        if !(g.obstacle_radius > 0.0) {
            return Err(CloakError::config("obstacle radius must be positive"));
        }
        if g.cloak_radius - g.obstacle_radius <= tol {
            return Err(CloakError::config("cloak radius must exceed obstacle radius"));
        }
        if g.pml_width <= 0.0 || g.pml_start() - g.cloak_radius <= tol {
            return Err(CloakError::config(
                "cloak must lie strictly inside the PML-free part of the square",
            ));
        }
        if !(g.mesh_size > 0.0) {
            return Err(CloakError::config("mesh size must be positive"));
        }
        if g.mesh_size > (g.cloak_radius - g.obstacle_radius) {
            return Err(CloakError::config("mesh size larger than the cloak annulus"));
        }
        Ok(())
    }
}

/// Edge of the obstacle boundary with the unit normal pointing into the hole.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub normal: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<Region>,
    facets: Vec<Facet>,
    areas: Vec<f64>,
    cloak_cells: Vec<usize>,
    cloak_vertices: Vec<usize>,
    cloak_vertex_local: Vec<Option<usize>>,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    /// Validates every structural invariant and builds the derived maps.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        regions: Vec<Region>,
        facets: Vec<Facet>,
    ) -> Result<Mesh> {
        if regions.len() != triangles.len() {
            return Err(CloakError::Dimension { expected: triangles.len(), got: regions.len() });
        }
        let nv = vertices.len();
        let mut areas = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= nv) {
                return Err(CloakError::MeshInvariant {
                    triangle: t,
                    reason: "vertex index out of range".into(),
                });
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(CloakError::MeshInvariant {
                    triangle: t,
                    reason: "repeated vertex".into(),
                });
            }
            let a = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if !(a > 0.0) {
                return Err(CloakError::MeshInvariant {
                    triangle: t,
                    reason: format!("non-positive signed area {a:e}"),
                });
            }
            areas.push(a);
        }

        let mut edge_count: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let entry = edge_count.entry(edge_key(tri[e], tri[(e + 1) % 3])).or_insert((0, t));
                entry.0 += 1;
            }
        }
        for f in &facets {
            let [i, j] = f.vertices;
            let owner = match edge_count.get(&edge_key(i, j)) {
                Some(&(1, t)) => t,
                Some(&(_, t)) => {
                    return Err(CloakError::MeshInvariant {
                        triangle: t,
                        reason: format!("obstacle facet ({i}, {j}) is an interior edge"),
                    })
                }
                None => {
                    return Err(CloakError::MeshInvariant {
                        triangle: 0,
                        reason: format!("obstacle facet ({i}, {j}) is not a mesh edge"),
                    })
                }
            };
            let len = (f.normal[0].powi(2) + f.normal[1].powi(2)).sqrt();
            if (len - 1.0).abs() > 1e-12 {
                return Err(CloakError::MeshInvariant {
                    triangle: owner,
                    reason: format!("facet ({i}, {j}) normal has length {len}"),
                });
            }
        }

        // A vertex touching both CLOAK and PML would make the PML coefficients
        // depend on the design through shared basis functions.
        let mut touches = vec![(false, false); nv];
        for (tri, reg) in triangles.iter().zip(&regions) {
            for &i in tri {
                match reg {
                    Region::Cloak => touches[i].0 = true,
                    Region::Pml => touches[i].1 = true,
                    Region::Host => {}
                }
            }
        }
        for (t, (tri, reg)) in triangles.iter().zip(&regions).enumerate() {
            if *reg == Region::Cloak && tri.iter().any(|&i| touches[i].1) {
                return Err(CloakError::MeshInvariant {
                    triangle: t,
                    reason: "CLOAK triangle touches the PML".into(),
                });
            }
        }

        let cloak_cells: Vec<usize> =
            (0..triangles.len()).filter(|&t| regions[t] == Region::Cloak).collect();
        let mut cloak_vertex_local = vec![None; nv];
        let mut cloak_vertices = Vec::new();
        for i in 0..nv {
            if touches[i].0 {
                cloak_vertex_local[i] = Some(cloak_vertices.len());
                cloak_vertices.push(i);
            }
        }

        Ok(Mesh {
            vertices,
            triangles,
            regions,
            facets,
            areas,
            cloak_cells,
            cloak_vertices,
            cloak_vertex_local,
        })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }
    pub fn areas(&self) -> &[f64] {
        &self.areas
    }
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }
    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }
    /// Triangles carrying design unknowns, in mesh order.
    pub fn cloak_cells(&self) -> &[usize] {
        &self.cloak_cells
    }
    /// Vertices carrying random-field unknowns, in mesh order.
    pub fn cloak_vertices(&self) -> &[usize] {
        &self.cloak_vertices
    }
    pub fn cloak_vertex_local(&self, vertex: usize) -> Option<usize> {
        self.cloak_vertex_local[vertex]
    }
    pub fn design_dof_count(&self) -> usize {
        self.cloak_cells.len()
    }
    pub fn field_dof_count(&self) -> usize {
        self.cloak_vertices.len()
    }
    /// Real unknowns of the block state system.
    pub fn state_dof_count(&self) -> usize {
        2 * self.vertices.len()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn region_area(&self, region: Region) -> f64 {
        self.areas.iter().zip(&self.regions).filter(|(_, r)| **r == region).map(|(a, _)| a).sum()
    }

    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let p = self.triangle_points(t);
        [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0]
    }

    /// Area of the polygon enclosed by the obstacle facets.
    pub fn hole_area(&self) -> f64 {
        let mut s = 0.0;
        for f in &self.facets {
            let p = self.vertices[f.vertices[0]];
            let q = self.vertices[f.vertices[1]];
            let cross = 0.5 * (p[0] * q[1] - q[0] * p[1]);
            // Traversal is counter-clockwise around the hole when it lies to the left.
            let left = [p[1] - q[1], q[0] - p[0]];
            if left[0] * f.normal[0] + left[1] * f.normal[1] > 0.0 {
                s += cross;
            } else {
                s -= cross;
            }
        }
        s
    }

    /// Uniform midpoint subdivision. Midpoints of edges whose endpoints both
    /// lie on one of the circles in `snap_radii` are projected back onto it.
    pub fn refine(&self, snap_radii: &[f64]) -> Result<Mesh> {
        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let on_circle = |p: [f64; 2], r: f64| ((p[0].hypot(p[1])) - r).abs() <= 1e-9 * r.max(1.0);
        let mut mid_of = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
            *midpoint.entry(edge_key(a, b)).or_insert_with(|| {
                let p = vertices[a];
                let q = vertices[b];
                let mut m = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
                for &r in snap_radii {
                    if on_circle(p, r) && on_circle(q, r) {
                        let norm = m[0].hypot(m[1]);
                        m = [m[0] * r / norm, m[1] * r / norm];
                        break;
                    }
                }
                vertices.push(m);
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        let mut regions = Vec::with_capacity(4 * self.triangles.len());
        for (tri, &reg) in self.triangles.iter().zip(&self.regions) {
            let [a, b, c] = *tri;
            let ab = mid_of(a, b, &mut vertices);
            let bc = mid_of(b, c, &mut vertices);
            let ca = mid_of(c, a, &mut vertices);
            for child in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]] {
                triangles.push(child);
                regions.push(reg);
            }
        }
        let mut facets = Vec::with_capacity(2 * self.facets.len());
        for f in &self.facets {
            let [i, j] = f.vertices;
            let m = midpoint[&edge_key(i, j)];
            for (p, q) in [(i, m), (m, j)] {
                facets.push(Facet { vertices: [p, q], normal: oriented_normal(&vertices, p, q, f.normal) });
            }
        }
        Mesh::new(vertices, triangles, regions, facets)
    }

    /// Serializes to the `cloakmesh v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("cloakmesh v1\n");
        let _ = writeln!(s, "{} {} {}", self.vertices.len(), self.triangles.len(), self.facets.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{:?} {:?}", v[0], v[1]);
        }
        for (t, r) in self.triangles.iter().zip(&self.regions) {
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], r.tag());
        }
        for f in &self.facets {
            let _ = writeln!(
                s,
                "{} {} {:?} {:?}",
                f.vertices[0], f.vertices[1], f.normal[0], f.normal[1]
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Mesh> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, reason: &str| CloakError::Parse { line, reason: reason.to_string() };
        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
        if header != "cloakmesh v1" {
            return Err(perr(ln, "expected header `cloakmesh v1`"));
        }
        let (ln, counts) = lines.next().ok_or_else(|| perr(ln + 1, "missing counts"))?;
        let counts: Vec<usize> = counts
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(ln, "counts must be integers"))?;
        if counts.len() != 3 {
            return Err(perr(ln, "expected `vertices triangles facets` counts"));
        }
        let mut last = ln;
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            match lines.next() {
                Some((l, s)) => {
                    last = l;
                    Ok((l, s.split_whitespace().collect()))
                }
                None => Err(perr(last + 1, &format!("unexpected end of file reading {what}"))),
            }
        };
        let float = |l: usize, t: &str| t.parse::<f64>().map_err(|_| perr(l, "invalid number"));
        let index = |l: usize, t: &str| t.parse::<usize>().map_err(|_| perr(l, "invalid index"));
        let mut vertices = Vec::with_capacity(counts[0]);
        for _ in 0..counts[0] {
            let (l, tok) = next("vertex")?;
            if tok.len() != 2 {
                return Err(perr(l, "vertex line needs `x y`"));
            }
            vertices.push([float(l, tok[0])?, float(l, tok[1])?]);
        }
        let mut triangles = Vec::with_capacity(counts[1]);
        let mut regions = Vec::with_capacity(counts[1]);
        for _ in 0..counts[1] {
            let (l, tok) = next("triangle")?;
            if tok.len() != 4 {
                return Err(perr(l, "triangle line needs `i j k tag`"));
            }
            triangles.push([index(l, tok[0])?, index(l, tok[1])?, index(l, tok[2])?]);
            regions.push(Region::parse(tok[3]).ok_or_else(|| perr(l, "unknown region tag"))?);
        }
        let mut facets = Vec::with_capacity(counts[2]);
        for _ in 0..counts[2] {
            let (l, tok) = next("facet")?;
            if tok.len() != 4 {
                return Err(perr(l, "facet line needs `i j nx ny`"));
            }
            facets.push(Facet {
                vertices: [index(l, tok[0])?, index(l, tok[1])?],
                normal: [float(l, tok[2])?, float(l, tok[3])?],
            });
        }
        if let Some((l, _)) = lines.next() {
            return Err(perr(l, "trailing content after facets"));
        }
        Mesh::new(vertices, triangles, regions, facets)
    }
}

fn oriented_normal(vertices: &[[f64; 2]], p: usize, q: usize, reference: [f64; 2]) -> [f64; 2] {
    let a = vertices[p];
    let b = vertices[q];
    let t = [b[0] - a[0], b[1] - a[1]];
    let len = t[0].hypot(t[1]);
    let mut n = [t[1] / len, -t[0] / len];
    if n[0] * reference[0] + n[1] * reference[1] < 0.0 {
        n = [-n[0], -n[1]];
    }
    n
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    Mesh::parse(&std::fs::read_to_string(path)?)
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, mesh.to_text())?;
    Ok(())
}

/// Builds the disk-in-square geometry: graded rings of points around the
/// obstacle and through the cloak, a square lattice outside, then a
/// Delaunay triangulation with the hole removed.
pub fn build_disk_in_square(spec: &GeometrySpec) -> Result<Mesh> {
    spec.validate()?;
    let h = spec.mesh_size;
    let r1 = spec.obstacle_radius;
    let r2 = spec.cloak_radius;
    let half = spec.half_width;
    let pml_start = spec.pml_start();

    let n_rad = ((r2 - r1) / (h * 3f64.sqrt() / 2.0)).ceil().max(1.0) as usize;
    let dr = (r2 - r1) / n_rad as f64;
    let mut extra = 2;
    while extra > 0 && r2 + extra as f64 * dr + h >= pml_start {
        extra -= 1;
    }
    let mut points: Vec<Point2<f64>> = Vec::new();
    let mut ring_radii = Vec::new();
    for j in 0..=(n_rad + extra) {
        let r = r1 + j as f64 * dr;
        ring_radii.push(r);
        let n = ((2.0 * std::f64::consts::PI * r / h).ceil() as usize).max(6);
        let offset = if j % 2 == 1 { 0.5 } else { 0.0 };
        for i in 0..n {
            let th = 2.0 * std::f64::consts::PI * (i as f64 + offset) / n as f64;
            points.push(Point2::new(r * th.cos(), r * th.sin()));
        }
    }
    let r_last = *ring_radii.last().unwrap();
    let ring0_count = ((2.0 * std::f64::consts::PI * r1 / h).ceil() as usize).max(6);

    // Square lattice outside the rings, slightly coarser than h so its vertex
    // density roughly matches the near-equilateral rings. The PML interface
    // need not be a grid line since tags follow centroids.
    let n_cells = (2.0 * half / (1.025 * h)).round().max(2.0) as usize;
    let hl = 2.0 * half / n_cells as f64;
    let clearance = r_last + 0.7 * hl;
    for iy in 0..=n_cells {
        for ix in 0..=n_cells {
            let x = -half + ix as f64 * hl;
            let y = -half + iy as f64 * hl;
            if x.hypot(y) > clearance {
                points.push(Point2::new(x, y));
            }
        }
    }

    let dt = DelaunayTriangulation::<Point2<f64>>::bulk_load_stable(points)
        .map_err(|e| CloakError::config(format!("triangulation failed: {e:?}")))?;
    let vertices: Vec<[f64; 2]> = dt.vertices().map(|v| [v.position().x, v.position().y]).collect();

    let mut triangles = Vec::new();
    let mut regions = Vec::new();
    for face in dt.inner_faces() {
        let vs = face.vertices();
        let mut tri = [vs[0].fix().index(), vs[1].fix().index(), vs[2].fix().index()];
        if tri.iter().all(|&i| i < ring0_count) {
            continue;
        }
        if signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]) < 0.0 {
            tri.swap(1, 2);
        }
        let p = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
        let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
        let region = if c[0].hypot(c[1]) <= r2 {
            Region::Cloak
        } else if c[0].abs().max(c[1].abs()) >= pml_start {
            Region::Pml
        } else {
            Region::Host
        };
        triangles.push(tri);
        regions.push(region);
    }

    // Obstacle facets are the boundary edges that do not lie on the square.
    let mut count: HashMap<(usize, usize), (usize, [usize; 3])> = HashMap::new();
    for tri in &triangles {
        for e in 0..3 {
            let entry = count.entry(edge_key(tri[e], tri[(e + 1) % 3])).or_insert((0, *tri));
            entry.0 += 1;
        }
    }
    let mut facets = Vec::new();
    for tri in &triangles {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            if count[&edge_key(a, b)].0 != 1 || a >= ring0_count || b >= ring0_count {
                continue;
            }
            // Outward normal of a counter-clockwise triangle for edge (a, b).
            let pa = vertices[a];
            let pb = vertices[b];
            let t = [pb[0] - pa[0], pb[1] - pa[1]];
            let len = t[0].hypot(t[1]);
            facets.push(Facet { vertices: [a, b], normal: [t[1] / len, -t[0] / len] });
        }
    }
    Mesh::new(vertices, triangles, regions, facets)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_square_8() -> Mesh {
        // 3x3 grid of vertices on [0,1]^2, each cell split into two triangles.
        let mut vertices = Vec::new();
        for j in 0..3 {
            for i in 0..3 {
                vertices.push([i as f64 * 0.5, j as f64 * 0.5]);
            }
        }
        let mut triangles = Vec::new();
        for j in 0..2 {
            for i in 0..2 {
                let a = j * 3 + i;
                triangles.push([a, a + 1, a + 4]);
                triangles.push([a, a + 4, a + 3]);
            }
        }
        let n = triangles.len();
        Mesh::new(vertices, triangles, vec![Region::Host; n], vec![]).unwrap()
    }

    fn coarse() -> Mesh {
        build_disk_in_square(&GeometrySpec::standard(0.5)).unwrap()
    }

    #[test]
    fn minimal_square_loads() {
        let m = unit_square_8();
        assert_eq!(m.triangle_count(), 8);
        assert!(m.facets().is_empty());
        let back = Mesh::parse(&m.to_text()).unwrap();
        assert_eq!(back.triangles(), m.triangles());
    }

    #[test]
    fn built_mesh_invariants() {
        let spec = GeometrySpec::standard(0.3);
        let m = build_disk_in_square(&spec).unwrap();
        let expected = (2.0 * spec.half_width).powi(2) - m.hole_area();
        assert!((m.total_area() - expected).abs() <= 1e-10 * expected);
        for f in m.facets() {
            let p = m.vertices()[f.vertices[0]];
            let q = m.vertices()[f.vertices[1]];
            let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            // Normal points toward the obstacle centre.
            assert!(mid[0] * f.normal[0] + mid[1] * f.normal[1] < 0.0);
            assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
        }
        assert!(!m.facets().is_empty());
        for (t, r) in m.regions().iter().enumerate() {
            let c = m.centroid(t);
            match r {
                Region::Cloak => assert!(c[0].hypot(c[1]) <= 3.0),
                Region::Pml => assert!(c[0].abs().max(c[1].abs()) >= 5.0),
                Region::Host => {
                    assert!(c[0].hypot(c[1]) > 3.0 && c[0].abs().max(c[1].abs()) < 5.0)
                }
            }
        }
        assert_eq!(m.design_dof_count(), m.cloak_cells().len());
    }

    #[test]
    fn rebuild_is_byte_identical() {
        assert_eq!(coarse().to_text(), coarse().to_text());
    }

    #[test]
    fn round_trip_preserves_arrays() {
        let m = coarse();
        let back = Mesh::parse(&m.to_text()).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.regions(), m.regions());
        assert_eq!(back.facets(), m.facets());
    }

    #[test]
    fn degenerate_annulus_rejected() {
        let mut spec = GeometrySpec::standard(0.3);
        spec.cloak_radius = 1.0 + 1e-9;
        assert!(matches!(build_disk_in_square(&spec), Err(CloakError::Config(_))));
    }

    #[test]
    fn zero_area_triangle_named() {
        let text = "cloakmesh v1\n3 1 0\n0 0\n1 0\n2 0\n0 1 2 HOST\n";
        match Mesh::parse(text) {
            Err(CloakError::MeshInvariant { triangle, .. }) => assert_eq!(triangle, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cloak_touching_pml_rejected() {
        let text = "cloakmesh v1\n4 2 0\n0 0\n1 0\n1 1\n0 1\n0 1 2 CLOAK\n0 2 3 PML\n";
        assert!(matches!(Mesh::parse(text), Err(CloakError::MeshInvariant { .. })));
    }

    #[test]
    fn refinement_quadruples_and_snaps() {
        let m = coarse();
        let r = m.refine(&[1.0, 3.0]).unwrap();
        assert_eq!(r.triangle_count(), 4 * m.triangle_count());
        assert_eq!(r.facets().len(), 2 * m.facets().len());
        assert_eq!(r.design_dof_count(), 4 * m.design_dof_count());
        for f in r.facets() {
            for &v in &f.vertices {
                let p = r.vertices()[v];
                assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
            }
        }
        let expected = 144.0 - r.hole_area();
        assert!((r.total_area() - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn mesh_sizes_near_reference_levels() {
        let m = build_disk_in_square(&GeometrySpec::standard(crate::MESH1_SIZE)).unwrap();
        let nv = m.vertex_count() as f64;
        eprintln!("counts {} {} {}", m.vertex_count(), m.field_dof_count(), m.design_dof_count());
        assert!((nv / 11055.0 - 1.0).abs() < 0.05, "vertices {nv}");
        let nz = m.field_dof_count() as f64;
        assert!((nz / 2347.0 - 1.0).abs() < 0.05, "field dofs {nz}");
        let nt = m.design_dof_count() as f64;
        assert!((nt / 4454.0 - 1.0).abs() < 0.05, "design dofs {nt}");
    }
}
