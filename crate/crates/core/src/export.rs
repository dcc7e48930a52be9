//! File exports: legacy VTK meshes with point and cell data, nodal CSV,
//! eigenvalue tables and design files.

use std::fmt::Write as _;
use std::path::Path;

use faer::c64;

use crate::error::{CloakError, Result};
use crate::mesh::{Mesh, Region};
use crate::spectral::EigenPairs;

/// Named nodal field for export.
pub enum PointField<'a> {
    Complex(&'a str, &'a [c64]),
    Real(&'a str, &'a [f64]),
}

/// Legacy ASCII VTK unstructured grid. Complex fields are written as their
/// real part, imaginary part and modulus; `cell_design` fills CLOAK cells
/// and leaves zeros elsewhere.
pub fn vtk_string(mesh: &Mesh, fields: &[PointField<'_>], cell_design: Option<&[f64]>) -> Result<String> {
    let nv = mesh.vertex_count();
    let nt = mesh.triangle_count();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\ncloak fields\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {nv} double");
    for v in mesh.vertices() {
        let _ = writeln!(s, "{:.12e} {:.12e} 0", v[0], v[1]);
    }
    let _ = writeln!(s, "CELLS {nt} {}", 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "CELL_DATA {nt}\nSCALARS region int 1\nLOOKUP_TABLE default");
    for r in mesh.regions() {
        let code = match r {
            Region::Cloak => 0,
            Region::Host => 1,
            Region::Pml => 2,
        };
        let _ = writeln!(s, "{code}");
    }
    if let Some(tau) = cell_design {
        if tau.len() != mesh.design_dof_count() {
            return Err(CloakError::Dimension { expected: mesh.design_dof_count(), got: tau.len() });
        }
        let mut full = vec![0.0; nt];
        for (c, &t) in mesh.cloak_cells().iter().enumerate() {
            full[t] = tau[c];
        }
        let _ = writeln!(s, "SCALARS tau double 1\nLOOKUP_TABLE default");
        for x in full {
            let _ = writeln!(s, "{x:.12e}");
        }
    }
    if !fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {nv}");
    }
    let scalar = |s: &mut String, name: &str, vals: &mut dyn Iterator<Item = f64>| {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for x in vals {
            let _ = writeln!(s, "{x:.12e}");
        }
    };
    for f in fields {
        match f {
            PointField::Complex(name, u) => {
                if u.len() != nv {
                    return Err(CloakError::Dimension { expected: nv, got: u.len() });
                }
                scalar(&mut s, &format!("{name}_u1"), &mut u.iter().map(|z| z.re));
                scalar(&mut s, &format!("{name}_u2"), &mut u.iter().map(|z| z.im));
                scalar(&mut s, &format!("{name}_abs"), &mut u.iter().map(|z| z.norm()));
            }
            PointField::Real(name, v) => {
                if v.len() != nv {
                    return Err(CloakError::Dimension { expected: nv, got: v.len() });
                }
                scalar(&mut s, name, &mut v.iter().copied());
            }
        }
    }
    Ok(s)
}

/// Nodal CSV with columns x, y, u1, u2 per complex field.
pub fn nodal_csv(mesh: &Mesh, fields: &[(&str, &[c64])]) -> Result<String> {
    let nv = mesh.vertex_count();
    let mut s = String::from("x,y");
    for (name, u) in fields {
        if u.len() != nv {
            return Err(CloakError::Dimension { expected: nv, got: u.len() });
        }
        let _ = write!(s, ",{name}_u1,{name}_u2");
    }
    s.push('\n');
    for (i, v) in mesh.vertices().iter().enumerate() {
        let _ = write!(s, "{:.12e},{:.12e}", v[0], v[1]);
        for (_, u) in fields {
            let _ = write!(s, ",{:.12e},{:.12e}", u[i].re, u[i].im);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn eigen_csv(pairs: &EigenPairs) -> String {
    let mut s = String::from("n,lambda,abs_lambda\n");
    for (n, l) in pairs.values.iter().enumerate() {
        let _ = writeln!(s, "{},{:.12e},{:.12e}", n + 1, l, l.abs());
    }
    s
}

const DESIGN_HEADER: &str = "cloakdesign v1";

pub fn design_string(tau: &[f64]) -> String {
    let mut s = format!("{DESIGN_HEADER} {}\n", tau.len());
    for t in tau {
        let _ = writeln!(s, "{t:.17e}");
    }
    s
}

pub fn parse_design(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(CloakError::Parse { line: 1, reason: "empty design file".into() })?;
    let count: usize = header
        .strip_prefix(DESIGN_HEADER)
        .and_then(|r| r.trim().parse().ok())
        .ok_or(CloakError::Parse { line: 1, reason: format!("expected '{DESIGN_HEADER} <count>'") })?;
    let tau = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| CloakError::Parse { line: i + 2, reason: e.to_string() })
        })
        .collect::<Result<Vec<f64>>>()?;
    if tau.len() != count {
        return Err(CloakError::Parse { line: 1, reason: format!("header announces {count} values, found {}", tau.len()) });
    }
    Ok(tau)
}

pub fn load_design(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let tau = parse_design(&std::fs::read_to_string(path)?)?;
    if tau.len() != expected {
        return Err(CloakError::Dimension { expected, got: tau.len() });
    }
    Ok(tau)
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disk_in_square, GeometrySpec};

    #[test]
    fn design_round_trip_is_exact() {
        let tau = vec![0.1, -2.5e-7, 3.0, f64::MIN_POSITIVE];
        assert_eq!(parse_design(&design_string(&tau)).unwrap(), tau);
        assert!(parse_design("cloakdesign v1 3\n1.0\n2.0\n").is_err());
        assert!(matches!(parse_design("nope\n"), Err(CloakError::Parse { line: 1, .. })));
        assert!(matches!(parse_design("cloakdesign v1 1\nabc\n"), Err(CloakError::Parse { line: 2, .. })));
    }

    #[test]
    fn vtk_and_csv_layout() {
        let mesh = build_disk_in_square(&GeometrySpec::standard(1.0)).unwrap();
        let nv = mesh.vertex_count();
        let u: Vec<c64> = (0..nv).map(|i| c64::new(i as f64, -(i as f64))).collect();
        let tau = vec![0.5; mesh.design_dof_count()];
        let vtk = vtk_string(&mesh, &[PointField::Complex("scattered", &u)], Some(&tau)).unwrap();
        assert!(vtk.starts_with("# vtk DataFile Version 3.0"));
        assert!(vtk.contains(&format!("POINTS {nv} double")));
        assert!(vtk.contains("SCALARS scattered_abs double 1"));
        assert!(vtk.contains("SCALARS tau double 1"));
        let csv = nodal_csv(&mesh, &[("u", &u)]).unwrap();
        assert_eq!(csv.lines().count(), nv + 1);
        assert_eq!(csv.lines().next().unwrap(), "x,y,u_u1,u_u2");
        assert!(vtk_string(&mesh, &[PointField::Real("bad", &[1.0])], None).is_err());
    }

    #[test]
    fn eigen_table() {
        let p = EigenPairs { values: vec![2.0, -1.0], vectors: vec![], oversampling: 0 };
        let s = eigen_csv(&p);
        assert_eq!(s.lines().nth(2).unwrap(), "2,-1.000000000000e0,1.000000000000e0");
    }
}
