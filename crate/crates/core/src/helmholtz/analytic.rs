//! Partial-wave series for plane-wave scattering by a sound-hard cylinder,
//! bare or wrapped in a homogeneous coating. Used as forward-solver oracles.

use faer::c64;
use puruspe::besseljy;

use crate::exec::{self, Execution};
use crate::fem::{Element, EDGE_MIDPOINTS};
use crate::mesh::{Mesh, Region};

const MAX_ORDER: usize = 400;

/// Scattered field sum_n c_n H_n(k r) cos(n theta), theta measured from the
/// incidence direction.
#[derive(Clone, Debug)]
pub struct CylinderSeries {
    k: f64,
    direction: [f64; 2],
    coeffs: Vec<c64>,
}

fn i_pow(n: usize) -> c64 {
    match n % 4 {
        0 => c64::new(1.0, 0.0),
        1 => c64::new(0.0, 1.0),
        2 => c64::new(-1.0, 0.0),
        _ => c64::new(0.0, -1.0),
    }
}

/// H_n^(1)(x) for n = 0..=nmax by upward recurrence, which is stable for
/// the complex combination since |Y_n| dominates once n exceeds x.
fn hankel_all(nmax: usize, x: f64) -> Vec<c64> {
    let (j0, y0, _, _) = besseljy(0.0, x);
    let (j1, y1, _, _) = besseljy(1.0, x);
    let mut h = Vec::with_capacity(nmax + 1);
    h.push(c64::new(j0, y0));
    if nmax >= 1 {
        h.push(c64::new(j1, y1));
    }
    for n in 1..nmax {
        let next = h[n] * (2.0 * n as f64 / x) - h[n - 1];
        h.push(next);
    }
    h
}

fn truncate(mut terms: Vec<c64>, scale: &dyn Fn(usize) -> f64, threshold_order: f64) -> Vec<c64> {
    let biggest = terms.iter().enumerate().map(|(n, c)| c.norm() * scale(n)).fold(0.0, f64::max);
    let mut keep = terms.len();
    for n in 0..terms.len() {
        if (n as f64) > threshold_order && terms[n].norm() * scale(n) < 1e-12 * biggest.max(1e-300) {
            keep = n;
            break;
        }
    }
    terms.truncate(keep.max(1));
    terms
}

impl CylinderSeries {
    /// Sound-hard cylinder of radius `a`.
    pub fn sound_hard(k: f64, a: f64, direction: [f64; 2]) -> Self {
        let ka = k * a;
        let h_at_a = hankel_all(MAX_ORDER + 1, ka);
        let mut c = Vec::new();
        for n in 0..=MAX_ORDER {
            let (_, _, jp, yp) = besseljy(n as f64, ka);
            let eps = if n == 0 { 1.0 } else { 2.0 };
            c.push(-i_pow(n) * eps * (c64::new(jp, 0.0) / c64::new(jp, yp)));
        }
        // |H_n(kr)| is decreasing in r, so |c_n H_n(ka)| bounds every term.
        let scale = |n: usize| h_at_a[n].norm();
        CylinderSeries { k, direction, coeffs: truncate(c, &scale, ka) }
    }

    /// Sound-hard cylinder of radius `a` inside an annulus a < r < b with
    /// wavenumber `k_coat`, embedded in a background of wavenumber `k`.
    pub fn coated(k: f64, k_coat: f64, a: f64, b: f64, direction: [f64; 2]) -> Self {
        let h_at_b = hankel_all(MAX_ORDER + 1, k * b);
        let mut c = Vec::new();
        for n in 0..=MAX_ORDER {
            let nu = n as f64;
            let (_, _, j1a, y1a) = besseljy(nu, k_coat * a);
            let (j1b, y1b, j1bp, y1bp) = besseljy(nu, k_coat * b);
            let (j0b, y0b, j0bp, y0bp) = besseljy(nu, k * b);
            // W = J + beta Y with W'(k_coat a) = 0; beta -> 0 for large n.
            let beta = if y1a.is_finite() && y1a != 0.0 { -j1a / y1a } else { 0.0 };
            let w = j1b + beta * y1b;
            let wp = j1bp + beta * y1bp;
            let h = c64::new(j0b, y0b);
            let hp = c64::new(j0bp, y0bp);
            let num = c64::new(k_coat * wp * j0b - k * j0bp * w, 0.0);
            let den = hp * (k * w) - h * (k_coat * wp);
            let eps = if n == 0 { 1.0 } else { 2.0 };
            let cn = i_pow(n) * eps * (num / den);
            c.push(if cn.re.is_finite() && cn.im.is_finite() { cn } else { c64::new(0.0, 0.0) });
        }
        let scale = |n: usize| h_at_b[n].norm();
        CylinderSeries { k, direction, coeffs: truncate(c, &scale, k.max(k_coat) * b) }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// Scattered field at a point outside the scatterer.
    pub fn eval(&self, x: [f64; 2]) -> c64 {
        let r = x[0].hypot(x[1]);
        let cos_t = (x[0] * self.direction[0] + x[1] * self.direction[1]) / r;
        let sin_t = (self.direction[0] * x[1] - self.direction[1] * x[0]) / r;
        let theta = sin_t.atan2(cos_t);
        let h = hankel_all(self.coeffs.len(), self.k * r);
        self.coeffs.iter().enumerate().map(|(n, c)| c * h[n] * (n as f64 * theta).cos()).sum()
    }
}

/// Relative L2 error of a P1 field against `exact` over `regions`, using
/// the edge-midpoint rule on every triangle.
pub fn relative_l2_error(
    mesh: &Mesh,
    u: &[c64],
    regions: &[Region],
    exact: &(dyn Fn([f64; 2]) -> c64 + Sync),
    exec: Execution,
) -> f64 {
    let tris: Vec<usize> = (0..mesh.triangle_count()).filter(|&t| regions.contains(&mesh.regions()[t])).collect();
    let parts = exec::map(exec, &tris, |&t| {
        let el = Element::of(mesh, t);
        let tri = mesh.triangles()[t];
        let w = el.area / 3.0;
        let mut err = 0.0;
        let mut norm = 0.0;
        for (q, x) in el.quadrature_points().iter().enumerate() {
            let bary = EDGE_MIDPOINTS[q];
            let uh: c64 = (0..3).map(|a| u[tri[a]] * bary[a]).sum();
            let ue = exact(*x);
            err += w * (uh - ue).norm_sqr();
            norm += w * ue.norm_sqr();
        }
        (err, norm)
    });
    let (e, n) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    (e / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let x = 7.3;
        let h = hankel_all(40, x);
        for n in [0usize, 3, 10, 25, 40] {
            let (j, y, _, _) = besseljy(n as f64, x);
            let d = c64::new(j, y);
            assert!((h[n] - d).norm() <= 1e-9 * d.norm(), "n={n}");
        }
    }

    #[test]
    fn neumann_condition_on_cylinder() {
        // Total field u_inc + u_s has zero radial derivative at r = a.
        let k = std::f64::consts::TAU;
        let s = CylinderSeries::sound_hard(k, 1.0, [1.0, 0.0]);
        let total = |x: [f64; 2]| c64::new(0.0, k * x[0]).exp() + s.eval(x);
        for th in [0.1f64, 1.0, 2.5, 3.0] {
            let d = 1e-5;
            let p = |r: f64| total([r * th.cos(), r * th.sin()]);
            // One-sided second-order difference starting at r = a.
            let deriv = (-3.0 * p(1.0) + 4.0 * p(1.0 + d) - p(1.0 + 2.0 * d)) / (2.0 * d);
            assert!(deriv.norm() < 1e-4, "theta={th} deriv={deriv}");
        }
    }

    #[test]
    fn unit_coating_reduces_to_bare_cylinder() {
        let k = 5.0;
        let bare = CylinderSeries::sound_hard(k, 1.0, [0.0, 1.0]);
        let coated = CylinderSeries::coated(k, k, 1.0, 3.0, [0.0, 1.0]);
        for x in [[4.0, 0.3], [-3.5, 2.0], [0.0, -4.5]] {
            let a = bare.eval(x);
            let b = coated.eval(x);
            assert!((a - b).norm() < 1e-9 * a.norm(), "{a} vs {b}");
        }
    }
}
