//! Envelope (skyline) Cholesky factorization under a reverse Cuthill-McKee
//! ordering. Unlike a supernodal solver it exposes the factor itself, which
//! the random-field sampler needs to color white noise.

use std::collections::VecDeque;

use super::sparse::SparseOperator;
use crate::error::{CloakError, Result};

/// Reverse Cuthill-McKee ordering of the symmetric pattern of `op`.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(op: &SparseOperator) -> Vec<usize> {
    let s = &op.structure;
    let n = s.n;
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|c| {
            let mut v: Vec<usize> =
                s.row_idx[s.col_ptr[c]..s.col_ptr[c + 1]].iter().copied().filter(|&r| r != c).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> (usize, usize) {
        // Returns (eccentricity, a farthest node of minimum degree).
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut q = VecDeque::from([start]);
        let mut far = (0, start);
        while let Some(u) = q.pop_front() {
            let d = dist[u];
            if d > far.0 || (d == far.0 && degree[u] < degree[far.1]) {
                far = (d, u);
            }
            for &w in &adj[u] {
                if !visited[w] && dist[w] == usize::MAX {
                    dist[w] = d + 1;
                    q.push_back(w);
                }
            }
        }
        far
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // Pseudo-peripheral start node of this component.
        let mut start = seed;
        let mut ecc = bfs_levels(start, &visited).0;
        for _ in 0..8 {
            let (e, far) = bfs_levels(start, &visited);
            let (e2, _) = bfs_levels(far, &visited);
            if e2 > ecc.max(e) {
                ecc = e2;
                start = far;
            } else {
                if e2 >= e {
                    start = far;
                }
                break;
            }
        }
        let first = order.len();
        visited[start] = true;
        order.push(start);
        let mut head = first;
        while head < order.len() {
            let u = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factor L with P A P^T = L L^T, stored row-wise over the envelope.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    n: usize,
    /// perm[new] = old.
    perm: Vec<usize>,
    inv: Vec<usize>,
    /// First stored column of each permuted row.
    first: Vec<usize>,
    /// Offsets of each row's envelope slice into `values`.
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn new(op: &SparseOperator) -> Result<Self> {
        let perm = reverse_cuthill_mckee(op);
        Self::with_ordering(op, perm)
    }

    pub fn with_ordering(op: &SparseOperator, perm: Vec<usize>) -> Result<Self> {
        let n = op.dim();
        if n == 0 {
            return Err(CloakError::EmptyOperator("cannot factorize a 0x0 operator".into()));
        }
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (r, c, _) in op.triplets() {
            let (i, j) = (inv[r], inv[c]);
            if j < i {
                first[i] = first[i].min(j);
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i + 1 - first[i]));
        }
        let mut values = vec![0.0; offset[n]];
        for (r, c, v) in op.triplets() {
            let (i, j) = (inv[r], inv[c]);
            if j <= i {
                values[offset[i] + j - first[i]] += v;
            }
        }
        for i in 0..n {
            let fi = first[i];
            let row_i = offset[i];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let row_j = offset[j];
                let mut acc = values[row_i + j - fi];
                for k in lo..j {
                    acc -= values[row_i + k - fi] * values[row_j + k - fj];
                }
                values[row_i + j - fi] = acc / values[row_j + j - fj];
            }
            let mut d = values[row_i + i - fi];
            for k in fi..i {
                d -= values[row_i + k - fi].powi(2);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(CloakError::Singular(format!(
                    "operator not positive definite (pivot {d:e} at row {i})"
                )));
            }
            values[row_i + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky { n, perm, inv, first, offset, values })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    fn l(&self, i: usize, k: usize) -> f64 {
        self.values[self.offset[i] + k - self.first[i]]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[self.offset[i]..self.offset[i + 1]]
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = self.row(i);
            let mut acc = y[i];
            for (k, l) in (fi..i).zip(row) {
                acc -= l * y[k];
            }
            y[i] = acc / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, l) in (fi..i).zip(row) {
                y[k] -= l * yi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    /// Applies the factor G = P^T L, so that G G^T = A.
    pub fn apply_factor(&self, xi: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let fi = self.first[i];
            let row = self.row(i);
            let v: f64 = (fi..=i).zip(row).map(|(k, l)| l * xi[k]).sum();
            out[self.perm[i]] = v;
        }
        out
    }

    /// Entry (i, k) of the permuted factor, zero outside the envelope.
    pub fn factor_entry(&self, i: usize, k: usize) -> f64 {
        if k > i || k < self.first[i] {
            0.0
        } else {
            self.l(i, k)
        }
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplacian_grid(nx: usize, shift: f64) -> SparseOperator {
        let idx = |i: usize, j: usize| i * nx + j;
        let mut t = Vec::new();
        for i in 0..nx {
            for j in 0..nx {
                t.push((idx(i, j), idx(i, j), 4.0 + shift));
                if i + 1 < nx {
                    t.push((idx(i, j), idx(i + 1, j), -1.0));
                    t.push((idx(i + 1, j), idx(i, j), -1.0));
                }
                if j + 1 < nx {
                    t.push((idx(i, j), idx(i, j + 1), -1.0));
                    t.push((idx(i, j + 1), idx(i, j), -1.0));
                }
            }
        }
        SparseOperator::from_triplets(nx * nx, &t)
    }

    #[test]
    fn rcm_is_a_permutation() {
        let op = laplacian_grid(9, 0.1);
        let mut p = reverse_cuthill_mckee(&op);
        p.sort_unstable();
        assert_eq!(p, (0..81).collect::<Vec<_>>());
    }

    #[test]
    fn factor_reproduces_operator() {
        let op = laplacian_grid(8, 0.3);
        let ch = EnvelopeCholesky::new(&op).unwrap();
        let n = op.dim();
        // Column j of G G^T equals A e_j; build G^T e_j by brute force instead.
        let dense = op.to_dense();
        let mut g = vec![vec![0.0; n]; n];
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            let col = ch.apply_factor(&e);
            for i in 0..n {
                g[i][k] = col[i];
            }
        }
        let scale = op.max_abs();
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| g[i][k] * g[j][k]).sum();
                assert!((v - dense[i][j]).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn indefinite_rejected() {
        let op = laplacian_grid(4, -6.0);
        assert!(matches!(EnvelopeCholesky::new(&op), Err(CloakError::Singular(_))));
    }

    proptest! {
        #[test]
        fn solve_inverts(seed in 0u64..1000, shift in 0.01f64..2.0) {
            let op = laplacian_grid(6, shift);
            let ch = EnvelopeCholesky::new(&op).unwrap();
            let b: Vec<f64> = (0..36).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
            let x = ch.solve(&b);
            let ax = op.matvec(&x);
            for (a, b) in ax.iter().zip(&b) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
