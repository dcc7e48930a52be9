//! Compressed sparse storage, triangle-to-slot assembly patterns, and sparse
//! LU factorizations for real and complex systems.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{c64, Mat};

use crate::error::{CloakError, Result};

/// Column-compressed sparsity structure shared between operators.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
}

impl Structure {
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Builds a structure from unordered (row, col) pairs; duplicates merge.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Structure {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(r, c) in pairs {
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in &mut cols {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        Structure { n, col_ptr, row_idx }
    }

    pub fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        self.row_idx[lo..hi].binary_search(&row).ok().map(|k| lo + k)
    }

    fn faer_ref(&self) -> SymbolicSparseColMatRef<'_, usize> {
        SymbolicSparseColMatRef::new_checked(self.n, self.n, &self.col_ptr, None, &self.row_idx)
    }
}

/// Square real sparse operator in compressed-column form.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    pub structure: Arc<Structure>,
    pub values: Vec<f64>,
}

impl SparseOperator {
    pub fn zeros(structure: Arc<Structure>) -> Self {
        let nnz = structure.nnz();
        SparseOperator { structure, values: vec![0.0; nnz] }
    }

    pub fn identity(n: usize) -> Self {
        let s = Structure { n, col_ptr: (0..=n).collect(), row_idx: (0..n).collect() };
        SparseOperator { structure: Arc::new(s), values: vec![1.0; n] }
    }

    /// Sums duplicate triplets.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let pairs: Vec<(usize, usize)> = triplets.iter().map(|&(r, c, _)| (r, c)).collect();
        let structure = Arc::new(Structure::from_pairs(n, &pairs));
        let mut op = SparseOperator::zeros(structure);
        for &(r, c, v) in triplets {
            let k = op.structure.slot(r, c).unwrap();
            op.values[k] += v;
        }
        op
    }

    pub fn dim(&self) -> usize {
        self.structure.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.structure.slot(row, col).map_or(0.0, |k| self.values[k])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let s = &self.structure;
        (0..s.n).flat_map(move |c| {
            (s.col_ptr[c]..s.col_ptr[c + 1]).map(move |k| (s.row_idx[k], c, self.values[k]))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let s = &self.structure;
        let mut y = vec![0.0; s.n];
        for c in 0..s.n {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in s.col_ptr[c]..s.col_ptr[c + 1] {
                y[s.row_idx[k]] += self.values[k] * xc;
            }
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let s = &self.structure;
        (0..s.n)
            .map(|c| (s.col_ptr[c]..s.col_ptr[c + 1]).map(|k| self.values[k] * x[s.row_idx[k]]).sum())
            .collect()
    }

    /// Complex vector product for real operators.
    pub fn matvec_complex(&self, x: &[c64]) -> Vec<c64> {
        let s = &self.structure;
        let mut y = vec![c64::new(0.0, 0.0); s.n];
        for c in 0..s.n {
            let xc = x[c];
            for k in s.col_ptr[c]..s.col_ptr[c + 1] {
                y[s.row_idx[k]] += xc * self.values[k];
            }
        }
        y
    }

    pub fn transpose(&self) -> SparseOperator {
        let t: Vec<(usize, usize, f64)> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        SparseOperator::from_triplets(self.dim(), &t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        for (r, c, v) in self.triplets() {
            d[r][c] += v;
        }
        d
    }

    /// Largest |A_ij - A_ji|.
    pub fn asymmetry(&self) -> f64 {
        self.triplets().map(|(r, c, v)| (v - self.get(c, r)).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn factorize(&self) -> Result<Factorization> {
        Factorization::new(self)
    }
}

/// Per-triangle map from local element entries to value slots.
#[derive(Clone, Debug)]
pub struct AssemblyPattern {
    pub structure: Arc<Structure>,
    /// For each assembled triangle, `slots[3 * a + b]` is the value index of
    /// entry (dof of local a, dof of local b), or `usize::MAX` if either
    /// vertex carries no dof.
    pub slots: Vec<[usize; 9]>,
    pub triangles: Vec<usize>,
}

impl AssemblyPattern {
    pub fn new(n: usize, triangles: Vec<usize>, elem_dofs: &dyn Fn(usize) -> [Option<usize>; 3]) -> Self {
        let mut pairs = Vec::with_capacity(9 * triangles.len());
        for &t in &triangles {
            let d = elem_dofs(t);
            for a in d.iter().flatten() {
                for b in d.iter().flatten() {
                    pairs.push((*a, *b));
                }
            }
        }
        let structure = Arc::new(Structure::from_pairs(n, &pairs));
        let slots = triangles
            .iter()
            .map(|&t| {
                let d = elem_dofs(t);
                let mut s = [usize::MAX; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        if let (Some(r), Some(c)) = (d[a], d[b]) {
                            s[3 * a + b] = structure.slot(r, c).unwrap();
                        }
                    }
                }
                s
            })
            .collect();
        AssemblyPattern { structure, slots, triangles }
    }
}

/// Sparse LU of a real operator.
pub struct Factorization {
    n: usize,
    lu: Lu<usize, f64>,
}

impl Factorization {
    pub fn new(op: &SparseOperator) -> Result<Self> {
        let s = &op.structure;
        if s.n == 0 {
            return Err(CloakError::EmptyOperator("cannot factorize a 0x0 operator".into()));
        }
        let a = SparseColMatRef::new(s.faer_ref(), &op.values);
        let sym = SymbolicLu::try_new(a.symbolic())
            .map_err(|e| CloakError::Solver(format!("symbolic LU failed: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(sym, a)
            .map_err(|e| CloakError::Singular(format!("numeric LU failed: {e:?}")))?;
        let f = Factorization { n: s.n, lu };
        f.check_finite()?;
        Ok(f)
    }

    fn check_finite(&self) -> Result<()> {
        let probe = vec![1.0; self.n];
        let x = self.solve(&probe, false)?;
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CloakError::Singular("factorization produced non-finite values".into()))
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64], transpose: bool) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(CloakError::Dimension { expected: self.n, got: rhs.len() });
        }
        let mut b = Mat::<f64>::from_fn(self.n, 1, |i, _| rhs[i]);
        if transpose {
            self.lu.solve_transpose_in_place(b.as_mut());
        } else {
            self.lu.solve_in_place(b.as_mut());
        }
        Ok((0..self.n).map(|i| b[(i, 0)]).collect())
    }
}

/// Complex operator sharing a real structure.
#[derive(Clone, Debug)]
pub struct ComplexOperator {
    pub structure: Arc<Structure>,
    pub values: Vec<c64>,
}

impl ComplexOperator {
    pub fn dim(&self) -> usize {
        self.structure.n
    }

    pub fn get(&self, row: usize, col: usize) -> c64 {
        self.structure.slot(row, col).map_or(c64::new(0.0, 0.0), |k| self.values[k])
    }

    pub fn matvec(&self, x: &[c64]) -> Vec<c64> {
        let s = &self.structure;
        let mut y = vec![c64::new(0.0, 0.0); s.n];
        for c in 0..s.n {
            let xc = x[c];
            for k in s.col_ptr[c]..s.col_ptr[c + 1] {
                y[s.row_idx[k]] += self.values[k] * xc;
            }
        }
        y
    }
}

/// Reusable fill-reducing analysis for a fixed complex sparsity structure.
#[derive(Clone)]
pub struct ComplexSymbolic {
    structure: Arc<Structure>,
    symbolic: SymbolicLu<usize>,
}

impl ComplexSymbolic {
    pub fn new(structure: Arc<Structure>) -> Result<Self> {
        let symbolic = SymbolicLu::try_new(structure.faer_ref())
            .map_err(|e| CloakError::Solver(format!("symbolic LU failed: {e:?}")))?;
        Ok(ComplexSymbolic { structure, symbolic })
    }

    pub fn structure(&self) -> &Arc<Structure> {
        &self.structure
    }
}

/// Sparse LU of a complex operator. Solves with K and with its conjugate
/// transpose, which is the adjoint for the real pairing Re(x^H y).
pub struct ComplexFactorization {
    n: usize,
    lu: Lu<usize, c64>,
}

impl ComplexFactorization {
    pub fn new(symbolic: &ComplexSymbolic, op: &ComplexOperator) -> Result<Self> {
        if !Arc::ptr_eq(&symbolic.structure, &op.structure) && *symbolic.structure != *op.structure {
            return Err(CloakError::Solver("structure mismatch between analysis and operator".into()));
        }
        let a = SparseColMatRef::new(op.structure.faer_ref(), &op.values);
        let lu = Lu::try_new_with_symbolic(symbolic.symbolic.clone(), a)
            .map_err(|e| CloakError::Singular(format!("numeric LU failed: {e:?}")))?;
        let f = ComplexFactorization { n: op.dim(), lu };
        let probe = vec![c64::new(1.0, 0.0); f.n];
        if !f.solve(&probe)?.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(CloakError::Singular("system is numerically singular".into()));
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn run(&self, rhs: &[c64], adjoint: bool) -> Result<Vec<c64>> {
        if rhs.len() != self.n {
            return Err(CloakError::Dimension { expected: self.n, got: rhs.len() });
        }
        let mut b = Mat::<c64>::from_fn(self.n, 1, |i, _| rhs[i]);
        if adjoint {
            self.lu.solve_adjoint_in_place(b.as_mut());
        } else {
            self.lu.solve_in_place(b.as_mut());
        }
        Ok((0..self.n).map(|i| b[(i, 0)]).collect())
    }

    /// Solves K x = rhs.
    pub fn solve(&self, rhs: &[c64]) -> Result<Vec<c64>> {
        self.run(rhs, false)
    }

    /// Solves K^H x = rhs.
    pub fn solve_adjoint(&self, rhs: &[c64]) -> Result<Vec<c64>> {
        self.run(rhs, true)
    }
}
