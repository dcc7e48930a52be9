//! Generalized eigenproblems H ψ = λ C⁻¹ ψ for the random-field Hessian and
//! the Taylor moment formulas built from them.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{CloakError, Result};
use crate::exec::{self, Execution};
use crate::random_field::GaussianMeasure;

/// Symmetric operator mapping nodal fields to dual vectors. `Aux` carries
/// whatever the caller wants to keep from each application.
pub trait SymmetricAction: Sync {
    type Aux: Send;
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<(Vec<f64>, Self::Aux)>;
}

/// Covariance pair: C maps dual to nodal and C⁻¹ nodal to dual.
pub trait Covariance: Sync {
    fn dim(&self) -> usize;
    fn apply_cov(&self, w: &[f64]) -> Result<Vec<f64>>;
    fn apply_precision(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl Covariance for GaussianMeasure {
    fn dim(&self) -> usize {
        GaussianMeasure::dim(self)
    }
    fn apply_cov(&self, w: &[f64]) -> Result<Vec<f64>> {
        GaussianMeasure::apply_cov(self, w)
    }
    fn apply_precision(&self, v: &[f64]) -> Result<Vec<f64>> {
        GaussianMeasure::apply_precision(self, v)
    }
}

/// Wraps a closure as an action without auxiliary output.
pub struct FnAction<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> SymmetricAction for FnAction<F> {
    type Aux = ();
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Result<(Vec<f64>, ())> {
        Ok(((self.f)(x)?, ()))
    }
}

/// Dense symmetric covariance given explicitly, mainly for tests.
pub struct DenseCovariance {
    cov: Vec<Vec<f64>>,
    precision: Vec<Vec<f64>>,
}

impl DenseCovariance {
    pub fn new(cov: Vec<Vec<f64>>) -> Result<Self> {
        let n = cov.len();
        let m = Mat::<f64>::from_fn(n, n, |i, j| cov[i][j]);
        let llt = m.llt(Side::Lower).map_err(|e| CloakError::Singular(format!("covariance not SPD: {e:?}")))?;
        let inv = llt.inverse();
        let precision = (0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect();
        Ok(DenseCovariance { cov, precision })
    }
}

fn dense_apply(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

impl Covariance for DenseCovariance {
    fn dim(&self) -> usize {
        self.cov.len()
    }
    fn apply_cov(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(dense_apply(&self.cov, w))
    }
    fn apply_precision(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(dense_apply(&self.precision, v))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EigenPairs {
    /// Sorted by decreasing magnitude.
    pub values: Vec<f64>,
    /// C⁻¹-orthonormal nodal fields.
    pub vectors: Vec<Vec<f64>>,
    pub oversampling: usize,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn truncated(&self, n: usize) -> EigenPairs {
        let n = n.min(self.len());
        EigenPairs {
            values: self.values[..n].to_vec(),
            vectors: self.vectors[..n].to_vec(),
            oversampling: self.oversampling,
        }
    }

    /// Σ_{n ≤ N} |λ_n| / Σ_all |λ|, given the full absolute trace.
    pub fn captured_fraction(&self, n: usize, total_abs: f64) -> f64 {
        self.values.iter().take(n).map(|l| l.abs()).sum::<f64>() / total_abs
    }
}

/// Output of the randomized solver, including the basis Q, the coefficients
/// S with ψ_n = Σ_j S[n][j] Q_j, and the auxiliary output of every action
/// on Q so callers can combine cached states by linearity.
pub struct RandomizedEigen<A> {
    pub pairs: EigenPairs,
    pub basis: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<f64>>,
    pub basis_aux: Vec<A>,
    pub actions: usize,
    pub warning: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric eigendecomposition with eigenvalues ascending.
fn sym_eig(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    let m = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[i][j] + a[j][i]));
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| CloakError::Solver(format!("dense eigensolver failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let values = (0..n).map(|i| s[i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| u[(i, j)]).collect()).collect();
    Ok((values, vectors))
}

fn combine(vectors: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
    let n = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for (v, c) in vectors.iter().zip(coeffs) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += c * x;
        }
    }
    out
}

/// C⁻¹-orthonormalizes the columns of `y` by classical Gram-Schmidt in the
/// C⁻¹ inner product, projecting every column twice. A column whose
/// remaining norm is below 1e-12 of its original norm lies in the span of
/// the previous ones to working precision and is dropped.
///
/// Gram-matrix Cholesky would be cheaper but squares the condition number of
/// Y, which for rapidly decaying spectra exceeds what double precision holds.
fn c_orthonormalize<C: Covariance>(y: &[Vec<f64>], cov: &C) -> Result<Vec<Vec<f64>>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(y.len());
    let mut zq: Vec<Vec<f64>> = Vec::with_capacity(y.len());
    for col in y {
        let mut w = col.clone();
        let mut zw = cov.apply_precision(&w)?;
        let n0 = dot(&w, &zw).max(0.0).sqrt();
        if n0 == 0.0 || !n0.is_finite() {
            continue;
        }
        for _ in 0..2 {
            let coeffs: Vec<f64> = zq.iter().map(|z| dot(z, &w)).collect();
            for (c, qm) in coeffs.iter().zip(&q) {
                for (x, v) in w.iter_mut().zip(qm) {
                    *x -= c * v;
                }
            }
            zw = cov.apply_precision(&w)?;
        }
        let norm = dot(&w, &zw).max(0.0).sqrt();
        if norm <= 1e-12 * n0 {
            continue;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        zw.iter_mut().for_each(|x| *x /= norm);
        q.push(w);
        zq.push(zw);
    }
    Ok(q)
}

/// Randomized two-pass solver: Y = C H Ω, C⁻¹-orthonormal Q from Y,
/// T = Qᵀ H Q, and the top `n` Ritz pairs by magnitude. Costs exactly
/// 2(n + p) actions when Y has full rank.
pub fn randomized_gen_eig<A, C, R>(
    op: &A,
    cov: &C,
    n: usize,
    p: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<RandomizedEigen<A::Aux>>
where
    A: SymmetricAction,
    C: Covariance,
    R: Rng + ?Sized,
{
    let dim = op.dim();
    if n == 0 {
        return Err(CloakError::config("eigenpair count must be at least 1"));
    }
    if cov.dim() != dim {
        return Err(CloakError::Dimension { expected: dim, got: cov.dim() });
    }
    let k = (n + p).min(dim);
    let omega: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let y = exec::try_map_range(exec, k, |j| {
        let (h, _) = op.apply(&omega[j])?;
        cov.apply_cov(&h)
    })?;
    let q = c_orthonormalize(&y, cov)?;
    let r = q.len();
    let mut warning = None;
    if r < k {
        warning = Some(format!("range has rank {r} < {k}; returning {} pairs", n.min(r)));
    }
    let applied = exec::try_map_range(exec, r, |j| op.apply(&q[j]))?;
    let (hq, basis_aux): (Vec<Vec<f64>>, Vec<A::Aux>) = applied.into_iter().unzip();
    let t: Vec<Vec<f64>> = (0..r).map(|i| (0..r).map(|j| dot(&q[i], &hq[j])).collect()).collect();
    let (vals, vecs) = sym_eig(&t)?;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
    let keep = n.min(r);
    let coefficients: Vec<Vec<f64>> = order[..keep].iter().map(|&j| vecs[j].clone()).collect();
    let values: Vec<f64> = order[..keep].iter().map(|&j| vals[j]).collect();
    let vectors: Vec<Vec<f64>> = coefficients.iter().map(|s| combine(&q, s)).collect();
    Ok(RandomizedEigen {
        pairs: EigenPairs { values, vectors, oversampling: p },
        basis: q,
        coefficients,
        basis_aux,
        actions: k + r,
        warning,
    })
}

/// Default size guard for explicit dense operators.
pub const DENSE_LIMIT: usize = 1000;

/// Assembles the operator column by column from unit-vector actions.
pub fn dense_from_action<A: SymmetricAction>(op: &A, limit: usize, exec: Execution) -> Result<Vec<Vec<f64>>> {
    let n = op.dim();
    if n > limit {
        return Err(CloakError::config(format!("dense operator of size {n} exceeds the limit {limit}")));
    }
    let cols = exec::try_map_range(exec, n, |j| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        op.apply(&e).map(|r| r.0)
    })?;
    Ok((0..n).map(|i| (0..n).map(|j| 0.5 * (cols[j][i] + cols[i][j])).collect()).collect())
}

/// Dense covariance matrix from its action on unit dual vectors.
pub fn dense_covariance<C: Covariance>(cov: &C, limit: usize, exec: Execution) -> Result<Vec<Vec<f64>>> {
    let n = cov.dim();
    if n > limit {
        return Err(CloakError::config(format!("dense covariance of size {n} exceeds the limit {limit}")));
    }
    let cols = exec::try_map_range(exec, n, |j| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cov.apply_cov(&e)
    })?;
    Ok((0..n).map(|i| (0..n).map(|j| 0.5 * (cols[j][i] + cols[i][j])).collect()).collect())
}

/// Every pair of H ψ = λ C⁻¹ ψ from dense H and C, using C = R Rᵀ and the
/// standard problem Rᵀ H R y = λ y with ψ = R y.
pub fn dense_gen_eig(h: &[Vec<f64>], c: &[Vec<f64>], limit: usize) -> Result<EigenPairs> {
    let n = h.len();
    if n > limit {
        return Err(CloakError::config(format!("dense eigenproblem of size {n} exceeds the limit {limit}")));
    }
    if c.len() != n {
        return Err(CloakError::Dimension { expected: n, got: c.len() });
    }
    let cm = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (c[i][j] + c[j][i]));
    let llt = cm.llt(Side::Lower).map_err(|e| CloakError::Singular(format!("covariance not SPD: {e:?}")))?;
    let r = llt.L().to_owned();
    let hm = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (h[i][j] + h[j][i]));
    let a = r.transpose() * &hm * &r;
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    let (vals, vecs) = sym_eig(&a)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| vals[y].abs().total_cmp(&vals[x].abs()));
    let values = order.iter().map(|&j| vals[j]).collect();
    let vectors = order
        .iter()
        .map(|&j| (0..n).map(|i| (0..n).map(|k| r[(i, k)] * vecs[j][k]).sum()).collect())
        .collect();
    Ok(EigenPairs { values, vectors, oversampling: 0 })
}

/// Mean and variance of the quadratic Taylor expansion:
/// (Q̄ + ½ Σ λ, ⟨ḡ, C ḡ⟩ + ½ Σ λ²).
pub fn t2_moments<C: Covariance>(pairs: &EigenPairs, g_bar: &[f64], cov: &C, q_bar: f64) -> Result<(f64, f64)> {
    let cg = cov.apply_cov(g_bar)?;
    let mean = q_bar + 0.5 * pairs.values.iter().sum::<f64>();
    let var = dot(g_bar, &cg) + 0.5 * pairs.values.iter().map(|l| l * l).sum::<f64>();
    Ok((mean, var))
}

/// One row of the Taylor residual study for Q and for q = (Q − Q(ζ̄))².
#[derive(Clone, Debug, Serialize)]
pub struct ResidualRow {
    pub samples: usize,
    pub q_hat: f64,
    pub mse_q: f64,
    pub mse_q_t1: f64,
    pub mse_q_t2: f64,
    pub var_hat: f64,
    pub mse_var: f64,
    pub mse_var_t1: f64,
    pub mse_var_t2: f64,
}

fn sample_mse(x: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m
}

/// MSEs of the plain estimator and of the Taylor residuals Q − T_k Q, from
/// sampled objective values and the corresponding expansions.
pub fn residual_row(q: &[f64], t1: &[f64], t2: &[f64], q_bar: f64) -> Result<ResidualRow> {
    let m = q.len();
    if m < 2 {
        return Err(CloakError::config("the residual study needs at least two samples"));
    }
    let d1: Vec<f64> = q.iter().zip(t1).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = q.iter().zip(t2).map(|(a, b)| a - b).collect();
    let sq = |x: f64| (x - q_bar).powi(2);
    let v: Vec<f64> = q.iter().map(|x| sq(*x)).collect();
    let v1: Vec<f64> = q.iter().zip(t1).map(|(a, b)| sq(*a) - sq(*b)).collect();
    let v2: Vec<f64> = q.iter().zip(t2).map(|(a, b)| sq(*a) - sq(*b)).collect();
    Ok(ResidualRow {
        samples: m,
        q_hat: q.iter().sum::<f64>() / m as f64,
        mse_q: sample_mse(q),
        mse_q_t1: sample_mse(&d1),
        mse_q_t2: sample_mse(&d2),
        var_hat: v.iter().sum::<f64>() / m as f64,
        mse_var: sample_mse(&v),
        mse_var_t1: sample_mse(&v1),
        mse_var_t2: sample_mse(&v2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disk_in_square, GeometrySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// H = C⁻¹ diag-like operator with known generalized spectrum: H x =
    /// Σ d_j (C⁻¹φ_j)(C⁻¹φ_j)ᵀ x for C⁻¹-orthonormal φ_j.
    struct LowRank<'a> {
        cov: &'a dyn Covariance,
        duals: Vec<Vec<f64>>,
        d: Vec<f64>,
        calls: AtomicUsize,
    }

    impl SymmetricAction for LowRank<'_> {
        type Aux = ();
        fn dim(&self) -> usize {
            self.cov.dim()
        }
        fn apply(&self, x: &[f64]) -> Result<(Vec<f64>, ())> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let mut out = vec![0.0; x.len()];
            for (w, d) in self.duals.iter().zip(&self.d) {
                let c = d * dot(w, x);
                for (o, wi) in out.iter_mut().zip(w) {
                    *o += c * wi;
                }
            }
            Ok((out, ()))
        }
    }

    fn random_spd(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        (0..n)
            .map(|i| (0..n).map(|j| dot(&b[i], &b[j]) / n as f64 + if i == j { 0.5 } else { 0.0 }).collect())
            .collect()
    }

    fn low_rank<'a>(cov: &'a dyn Covariance, d: &[f64], seed: u64) -> LowRank<'a> {
        // C⁻¹-orthonormalize random fields by Gram-Schmidt, then map to duals.
        let n = cov.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..d.len() {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for p in &phis {
                    let c = dot(&cov.apply_precision(&v).unwrap(), p);
                    for (a, b) in v.iter_mut().zip(p) {
                        *a -= c * b;
                    }
                }
            }
            let nrm = dot(&cov.apply_precision(&v).unwrap(), &v).sqrt();
            phis.push(v.iter().map(|x| x / nrm).collect());
        }
        let duals = phis.iter().map(|p| cov.apply_precision(p).unwrap()).collect();
        LowRank { cov, duals, d: d.to_vec(), calls: AtomicUsize::new(0) }
    }

    #[test]
    fn recovers_synthetic_spectrum() {
        let cov = DenseCovariance::new(random_spd(30, 1)).unwrap();
        let d = [10.0, -5.0, 2.0, 1.0, 0.1, 0.01];
        let op = low_rank(&cov, &d, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = randomized_gen_eig(&op, &cov, 6, 5, &mut rng, Execution::default()).unwrap();
        assert_eq!(op.calls.load(Ordering::Relaxed), 6 + 5 + res.basis.len());
        for (got, want) in res.pairs.values.iter().zip(d) {
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn coarse_field_randomized_matches_dense() {
        let mesh = build_disk_in_square(&GeometrySpec::standard(0.5)).unwrap();
        let measure = GaussianMeasure::new(&mesh, 10.0, 50.0).unwrap();
        assert!(measure.dim() <= 300);
        let d: Vec<f64> = (0..45).map(|j| 3.0 * 0.7f64.powi(j) * if j % 3 == 1 { -1.0 } else { 1.0 }).collect();
        let op = low_rank(&measure, &d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let res = randomized_gen_eig(&op, &measure, 20, 10, &mut rng, Execution::default()).unwrap();
        assert_eq!(res.actions, 60);
        let h = dense_from_action(&op, DENSE_LIMIT, Execution::default()).unwrap();
        let c = dense_covariance(&measure, DENSE_LIMIT, Execution::default()).unwrap();
        let dense = dense_gen_eig(&h, &c, DENSE_LIMIT).unwrap();
        for n in 0..10 {
            assert!((dense.values[n] - d[n]).abs() <= 1e-9 * d[n].abs(), "{n}: {} vs {}", dense.values[n], d[n]);
            let (a, b) = (res.pairs.values[n], dense.values[n]);
            assert!((a - b).abs() <= 1e-5 * b.abs(), "{n}: {a} vs {b}");
        }
        // C⁻¹-orthonormality and diagonalization of the returned pairs.
        for i in 0..20 {
            let ci = measure.apply_precision(&res.pairs.vectors[i]).unwrap();
            let hi = op.apply(&res.pairs.vectors[i]).unwrap().0;
            for j in 0..20 {
                let e = dot(&ci, &res.pairs.vectors[j]);
                assert!((e - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
                if i < 10 && j < 10 {
                    let t = dot(&hi, &res.pairs.vectors[j]);
                    let want = if i == j { res.pairs.values[i] } else { 0.0 };
                    assert!((t - want).abs() < 1e-6 * res.pairs.values[0].abs());
                }
            }
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let cov = DenseCovariance::new(random_spd(20, 5)).unwrap();
        let op = low_rank(&cov, &[4.0, 2.0, 1.0], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let res = randomized_gen_eig(&op, &cov, 5, 5, &mut rng, Execution::default()).unwrap();
        assert!(res.warning.is_some());
        assert_eq!(res.pairs.len(), 3);
        for (got, want) in res.pairs.values.iter().zip([4.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_limits_and_trivial_spectra() {
        let cov = DenseCovariance::new(random_spd(8, 8)).unwrap();
        let zero = FnAction { dim: 8, f: |x: &[f64]| Ok(vec![0.0; x.len()]) };
        let h = dense_from_action(&zero, 5, Execution::default());
        assert!(matches!(h, Err(CloakError::Config(_))));
        let h = dense_from_action(&zero, DENSE_LIMIT, Execution::default()).unwrap();
        let c = dense_covariance(&cov, DENSE_LIMIT, Execution::default()).unwrap();
        let e = dense_gen_eig(&h, &c, DENSE_LIMIT).unwrap();
        assert!(e.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn moments_of_trivial_expansion() {
        let cov = DenseCovariance::new(random_spd(6, 9)).unwrap();
        let pairs = EigenPairs { values: vec![0.0; 3], vectors: vec![vec![0.0; 6]; 3], oversampling: 0 };
        assert_eq!(t2_moments(&pairs, &[0.0; 6], &cov, 2.5).unwrap(), (2.5, 0.0));
    }

    #[test]
    fn captured_trace_is_monotone() {
        let pairs = EigenPairs { values: vec![5.0, -3.0, 1.0, 0.5], vectors: vec![], oversampling: 0 };
        let total = 9.5;
        let f: Vec<f64> = (0..=4).map(|n| pairs.captured_fraction(n, total)).collect();
        assert!(f.windows(2).all(|w| w[1] >= w[0]));
        assert!((f[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn residual_row_of_exact_expansions() {
        let q = [1.0, 2.0, 4.0, 3.5];
        let row = residual_row(&q, &q, &q, 2.0).unwrap();
        assert_eq!(row.mse_q_t1, 0.0);
        assert_eq!(row.mse_q_t2, 0.0);
        assert!(row.mse_q > 0.0);
        assert!(residual_row(&[1.0], &[1.0], &[1.0], 1.0).is_err());
    }
}
