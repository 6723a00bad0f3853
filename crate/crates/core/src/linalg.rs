//! Matrix primitives used by the solver: row-wise hard thresholding, SVDs,
//! the spectral norm, and the Procrustes-aligned distance between factor pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdtError, Result};
use crate::matrix::{dot, Mat};

/// Default relative tolerance for iterative SVD routines.
pub const DEFAULT_SVD_TOL: f64 = 1e-10;
/// Default sweep limit for subspace iteration.
pub const DEFAULT_SVD_SWEEPS: usize = 1000;

const START_SEED: u64 = 0x5eed_5bd0;

/// A pair of factors `(U, V)` representing `Θ = U Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub u: Mat,
    pub v: Mat,
}

impl FactorPair {
    pub fn new(u: Mat, v: Mat) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(GdtError::DimensionMismatch {
                context: "FactorPair::new",
                expected: (v.rows(), u.cols()),
                got: v.shape(),
            });
        }
        Ok(FactorPair { u, v })
    }

    pub fn zeros(m1: usize, m2: usize, r: usize) -> Self {
        FactorPair {
            u: Mat::zeros(m1, r),
            v: Mat::zeros(m2, r),
        }
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// Shape `(m1, m2)` of the represented matrix.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    pub fn product(&self) -> Mat {
        self.u.matmul_t(&self.v)
    }

    /// The stacked factor `Z = [U; V]`.
    pub fn stacked(&self) -> Mat {
        self.u.vstack(&self.v)
    }

    /// Right-multiplies both factors by `o`.
    pub fn rotate(&self, o: &Mat) -> FactorPair {
        FactorPair {
            u: self.u.matmul(o),
            v: self.v.matmul(o),
        }
    }
}

/// Thin singular value decomposition `M ≈ left · diag(singular) · rightᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub left: Mat,
    pub singular: Vec<f64>,
    pub right: Mat,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    pub fn reconstruct(&self) -> Mat {
        self.left.scale_cols(&self.singular).matmul_t(&self.right)
    }

    fn truncate(mut self, r: usize) -> Svd {
        self.singular.truncate(r);
        Svd {
            left: self.left.leading_cols(r),
            singular: self.singular,
            right: self.right.leading_cols(r),
        }
    }
}

/// Keeps the `s` rows of `m` with largest ℓ₂ norm and zeroes the rest.
///
/// Ties are broken towards the lowest row index. Kept rows are copied bit-for-bit.
pub fn hard_threshold_rows(m: &Mat, s: usize) -> Mat {
    if s >= m.rows() {
        return m.clone();
    }
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in top_rows(m, s) {
        out.row_mut(i).copy_from_slice(m.row(i));
    }
    out
}

/// Indices of the `s` rows with largest norm, in increasing index order.
pub fn top_rows(m: &Mat, s: usize) -> Vec<usize> {
    let norms = m.row_norms_sq();
    let mut order: Vec<usize> = (0..m.rows()).collect();
    // sort_by is stable, so equal norms keep ascending index order
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    order.truncate(s);
    order.sort_unstable();
    order
}

/// Full thin SVD by one-sided Jacobi rotations. Intended for small matrices.
pub fn jacobi_svd(m: &Mat) -> Svd {
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose());
        return Svd {
            left: t.right,
            singular: t.singular,
            right: t.left,
        };
    }
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                rotate_pair(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (dot(c, c).sqrt(), j))
        .collect();
    sigma.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let smax = sigma.first().map_or(0.0, |s| s.0);

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular = Vec::with_capacity(n);
    let mut right = Mat::zeros(n, n);
    let mut deficient = Vec::new();
    for (k, &(s, j)) in sigma.iter().enumerate() {
        singular.push(s);
        right.set_column(k, &vcols[j]);
        if s > 0.0 && s > smax * 1e-13 {
            left.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            left.push(vec![0.0; rows]);
            deficient.push(k);
        }
    }
    complete_orthonormal(&mut left, &deficient);
    let mut left_mat = Mat::zeros(rows, n);
    for (k, c) in left.iter().enumerate() {
        left_mat.set_column(k, c);
    }
    Svd {
        left: left_mat,
        singular,
        right,
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all other columns.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < dim, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (idx, c) in cols.iter().enumerate() {
                    if idx == k || (missing.contains(&idx) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[k] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Orthonormalizes the columns of `m` (two passes of modified Gram–Schmidt).
/// Columns that collapse are replaced by fresh random directions from `rng`.
fn orthonormalize_cols(m: &Mat, rng: &mut ChaCha8Rng) -> Mat {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    for k in 0..n {
        let mut attempts = 0;
        loop {
            let before = dot(&cols[k], &cols[k]).sqrt();
            for _ in 0..2 {
                for prev in 0..k {
                    let proj = dot(&cols[k], &cols[prev]);
                    let (lo, hi) = cols.split_at_mut(k);
                    hi[0].iter_mut().zip(&lo[prev]).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let after = dot(&cols[k], &cols[k]).sqrt();
            if after > 1e-10 * before.max(f64::MIN_POSITIVE) && after > 0.0 {
                cols[k].iter_mut().for_each(|x| *x /= after);
                break;
            }
            attempts += 1;
            assert!(attempts < 20, "failed to orthonormalize a basis");
            cols[k] = Mat::random_normal(rows, 1, rng).into_vec();
        }
    }
    let mut out = Mat::zeros(rows, n);
    for (k, c) in cols.iter().enumerate() {
        out.set_column(k, c);
    }
    out
}

/// Controls for [`truncated_svd_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    /// Extra block columns beyond the requested rank.
    pub oversample: usize,
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            tol: DEFAULT_SVD_TOL,
            max_sweeps: DEFAULT_SVD_SWEEPS,
            oversample: 8,
            seed: START_SEED,
        }
    }
}

/// Top-`r` singular triplets of `m` by block subspace iteration.
pub fn truncated_svd(m: &Mat, r: usize, tol: f64) -> Result<Svd> {
    truncated_svd_with(
        m,
        r,
        &SvdOptions {
            tol,
            ..SvdOptions::default()
        },
    )
}

pub fn truncated_svd_with(m: &Mat, r: usize, opts: &SvdOptions) -> Result<Svd> {
    let (a, b) = m.shape();
    if r == 0 || r > a.min(b) {
        return Err(GdtError::InvalidConfig(format!(
            "rank {r} outside 1..={} for a {a}x{b} matrix",
            a.min(b)
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(GdtError::InvalidConfig(format!(
            "SVD tolerance must be positive, got {}",
            opts.tol
        )));
    }
    match subspace_iteration(m, r, opts) {
        (svd, true, _) => Ok(svd),
        (_, false, residual) => Err(GdtError::SvdNotConverged {
            rank: r,
            sweeps: opts.max_sweeps,
            residual,
        }),
    }
}

/// Returns the best estimate, whether it met the tolerance, and the final
/// relative residual `max_i ‖Mᵀuᵢ − σᵢvᵢ‖ / σ₁` over the leading `r` triplets.
fn subspace_iteration(m: &Mat, r: usize, opts: &SvdOptions) -> (Svd, bool, f64) {
    if m.rows() < m.cols() {
        let (t, ok, res) = subspace_iteration(&m.transpose(), r, opts);
        return (
            Svd {
                left: t.right,
                singular: t.singular,
                right: t.left,
            },
            ok,
            res,
        );
    }
    let b = m.cols();
    let q = (r + opts.oversample).min(b);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis = orthonormalize_cols(&Mat::random_normal(b, q, &mut rng), &mut rng);
    let mut best = None;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_sweeps.max(1) {
        let w = m.matmul(&basis);
        let small = jacobi_svd(&w);
        let right = basis.matmul(&small.right);
        let left = small.left;
        let z = m.t_matmul(&left);
        let sigma1 = small.singular[0];
        let svd = Svd {
            left,
            singular: small.singular,
            right,
        };
        if sigma1 == 0.0 {
            return (svd.truncate(r), true, 0.0);
        }
        residual = (0..r)
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..b {
                    let d = z[(k, i)] - svd.singular[i] * svd.right[(k, i)];
                    acc += d * d;
                }
                acc.sqrt() / sigma1
            })
            .fold(0.0, f64::max);
        let converged = residual <= opts.tol || q == b;
        best = Some(svd);
        if converged {
            return (best.unwrap().truncate(r), true, residual);
        }
        basis = orthonormalize_cols(&z, &mut rng);
    }
    (best.unwrap().truncate(r), false, residual)
}

/// Largest singular value of `m` to relative accuracy `tol`; zero for a zero matrix.
pub fn spectral_norm(m: &Mat, tol: f64) -> f64 {
    if m.as_slice().iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let opts = SvdOptions {
        tol: tol.max(f64::EPSILON),
        max_sweeps: 5000,
        oversample: 3,
        seed: START_SEED,
    };
    // An unconverged estimate is still a valid lower bound; keep it.
    subspace_iteration(m, 1, &opts).0.singular[0]
}

/// Balanced rank-`r` factorization `(Ũ Σ̃^{1/2}, Ṽ Σ̃^{1/2})` of `theta`.
pub fn balanced_factors(theta: &Mat, r: usize, tol: f64) -> Result<FactorPair> {
    let svd = truncated_svd(theta, r, tol)?;
    let roots: Vec<f64> = svd.singular.iter().map(|s| s.sqrt()).collect();
    Ok(FactorPair {
        u: svd.left.scale_cols(&roots),
        v: svd.right.scale_cols(&roots),
    })
}

/// Orthogonal `O` minimizing `‖U − U*O‖² + ‖V − V*O‖²` (reflections allowed).
pub fn procrustes_rotation(z: &FactorPair, z_star: &FactorPair) -> Result<Mat> {
    if z.u.shape() != z_star.u.shape() || z.v.shape() != z_star.v.shape() {
        return Err(GdtError::DimensionMismatch {
            context: "subspace_distance",
            expected: (z_star.u.rows() + z_star.v.rows(), z_star.rank()),
            got: (z.u.rows() + z.v.rows(), z.rank()),
        });
    }
    // maximize tr(Oᵀ N) with N = U*ᵀU + V*ᵀV = A D Bᵀ, giving O = A Bᵀ
    let mut n = z_star.u.t_matmul(&z.u);
    n.axpy(1.0, &z_star.v.t_matmul(&z.v));
    let svd = jacobi_svd(&n);
    Ok(svd.left.matmul_t(&svd.right))
}

/// Procrustes-aligned distance `min_O √(‖U − U*O‖² + ‖V − V*O‖²)` over orthogonal `O`.
pub fn subspace_distance(z: &FactorPair, z_star: &FactorPair) -> Result<f64> {
    let o = procrustes_rotation(z, z_star)?;
    let aligned = z_star.rotate(&o);
    Ok((z.u.sub(&aligned.u).frob_norm_sq() + z.v.sub(&aligned.v).frob_norm_sq()).sqrt())
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    assert_eq!(m.rows(), m.cols(), "symmetric_eigenvalues needs a square matrix");
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = a.frob_norm_sq();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.rows();
    a.expect_shape("solve_spd", (n, n))?;
    b.expect_shape("solve_spd", (n, b.cols()))?;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(GdtError::InvalidConfig(
                "matrix is not positive definite (rank-deficient design?)".into(),
            ));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}
