//! Thin SVD by one-sided Jacobi rotations, rank-r truncation, and
//! least-squares solves.
//!
//! The kernel always runs on the tall orientation of the input (a wide matrix
//! is transposed first), so `A` and `Aᵀ` share their singular values bit for
//! bit. Output signs are fixed: within each left singular vector the entry of
//! largest magnitude (lowest index on ties) is nonnegative.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `A = left · diag(singulars) · right_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m x k`, orthonormal columns.
    pub left: Matrix,
    /// Non-increasing, length `k = min(m, n)`.
    pub singulars: Vec<f64>,
    /// `k x n`, orthonormal rows.
    pub right_t: Matrix,
}

/// The top-`rank` part of an SVD, with singular values folded into the left
/// factor: `u = G Σ`, `v` = leading right singular rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPair {
    pub u: Matrix,
    pub v: Matrix,
    pub rank: usize,
}

impl TruncatedPair {
    pub fn reconstruct(&self) -> Matrix {
        self.u.matmul(&self.v).expect("factor dims chain by construction")
    }
}

impl SvdResult {
    pub fn rank_bound(&self) -> usize {
        self.singulars.len()
    }

    /// Sum of squared singular values beyond the first `r`.
    pub fn discarded_energy(&self, r: usize) -> f64 {
        self.singulars.iter().skip(r).map(|s| s * s).sum()
    }

    pub fn truncate(&self, r: usize) -> Result<TruncatedPair> {
        let k = self.rank_bound();
        if r == 0 || r > k {
            return Err(Error::RankOutOfRange { rank: r, max: k });
        }
        let m = self.left.rows();
        let u = Matrix::from_fn(m, r, |i, j| self.left[(i, j)] * self.singulars[j]);
        let v = self.right_t.row_block(0, r);
        Ok(TruncatedPair { u, v, rank: r })
    }

    /// Like [`SvdResult::truncate`] but also accepts `r = 0`, yielding empty
    /// factors.
    pub(crate) fn truncate_or_empty(&self, r: usize) -> Result<TruncatedPair> {
        if r == 0 {
            return Ok(TruncatedPair {
                u: Matrix::zeros(self.left.rows(), 0),
                v: Matrix::zeros(0, self.right_t.cols()),
                rank: 0,
            });
        }
        self.truncate(r)
    }
}

/// Column-major working copy of a tall matrix.
struct Columns {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Columns {
    fn from_matrix(a: &Matrix) -> Self {
        let (rows, cols) = a.dims();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = a[(r, c)];
            }
        }
        Columns { rows, cols, data }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for k in 0..n {
            data[k * n + k] = 1.0;
        }
        Columns {
            rows: n,
            cols: n,
            data,
        }
    }

    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let (lo, hi) = self.data.split_at_mut(q * self.rows);
        (&mut lo[p * self.rows..(p + 1) * self.rows], &mut hi[..self.rows])
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (ap, aq) = self.pair_mut(p, q);
        for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
            let xp = *x;
            let yq = *y;
            *x = c * xp - s * yq;
            *y = s * xp + c * yq;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi on a tall (`rows >= cols`) matrix. Returns the rotated
/// columns (`A V`) and the accumulated right rotations `V`.
fn jacobi_tall(a: &Matrix) -> Result<(Columns, Columns)> {
    let mut work = Columns::from_matrix(a);
    let n = work.cols;
    let mut v = Columns::identity(n);
    let tol = f64::EPSILON * (work.rows as f64).max(1.0);
    let total: f64 = a.frobenius_norm_sq();
    // Columns whose energy is below this are treated as exact zeros.
    let negligible = total * f64::EPSILON * f64::EPSILON;

    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let ap = work.col(p);
                    let aq = work.col(q);
                    (dot(ap, ap), dot(aq, aq), dot(ap, aq))
                };
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(ratio);
                if ratio <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                work.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
            }
        }
        if !rotated {
            return Ok((work, v));
        }
    }
    Err(Error::ConvergenceFailure {
        sweeps: MAX_SWEEPS,
        off_diagonal: worst,
    })
}

/// Thin SVD of a tall matrix, unsorted signs and order fixed afterwards.
fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.dims();
    let (work, v) = jacobi_tall(a)?;

    let norms: Vec<f64> = (0..n).map(|c| dot(work.col(c), work.col(c)).sqrt()).collect();
    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let zero_cut = sigma_max * f64::EPSILON * (m as f64);

    // Stable sort keeps the kernel's order among equal values.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("norms are finite"));

    let mut left = Matrix::zeros(m, n);
    let mut right_t = Matrix::zeros(n, n);
    let mut singulars = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singulars.push(sigma);
        if sigma > zero_cut && sigma > 0.0 {
            for (r, x) in work.col(src).iter().enumerate() {
                left[(r, dst)] = x / sigma;
            }
        } else {
            deficient.push(dst);
        }
        for (c, x) in v.col(src).iter().enumerate() {
            right_t[(dst, c)] = *x;
        }
    }
    complete_basis(&mut left, &deficient);
    Ok(SvdResult {
        left,
        singulars,
        right_t,
    })
}

/// Fills the listed columns of `q` with unit vectors orthogonal to every
/// other column. Each slot takes the standard basis vector with the largest
/// component outside the current span (lowest index on ties), then two passes
/// of modified Gram-Schmidt.
fn complete_basis(q: &mut Matrix, slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let (m, k) = q.dims();
    let mut filled: Vec<usize> = (0..k).filter(|c| !slots.contains(c)).collect();
    for &slot in slots {
        let mut best = 0;
        let mut best_rest = f64::NEG_INFINITY;
        for i in 0..m {
            let inside: f64 = filled.iter().map(|&c| q[(i, c)] * q[(i, c)]).sum();
            let rest = 1.0 - inside;
            if rest > best_rest {
                best_rest = rest;
                best = i;
            }
        }
        let mut x = vec![0.0; m];
        x[best] = 1.0;
        for _ in 0..2 {
            for &c in &filled {
                let proj: f64 = (0..m).map(|r| q[(r, c)] * x[r]).sum();
                for (r, xr) in x.iter_mut().enumerate() {
                    *xr -= proj * q[(r, c)];
                }
            }
        }
        let norm = dot(&x, &x).sqrt();
        for (r, xr) in x.iter().enumerate() {
            q[(r, slot)] = xr / norm;
        }
        filled.push(slot);
    }
}

fn fix_signs(svd: &mut SvdResult) {
    let (m, k) = svd.left.dims();
    let n = svd.right_t.cols();
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..m {
            let a = svd.left[(r, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if svd.left[(best, j)] < 0.0 {
            for r in 0..m {
                svd.left[(r, j)] = -svd.left[(r, j)];
            }
            for c in 0..n {
                svd.right_t[(j, c)] = -svd.right_t[(j, c)];
            }
        }
    }
}

/// Thin SVD of a nonempty matrix.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.dims();
    if m == 0 || n == 0 {
        return Err(Error::DimensionMismatch(format!("cannot decompose an empty {m}x{n} matrix")));
    }
    let mut out = if m >= n {
        svd_tall(a)?
    } else {
        let t = svd_tall(&a.transpose())?;
        SvdResult {
            left: t.right_t.transpose(),
            singulars: t.singulars,
            right_t: t.left.transpose(),
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Best rank-`r` approximation of `a` as a factor pair.
pub fn svd_truncated(a: &Matrix, r: usize) -> Result<TruncatedPair> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    svd(a)?.truncate(r)
}

/// `X` minimizing `‖A X − B‖_F`. `A` must have full column rank.
pub fn solve_least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch(format!(
            "least squares needs equal row counts, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() > a.rows() {
        return Err(Error::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let d = svd(a)?;
    let largest = d.singulars[0];
    let smallest = *d.singulars.last().expect("nonempty");
    if !(smallest > 1e-12 * largest) {
        return Err(Error::RankDeficient {
            condition: largest / smallest,
        });
    }
    // X = V Σ⁻¹ Gᵀ B
    let mut gtb = d.left.transpose().matmul(b)?;
    for (k, s) in d.singulars.iter().enumerate() {
        for c in 0..gtb.cols() {
            gtb[(k, c)] /= s;
        }
    }
    d.right_t.transpose().matmul(&gtb)
}

/// `X` minimizing `‖X A − B‖_F`. `A` must have full row rank.
pub fn solve_least_squares_right(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(solve_least_squares(&a.transpose(), &b.transpose())?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_matrix;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn to_na(a: &Matrix) -> DMatrix<f64> {
        DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
    }

    fn max_dev_from_identity(g: &Matrix) -> f64 {
        let n = g.rows();
        g.sub(&Matrix::identity(n)).unwrap().max_abs()
    }

    fn check_invariants(a: &Matrix, d: &SvdResult) {
        let k = a.rows().min(a.cols());
        assert_eq!(d.singulars.len(), k);
        assert!(d.singulars.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.singulars.iter().all(|&s| s >= 0.0));
        assert!(max_dev_from_identity(&d.left.transpose().matmul(&d.left).unwrap()) <= 1e-10);
        assert!(max_dev_from_identity(&d.right_t.matmul(&d.right_t.transpose()).unwrap()) <= 1e-10);
        let rec = d
            .left
            .matmul(&Matrix::from_diag(&d.singulars))
            .unwrap()
            .matmul(&d.right_t)
            .unwrap();
        let err = rec.sub(a).unwrap().frobenius_norm();
        assert!(err <= 1e-10 * a.frobenius_norm().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn diagonal_matrix() {
        let a = Matrix::from_diag(&[3.0, 2.0]);
        let d = svd(&a).unwrap();
        assert_eq!(d.singulars, vec![3.0, 2.0]);
        assert_eq!(d.left, Matrix::identity(2));
        assert_eq!(d.right_t, Matrix::identity(2));
    }

    #[test]
    fn all_ones_is_rank_one() {
        let a = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        let d = svd(&a).unwrap();
        assert!((d.singulars[0] - 2.0).abs() < 1e-14);
        assert!(d.singulars[1].abs() < 1e-14);
        check_invariants(&a, &d);
    }

    #[test]
    fn zero_matrix_gets_orthonormal_factors() {
        let a = Matrix::zeros(4, 3);
        let d = svd(&a).unwrap();
        assert_eq!(d.singulars, vec![0.0; 3]);
        check_invariants(&a, &d);
    }

    #[test]
    fn spread_null_direction_is_completed() {
        // I - 11ᵀ/n: the missing left vector has every entry 1/sqrt(n).
        for n in [5, 8, 13] {
            let a = Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } - 1.0 / n as f64);
            let d = svd(&a).unwrap();
            check_invariants(&a, &d);
            let a = Matrix::from_fn(n + 2, n, |r, c| if r == c { 1.0 } else { 0.0 } - 1.0 / n as f64);
            check_invariants(&a, &svd(&a).unwrap());
        }
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(svd(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn singulars_match_symmetric_eigen_oracle() {
        let a = random_matrix(24, 48, 3);
        let d = svd(&a).unwrap();
        check_invariants(&a, &d);
        // Eigenvalues of A Aᵀ (24x24) are the squared singular values.
        let gram = to_na(&a) * to_na(&a).transpose();
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|x| x.max(0.0).sqrt()).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (s, e) in d.singulars.iter().zip(&eig) {
            assert!((s - e).abs() <= 1e-8 * e, "{s} vs {e}");
        }
    }

    #[test]
    fn transposed_input_has_identical_singulars() {
        let a = random_matrix(9, 14, 5);
        let d = svd(&a).unwrap();
        let dt = svd(&a.transpose()).unwrap();
        assert_eq!(d.singulars, dt.singulars);
    }

    #[test]
    fn sign_convention_makes_largest_entry_nonnegative() {
        let a = random_matrix(7, 5, 8);
        let d = svd(&a).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..7).map(|r| d.left[(r, j)]).collect();
            let (idx, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |(bi, ba), (i, x)| if x.abs() > ba { (i, x.abs()) } else { (bi, ba) });
            assert!(col[idx] >= 0.0);
        }
        assert_eq!(svd(&a).unwrap(), d);
    }

    #[test]
    fn truncation_cases() {
        let a = Matrix::from_diag(&[3.0, 2.0]);
        let t = svd_truncated(&a, 1).unwrap();
        assert_eq!(t.reconstruct().data(), &[3.0, 0.0, 0.0, 0.0]);

        let b = random_matrix(6, 4, 12);
        let full = svd_truncated(&b, 4).unwrap();
        assert!(full.reconstruct().sub(&b).unwrap().frobenius_norm() <= 1e-10 * b.frobenius_norm());

        assert!(matches!(svd_truncated(&b, 0), Err(Error::RankOutOfRange { rank: 0, max: 4 })));
        assert!(matches!(svd_truncated(&b, 5), Err(Error::RankOutOfRange { rank: 5, max: 4 })));
    }

    #[test]
    fn truncated_residual_matches_discarded_energy() {
        let a = random_matrix(20, 30, 21);
        let d = svd(&a).unwrap();
        let t = svd_truncated(&a, 5).unwrap();
        let residual = a.sub(&t.reconstruct()).unwrap().frobenius_norm_sq();
        let discarded: f64 = d.singulars[5..].iter().map(|s| s * s).sum();
        assert!((residual - discarded).abs() <= 1e-8 * discarded);
    }

    #[test]
    fn least_squares_identity_and_orthonormal() {
        let b = random_matrix(4, 3, 1);
        let x = solve_least_squares(&Matrix::identity(4), &b).unwrap();
        assert!(x.sub(&b).unwrap().max_abs() <= 1e-14);

        let q = svd(&random_matrix(10, 4, 2)).unwrap().left;
        let b = random_matrix(10, 3, 3);
        let x = solve_least_squares(&q, &b).unwrap();
        let expected = q.transpose().matmul(&b).unwrap();
        assert!(x.sub(&expected).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn least_squares_matches_pseudoinverse_oracle() {
        let a = random_matrix(30, 5, 4);
        let b = random_matrix(30, 8, 5);
        let x = solve_least_squares(&a, &b).unwrap();
        let pinv = to_na(&a).pseudo_inverse(1e-14).unwrap();
        let x_oracle = &pinv * to_na(&b);
        let res = (to_na(&a) * to_na(&x) - to_na(&b)).norm();
        let res_oracle = (to_na(&a) * &x_oracle - to_na(&b)).norm();
        assert!((res - res_oracle).abs() <= 1e-9 * res_oracle);
        assert!((to_na(&x) - x_oracle).amax() <= 1e-9);
    }

    #[test]
    fn least_squares_rank_deficiency() {
        let mut a = random_matrix(6, 3, 6);
        for r in 0..6 {
            a[(r, 2)] = a[(r, 0)] * 2.0;
        }
        let b = random_matrix(6, 2, 7);
        assert!(matches!(solve_least_squares(&a, &b), Err(Error::RankDeficient { .. })));
        assert!(matches!(
            solve_least_squares(&random_matrix(2, 3, 1), &random_matrix(2, 1, 1)),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn right_sided_solve() {
        let a = random_matrix(4, 12, 9);
        let x_true = random_matrix(5, 4, 10);
        let b = x_true.matmul(&a).unwrap();
        let x = solve_least_squares_right(&a, &b).unwrap();
        assert!(x.sub(&x_true).unwrap().max_abs() <= 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn svd_invariants_hold(m in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
            let a = random_matrix(m, n, seed);
            let d = svd(&a).unwrap();
            check_invariants(&a, &d);
        }

        #[test]
        fn eckart_young_for_every_rank(m in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
            let a = random_matrix(m, n, seed);
            let d = svd(&a).unwrap();
            for r in 1..=m.min(n) {
                let t = d.truncate(r).unwrap();
                let residual = a.sub(&t.reconstruct()).unwrap().frobenius_norm_sq();
                let discarded = d.discarded_energy(r);
                prop_assert!((residual - discarded).abs() <= 1e-8 * discarded + 1e-24 * a.frobenius_norm_sq());
            }
        }

        #[test]
        fn residual_scales_with_input(seed in any::<u64>(), c in -5.0f64..5.0, r in 1usize..6) {
            let a = random_matrix(8, 6, seed);
            let base = svd(&a).unwrap().discarded_energy(r).sqrt();
            let scaled = svd(&a.scale(c)).unwrap().discarded_energy(r).sqrt();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-10 * (1.0 + base * c.abs()));
        }

        #[test]
        fn svd_is_deterministic(seed in any::<u64>()) {
            let a = random_matrix(7, 9, seed);
            prop_assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
        }
    }
}
