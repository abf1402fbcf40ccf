//! Compressed-sparse-row matrices and a Jacobi-preconditioned conjugate
//! gradient solver, with a mean-free mode for singular systems whose kernel
//! is the constant vector (pure Neumann and periodic problems).

use crate::error::{Error, Result};

/// Square CSR matrix. Column indices are strictly increasing within a row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        if let Some(&(row, col, _)) = entries.iter().find(|(r, c, _)| *r >= n || *c >= n) {
            return Err(Error::IndexOutOfRange { row, col, n });
        }
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0; n + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(SparseMatrix { n, row_offsets, col_indices, values })
    }

    /// Zero-valued matrix with the given sparsity pattern. `rows[i]` lists the
    /// columns of row `i`; it is sorted and deduplicated here.
    pub fn from_pattern(rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for mut cols in rows {
            cols.sort_unstable();
            cols.dedup();
            col_indices.extend(cols);
            row_offsets.push(col_indices.len());
        }
        let values = vec![0.0; col_indices.len()];
        SparseMatrix { n, row_offsets, col_indices, values }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[r.clone()].binary_search(&j).ok().map(|p| r.start + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Adds `v` to entry `(i, j)`, which must be in the pattern.
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        let p = self
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) is not in the sparsity pattern"));
        self.values[p] += v;
    }

    pub fn zero_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.n == other.n && self.row_offsets == other.row_offsets && self.col_indices == other.col_indices
    }

    /// `self + s * other` for matrices sharing a sparsity pattern.
    pub fn add_scaled(&self, s: f64, other: &SparseMatrix) -> SparseMatrix {
        assert!(self.same_pattern(other), "add_scaled requires identical sparsity patterns");
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                scale = scale.max(v.abs());
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        if scale == 0.0 { 0.0 } else { worst / scale }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `||b - A x|| / ||b||`, recomputed from the returned iterate.
    pub final_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Relative residual tolerance.
    pub tol: f64,
    /// Iteration cap; `None` means `10 n`.
    pub max_iter: Option<usize>,
    /// Solve in the complement of the constant vector.
    pub mean_free: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-10, max_iter: None, mean_free: false }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Jacobi-preconditioned conjugate gradient for symmetric positive
/// (semi)definite `a`.
///
/// In mean-free mode `b` must be orthogonal to the constant vector to within
/// `tol`; the preconditioned residual is projected onto the mean-free
/// subspace every iteration so the iterate stays mean-free.
pub fn cg_solve(
    a: &SparseMatrix,
    b: &[f64],
    opts: CgOptions,
    x0: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.n();
    if b.len() != n {
        return Err(Error::InvalidArgument(format!("rhs length {} does not match matrix size {n}", b.len())));
    }
    let max_iter = opts.max_iter.unwrap_or(10 * n.max(1));
    let mut rhs = b.to_vec();
    let bnorm = dot(&rhs, &rhs).sqrt();
    if opts.mean_free && bnorm > 0.0 {
        let incompat = rhs.iter().sum::<f64>().abs() / ((n as f64).sqrt() * bnorm);
        if incompat > opts.tol {
            return Err(Error::IncompatibleRhs(incompat));
        }
        remove_mean(&mut rhs);
    }
    if bnorm == 0.0 {
        let report = SolveReport { iterations: 0, final_residual: 0.0, converged: true };
        return Ok((vec![0.0; n], report));
    }

    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = match x0 {
        Some(g) => g.to_vec(),
        None => vec![0.0; n],
    };
    if opts.mean_free {
        remove_mean(&mut x);
    }
    let mut r = a.mul_vec(&x);
    r.iter_mut().zip(&rhs).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    if opts.mean_free {
        remove_mean(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = dot(&r, &r).sqrt() / bnorm <= opts.tol;

    while !converged && iterations < max_iter {
        iterations += 1;
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() / bnorm <= opts.tol {
            converged = true;
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if opts.mean_free {
            remove_mean(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    if opts.mean_free {
        remove_mean(&mut x);
    }
    let mut res = a.mul_vec(&x);
    res.iter_mut().zip(&rhs).for_each(|(ri, bi)| *ri = bi - *ri);
    let final_residual = dot(&res, &res).sqrt() / bnorm;
    let report = SolveReport { iterations, final_residual, converged };
    if !converged {
        return Err(Error::NotConverged { iterations, residual: final_residual });
    }
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            b.swap(k, piv);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
            x[k] = (b[k] - s) / a[k][k];
        }
        x
    }

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(1, &[(0, 0, 1.0), (0, 0, 2.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 0), 3.0);
    }

    #[test]
    fn empty_triplets_give_zero_matrix() {
        let m = SparseMatrix::from_triplets(3, &[]).unwrap();
        assert_eq!(m.nnz(), 0);
        assert_eq!(m.mul_vec(&[1.0, 2.0, 3.0]), vec![0.0; 3]);
    }

    #[test]
    fn out_of_range_triplet() {
        let err = SparseMatrix::from_triplets(2, &[(0, 2, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { row: 0, col: 2, n: 2 }));
    }

    fn laplacian_1d_triplets(n: usize) -> Vec<(usize, usize, f64)> {
        // element-by-element assembly of unit-length linear elements, plus a
        // unit mass on each end so the matrix is nonsingular
        let mut t = Vec::new();
        for e in 0..n - 1 {
            t.extend_from_slice(&[(e, e, 1.0), (e, e + 1, -1.0), (e + 1, e, -1.0), (e + 1, e + 1, 1.0)]);
        }
        t.push((0, 0, 1.0));
        t.push((n - 1, n - 1, 1.0));
        t
    }

    #[test]
    fn laplacian_pattern_is_tridiagonal() {
        let m = SparseMatrix::from_triplets(3, &laplacian_1d_triplets(3)).unwrap();
        let d = m.to_dense();
        assert_eq!(d, vec![vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 2.0]]);
        for i in 0..3 {
            let cols: Vec<usize> = m.row(i).map(|(j, _)| j).collect();
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn identity_converges_immediately() {
        let a = SparseMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        let (x, rep) = cg_solve(&a, &b, CgOptions::default(), None).unwrap();
        assert!(rep.iterations <= 2);
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-14);
        }
    }

    #[test]
    fn dirichlet_laplacian_matches_dense() {
        let a = SparseMatrix::from_triplets(3, &laplacian_1d_triplets(3)).unwrap();
        let b = vec![1.0, 0.0, 0.0];
        let opts = CgOptions { tol: 1e-14, ..Default::default() };
        let (x, _) = cg_solve(&a, &b, opts, None).unwrap();
        let oracle = dense_solve(a.to_dense(), b);
        assert_eq!(oracle.len(), 3);
        for (xi, oi) in x.iter().zip(&oracle) {
            assert!((xi - oi).abs() < 1e-12, "{xi} vs {oi}");
        }
    }

    fn periodic_laplacian(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            t.extend_from_slice(&[(i, i, 1.0), (i, j, -1.0), (j, i, -1.0), (j, j, 1.0)]);
        }
        SparseMatrix::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn periodic_singular_system_mean_free() {
        let n = 12;
        let a = periodic_laplacian(n);
        let mut b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        remove_mean(&mut b);
        let opts = CgOptions { tol: 1e-12, mean_free: true, ..Default::default() };
        let (x, rep) = cg_solve(&a, &b, opts, None).unwrap();
        assert!(rep.final_residual <= 1e-12);
        let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((x.iter().sum::<f64>() / n as f64).abs() <= 1e-12 * xmax);

        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let pinv = dense.pseudo_inverse(1e-12).unwrap();
        let oracle = pinv * nalgebra::DVector::from_vec(b);
        for i in 0..n {
            assert!((x[i] - oracle[i]).abs() < 1e-9, "{} vs {}", x[i], oracle[i]);
        }
    }

    #[test]
    fn incompatible_rhs_rejected() {
        let a = periodic_laplacian(6);
        let b = vec![1.0; 6];
        let opts = CgOptions { mean_free: true, ..Default::default() };
        assert!(matches!(cg_solve(&a, &b, opts, None), Err(Error::IncompatibleRhs(_))));
    }

    #[test]
    fn non_convergence_is_reported() {
        let a = SparseMatrix::from_triplets(50, &laplacian_1d_triplets(50)).unwrap();
        let b: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let opts = CgOptions { tol: 1e-14, max_iter: Some(2), mean_free: false };
        assert!(matches!(cg_solve(&a, &b, opts, None), Err(Error::NotConverged { iterations: 2, .. })));
    }

    proptest! {
        #[test]
        fn random_spd_matches_dense_oracle(
            n in 2usize..40,
            seed in proptest::collection::vec(-1.0f64..1.0, 1600),
            rhs in proptest::collection::vec(-1.0f64..1.0, 40),
        ) {
            // A = B B^T + n I with B sparsified
            let b_mat = |i: usize, j: usize| {
                let v = seed[(i * 40 + j) % seed.len()];
                if v.abs() < 0.6 { 0.0 } else { v }
            };
            let mut trip = Vec::new();
            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let v: f64 = (0..n).map(|k| b_mat(i, k) * b_mat(j, k)).sum::<f64>()
                        + if i == j { n as f64 } else { 0.0 };
                    if v != 0.0 {
                        trip.push((i, j, v));
                        dense[i][j] = v;
                    }
                }
            }
            let a = SparseMatrix::from_triplets(n, &trip).unwrap();
            let b = rhs[..n].to_vec();
            let opts = CgOptions { tol: 1e-13, ..Default::default() };
            let (x, _) = cg_solve(&a, &b, opts, None).unwrap();
            let oracle = dense_solve(dense, b);
            let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for (xi, oi) in x.iter().zip(&oracle) {
                prop_assert!((xi - oi).abs() / scale < 1e-8);
            }
        }
    }
}
