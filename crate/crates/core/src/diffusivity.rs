//! Volume-fraction dependent diffusivity models.
//!
//! Two kinds are supported: a cubic polynomial through the origin, fitted by
//! least squares, and a piecewise tensor interpolant that is linear from the
//! zero tensor at `φ = 0` to the first knot and Log-Euclidean between knots.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue floor for the SPD test.
pub const SPD_RTOL: f64 = 1e-12;

/// `D(φ) = d_ref (a₁φ + a₂φ² + a₃φ³)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCubicModel {
    coeffs: [f64; 3],
    d_ref: f64,
}

impl ScalarCubicModel {
    pub fn new(coeffs: [f64; 3], d_ref: f64) -> Self {
        ScalarCubicModel { coeffs, d_ref }
    }

    pub fn coeffs(&self) -> [f64; 3] {
        self.coeffs
    }

    pub fn d_ref(&self) -> f64 {
        self.d_ref
    }

    /// Polynomial part only, `φ` clipped to `[0, 1]`.
    pub fn ratio(&self, phi: f64) -> f64 {
        let p = phi.clamp(0.0, 1.0);
        let [a1, a2, a3] = self.coeffs;
        p * (a1 + p * (a2 + p * a3))
    }

    pub fn eval(&self, phi: f64) -> f64 {
        self.d_ref * self.ratio(phi)
    }

    /// Sign check of `D` on the grid `φ = k·10⁻³`, `k = 1..=1000`.
    pub fn check_positive(&self) -> Result<()> {
        for k in 1..=1000 {
            let phi = k as f64 * 1e-3;
            if self.ratio(phi) <= 0.0 {
                return Err(Error::InvalidArgument(format!("fitted diffusivity is not positive at phi = {phi}")));
            }
        }
        Ok(())
    }
}

/// Result of [`fit_scalar_cubic`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFit {
    pub model: ScalarCubicModel,
    /// Residuals `y_i - p(φ_i)` in input order.
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
    /// Unconstrained cubic `c₀ + c₁φ + c₂φ² + c₃φ³` fitted to the same
    /// points plus `(0, 0)`; `None` when fewer than four distinct abscissae.
    pub alternative: Option<([f64; 4], f64)>,
}

fn least_squares(design: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin <= 1e-12 * smax {
        return Err(Error::RankDeficient(format!("singular values range {smin:e}..{smax:e}")));
    }
    svd.solve(&rhs, 0.0).map_err(|e| Error::RankDeficient(e.to_string()))
}

fn distinct_count(mut xs: Vec<f64>) -> usize {
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.len()
}

/// Least-squares fit of `D/d_ref` on the basis `{φ, φ², φ³}`.
pub fn fit_scalar_cubic(points: &[(f64, f64)], d_ref: f64) -> Result<ScalarFit> {
    let positive: Vec<f64> = points.iter().map(|p| p.0).filter(|&x| x > 0.0).collect();
    if distinct_count(positive) < 3 {
        return Err(Error::RankDeficient("need at least three distinct positive volume fractions".into()));
    }
    let n = points.len();
    let design = DMatrix::from_fn(n, 3, |i, j| points[i].0.powi(j as i32 + 1));
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.1));
    let c = least_squares(design.clone(), rhs.clone())?;
    let model = ScalarCubicModel::new([c[0], c[1], c[2]], d_ref);
    let residuals: Vec<f64> = points.iter().map(|&(x, y)| y - model.ratio(x)).collect();
    let residual_norm = residuals.iter().map(|r| r * r).sum::<f64>().sqrt();

    let mut with_origin: Vec<(f64, f64)> = points.to_vec();
    if !with_origin.iter().any(|p| p.0 == 0.0) {
        with_origin.push((0.0, 0.0));
    }
    let alternative = if distinct_count(with_origin.iter().map(|p| p.0).collect()) >= 4 {
        let m = with_origin.len();
        let design = DMatrix::from_fn(m, 4, |i, j| with_origin[i].0.powi(j as i32));
        let rhs = DVector::from_iterator(m, with_origin.iter().map(|p| p.1));
        least_squares(design.clone(), rhs.clone()).ok().map(|c| {
            let r = (&design * &c - rhs).norm();
            ([c[0], c[1], c[2], c[3]], r)
        })
    } else {
        None
    };
    Ok(ScalarFit { model, residuals, residual_norm, alternative })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(t: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(t.clone());
    (e.eigenvalues.min(), e.eigenvalues.max())
}

/// Symmetric with smallest eigenvalue above `SPD_RTOL` times the largest.
pub fn check_spd(t: &DMatrix<f64>) -> Result<()> {
    if !t.is_square() {
        return Err(Error::NotSpd(format!("{}x{} matrix", t.nrows(), t.ncols())));
    }
    let scale = t.amax();
    if (t - t.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotSpd("matrix is not symmetric".into()));
    }
    let (lo, hi) = eigen_range(t);
    if !(hi > 0.0 && lo > SPD_RTOL * hi) {
        return Err(Error::NotSpd(format!("eigenvalues range {lo:e}..{hi:e}")));
    }
    Ok(())
}

fn map_eigen(t: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (t + t.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    let m = &e.eigenvectors * d * e.eigenvectors.transpose();
    (&m + m.transpose()) * 0.5
}

/// Matrix logarithm of an SPD matrix.
pub fn logm_spd(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(t)?;
    Ok(map_eigen(t, f64::ln))
}

/// Matrix exponential of a symmetric matrix.
pub fn expm_sym(t: &DMatrix<f64>) -> DMatrix<f64> {
    map_eigen(t, f64::exp)
}

/// `expm(w₁ log D₁ + w₂ log D₂)` with weights linear in `φ` on `[φ₁, φ₂]`.
pub fn log_euclidean_interp(d1: &DMatrix<f64>, d2: &DMatrix<f64>, phi1: f64, phi2: f64, phi: f64) -> Result<DMatrix<f64>> {
    if !(phi1 < phi2) {
        return Err(Error::InvalidArgument(format!("interval [{phi1}, {phi2}] is empty")));
    }
    if d1.shape() != d2.shape() {
        return Err(Error::InvalidArgument("tensor shapes differ".into()));
    }
    let l1 = logm_spd(d1)?;
    let l2 = logm_spd(d2)?;
    Ok(blend_logs(&l1, &l2, phi1, phi2, phi))
}

fn blend_logs(l1: &DMatrix<f64>, l2: &DMatrix<f64>, phi1: f64, phi2: f64, phi: f64) -> DMatrix<f64> {
    let w2 = (phi - phi1) / (phi2 - phi1);
    expm_sym(&(l1 * (1.0 - w2) + l2 * w2))
}

/// Piecewise tensor model with an implicit zero knot at `φ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInterpolant {
    dim: usize,
    d_ref: f64,
    phis: Vec<f64>,
    tensors: Vec<DMatrix<f64>>,
    logs: Vec<DMatrix<f64>>,
}

impl TensorInterpolant {
    /// `knots` are `(φ_k, D_k / d_ref)` with `0 < φ_1 < φ_2 < … ≤ 1`.
    pub fn new(dim: usize, knots: Vec<(f64, DMatrix<f64>)>, d_ref: f64) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::InvalidArgument("tensor interpolant needs at least one knot".into()));
        }
        let mut knots = knots;
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prev = 0.0;
        for (phi, t) in &knots {
            if !(*phi > prev && *phi <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "knot volume fractions must be distinct and in (0, 1], got {phi}"
                )));
            }
            if t.shape() != (dim, dim) {
                return Err(Error::InvalidArgument(format!("knot at {phi} is not {dim}x{dim}")));
            }
            check_spd(t).map_err(|e| Error::NotSpd(format!("knot at phi = {phi}: {e}")))?;
            prev = *phi;
        }
        let logs = knots.iter().map(|(_, t)| map_eigen(t, f64::ln)).collect();
        let (phis, tensors) = knots.into_iter().unzip();
        Ok(TensorInterpolant { dim, d_ref, phis, tensors, logs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d_ref(&self) -> f64 {
        self.d_ref
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, &DMatrix<f64>)> {
        self.phis.iter().copied().zip(self.tensors.iter())
    }

    /// Interpolated `D/d_ref`; constant beyond the last knot.
    pub fn ratio(&self, phi: f64) -> DMatrix<f64> {
        let p = phi.clamp(0.0, 1.0);
        if p <= self.phis[0] {
            return &self.tensors[0] * (p / self.phis[0]);
        }
        let last = self.phis.len() - 1;
        if p >= self.phis[last] {
            return self.tensors[last].clone();
        }
        let k = self.phis.partition_point(|&x| x <= p) - 1;
        if p == self.phis[k] {
            return self.tensors[k].clone();
        }
        blend_logs(&self.logs[k], &self.logs[k + 1], self.phis[k], self.phis[k + 1], p)
    }

    pub fn eval(&self, phi: f64) -> DMatrix<f64> {
        self.ratio(phi) * self.d_ref
    }

    /// SPD check of the interpolant on the grid `φ = k·10⁻³`, `k = 1..=1000`.
    pub fn check_spd_grid(&self) -> Result<()> {
        for k in 1..=1000 {
            let phi = k as f64 * 1e-3;
            check_spd(&self.ratio(phi)).map_err(|e| Error::NotSpd(format!("at phi = {phi}: {e}")))?;
        }
        Ok(())
    }
}

/// Diffusivity as a function of the volume fraction.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusivityModel {
    Scalar(ScalarCubicModel),
    Tensor(TensorInterpolant),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnotFile {
    phi: f64,
    tensor: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
enum ModelFile {
    Scalar { d_ref: f64, coefficients: [f64; 3] },
    Tensor { d_ref: f64, dim: usize, knots: Vec<KnotFile> },
}

impl DiffusivityModel {
    /// Scalar model with unit-sum coefficients and reference value `d_ref`.
    pub fn scalar(coeffs: [f64; 3], d_ref: f64) -> Self {
        DiffusivityModel::Scalar(ScalarCubicModel::new(coeffs, d_ref))
    }

    pub fn to_toml_string(&self) -> String {
        let file = match self {
            DiffusivityModel::Scalar(m) => ModelFile::Scalar { d_ref: m.d_ref, coefficients: m.coeffs },
            DiffusivityModel::Tensor(t) => ModelFile::Tensor {
                d_ref: t.d_ref,
                dim: t.dim,
                knots: t
                    .knots()
                    .map(|(phi, m)| KnotFile {
                        phi,
                        tensor: (0..t.dim).map(|r| (0..t.dim).map(|c| m[(r, c)]).collect()).collect(),
                    })
                    .collect(),
            },
        };
        toml::to_string(&file).expect("model serializes to TOML")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(format!("diffusivity model: {e}")))?;
        match file {
            ModelFile::Scalar { d_ref, coefficients } => Ok(Self::scalar(coefficients, d_ref)),
            ModelFile::Tensor { d_ref, dim, knots } => {
                let mut ks = Vec::with_capacity(knots.len());
                for k in knots {
                    if k.tensor.len() != dim || k.tensor.iter().any(|r| r.len() != dim) {
                        return Err(Error::Config(format!("knot at phi = {} is not {dim}x{dim}", k.phi)));
                    }
                    ks.push((k.phi, DMatrix::from_fn(dim, dim, |r, c| k.tensor[r][c])));
                }
                Ok(DiffusivityModel::Tensor(TensorInterpolant::new(dim, ks, d_ref)?))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn exact_cubic_is_recovered() {
        let pts: Vec<(f64, f64)> =
            [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&x| (x, 0.25 * x * x * x + 0.33 * x * x + 0.42 * x)).collect();
        let fit = fit_scalar_cubic(&pts, 1.0).unwrap();
        let c = fit.model.coeffs();
        for (a, b) in c.iter().zip([0.42, 0.33, 0.25]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(fit.residual_norm < 1e-12);
        let (alt, r) = fit.alternative.unwrap();
        assert!(alt[0].abs() < 1e-10 && r < 1e-12);
    }

    #[test]
    fn too_few_points_is_rank_deficient() {
        let pts = [(0.0, 0.0), (0.5, 0.3), (0.5, 0.31), (1.0, 1.0)];
        assert!(matches!(fit_scalar_cubic(&pts, 1.0), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn scalar_eval_examples() {
        let m = ScalarCubicModel::new([0.42, 0.33, 0.25], 1.29e-2);
        assert_eq!(m.eval(0.0), 0.0);
        assert!((m.eval(1.0) - 1.29e-2).abs() < 1e-17);
        let sq = ScalarCubicModel::new([0.60, -0.27, 0.67], 1.0);
        assert!((sq.eval(1.0) - 1.0).abs() < 1e-15);
        assert!(m.check_positive().is_ok());
        assert!(ScalarCubicModel::new([-0.1, 0.0, 1.0], 1.0).check_positive().is_err());
    }

    #[test]
    fn log_euclidean_endpoints_and_constant() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.5]);
        let at1 = log_euclidean_interp(&a, &b, 0.2, 0.6, 0.2).unwrap();
        assert!((at1 - &a).amax() < 1e-13);
        let at2 = log_euclidean_interp(&a, &b, 0.2, 0.6, 0.6).unwrap();
        assert!((at2 - &b).amax() < 1e-13);
        let c = log_euclidean_interp(&a, &a, 0.2, 0.6, 0.45).unwrap();
        assert!((c - &a).amax() < 1e-13);
    }

    #[test]
    fn commuting_midpoint_is_geometric_mean() {
        let (a, b) = (0.3, 2.7);
        let m = log_euclidean_interp(&diag(&[a, a]), &diag(&[b, b]), 0.1, 0.5, 0.3).unwrap();
        assert!((m - diag(&[1.0, 1.0]) * (a * b).sqrt()).amax() < 1e-10);
    }

    #[test]
    fn non_spd_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(log_euclidean_interp(&bad, &diag(&[1.0, 1.0]), 0.0, 1.0, 0.5).is_err());
        assert!(TensorInterpolant::new(2, vec![(0.5, bad)], 1.0).is_err());
    }

    #[test]
    fn interpolant_segments() {
        let d1 = diag(&[0.4, 0.2]);
        let d2 = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.6]);
        let t = TensorInterpolant::new(2, vec![(0.5, d1.clone()), (0.9, d2.clone())], 1.0).unwrap();
        assert!((t.ratio(0.25) - &d1 * 0.5).amax() < 1e-15);
        assert_eq!(t.ratio(0.5), d1);
        assert_eq!(t.ratio(0.9), d2);
        assert_eq!(t.ratio(0.0), DMatrix::zeros(2, 2));
        assert!(t.check_spd_grid().is_ok());
        let (lo1, hi1) = eigen_range(&d1);
        let (lo2, hi2) = eigen_range(&d2);
        let (lo, hi) = eigen_range(&t.ratio(0.7));
        assert!(lo >= lo1.min(lo2) - 1e-12 && hi <= hi1.max(hi2) + 1e-12);
    }

    #[test]
    fn model_file_round_trip() {
        let s = DiffusivityModel::scalar([0.42, 0.33, 0.25], 1.29e-2);
        assert_eq!(DiffusivityModel::from_toml_str(&s.to_toml_string()).unwrap(), s);
        let t = DiffusivityModel::Tensor(
            TensorInterpolant::new(2, vec![(0.5, DMatrix::from_row_slice(2, 2, &[0.4, 0.05, 0.05, 0.3]))], 2.0)
                .unwrap(),
        );
        assert_eq!(DiffusivityModel::from_toml_str(&t.to_toml_string()).unwrap(), t);
        assert!(DiffusivityModel::from_toml_str("kind = \"scalar\"\nd_ref = 1.0\ncoefficients = [1, 0, 0]\nextra = 1\n")
            .is_err());
    }

    fn rotation(theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }

    fn spd(l1: f64, l2: f64, theta: f64) -> DMatrix<f64> {
        let q = rotation(theta);
        &q * diag(&[l1, l2]) * q.transpose()
    }

    proptest! {
        #[test]
        fn interp_commutes_with_rotation(
            a1 in 0.05f64..3.0, a2 in 0.05f64..3.0, ta in 0.0f64..3.2,
            b1 in 0.05f64..3.0, b2 in 0.05f64..3.0, tb in 0.0f64..3.2,
            q in 0.0f64..6.3, w in 0.0f64..1.0,
        ) {
            let d1 = spd(a1, a2, ta);
            let d2 = spd(b1, b2, tb);
            let r = rotation(q);
            let lhs = log_euclidean_interp(&(&r * &d1 * r.transpose()), &(&r * &d2 * r.transpose()), 0.0, 1.0, w).unwrap();
            let rhs = &r * log_euclidean_interp(&d1, &d2, 0.0, 1.0, w).unwrap() * r.transpose();
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }

        #[test]
        fn scalar_fit_scales_with_data(
            c1 in -1.0f64..2.0, c2 in -1.0f64..2.0, c3 in -1.0f64..2.0,
            noise in proptest::collection::vec(-0.01f64..0.01, 6),
            scale in 0.01f64..100.0,
        ) {
            let xs = [0.1, 0.3, 0.45, 0.6, 0.8, 0.97];
            let pts: Vec<(f64, f64)> = xs.iter().zip(&noise)
                .map(|(&x, e)| (x, c1 * x + c2 * x * x + c3 * x * x * x + e)).collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, scale * y)).collect();
            let f1 = fit_scalar_cubic(&pts, 1.0).unwrap();
            let f2 = fit_scalar_cubic(&scaled, 1.0).unwrap();
            for (a, b) in f1.model.coeffs().iter().zip(f2.model.coeffs()) {
                prop_assert!((scale * a - b).abs() < 1e-9 * scale.max(1.0) * (1.0 + a.abs()));
            }
            let rescaled = ScalarCubicModel::new(f2.model.coeffs().map(|c| c / scale), scale);
            for &x in &xs {
                prop_assert!((rescaled.eval(x) - f2.model.ratio(x)).abs() < 1e-9 * scale);
            }
        }
    }
}
