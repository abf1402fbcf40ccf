//! Periodic cell problems and the homogenized diffusion tensor.
//!
//! For each axis `j` the corrector `w^j` solves
//! `∫ D̄ (∇w^j + e_j)·∇v = 0` for all periodic P1 test functions `v` on the
//! perforated cell, with zero mean over the fluid part. The effective tensor
//! is `D_ij = (1/|Y|) ∫_{Y_e} D̄ (δ_ij + ∂_i w^j)`, where `|Y|` is the measure
//! of the whole cell, so a solid-free cell gives `D̄ I` and the dilute limit
//! matches Maxwell-Garnett.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, ElementTensors, P1Space};
use crate::mesh::Mesh;
use crate::sparse::{cg_solve, CgOptions, SolveReport, SparseMatrix};

/// Relative CG tolerance for cell problems.
pub const CELL_TOL: f64 = 1e-12;

/// Effective tensor of one cell, in the units of `D̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTensor {
    pub tensor: DMatrix<f64>,
    pub d_bar: f64,
    pub volume_fraction: f64,
    /// CG iterations per axis.
    pub iterations: Vec<usize>,
}

impl EffectiveTensor {
    pub fn dim(&self) -> usize {
        self.tensor.nrows()
    }

    /// `D / D̄`.
    pub fn ratio(&self) -> DMatrix<f64> {
        &self.tensor / self.d_bar
    }

    /// Mean of the diagonal of `D / D̄`.
    pub fn diagonal_mean_ratio(&self) -> f64 {
        self.tensor.diagonal().mean() / self.d_bar
    }

    /// `max |D_ij - D_ji| / max |D_ij|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.tensor - self.tensor.transpose()).amax() / self.tensor.amax()
    }

    /// `(D + Dᵀ)/2`.
    pub fn symmetric_part(&self) -> DMatrix<f64> {
        (&self.tensor + self.tensor.transpose()) * 0.5
    }

    /// The tensor normalized by the fluid measure `|Y_e|` instead of `|Y|`.
    pub fn fluid_normalized(&self) -> DMatrix<f64> {
        &self.tensor / self.volume_fraction
    }
}

/// A perforated cell with its periodic P1 space and unit-coefficient
/// stiffness matrix, reused across axes.
#[derive(Debug, Clone)]
pub struct CellProblem {
    space: P1Space,
    stiffness: SparseMatrix,
    cell_measure: f64,
    fluid_measure: f64,
    tol: f64,
}

impl CellProblem {
    /// The cell is the bounding box of `mesh`.
    pub fn new(mesh: Mesh) -> Result<Self> {
        let cell_measure = mesh.bounding_box().measure();
        Self::with_cell_measure(mesh, cell_measure)
    }

    pub fn with_cell_measure(mesh: Mesh, cell_measure: f64) -> Result<Self> {
        if !(cell_measure > 0.0) {
            return Err(Error::InvalidArgument("cell measure must be positive".into()));
        }
        let fluid_measure = mesh.total_measure();
        let space = P1Space::periodic(mesh)?;
        let ne = space.mesh().n_elements();
        let stiffness = assemble_stiffness(&space, &ElementTensors::Isotropic(vec![1.0; ne]))?;
        Ok(CellProblem { space, stiffness, cell_measure, fluid_measure, tol: CELL_TOL })
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn space(&self) -> &P1Space {
        &self.space
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness
    }

    pub fn volume_fraction(&self) -> f64 {
        (self.fluid_measure / self.cell_measure).min(1.0)
    }

    /// `b_i = -∫ ∂_j ψ_i`, the right-hand side for a unit coefficient.
    pub fn load(&self, axis: usize) -> Vec<f64> {
        let s = &self.space;
        let mut b = vec![0.0; s.n_dofs()];
        for k in 0..s.mesh().n_elements() {
            let g = s.geometry(k);
            for (a, dof) in s.element_dofs(k).enumerate() {
                b[dof] -= g.measure * g.grads[a][axis];
            }
        }
        b
    }

    /// Corrector for `axis`, shifted to zero mean over the fluid domain.
    pub fn solve_corrector(&self, axis: usize) -> Result<(Vec<f64>, SolveReport)> {
        let d = self.space.dim();
        if axis >= d {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range for dimension {d}")));
        }
        let mut b = self.load(axis);
        // The load sums to zero element by element, so what remains is
        // roundoff; without inclusions the load itself is roundoff.
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        let scale: f64 = (0..self.space.mesh().n_elements())
            .map(|k| {
                let g = self.space.geometry(k);
                g.measure * g.grads.iter().map(|r| r[axis].abs()).sum::<f64>()
            })
            .sum();
        if b.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-13 * scale {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let opts = CgOptions { tol: self.tol, mean_free: true, ..Default::default() };
        let (mut w, report) = cg_solve(&self.stiffness, &b, opts, None)?;
        let mean = self.fluid_mean(&w);
        w.iter_mut().for_each(|x| *x -= mean);
        Ok((w, report))
    }

    /// `(1/|Y_e|) ∫ I_h w`.
    pub fn fluid_mean(&self, w: &[f64]) -> f64 {
        let s = &self.space;
        let total: f64 = (0..s.mesh().n_elements()).map(|k| s.geometry(k).measure * s.centroid_value(w, k)).sum();
        total / self.fluid_measure
    }

    /// Tensor from precomputed correctors, one per axis.
    pub fn tensor_from_correctors(&self, d_bar: f64, correctors: &[Vec<f64>]) -> DMatrix<f64> {
        let s = &self.space;
        let d = s.dim();
        let mut t = DMatrix::zeros(d, d);
        for k in 0..s.mesh().n_elements() {
            let g = s.geometry(k);
            let dofs: Vec<usize> = s.element_dofs(k).collect();
            for j in 0..d {
                for i in 0..d {
                    let grad: f64 = dofs.iter().enumerate().map(|(a, &dof)| correctors[j][dof] * g.grads[a][i]).sum();
                    let delta = if i == j { 1.0 } else { 0.0 };
                    t[(i, j)] += g.measure * (delta + grad);
                }
            }
        }
        t * (d_bar / self.cell_measure)
    }

    pub fn effective_tensor(&self, d_bar: f64) -> Result<EffectiveTensor> {
        if !(d_bar > 0.0) {
            return Err(Error::InvalidArgument(format!("base diffusivity must be positive, got {d_bar}")));
        }
        let d = self.space.dim();
        let mut correctors = Vec::with_capacity(d);
        let mut iterations = Vec::with_capacity(d);
        for j in 0..d {
            let (w, r) = self.solve_corrector(j)?;
            correctors.push(w);
            iterations.push(r.iterations);
        }
        Ok(EffectiveTensor {
            tensor: self.tensor_from_correctors(d_bar, &correctors),
            d_bar,
            volume_fraction: self.volume_fraction(),
            iterations,
        })
    }
}

/// Corrector `w^axis` on a perforated cell. `D̄` cancels from the cell
/// problem, so it is only validated.
pub fn solve_cell_problem(mesh: &Mesh, d_bar: f64, axis: usize) -> Result<Vec<f64>> {
    if !(d_bar > 0.0) {
        return Err(Error::InvalidArgument(format!("base diffusivity must be positive, got {d_bar}")));
    }
    Ok(CellProblem::new(mesh.clone())?.solve_corrector(axis)?.0)
}

pub fn effective_tensor(mesh: &Mesh, d_bar: f64) -> Result<EffectiveTensor> {
    CellProblem::new(mesh.clone())?.effective_tensor(d_bar)
}

/// Dilute-limit ratio `D_eff / D̄` for insulating inclusions occupying a
/// fraction `theta` (discs in 2d, balls in 3d).
pub fn maxwell_garnett(theta: f64, dim: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("inclusion fraction must lie in [0, 1), got {theta}")));
    }
    match dim {
        2 => Ok((1.0 - theta) / (1.0 + theta)),
        3 => Ok(2.0 * (1.0 - theta) / (2.0 + theta)),
        _ => Err(Error::InvalidArgument(format!("dimension must be 2 or 3, got {dim}"))),
    }
}
