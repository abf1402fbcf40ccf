//! Homogenize-then-fit workflow shared by the command line and the tests.

use std::path::Path;

use nalgebra::DMatrix;

use crate::diffusivity::{fit_scalar_cubic, ScalarFit, TensorInterpolant};
use crate::error::{Error, Result};
use crate::fem::P1Space;
use crate::homog::CellProblem;
use crate::invasion::{RunOutput, Simulator};
use crate::io::{write_metrics_csv, write_vtu, HomogRow, SimulationConfig};
use crate::mesh::{generate_perforated_cell, CellFamily};

/// Default mesh size relative to the cell side, about 1e4 vertices on the
/// least perforated members.
pub const DEFAULT_H_REL: f64 = 0.01;

/// Meshes and homogenizes one family member. `n = 0` is the inclusion-free
/// cell.
pub fn homogenize_member(family: CellFamily, n: usize, h_rel: f64, d_bar: f64) -> Result<HomogRow> {
    let mesh = generate_perforated_cell(&family.spec(n, h_rel))?;
    let t = CellProblem::new(mesh)?.effective_tensor(d_bar)?;
    Ok(HomogRow::new(family.name(), n, &t))
}

pub fn homogenize_family(family: CellFamily, h_rel: f64, d_bar: f64) -> Result<Vec<HomogRow>> {
    family.members().map(|n| homogenize_member(family, n, h_rel, d_bar)).collect()
}

fn has_unit_row(rows: &[HomogRow]) -> bool {
    rows.iter().any(|r| (r.phi - 1.0).abs() < 1e-12)
}

/// Least-squares cubic through `(0, 0)` and the rows' mean diagonal ratios.
/// With `unit_anchor`, the inclusion-free value `(1, 1)` is added unless a
/// row already sits at `φ = 1`.
pub fn fit_rows_scalar(rows: &[HomogRow], d_ref: f64, unit_anchor: bool) -> Result<ScalarFit> {
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(rows.iter().map(|r| (r.phi, r.diagonal_mean_ratio())));
    if unit_anchor && !has_unit_row(rows) {
        pts.push((1.0, 1.0));
    }
    fit_scalar_cubic(&pts, d_ref)
}

/// Log-Euclidean interpolant with one knot per row (the symmetric part of
/// `D / D̄`), plus `(1, I)` under `unit_anchor`.
pub fn fit_rows_tensor(rows: &[HomogRow], d_ref: f64, unit_anchor: bool) -> Result<TensorInterpolant> {
    let dim = rows.first().ok_or_else(|| Error::InvalidArgument("no homogenization rows".into()))?.dim;
    if rows.iter().any(|r| r.dim != dim) {
        return Err(Error::InvalidArgument("rows mix 2d and 3d cells".into()));
    }
    let mut knots: Vec<(f64, DMatrix<f64>)> = rows
        .iter()
        .map(|r| {
            let m = r.ratio();
            (r.phi, (&m + m.transpose()) * 0.5)
        })
        .collect();
    if unit_anchor && !has_unit_row(rows) {
        knots.push((1.0, DMatrix::identity(dim, dim)));
    }
    TensorInterpolant::new(dim, knots, d_ref)
}

/// Runs a configured simulation. With `out_dir`, writes
/// `snapshot_<step>.vtk` at the configured steps and `metrics.csv`.
pub fn run_config(cfg: &SimulationConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    let space = P1Space::standard(cfg.build_mesh()?);
    let initial = cfg.initial_state(&space)?;
    let sim = Simulator::new(space, cfg.model_params()?, cfg.tau)?.with_mode(cfg.mode.into());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let wanted = cfg.snapshot_steps();
    let mesh = sim.space().mesh().clone();
    let out = sim.run(initial, cfg.t_end, 1, |k, st| {
        let Some(dir) = out_dir else { return Ok(()) };
        if wanted.binary_search(&k).is_err() {
            return Ok(());
        }
        let c_b = st.c_b();
        let fields: [(&str, &[f64]); 5] = [("phi", &st.phi), ("c_s", &st.c_s), ("w", &st.w), ("s", &st.s), ("c_b", &c_b)];
        write_vtu(&mesh, &fields, dir.join(format!("snapshot_{k:05}.vtk")))
    })?;
    if let Some(dir) = out_dir {
        write_metrics_csv(&out.metrics, dir.join("metrics.csv"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cell_row_is_identity() {
        let row = homogenize_member(CellFamily::Circles, 0, 0.1, 2.0).unwrap();
        assert_eq!(row.phi, 1.0);
        assert!((row.ratio() - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn anchor_is_not_duplicated() {
        let rows = [0.3, 0.6, 1.0].map(|phi| HomogRow {
            phi,
            d11: phi * phi,
            d22: phi * phi,
            dim: 2,
            d_bar: 1.0,
            ..HomogRow::new("t", 0, &crate::homog::EffectiveTensor {
                tensor: DMatrix::identity(2, 2),
                d_bar: 1.0,
                volume_fraction: 1.0,
                iterations: vec![],
            })
        });
        let fit = fit_rows_scalar(&rows, 1.0, true).unwrap();
        assert_eq!(fit.residuals.len(), 4);
        let c = fit.model.coeffs();
        assert!(c[0].abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12 && c[2].abs() < 1e-12);
        let t = fit_rows_tensor(&rows, 1.0, true).unwrap();
        assert_eq!(t.knots().count(), 3);
        assert_eq!(fit_rows_tensor(&rows[..2], 1.0, true).unwrap().knots().count(), 3);
    }
}
