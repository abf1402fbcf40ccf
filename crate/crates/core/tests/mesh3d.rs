//! Tetrahedral cells entering through the mesh file format.

use mmpinv::fem::P1Space;
use mmpinv::homog::{maxwell_garnett, CellProblem};
use mmpinv::invasion::{initial_preset, ModelParams, Preset, Simulator};
use mmpinv::mesh::{generate_voxel_cell, import_mesh, volume_fraction, FacetTag, Mesh};
use mmpinv::verify::{check_bounds, dilute_limit_check};

/// Unit cube minus a staircase sphere of radius 3/25 at the centre, exported
/// and re-imported.
fn sphere_cell(n: usize) -> Mesh {
    let m = generate_voxel_cell([0.0; 3], [1.0; 3], [n; 3], |p| {
        p.iter().map(|x| (x - 0.5) * (x - 0.5)).sum::<f64>() >= 0.12 * 0.12
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sphere.mesh");
    m.write_ascii(&path).unwrap();
    let back = import_mesh(&path).unwrap();
    assert_eq!(back.elements().collect::<Vec<_>>(), m.elements().collect::<Vec<_>>());
    back
}

#[test]
fn imported_sphere_cell_volume_fraction() {
    let m = sphere_cell(24);
    let phi = volume_fraction(&m, 1.0).unwrap();
    assert!((phi - 0.993).abs() <= 0.003, "{phi}");
    assert!((0..m.n_facets()).any(|f| m.facet_tag(f) == FacetTag::Hole));
}

#[test]
fn imported_sphere_cell_dilute_limit() {
    let t = CellProblem::new(sphere_cell(24)).unwrap().effective_tensor(1.0).unwrap();
    let theta = 1.0 - t.volume_fraction;
    let r = dilute_limit_check(&t, theta, 3).unwrap();
    assert!(r.passed, "{r}");
    assert!(t.asymmetry() < 1e-10);
    assert!(t.diagonal_mean_ratio() <= maxwell_garnett(theta, 3).unwrap() + 1e-3);
}

#[test]
fn cube_hole_is_isotropic() {
    let m = generate_voxel_cell([0.0; 3], [1.0; 3], [10; 3], |p| p.iter().any(|x| (x - 0.5).abs() > 0.2)).unwrap();
    let t = CellProblem::new(m).unwrap().effective_tensor(2.0).unwrap();
    assert!((t.volume_fraction - (1.0 - 0.064)).abs() < 1e-12);
    let d = t.tensor.diagonal();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(t.tensor[(i, j)].abs() <= 1e-2 * d[i], "{}", t.tensor);
            }
        }
        assert!((d[i] / d[0] - 1.0).abs() < 1e-2, "{}", t.tensor);
    }
}

#[test]
fn ellipse3d_preset_respects_bounds() {
    let space = P1Space::standard(mmpinv::mesh::generate_box([-1.0; 3], [1.0; 3], [8; 3]).unwrap());
    let init = initial_preset(Preset::Ellipse3d, &space).unwrap();
    let params = ModelParams::default();
    let sim = Simulator::new(space, params.clone(), 1e-2).unwrap();
    let mut reports = Vec::new();
    sim.run(init.clone(), 0.5, 10, |_, st| {
        reports.push(check_bounds(st, &init, &params));
        Ok(())
    })
    .unwrap();
    assert_eq!(reports.len(), 6);
    assert!(reports.iter().all(|r| r.passed));
}
