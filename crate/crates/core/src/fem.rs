//! Continuous piecewise-linear finite elements on simplicial meshes.
//!
//! [`P1Space`] bundles a mesh, a vertex-to-dof map (identity or periodic) and
//! precomputed element geometry. Mass matrices are integrated exactly for P1
//! weights; stiffness matrices use element-constant gradients and
//! coefficients, so they are exact for element-constant tensors.

use nalgebra::{DMatrix, Matrix3};

use crate::diffusivity::DiffusivityModel;
use crate::error::{Error, Result};
use crate::mesh::{periodic_pairs, Mesh, PeriodicPairing};
use crate::sparse::SparseMatrix;

/// Vertex to degree-of-freedom map after periodic identification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DofMap {
    vertex_to_dof: Vec<usize>,
    n_dofs: usize,
}

impl DofMap {
    pub fn identity(n_vertices: usize) -> Self {
        DofMap { vertex_to_dof: (0..n_vertices).collect(), n_dofs: n_vertices }
    }

    /// Slaves share their master's dof; remaining vertices are numbered in
    /// vertex order.
    pub fn periodic(n_vertices: usize, pairing: &PeriodicPairing) -> Self {
        let mut master_of: Vec<Option<usize>> = vec![None; n_vertices];
        for p in &pairing.pairs {
            master_of[p.slave] = Some(p.master);
        }
        let mut vertex_to_dof = vec![usize::MAX; n_vertices];
        let mut n_dofs = 0;
        for v in 0..n_vertices {
            if master_of[v].is_none() {
                vertex_to_dof[v] = n_dofs;
                n_dofs += 1;
            }
        }
        for v in 0..n_vertices {
            if let Some(m) = master_of[v] {
                vertex_to_dof[v] = vertex_to_dof[m];
            }
        }
        DofMap { vertex_to_dof, n_dofs }
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn dof(&self, vertex: usize) -> usize {
        self.vertex_to_dof[vertex]
    }

    pub fn vertex_to_dof(&self) -> &[usize] {
        &self.vertex_to_dof
    }

    /// Expands a dof vector to one value per vertex.
    pub fn to_vertices(&self, field: &[f64]) -> Vec<f64> {
        self.vertex_to_dof.iter().map(|&d| field[d]).collect()
    }
}

/// Measure and barycentric-coordinate gradients of one simplex.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub measure: f64,
    pub grads: [[f64; 3]; 4],
}

fn element_geometry(mesh: &Mesh, k: usize) -> ElementGeometry {
    let el = mesh.element(k);
    let p = |i: usize| mesh.point(el[i]);
    let mut grads = [[0.0; 3]; 4];
    match mesh.dim() {
        2 => {
            let (a, b, c) = (p(0), p(1), p(2));
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            grads[1] = [(c[1] - a[1]) / det, -(c[0] - a[0]) / det, 0.0];
            grads[2] = [-(b[1] - a[1]) / det, (b[0] - a[0]) / det, 0.0];
        }
        _ => {
            let j = Matrix3::from_fn(|r, c| p(c + 1)[r] - p(0)[r]);
            let inv = j.try_inverse().expect("validated mesh has non-degenerate elements");
            for i in 0..3 {
                grads[i + 1] = [inv[(i, 0)], inv[(i, 1)], inv[(i, 2)]];
            }
        }
    }
    for a in 0..3 {
        grads[0][a] = -(1..=mesh.dim()).map(|i| grads[i][a]).sum::<f64>();
    }
    ElementGeometry { measure: mesh.signed_measure(k), grads }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// `∫_K Π λ_i^{α_i} / |K|` for barycentric monomials on a `d`-simplex.
fn barycentric_moment(d: usize, exponents: &[usize]) -> f64 {
    let total: usize = exponents.iter().sum();
    factorial(d) * exponents.iter().map(|&a| factorial(a)).product::<f64>() / factorial(d + total)
}

/// Per-element diffusion coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum ElementTensors {
    /// `c_K I` on each element.
    Isotropic(Vec<f64>),
    /// Full symmetric `dim x dim` tensor on each element.
    Full(Vec<DMatrix<f64>>),
}

impl ElementTensors {
    pub fn len(&self) -> usize {
        match self {
            ElementTensors::Isotropic(v) => v.len(),
            ElementTensors::Full(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `k` as a dense matrix.
    pub fn tensor(&self, k: usize, dim: usize) -> DMatrix<f64> {
        match self {
            ElementTensors::Isotropic(v) => DMatrix::identity(dim, dim) * v[k],
            ElementTensors::Full(v) => v[k].clone(),
        }
    }
}

/// P1 space: mesh, dof map, element geometry and the shared sparsity pattern.
#[derive(Debug, Clone)]
pub struct P1Space {
    mesh: Mesh,
    dofs: DofMap,
    geometry: Vec<ElementGeometry>,
    pattern: SparseMatrix,
}

impl P1Space {
    pub fn new(mesh: Mesh, dofs: DofMap) -> Result<Self> {
        if dofs.vertex_to_dof().len() != mesh.n_vertices() {
            return Err(Error::InvalidArgument("dof map does not match mesh vertex count".into()));
        }
        let geometry = (0..mesh.n_elements()).map(|k| element_geometry(&mesh, k)).collect();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); dofs.n_dofs()];
        for el in mesh.elements() {
            for &a in el {
                for &b in el {
                    rows[dofs.dof(a)].push(dofs.dof(b));
                }
            }
        }
        let pattern = SparseMatrix::from_pattern(rows);
        Ok(P1Space { mesh, dofs, geometry, pattern })
    }

    /// One dof per vertex.
    pub fn standard(mesh: Mesh) -> Self {
        let dofs = DofMap::identity(mesh.n_vertices());
        Self::new(mesh, dofs).expect("identity dof map matches mesh")
    }

    /// Opposite faces of the mesh bounding box identified.
    pub fn periodic(mesh: Mesh) -> Result<Self> {
        let pairing = periodic_pairs(&mesh)?;
        let dofs = DofMap::periodic(mesh.n_vertices(), &pairing);
        Self::new(mesh, dofs)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs()
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn geometry(&self, k: usize) -> &ElementGeometry {
        &self.geometry[k]
    }

    pub fn element_dofs(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.mesh.element(k).iter().map(|&v| self.dofs.dof(v))
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(&[f64; 3]) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs()];
        for v in 0..self.mesh.n_vertices() {
            out[self.dofs.dof(v)] = f(self.mesh.point(v));
        }
        out
    }

    /// Value of the P1 interpolant of `field` at the centroid of element `k`.
    pub fn centroid_value(&self, field: &[f64], k: usize) -> f64 {
        let n = self.dim() + 1;
        self.element_dofs(k).map(|d| field[d]).sum::<f64>() / n as f64
    }

    fn check_len(&self, field: &[f64], what: &str) -> Result<()> {
        if field.len() != self.n_dofs() {
            return Err(Error::InvalidArgument(format!(
                "{what} has length {} but the space has {} dofs",
                field.len(),
                self.n_dofs()
            )));
        }
        Ok(())
    }
}

/// Mass matrix `∫ I_h(weight) ψ_i ψ_j`, exact for P1 weights. `None` means
/// unit weight.
pub fn assemble_mass(space: &P1Space, weight: Option<&[f64]>) -> Result<SparseMatrix> {
    let d = space.dim();
    let n = d + 1;
    if let Some(w) = weight {
        space.check_len(w, "mass weight")?;
        if let Some(i) = w.iter().position(|&x| x < 0.0 || x.is_nan()) {
            return Err(Error::InvalidArgument(format!("mass weight is negative at dof {i} ({})", w[i])));
        }
    }
    let pair = [barycentric_moment(d, &[2]), barycentric_moment(d, &[1, 1])];
    let triple = [
        barycentric_moment(d, &[3]),
        barycentric_moment(d, &[2, 1]),
        barycentric_moment(d, &[1, 1, 1]),
    ];
    let mut m = space.pattern.clone();
    let mut dofs = [0usize; 4];
    for k in 0..space.mesh.n_elements() {
        for (slot, dof) in dofs.iter_mut().zip(space.element_dofs(k)) {
            *slot = dof;
        }
        let vol = space.geometry[k].measure;
        for a in 0..n {
            for b in 0..n {
                let v = match weight {
                    None => pair[usize::from(a != b)],
                    Some(w) => (0..n)
                        .map(|c| {
                            let coef = if a == b && b == c {
                                triple[0]
                            } else if a == b || b == c || a == c {
                                triple[1]
                            } else {
                                triple[2]
                            };
                            coef * w[dofs[c]]
                        })
                        .sum(),
                };
                m.add_to(dofs[a], dofs[b], vol * v);
            }
        }
    }
    Ok(m)
}

/// Stiffness matrix `Σ_K |K| ∇ψ_i · D_K ∇ψ_j`.
pub fn assemble_stiffness(space: &P1Space, tensors: &ElementTensors) -> Result<SparseMatrix> {
    let d = space.dim();
    let n = d + 1;
    if tensors.len() != space.mesh.n_elements() {
        return Err(Error::InvalidArgument(format!(
            "{} element tensors for {} elements",
            tensors.len(),
            space.mesh.n_elements()
        )));
    }
    if let ElementTensors::Full(ts) = tensors {
        for (k, t) in ts.iter().enumerate() {
            if t.nrows() != d || t.ncols() != d {
                return Err(Error::InvalidArgument(format!("element {k} tensor is not {d}x{d}")));
            }
            let scale = t.amax().max(f64::MIN_POSITIVE);
            if (t - t.transpose()).amax() > 1e-12 * scale {
                return Err(Error::NonSymmetricTensor(k));
            }
        }
    }
    let mut s = space.pattern.clone();
    let mut dofs = [0usize; 4];
    for k in 0..space.mesh.n_elements() {
        for (slot, dof) in dofs.iter_mut().zip(space.element_dofs(k)) {
            *slot = dof;
        }
        let g = &space.geometry[k];
        // D ∇λ_b
        let mut dg = [[0.0; 3]; 4];
        match tensors {
            ElementTensors::Isotropic(c) => {
                for b in 0..n {
                    for r in 0..d {
                        dg[b][r] = c[k] * g.grads[b][r];
                    }
                }
            }
            ElementTensors::Full(ts) => {
                let t = &ts[k];
                for b in 0..n {
                    for r in 0..d {
                        dg[b][r] = (0..d).map(|c| t[(r, c)] * g.grads[b][c]).sum();
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                let v: f64 = (0..d).map(|r| g.grads[a][r] * dg[b][r]).sum();
                s.add_to(dofs[a], dofs[b], g.measure * v);
            }
        }
    }
    Ok(s)
}

/// Diffusion coefficient on each element: the model evaluated at the
/// centroid value of the P1 interpolant of `phi`, clipped to `[0, 1]`.
pub fn tensor_field_from_phi(space: &P1Space, phi: &[f64], model: &DiffusivityModel) -> Result<ElementTensors> {
    space.check_len(phi, "phi")?;
    let ne = space.mesh.n_elements();
    let at = |k: usize| space.centroid_value(phi, k).clamp(0.0, 1.0);
    match model {
        DiffusivityModel::Scalar(m) => Ok(ElementTensors::Isotropic((0..ne).map(|k| m.eval(at(k))).collect())),
        DiffusivityModel::Tensor(t) => {
            if t.dim() != space.dim() {
                return Err(Error::InvalidArgument(format!(
                    "{}d tensor model on a {}d mesh",
                    t.dim(),
                    space.dim()
                )));
            }
            Ok(ElementTensors::Full((0..ne).map(|k| t.eval(at(k))).collect()))
        }
    }
}

/// Load vector of a nodally interpolated integrand: `M f`.
pub fn reaction_load(mass: &SparseMatrix, integrand: &[f64]) -> Vec<f64> {
    mass.mul_vec(integrand)
}

pub fn assemble_reaction_load(space: &P1Space, integrand: &[f64]) -> Result<Vec<f64>> {
    space.check_len(integrand, "integrand")?;
    let m = assemble_mass(space, None)?;
    Ok(reaction_load(&m, integrand))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusivity::ScalarCubicModel;
    use crate::mesh::generate_rectangle;
    use crate::sparse::{cg_solve, CgOptions};

    fn unit_triangle() -> P1Space {
        let mesh = Mesh::new(2, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![0, 1, 2], vec![], vec![])
            .unwrap();
        P1Space::standard(mesh)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn moments_match_closed_forms() {
        assert!(close(barycentric_moment(2, &[2]), 1.0 / 6.0, 1e-15));
        assert!(close(barycentric_moment(2, &[1, 1]), 1.0 / 12.0, 1e-15));
        assert!(close(barycentric_moment(2, &[1, 1, 1]), 1.0 / 60.0, 1e-15));
        assert!(close(barycentric_moment(3, &[3]), 1.0 / 20.0, 1e-15));
        assert!(close(barycentric_moment(3, &[1, 1]), 1.0 / 20.0, 1e-15));
    }

    #[test]
    fn unit_triangle_mass() {
        let s = unit_triangle();
        let m = assemble_mass(&s, None).unwrap();
        let area = 0.5;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { area / 6.0 } else { area / 12.0 };
                assert!(close(m.get(i, j), want, 1e-15));
            }
        }
    }

    #[test]
    fn mass_entries_sum_to_area_and_scale_with_weight() {
        let mesh = generate_rectangle([0.0, 0.0], [2.0, 1.0], 5, 3).unwrap();
        let s = P1Space::standard(mesh);
        let m = assemble_mass(&s, None).unwrap();
        assert!(close(m.values().iter().sum::<f64>(), 2.0, 1e-13));
        let two = vec![2.0; s.n_dofs()];
        let m2 = assemble_mass(&s, Some(&two)).unwrap();
        for (a, b) in m2.values().iter().zip(m.values()) {
            assert!(close(*a, 2.0 * b, 1e-15));
        }
        assert!(m.asymmetry() <= 1e-14);
    }

    #[test]
    fn weighted_mass_is_exact_for_linear_weight() {
        // ∫_T x ψ_0 ψ_0 on the unit triangle, with ψ_0 = 1 - x - y:
        // ∫∫ x (1-x-y)^2 = 1/60
        let s = unit_triangle();
        let w = s.interpolate(|p| p[0]);
        let m = assemble_mass(&s, Some(&w)).unwrap();
        assert!(close(m.get(0, 0), 1.0 / 60.0, 1e-15));
    }

    #[test]
    fn negative_weight_rejected() {
        let s = unit_triangle();
        assert!(assemble_mass(&s, Some(&[1.0, -0.1, 1.0])).is_err());
    }

    #[test]
    fn unit_triangle_stiffness() {
        let s = unit_triangle();
        let k = assemble_stiffness(&s, &ElementTensors::Isotropic(vec![1.0])).unwrap();
        let want = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(k.get(i, j), want[i][j], 1e-15));
            }
        }
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_scale() {
        let mesh = generate_rectangle([0.0, 0.0], [1.0, 1.0], 4, 4).unwrap();
        let s = P1Space::standard(mesh);
        let ne = s.mesh().n_elements();
        let k1 = assemble_stiffness(&s, &ElementTensors::Isotropic(vec![1.0; ne])).unwrap();
        let two = ElementTensors::Full(vec![DMatrix::identity(2, 2) * 2.0; ne]);
        let k2 = assemble_stiffness(&s, &two).unwrap();
        for i in 0..s.n_dofs() {
            assert!(k1.row(i).map(|(_, v)| v).sum::<f64>().abs() < 1e-14);
        }
        for (a, b) in k2.values().iter().zip(k1.values()) {
            assert!(close(*a, 2.0 * b, 1e-14));
        }
        assert!(k1.asymmetry() <= 1e-14);
    }

    #[test]
    fn non_symmetric_tensor_rejected() {
        let s = unit_triangle();
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            assemble_stiffness(&s, &ElementTensors::Full(vec![t])),
            Err(Error::NonSymmetricTensor(0))
        ));
    }

    #[test]
    fn periodic_stiffness_has_constant_kernel_and_is_psd() {
        let mesh = generate_rectangle([0.0, 0.0], [1.0, 1.0], 6, 6).unwrap();
        let s = P1Space::periodic(mesh).unwrap();
        assert_eq!(s.n_dofs(), 36);
        let ne = s.mesh().n_elements();
        let k = assemble_stiffness(&s, &ElementTensors::Isotropic(vec![1.0; ne])).unwrap();
        let ones = vec![1.0; s.n_dofs()];
        assert!(k.mul_vec(&ones).iter().all(|v| v.abs() < 1e-13));
        for seed in 0..20 {
            let x: Vec<f64> = (0..s.n_dofs()).map(|i| ((i * 7 + seed * 13) as f64).sin()).collect();
            let q: f64 = x.iter().zip(k.mul_vec(&x)).map(|(a, b)| a * b).sum();
            assert!(q >= -1e-12);
        }
    }

    #[test]
    fn patch_test_reproduces_linear_functions() {
        let mesh = generate_rectangle([0.0, 0.0], [1.0, 1.0], 5, 4).unwrap();
        let s = P1Space::standard(mesh);
        let ne = s.mesh().n_elements();
        let k = assemble_stiffness(&s, &ElementTensors::Isotropic(vec![1.0; ne])).unwrap();
        let exact = s.interpolate(|p| 0.3 + 1.7 * p[0] - 0.4 * p[1]);
        let bb = s.mesh().bounding_box();
        let on_boundary: Vec<bool> = s
            .mesh()
            .points()
            .iter()
            .map(|p| (0..2).any(|a| p[a] == bb.min[a] || p[a] == bb.max[a]))
            .collect();
        // pin boundary values by replacing their rows with identity rows
        let mut trip = Vec::new();
        let mut b = vec![0.0; s.n_dofs()];
        for i in 0..s.n_dofs() {
            if on_boundary[i] {
                trip.push((i, i, 1.0));
                b[i] = exact[i];
                continue;
            }
            for (j, v) in k.row(i) {
                if on_boundary[j] {
                    b[i] -= v * exact[j];
                } else {
                    trip.push((i, j, v));
                }
            }
        }
        let a = SparseMatrix::from_triplets(s.n_dofs(), &trip).unwrap();
        let (u, _) = cg_solve(&a, &b, CgOptions { tol: 1e-14, ..Default::default() }, None).unwrap();
        for (ui, ei) in u.iter().zip(&exact) {
            assert!(close(*ui, *ei, 1e-10));
        }
    }

    #[test]
    fn tensor_from_phi_uses_centroid_values() {
        let s = unit_triangle();
        let model = DiffusivityModel::Scalar(ScalarCubicModel::new([0.42, 0.33, 0.25], 1.29e-2));
        let ones = ElementTensors::Isotropic(vec![1.29e-2]);
        let t = tensor_field_from_phi(&s, &[1.0; 3], &model).unwrap();
        match (&t, &ones) {
            (ElementTensors::Isotropic(a), ElementTensors::Isotropic(b)) => assert!(close(a[0], b[0], 1e-15)),
            _ => unreachable!(),
        }
        let t0 = tensor_field_from_phi(&s, &[0.0; 3], &model).unwrap();
        assert_eq!(t0, ElementTensors::Isotropic(vec![0.0]));
        let lin = tensor_field_from_phi(&s, &[0.0, 0.3, 0.9], &model).unwrap();
        let mean = 0.4;
        let want = 1.29e-2 * (0.42 * mean + 0.33 * mean * mean + 0.25 * mean * mean * mean);
        assert!(close(lin.tensor(0, 2)[(0, 0)], want, 1e-16));
    }

    #[test]
    fn reaction_load_examples() {
        let s = unit_triangle();
        assert_eq!(assemble_reaction_load(&s, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let lumped = assemble_reaction_load(&s, &[1.0; 3]).unwrap();
        assert!(close(lumped.iter().sum::<f64>(), 0.5, 1e-15));
        assert!(lumped.iter().all(|v| close(*v, 0.5 / 3.0, 1e-15)));
        let hat = assemble_reaction_load(&s, &[0.0, 1.0, 0.0]).unwrap();
        assert!(close(hat[0], 0.5 / 12.0, 1e-15));
        assert!(close(hat[1], 0.5 / 6.0, 1e-15));
        assert!(close(hat[2], 0.5 / 12.0, 1e-15));
    }

    #[test]
    fn periodic_dofs_share_values() {
        let mesh = generate_rectangle([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        let s = P1Space::periodic(mesh).unwrap();
        assert_eq!(s.n_dofs(), 4);
        let d = s.dofs();
        assert_eq!(d.dof(0), d.dof(8));
        assert_eq!(d.dof(3), d.dof(5));
        assert_eq!(d.dof(1), d.dof(7));
    }
}
