//! Simplicial meshes.
//!
//! Structured rectangle meshes, boundary-fitted meshes of perforated unit
//! cells, the plain ASCII mesh format, and periodic identification of
//! opposite-face vertices on an axis-aligned box.
//!
//! The ASCII format is line oriented:
//!
//! ```text
//! dim nv ne nf
//! x y [z]            (nv lines)
//! v0 v1 v2 [v3]      (ne lines, 0-based vertex indices)
//! v0 v1 [v2] tag     (nf lines, tag 0 = outer, 1 = hole)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored on input.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};

/// Boundary facet classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FacetTag {
    Outer,
    Hole,
}

impl FacetTag {
    pub fn code(self) -> u32 {
        match self {
            FacetTag::Outer => 0,
            FacetTag::Hole => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(FacetTag::Outer),
            1 => Some(FacetTag::Hole),
            _ => None,
        }
    }
}

/// Axis-aligned bounding box; unused trailing axes are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub dim: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn side(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn measure(&self) -> f64 {
        (0..self.dim).map(|a| self.side(a)).product()
    }

    pub fn max_side(&self) -> f64 {
        (0..self.dim).map(|a| self.side(a)).fold(0.0, f64::max)
    }
}

/// Unstructured simplicial mesh in 2d (triangles) or 3d (tetrahedra).
///
/// Immutable after construction; every constructor validates that elements
/// have positive signed measure and that each boundary facet is a face of
/// exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    points: Vec<[f64; 3]>,
    elements: Vec<usize>,
    facets: Vec<usize>,
    facet_tags: Vec<FacetTag>,
}

impl Mesh {
    /// Builds and validates a mesh. `elements` is flat with stride `dim + 1`,
    /// `facets` is flat with stride `dim`.
    pub fn new(
        dim: usize,
        points: Vec<[f64; 3]>,
        elements: Vec<usize>,
        facets: Vec<usize>,
        facet_tags: Vec<FacetTag>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("mesh dimension must be 2 or 3, got {dim}")));
        }
        if elements.len() % (dim + 1) != 0 || facets.len() % dim != 0 {
            return Err(Error::InvalidArgument("connectivity length is not a multiple of the simplex size".into()));
        }
        if facets.len() / dim != facet_tags.len() {
            return Err(Error::InvalidArgument("facet tag count does not match facet count".into()));
        }
        let nv = points.len();
        if let Some(&bad) = elements.iter().chain(facets.iter()).find(|&&v| v >= nv) {
            return Err(Error::InvalidArgument(format!("vertex index {bad} out of range ({nv} vertices)")));
        }
        let mesh = Mesh {
            dim,
            points,
            elements,
            facets,
            facet_tags,
        };
        mesh.check_measures()?;
        mesh.check_facets()?;
        Ok(mesh)
    }

    fn check_measures(&self) -> Result<()> {
        let scale = self.bounding_box().max_side().max(f64::MIN_POSITIVE);
        let tol = 1e-14 * scale.powi(self.dim as i32);
        for k in 0..self.n_elements() {
            let m = self.signed_measure(k);
            if !(m > tol) {
                return Err(Error::DegenerateElement { index: k, measure: m });
            }
        }
        Ok(())
    }

    fn check_facets(&self) -> Result<()> {
        if self.facet_tags.is_empty() {
            return Ok(());
        }
        let mut counts: HashMap<[usize; 3], usize> = HashMap::with_capacity(self.n_facets());
        for f in 0..self.n_facets() {
            counts.insert(face_key(self.facet(f)), 0);
        }
        let d = self.dim;
        for k in 0..self.n_elements() {
            let el = self.element(k);
            for skip in 0..=d {
                let face: Vec<usize> = (0..=d).filter(|&i| i != skip).map(|i| el[i]).collect();
                if let Some(c) = counts.get_mut(&face_key(&face)) {
                    *c += 1;
                }
            }
        }
        for f in 0..self.n_facets() {
            let c = counts[&face_key(self.facet(f))];
            if c != 1 {
                return Err(Error::BoundaryFacet { index: f, count: c });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.points.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len() / (self.dim + 1)
    }

    pub fn n_facets(&self) -> usize {
        self.facet_tags.len()
    }

    pub fn point(&self, i: usize) -> &[f64; 3] {
        &self.points[i]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn element(&self, k: usize) -> &[usize] {
        let s = self.dim + 1;
        &self.elements[k * s..(k + 1) * s]
    }

    pub fn elements(&self) -> impl Iterator<Item = &[usize]> {
        self.elements.chunks_exact(self.dim + 1)
    }

    pub fn facet(&self, f: usize) -> &[usize] {
        &self.facets[f * self.dim..(f + 1) * self.dim]
    }

    pub fn facet_tag(&self, f: usize) -> FacetTag {
        self.facet_tags[f]
    }

    pub fn signed_measure(&self, k: usize) -> f64 {
        let el = self.element(k);
        let p = |i: usize| self.points[el[i]];
        simplex_signed_measure(self.dim, &(0..=self.dim).map(p).collect::<Vec<_>>())
    }

    pub fn total_measure(&self) -> f64 {
        (0..self.n_elements()).map(|k| self.signed_measure(k)).sum()
    }

    pub fn centroid(&self, k: usize) -> [f64; 3] {
        let el = self.element(k);
        let mut c = [0.0; 3];
        for &v in el {
            for (a, ca) in c.iter_mut().enumerate() {
                *ca += self.points[v][a];
            }
        }
        c.map(|x| x / el.len() as f64)
    }

    pub fn bounding_box(&self) -> BoundingBox {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..self.dim {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        for a in self.dim..3 {
            min[a] = 0.0;
            max[a] = 0.0;
        }
        BoundingBox { dim: self.dim, min, max }
    }

    /// Serializes to the ASCII mesh format. Coordinates use the shortest
    /// representation that round-trips exactly.
    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {} {}", self.dim, self.n_vertices(), self.n_elements(), self.n_facets());
        for p in &self.points {
            let coords: Vec<String> = p[..self.dim].iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(s, "{}", coords.join(" "));
        }
        for el in self.elements() {
            let idx: Vec<String> = el.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", idx.join(" "));
        }
        for f in 0..self.n_facets() {
            let idx: Vec<String> = self.facet(f).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{} {}", idx.join(" "), self.facet_tags[f].code());
        }
        s
    }

    pub fn write_ascii(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ascii())?;
        Ok(())
    }
}

fn face_key(face: &[usize]) -> [usize; 3] {
    let mut key = [usize::MAX; 3];
    key[..face.len()].copy_from_slice(face);
    key.sort_unstable();
    key
}

/// Signed measure of a simplex given its `dim + 1` vertices.
pub fn simplex_signed_measure(dim: usize, p: &[[f64; 3]]) -> f64 {
    match dim {
        2 => 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1])),
        3 => {
            let a = sub(p[1], p[0]);
            let b = sub(p[2], p[0]);
            let c = sub(p[3], p[0]);
            (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0]))
                / 6.0
        }
        _ => unreachable!("dimension checked at construction"),
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Structured triangulation of `[min, max]` with `nx * ny` cells, each split
/// along one diagonal. Diagonals alternate in a checkerboard pattern so the
/// mesh is symmetric under reflection through the box centre lines.
pub fn generate_rectangle(min: [f64; 2], max: [f64; 2], nx: usize, ny: usize) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!("subdivision counts must be positive, got {nx}x{ny}")));
    }
    if !(max[0] > min[0] && max[1] > min[1]) {
        return Err(Error::InvalidArgument("rectangle bounds must satisfy min < max".into()));
    }
    let hx = (max[0] - min[0]) / nx as f64;
    let hy = (max[1] - min[1]) / ny as f64;
    let coord = |i: usize, n: usize, lo: f64, hi: f64, h: f64| if i == n { hi } else { lo + i as f64 * h };
    let mut points = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            points.push([coord(i, nx, min[0], max[0], hx), coord(j, ny, min[1], max[1], hy), 0.0]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(6 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            if (i + j) % 2 == 0 {
                elements.extend_from_slice(&[a, b, c, a, c, d]);
            } else {
                elements.extend_from_slice(&[a, b, d, b, c, d]);
            }
        }
    }
    let mut facets = Vec::new();
    for i in 0..nx {
        facets.extend_from_slice(&[id(i, 0), id(i + 1, 0)]);
        facets.extend_from_slice(&[id(i + 1, ny), id(i, ny)]);
    }
    for j in 0..ny {
        facets.extend_from_slice(&[id(nx, j), id(nx, j + 1)]);
        facets.extend_from_slice(&[id(0, j + 1), id(0, j)]);
    }
    let tags = vec![FacetTag::Outer; facets.len() / 2];
    Mesh::new(2, points, elements, facets, tags)
}

/// Structured tetrahedral mesh of the box `[min, max]` with `n` cells per
/// axis, six tetrahedra per cell sharing the cell's main diagonal.
pub fn generate_box(min: [f64; 3], max: [f64; 3], n: [usize; 3]) -> Result<Mesh> {
    generate_voxel_cell(min, max, n, |_| true)
}

/// Like [`generate_box`] but keeps only the cells whose centre satisfies
/// `solid`. Facets on the box boundary are tagged `Outer`, facets exposed by
/// removed cells `Hole`.
pub fn generate_voxel_cell(min: [f64; 3], max: [f64; 3], n: [usize; 3], solid: impl Fn(&[f64; 3]) -> bool) -> Result<Mesh> {
    if n.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument(format!("subdivision counts must be positive, got {n:?}")));
    }
    if (0..3).any(|a| !(max[a] > min[a])) {
        return Err(Error::InvalidArgument("box bounds must satisfy min < max".into()));
    }
    let h: Vec<f64> = (0..3).map(|a| (max[a] - min[a]) / n[a] as f64).collect();
    let coord = |a: usize, i: usize| if i == n[a] { max[a] } else { min[a] + i as f64 * h[a] };
    let id = |i: usize, j: usize, k: usize| (k * (n[1] + 1) + j) * (n[0] + 1) + i;
    let mut all_points = Vec::with_capacity((n[0] + 1) * (n[1] + 1) * (n[2] + 1));
    for k in 0..=n[2] {
        for j in 0..=n[1] {
            for i in 0..=n[0] {
                all_points.push([coord(0, i), coord(1, j), coord(2, k)]);
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut elements = Vec::new();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let centre = [min[0] + (i as f64 + 0.5) * h[0], min[1] + (j as f64 + 0.5) * h[1], min[2] + (k as f64 + 0.5) * h[2]];
                if !solid(&centre) {
                    continue;
                }
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = [id(c[0], c[1], c[2]), 0, 0, 0];
                    for (slot, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        tet[slot + 1] = id(c[0], c[1], c[2]);
                    }
                    let p: Vec<[f64; 3]> = tet.iter().map(|&v| all_points[v]).collect();
                    if simplex_signed_measure(3, &p) < 0.0 {
                        tet.swap(2, 3);
                    }
                    elements.extend_from_slice(&tet);
                }
            }
        }
    }
    if elements.is_empty() {
        return Err(Error::Unmeshable("no solid cells".into()));
    }
    // compact to the vertices in use
    let mut remap = vec![usize::MAX; all_points.len()];
    let mut points = Vec::new();
    for v in elements.iter_mut() {
        if remap[*v] == usize::MAX {
            remap[*v] = points.len();
            points.push(all_points[*v]);
        }
        *v = remap[*v];
    }
    let on_box = |p: &[f64; 3], a: usize| p[a] == min[a] || p[a] == max[a];
    let mut facets = Vec::new();
    let mut tags = Vec::new();
    for face in boundary_faces(3, &elements) {
        let outer = (0..3).any(|a| face.iter().all(|&v| on_box(&points[v], a) && points[v][a] == points[face[0]][a]));
        facets.extend_from_slice(&face);
        tags.push(if outer { FacetTag::Outer } else { FacetTag::Hole });
    }
    Mesh::new(3, points, elements, facets, tags)
}

/// Faces that belong to exactly one element.
fn boundary_faces(dim: usize, elements: &[usize]) -> Vec<Vec<usize>> {
    let mut count: HashMap<[usize; 3], (usize, Vec<usize>)> = HashMap::new();
    for el in elements.chunks(dim + 1) {
        for skip in 0..=dim {
            let face: Vec<usize> = (0..=dim).filter(|&i| i != skip).map(|i| el[i]).collect();
            let e = count.entry(face_key(&face)).or_insert((0, face));
            e.0 += 1;
        }
    }
    let mut out: Vec<Vec<usize>> = count.into_values().filter(|(c, _)| *c == 1).map(|(_, f)| f).collect();
    out.sort();
    out
}

/// Inclusion (cell) shape removed from each lattice site of a unit cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inclusion {
    Circle { radius: f64 },
    Square { half_side: f64 },
    /// `angle` is the orientation of the semi-major axis, in radians from the x axis.
    Ellipse { semi_major: f64, semi_minor: f64, angle: f64 },
}

impl Inclusion {
    pub fn area(&self) -> f64 {
        match *self {
            Inclusion::Circle { radius } => PI * radius * radius,
            Inclusion::Square { half_side } => 4.0 * half_side * half_side,
            Inclusion::Ellipse { semi_major, semi_minor, .. } => PI * semi_major * semi_minor,
        }
    }

    /// Half-widths of the axis-aligned bounding box.
    fn half_extent(&self) -> [f64; 2] {
        match *self {
            Inclusion::Circle { radius } => [radius, radius],
            Inclusion::Square { half_side } => [half_side, half_side],
            Inclusion::Ellipse { semi_major: a, semi_minor: b, angle } => {
                let (s, c) = angle.sin_cos();
                [(a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt()]
            }
        }
    }

    fn is_valid(&self) -> bool {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        match *self {
            Inclusion::Circle { radius } => pos(radius),
            Inclusion::Square { half_side } => pos(half_side),
            Inclusion::Ellipse { semi_major, semi_minor, angle } => {
                pos(semi_major) && pos(semi_minor) && angle.is_finite()
            }
        }
    }
}

/// Square unit cell `[origin, origin + cell_side]^2` with `n^2` identical
/// inclusions centred on a regular lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerforationSpec {
    pub origin: [f64; 2],
    pub cell_side: f64,
    pub lattice_count: usize,
    pub shape: Inclusion,
    pub target_edge_length: f64,
}

impl PerforationSpec {
    /// `[0, side]^2` with `n^2` circles of radius `radius`.
    pub fn circles(side: f64, n: usize, radius: f64, h: f64) -> Self {
        PerforationSpec {
            origin: [0.0, 0.0],
            cell_side: side,
            lattice_count: n,
            shape: Inclusion::Circle { radius },
            target_edge_length: h,
        }
    }

    /// `[-2, 2]^2` with a centred square hole of half-side `half_side`.
    pub fn square_hole(half_side: f64, h: f64) -> Self {
        PerforationSpec {
            origin: [-2.0, -2.0],
            cell_side: 4.0,
            lattice_count: 1,
            shape: Inclusion::Square { half_side },
            target_edge_length: h,
        }
    }

    /// `[0, 4]^2` with `n^2` ellipses of semi-axes 0.6 and 0.25 tilted by 45°.
    pub fn tilted_ellipses(n: usize, h: f64) -> Self {
        PerforationSpec {
            origin: [0.0, 0.0],
            cell_side: 4.0,
            lattice_count: n,
            shape: Inclusion::Ellipse { semi_major: 0.6, semi_minor: 0.25, angle: PI / 4.0 },
            target_edge_length: h,
        }
    }

    /// Inclusion-free part of the cell as fraction of the cell, for the exact
    /// (not polygonal) inclusion shape.
    pub fn analytic_volume_fraction(&self) -> f64 {
        let n2 = (self.lattice_count * self.lattice_count) as f64;
        1.0 - n2 * self.shape.area() / (self.cell_side * self.cell_side)
    }

    pub fn cell_measure(&self) -> f64 {
        self.cell_side * self.cell_side
    }

    fn site_pitch(&self) -> f64 {
        self.cell_side / self.lattice_count.max(1) as f64
    }

    fn site_centre(&self, i: usize, j: usize) -> [f64; 2] {
        let p = self.site_pitch();
        [self.origin[0] + (i as f64 + 0.5) * p, self.origin[1] + (j as f64 + 0.5) * p]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.target_edge_length;
        if !(self.cell_side.is_finite() && self.cell_side > 0.0) {
            return Err(Error::InvalidArgument("cell side must be positive".into()));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidArgument("target edge length must be positive".into()));
        }
        if !self.shape.is_valid() {
            return Err(Error::InvalidArgument(format!("invalid inclusion shape {:?}", self.shape)));
        }
        if self.lattice_count == 0 {
            return Ok(());
        }
        let half = 0.5 * self.site_pitch();
        let ext = self.shape.half_extent();
        let gap = half - ext[0].max(ext[1]);
        if gap <= 1e-9 * self.cell_side {
            return Err(Error::Unmeshable(format!(
                "inclusions overlap each other or the cell boundary (clearance {gap:e})"
            )));
        }
        let per_side = (self.cell_side / h).ceil();
        if per_side * per_side > 2.0e7 {
            return Err(Error::Unmeshable(format!("target edge length {h} yields too many vertices")));
        }
        Ok(())
    }
}

/// Named geometry families used for diffusivity fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellFamily {
    /// `[0, 1]^2` with `n^2` circles of radius 3/40, `n = 1..=6`.
    Circles,
    /// `[-2, 2]^2` minus `[-0.35n, 0.35n]^2`, `n = 1..=5`.
    Squares,
    /// `[0, 4]^2` with `n^2` tilted ellipses, `n = 1..=4`.
    Ellipses,
}

impl CellFamily {
    pub const ALL: [CellFamily; 3] = [CellFamily::Circles, CellFamily::Squares, CellFamily::Ellipses];

    pub fn name(self) -> &'static str {
        match self {
            CellFamily::Circles => "circles",
            CellFamily::Squares => "squares",
            CellFamily::Ellipses => "ellipses",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn members(self) -> std::ops::RangeInclusive<usize> {
        match self {
            CellFamily::Circles => 1..=6,
            CellFamily::Squares => 1..=5,
            CellFamily::Ellipses => 1..=4,
        }
    }

    /// Member `n`; `n = 0` is the inclusion-free cell of the same size.
    /// `h` is relative to the cell side.
    pub fn spec(self, n: usize, h_rel: f64) -> PerforationSpec {
        match self {
            CellFamily::Circles => PerforationSpec::circles(1.0, n, 0.075, h_rel),
            CellFamily::Squares => {
                let mut s = PerforationSpec::square_hole(0.35 * n.max(1) as f64, 4.0 * h_rel);
                s.lattice_count = usize::from(n > 0);
                s
            }
            CellFamily::Ellipses => PerforationSpec::tilted_ellipses(n, 4.0 * h_rel),
        }
    }
}

/// Closed polygon approximating one inclusion boundary, counter-clockwise.
#[derive(Debug, Clone)]
struct HolePolygon {
    vertices: Vec<[f64; 2]>,
    bbox: [f64; 4],
}

impl HolePolygon {
    fn new(vertices: Vec<[f64; 2]>) -> Self {
        let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for v in &vertices {
            bbox[0] = bbox[0].min(v[0]);
            bbox[1] = bbox[1].min(v[1]);
            bbox[2] = bbox[2].max(v[0]);
            bbox[3] = bbox[3].max(v[1]);
        }
        HolePolygon { vertices, bbox }
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        if p[0] < self.bbox[0] || p[0] > self.bbox[2] || p[1] < self.bbox[1] || p[1] > self.bbox[3] {
            return false;
        }
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// True when `p` is inside the polygon or within `clearance` of its boundary.
    fn too_close(&self, p: [f64; 2], clearance: f64) -> bool {
        if p[0] < self.bbox[0] - clearance
            || p[0] > self.bbox[2] + clearance
            || p[1] < self.bbox[1] - clearance
            || p[1] > self.bbox[3] + clearance
        {
            return false;
        }
        if self.contains(p) {
            return true;
        }
        let v = &self.vertices;
        let c2 = clearance * clearance;
        (0..v.len()).any(|i| segment_dist2(p, v[i], v[(i + 1) % v.len()]) < c2)
    }
}

fn polygon_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0] * d[0] + d[1] * d[1]
}

/// Boundary polygon of one inclusion centred at `c`, with `k` vertices
/// (ignored for squares, which are resolved per side).
fn inclusion_polygon(shape: Inclusion, c: [f64; 2], k: usize, h: f64) -> Vec<[f64; 2]> {
    match shape {
        Inclusion::Circle { radius } => (0..k)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / k as f64;
                [c[0] + radius * t.cos(), c[1] + radius * t.sin()]
            })
            .collect(),
        Inclusion::Square { half_side } => {
            let m = ((2.0 * half_side / h).ceil() as usize).max(1);
            let corners = [
                [c[0] - half_side, c[1] - half_side],
                [c[0] + half_side, c[1] - half_side],
                [c[0] + half_side, c[1] + half_side],
                [c[0] - half_side, c[1] + half_side],
            ];
            let mut out = Vec::with_capacity(4 * m);
            for s in 0..4 {
                let (a, b) = (corners[s], corners[(s + 1) % 4]);
                for i in 0..m {
                    let t = i as f64 / m as f64;
                    out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
            }
            out
        }
        Inclusion::Ellipse { semi_major, semi_minor, angle } => {
            // equispaced in arc length
            const SAMPLES: usize = 8192;
            let at = |t: f64| [semi_major * t.cos(), semi_minor * t.sin()];
            let mut cum = Vec::with_capacity(SAMPLES + 1);
            cum.push(0.0);
            let mut prev = at(0.0);
            for i in 1..=SAMPLES {
                let q = at(2.0 * PI * i as f64 / SAMPLES as f64);
                let last = *cum.last().unwrap();
                cum.push(last + ((q[0] - prev[0]).powi(2) + (q[1] - prev[1]).powi(2)).sqrt());
                prev = q;
            }
            let total = cum[SAMPLES];
            let (sa, ca) = angle.sin_cos();
            let mut seg = 0;
            (0..k)
                .map(|i| {
                    let s = total * i as f64 / k as f64;
                    while cum[seg + 1] < s {
                        seg += 1;
                    }
                    let frac = (s - cum[seg]) / (cum[seg + 1] - cum[seg]);
                    let t = 2.0 * PI * (seg as f64 + frac) / SAMPLES as f64;
                    let q = at(t);
                    [c[0] + ca * q[0] - sa * q[1], c[1] + sa * q[0] + ca * q[1]]
                })
                .collect()
        }
    }
}

/// Polygonal area deficit budget, as a fraction of the cell measure. Half the
/// 0.002 volume-fraction accuracy target.
const AREA_BUDGET: f64 = 1e-3;

fn hole_vertex_count(spec: &PerforationSpec) -> usize {
    let n2 = (spec.lattice_count * spec.lattice_count) as f64;
    let h = spec.target_edge_length;
    let budget = AREA_BUDGET * spec.cell_measure() / n2;
    match spec.shape {
        Inclusion::Square { .. } => 0,
        Inclusion::Circle { radius } => {
            let mut k = ((2.0 * PI * radius / h).ceil() as usize).max(8);
            while PI * radius * radius - 0.5 * k as f64 * radius * radius * (2.0 * PI / k as f64).sin() > budget {
                k += 1;
            }
            k
        }
        Inclusion::Ellipse { semi_major: a, semi_minor: b, .. } => {
            let perimeter = PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt());
            let mut k = ((perimeter / h).ceil() as usize).max(8);
            loop {
                let poly = inclusion_polygon(spec.shape, [0.0, 0.0], k, h);
                if spec.shape.area() - polygon_area(&poly) <= budget {
                    return k;
                }
                k = k + k / 8 + 1;
            }
        }
    }
}

/// Boundary-fitted triangulation of a perforated unit cell.
///
/// Nodes are placed equispaced on the outer boundary and on each inclusion
/// boundary; the interior is seeded with a triangular lattice of spacing
/// `target_edge_length`, thinned near boundaries. The point set is
/// triangulated with the boundary polygons as constraints, and triangles
/// whose centroid lies inside an inclusion are discarded.
pub fn generate_perforated_cell(spec: &PerforationSpec) -> Result<Mesh> {
    spec.validate()?;
    let h = spec.target_edge_length;
    let [x0, y0] = spec.origin;
    let side = spec.cell_side;
    let (x1, y1) = (x0 + side, y0 + side);
    let n = spec.lattice_count;

    let mut points: Vec<Point2<f64>> = Vec::new();
    let mut constraints: Vec<[usize; 2]> = Vec::new();
    let mut facet_tags: Vec<FacetTag> = Vec::new();

    // outer boundary, counter-clockwise; identical coordinates on opposite faces
    let m = ((side / h).ceil() as usize).max(1);
    let along = |i: usize, lo: f64, hi: f64| if i == m { hi } else { lo + side * i as f64 / m as f64 };
    let mut outer = Vec::with_capacity(4 * m);
    for i in 0..m {
        outer.push([along(i, x0, x1), y0]);
    }
    for i in 0..m {
        outer.push([x1, along(i, y0, y1)]);
    }
    for i in (1..=m).rev() {
        outer.push([along(i, x0, x1), y1]);
    }
    for i in (1..=m).rev() {
        outer.push([x0, along(i, y0, y1)]);
    }
    push_loop(&mut points, &mut constraints, &mut facet_tags, &outer, FacetTag::Outer);

    let k = if n > 0 { hole_vertex_count(spec) } else { 0 };
    let mut holes: Vec<HolePolygon> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let poly = inclusion_polygon(spec.shape, spec.site_centre(i, j), k, h);
            push_loop(&mut points, &mut constraints, &mut facet_tags, &poly, FacetTag::Hole);
            holes.push(HolePolygon::new(poly));
        }
    }

    let pitch = spec.site_pitch();
    let site_of = |x: f64, y: f64| -> (usize, usize) {
        let i = (((x - x0) / pitch).floor().max(0.0) as usize).min(n.saturating_sub(1));
        let j = (((y - y0) / pitch).floor().max(0.0) as usize).min(n.saturating_sub(1));
        (i, j)
    };
    let clearance = 0.6 * h;
    let near_hole = |x: f64, y: f64| -> bool {
        if n == 0 {
            return false;
        }
        let (si, sj) = site_of(x, y);
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                let (i, j) = (si as i64 + di, sj as i64 + dj);
                if i < 0 || j < 0 || i >= n as i64 || j >= n as i64 {
                    continue;
                }
                if holes[j as usize * n + i as usize].too_close([x, y], clearance) {
                    return true;
                }
            }
        }
        false
    };

    // interior seeds on a triangular lattice
    let dy = h * 3f64.sqrt() / 2.0;
    let rows = ((side - 2.0 * clearance) / dy).floor() as usize + 1;
    let row_offset = 0.5 * (side - (rows - 1) as f64 * dy);
    for r in 0..rows {
        let y = y0 + row_offset + r as f64 * dy;
        if y < y0 + clearance || y > y1 - clearance {
            continue;
        }
        let shift = if r % 2 == 0 { 0.0 } else { 0.5 * h };
        let cols = ((side - 2.0 * clearance - shift) / h).floor() as usize + 1;
        let col_offset = 0.5 * (side - shift - (cols - 1) as f64 * h) + shift;
        for c in 0..cols {
            let x = x0 + col_offset + c as f64 * h;
            if x < x0 + clearance || x > x1 - clearance || near_hole(x, y) {
                continue;
            }
            points.push(Point2::new(x, y));
        }
    }

    let n_points = points.len();
    let cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::bulk_load_cdt(points, constraints.clone())
        .map_err(|e| Error::Unmeshable(format!("triangulation failed: {e:?}")))?;
    if cdt.num_vertices() != n_points {
        return Err(Error::Unmeshable("duplicate vertices in point set".into()));
    }

    let coords: Vec<[f64; 3]> = cdt
        .vertices()
        .map(|v| {
            let p = v.position();
            [p.x, p.y, 0.0]
        })
        .collect();
    let mut elements = Vec::with_capacity(2 * cdt.num_inner_faces());
    for face in cdt.inner_faces() {
        let vs = face.vertices().map(|v| v.fix().index());
        let c = [
            (coords[vs[0]][0] + coords[vs[1]][0] + coords[vs[2]][0]) / 3.0,
            (coords[vs[0]][1] + coords[vs[1]][1] + coords[vs[2]][1]) / 3.0,
        ];
        if n > 0 {
            let (i, j) = site_of(c[0], c[1]);
            if holes[j * n + i].contains(c) {
                continue;
            }
        }
        let tri = [coords[vs[0]], coords[vs[1]], coords[vs[2]]];
        if simplex_signed_measure(2, &tri) > 0.0 {
            elements.extend_from_slice(&vs);
        } else {
            elements.extend_from_slice(&[vs[0], vs[2], vs[1]]);
        }
    }
    let facets: Vec<usize> = constraints.iter().flatten().copied().collect();
    Mesh::new(2, coords, elements, facets, facet_tags)
}

fn push_loop(
    points: &mut Vec<Point2<f64>>,
    constraints: &mut Vec<[usize; 2]>,
    tags: &mut Vec<FacetTag>,
    polygon: &[[f64; 2]],
    tag: FacetTag,
) {
    let start = points.len();
    let k = polygon.len();
    points.extend(polygon.iter().map(|p| Point2::new(p[0], p[1])));
    for i in 0..k {
        constraints.push([start + i, start + (i + 1) % k]);
        tags.push(tag);
    }
}

/// Measure of the meshed region relative to `cell_measure`.
pub fn volume_fraction(mesh: &Mesh, cell_measure: f64) -> Result<f64> {
    if !(cell_measure > 0.0) {
        return Err(Error::InvalidArgument("cell measure must be positive".into()));
    }
    let phi = mesh.total_measure() / cell_measure;
    if phi > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!("mesh measure exceeds the cell measure (ratio {phi})")));
    }
    // summation rounding can push a full cell slightly above one
    Ok(phi.min(1.0))
}

/// One identification of a vertex on a maximum face with the orbit
/// representative (`master`), which lies on minimum faces only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodicPair {
    pub master: usize,
    pub slave: usize,
}

/// Identification of opposite-face boundary vertices of an axis-aligned box.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeriodicPairing {
    pub pairs: Vec<PeriodicPair>,
}

impl PeriodicPairing {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn find(parent: &mut [usize], mut v: usize) -> usize {
    while parent[v] != v {
        parent[v] = parent[parent[v]];
        v = parent[v];
    }
    v
}

/// Pairs every vertex on a maximum face of the bounding box with its image on
/// the opposite face. Corners and edges are identified transitively, so each
/// orbit has one master and all other members are slaves.
pub fn periodic_pairs(mesh: &Mesh) -> Result<PeriodicPairing> {
    let bb = mesh.bounding_box();
    let dim = mesh.dim();
    let tol = 1e-9 * bb.max_side();
    let pts = mesh.points();
    let on_min = |v: usize, a: usize| (pts[v][a] - bb.min[a]).abs() <= tol;
    let on_max = |v: usize, a: usize| (pts[v][a] - bb.max[a]).abs() <= tol;

    let mut parent: Vec<usize> = (0..mesh.n_vertices()).collect();
    let mut touched = vec![false; mesh.n_vertices()];
    for axis in 0..dim {
        let others: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
        let key = others[0];
        let mut lo: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| on_min(v, axis)).collect();
        let hi: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| on_max(v, axis)).collect();
        if lo.len() != hi.len() {
            return Err(Error::Periodic(format!(
                "axis {axis}: {} vertices on the minimum face but {} on the maximum face",
                lo.len(),
                hi.len()
            )));
        }
        lo.sort_by(|&a, &b| pts[a][key].total_cmp(&pts[b][key]));
        for &v in &hi {
            let target = pts[v][key];
            let start = lo.partition_point(|&u| pts[u][key] < target - tol);
            let partner = lo[start..]
                .iter()
                .take_while(|&&u| pts[u][key] <= target + tol)
                .find(|&&u| others.iter().all(|&a| (pts[u][a] - pts[v][a]).abs() <= tol))
                .copied()
                .ok_or_else(|| {
                    Error::Periodic(format!(
                        "vertex {v} at {:?} has no partner on the opposite face along axis {axis}",
                        &pts[v][..dim]
                    ))
                })?;
            let (ra, rb) = (find(&mut parent, partner), find(&mut parent, v));
            if ra != rb {
                parent[rb] = ra;
            }
            touched[v] = true;
            touched[partner] = true;
        }
    }

    let mut orbits: HashMap<usize, Vec<usize>> = HashMap::new();
    for v in (0..mesh.n_vertices()).filter(|&v| touched[v]) {
        let r = find(&mut parent, v);
        orbits.entry(r).or_default().push(v);
    }
    let mut pairs = Vec::new();
    for members in orbits.values() {
        let masters: Vec<usize> =
            members.iter().copied().filter(|&v| (0..dim).all(|a| !on_max(v, a))).collect();
        if masters.len() != 1 {
            return Err(Error::Periodic(format!(
                "orbit {members:?} has {} candidate masters (expected one)",
                masters.len()
            )));
        }
        let master = masters[0];
        pairs.extend(members.iter().filter(|&&v| v != master).map(|&slave| PeriodicPair { master, slave }));
    }
    pairs.sort_by_key(|p| p.slave);
    Ok(PeriodicPairing { pairs })
}

/// Parses the ASCII mesh format.
pub fn parse_mesh(text: &str, source: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse { path: source.to_path_buf(), line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file reading {what}")));
    let (ln, header) = next("header")?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(ln, format!("bad header token `{t}`"))))
        .collect::<Result<_>>()?;
    if head.len() != 4 {
        return Err(err(ln, "header must be `dim nv ne nf`".into()));
    }
    let (dim, nv, ne, nf) = (head[0], head[1], head[2], head[3]);
    if dim != 2 && dim != 3 {
        return Err(err(ln, format!("unsupported dimension {dim}")));
    }

    let mut points = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = next("vertex")?;
        let c: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(ln, format!("bad coordinate `{t}`"))))
            .collect::<Result<_>>()?;
        if c.len() != dim {
            return Err(err(ln, format!("expected {dim} coordinates, found {}", c.len())));
        }
        let mut p = [0.0; 3];
        p[..dim].copy_from_slice(&c);
        points.push(p);
    }
    let mut read_ints = |count: usize, what: &str| -> Result<(usize, Vec<usize>)> {
        let (ln, l) = next(what)?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(ln, format!("bad index `{t}`"))))
            .collect::<Result<_>>()?;
        if v.len() != count {
            return Err(err(ln, format!("{what} line needs {count} integers, found {}", v.len())));
        }
        Ok((ln, v))
    };
    let mut elements = Vec::with_capacity(ne * (dim + 1));
    for _ in 0..ne {
        let (_, mut el) = read_ints(dim + 1, "element")?;
        if el.iter().all(|&v| v < nv) {
            let p: Vec<[f64; 3]> = el.iter().map(|&v| points[v]).collect();
            if simplex_signed_measure(dim, &p) < 0.0 {
                el.swap(0, 1);
            }
        }
        elements.extend(el);
    }
    let mut facets = Vec::with_capacity(nf * dim);
    let mut tags = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, f) = read_ints(dim + 1, "facet")?;
        let tag = u32::try_from(f[dim])
            .ok()
            .and_then(FacetTag::from_code)
            .ok_or_else(|| err(ln, format!("unknown facet tag {}", f[dim])))?;
        facets.extend_from_slice(&f[..dim]);
        tags.push(tag);
    }
    Mesh::new(dim, points, elements, facets, tags)
}

/// Reads and validates a mesh file. Inverted elements are reoriented;
/// degenerate elements are rejected with their index.
pub fn import_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text, path)
}
