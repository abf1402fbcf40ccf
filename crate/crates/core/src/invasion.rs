//! IMEX finite-element time stepping of the MMP invasion model.
//!
//! Unknowns are nodal: ECM fraction `φ`, soluble MMP `c_s`, bound MMP
//! density `w = c_b (1 - φ)` and matrix suitability `s`. Each step updates
//! `φ` explicitly, solves one linear system for `c_s` (implicit diffusion,
//! explicit reactions), then updates `w` and `s` explicitly.
//!
//! The `c_s` system uses the row-sum lumped mass matrix. With a non-obtuse
//! mesh and isotropic diffusivity the system is then an M-matrix, so `c_s`
//! stays non-negative and below its bound; the total `1ᵀ M c_s` is the same
//! for the lumped and consistent matrices.

use crate::diffusivity::DiffusivityModel;
use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, tensor_field_from_phi, P1Space};
use crate::sparse::{cg_solve, CgOptions, SparseMatrix};

/// Scalar model for circular cells with `D_s(1) = 1.29e-2`.
pub const DEFAULT_D_REF: f64 = 1.29e-2;
pub const DEFAULT_COEFFS: [f64; 3] = [0.42, 0.33, 0.25];

pub const PHI_TOL: f64 = 1e-8;
pub const MMP_TOL: f64 = 1e-6;

/// Rates and diffusivity of the invasion model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kappa_s: f64,
    pub kappa_b: f64,
    pub mu_s: f64,
    pub mu_b: f64,
    pub beta_s: f64,
    pub beta_b: f64,
    pub delta_s: f64,
    pub diffusivity: DiffusivityModel,
    pub suitability_enabled: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            kappa_s: 4.0,
            kappa_b: 5.0,
            mu_s: 1.0,
            mu_b: 1.0,
            beta_s: 0.1,
            beta_b: 0.1,
            delta_s: 1.0,
            diffusivity: DiffusivityModel::scalar(DEFAULT_COEFFS, DEFAULT_D_REF),
            suitability_enabled: false,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("kappa_s", self.kappa_s),
            ("kappa_b", self.kappa_b),
            ("mu_s", self.mu_s),
            ("mu_b", self.mu_b),
            ("beta_s", self.beta_s),
            ("beta_b", self.beta_b),
            ("delta_s", self.delta_s),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative rate, got {v}")));
            }
        }
        match &self.diffusivity {
            DiffusivityModel::Scalar(m) => {
                if !(m.d_ref() > 0.0) {
                    return Err(Error::InvalidArgument("diffusivity reference value must be positive".into()));
                }
                m.check_positive()
            }
            DiffusivityModel::Tensor(t) => t.check_spd_grid(),
        }
    }

    /// Upper bounds `(M_s, M_b)` given the initial maxima of `c_s` and `w`.
    pub fn bounds(&self, c_s0_max: f64, w0_max: f64) -> (f64, f64) {
        let cap = |k: f64, b: f64| if b > 0.0 { k / b } else if k > 0.0 { f64::INFINITY } else { 0.0 };
        (c_s0_max.max(cap(self.kappa_s, self.beta_s)), w0_max.max(cap(self.kappa_b, self.beta_b)))
    }
}

/// Bound-MMP production factor `φ / (1 + φ)`.
pub fn f_b(phi: f64) -> f64 {
    phi / (1.0 + phi)
}

/// Soluble-MMP production factor `1 / (1 + c_s)`.
pub fn f_s(c_s: f64) -> f64 {
    1.0 / (1.0 + c_s)
}

/// Nodal fields at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub phi: Vec<f64>,
    pub c_s: Vec<f64>,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub t: f64,
}

impl FieldState {
    pub fn uniform(n: usize, phi: f64, c_s: f64, w: f64, s: f64) -> Self {
        FieldState { phi: vec![phi; n], c_s: vec![c_s; n], w: vec![w; n], s: vec![s; n], t: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Bound MMP concentration `w / (1 - φ)`, zero where `1 - φ ≤ 1e-10`.
    pub fn c_b(&self) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.phi)
            .map(|(&w, &p)| if 1.0 - p > 1e-10 { w / (1.0 - p) } else { 0.0 })
            .collect()
    }

    fn check_lengths(&self, n: usize) -> Result<()> {
        if [self.phi.len(), self.c_s.len(), self.w.len(), self.s.len()].iter().any(|&l| l != n) {
            return Err(Error::InvalidArgument(format!("field lengths do not match the {n} dofs")));
        }
        Ok(())
    }
}

/// Named initial conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Elliptic tumour, `φ₀ = 1 - exp(-((4x)² + (8y)²))`.
    Ellipse2d,
    /// `φ₀ = 1 - exp(-((4x)² + (4y)² + (8z)²))`.
    Ellipse3d,
    /// Elliptic tumour in a mostly unsuitable matrix,
    /// `s₀ = 1 - 0.1 (cos 4πx cos 4πy)²`.
    LowSuit2d,
    /// Invasion from the left edge, `φ₀ = 1 - exp(-4(1 + x))`, checkerboard
    /// `s₀ = (1 + cos 4πx cos 4πy) / 2`.
    Deakin2d,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Ellipse2d, Preset::Ellipse3d, Preset::LowSuit2d, Preset::Deakin2d];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ellipse2d => "ellipse2d",
            Preset::Ellipse3d => "ellipse3d",
            Preset::LowSuit2d => "lowsuit2d",
            Preset::Deakin2d => "deakin2d",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
    }

    pub fn dim(self) -> usize {
        if self == Preset::Ellipse3d {
            3
        } else {
            2
        }
    }

    /// Whether the preset is meant for the suitability model.
    pub fn uses_suitability(self) -> bool {
        matches!(self, Preset::LowSuit2d | Preset::Deakin2d)
    }

    pub fn phi0(self, x: &[f64; 3]) -> f64 {
        let sq = |v: f64| v * v;
        match self {
            Preset::Ellipse2d | Preset::LowSuit2d => 1.0 - (-(sq(4.0 * x[0]) + sq(8.0 * x[1]))).exp(),
            Preset::Ellipse3d => 1.0 - (-(sq(4.0 * x[0]) + sq(4.0 * x[1]) + sq(8.0 * x[2]))).exp(),
            Preset::Deakin2d => 1.0 - (-4.0 * (1.0 + x[0])).exp(),
        }
    }

    pub fn s0(self, x: &[f64; 3]) -> f64 {
        let c = (4.0 * std::f64::consts::PI * x[0]).cos() * (4.0 * std::f64::consts::PI * x[1]).cos();
        match self {
            Preset::LowSuit2d => 1.0 - 0.1 * c * c,
            Preset::Deakin2d => 0.5 * (1.0 + c),
            Preset::Ellipse2d | Preset::Ellipse3d => 0.0,
        }
    }
}

/// Initial state of a preset; MMP fields are zero.
pub fn initial_preset(preset: Preset, space: &P1Space) -> Result<FieldState> {
    if preset.dim() != space.dim() {
        return Err(Error::InvalidArgument(format!(
            "preset {} needs a {}d mesh, got {}d",
            preset.name(),
            preset.dim(),
            space.dim()
        )));
    }
    let n = space.n_dofs();
    Ok(FieldState {
        phi: space.interpolate(|x| preset.phi0(x)),
        c_s: vec![0.0; n],
        w: vec![0.0; n],
        s: space.interpolate(|x| preset.s0(x)),
        t: 0.0,
    })
}

/// Treatment of invariant violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InvariantMode {
    /// Abort with [`Error::Invariant`].
    #[default]
    Strict,
    /// Clip to the admissible range and record a warning.
    Permissive,
}

/// Lower bound tolerance for the algebraically solved `c_s`, relative to
/// `M_s`.
pub const CS_SOLVER_FLOOR: f64 = 1e-9;

/// Per-step scalar diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub t: f64,
    pub invaded_fraction: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub c_s_min: f64,
    pub c_s_max: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// `1ᵀ M c_s`.
    pub c_s_mass: f64,
    pub cg_iterations: usize,
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Time stepper bound to one space and parameter set.
#[derive(Debug, Clone)]
pub struct Simulator {
    space: P1Space,
    mass: SparseMatrix,
    lumped: SparseMatrix,
    params: ModelParams,
    tau: f64,
    mode: InvariantMode,
    cg_tol: f64,
    threshold: f64,
}

impl Simulator {
    pub fn new(space: P1Space, params: ModelParams, tau: f64) -> Result<Self> {
        params.validate()?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {tau}")));
        }
        if let DiffusivityModel::Tensor(t) = &params.diffusivity {
            if t.dim() != space.dim() {
                return Err(Error::InvalidArgument("tensor diffusivity dimension does not match the mesh".into()));
            }
        }
        let mass = assemble_mass(&space, None)?;
        let mut lumped = mass.clone();
        lumped.zero_values();
        for i in 0..mass.n() {
            lumped.add_to(i, i, mass.row(i).map(|(_, v)| v).sum());
        }
        Ok(Simulator { space, mass, lumped, params, tau, mode: InvariantMode::Strict, cg_tol: 1e-10, threshold: 0.25 })
    }

    pub fn with_mode(mut self, mode: InvariantMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_cg_tolerance(mut self, tol: f64) -> Self {
        self.cg_tol = tol;
        self
    }

    pub fn space(&self) -> &P1Space {
        &self.space
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// One IMEX step. Returns the new state and the CG iteration count.
    pub fn step(&self, old: &FieldState) -> Result<(FieldState, usize)> {
        let n = self.space.n_dofs();
        old.check_lengths(n)?;
        let p = &self.params;
        let tau = self.tau;
        let s_on = p.suitability_enabled;
        let susc = |i: usize| if s_on { 1.0 - old.s[i] } else { 1.0 };

        let mut phi = old.phi.clone();
        for i in 0..n {
            phi[i] -= tau * susc(i) * (p.mu_b * old.phi[i] * old.w[i] + p.mu_s * old.phi[i] * old.c_s[i]);
        }

        let mut rhs_nodal = vec![0.0; n];
        for i in 0..n {
            let c = old.c_s[i];
            let r = p.kappa_s * f_s(c) * (1.0 - old.phi[i]) - (susc(i) * p.mu_s * old.phi[i] + p.beta_s) * c;
            rhs_nodal[i] = c + tau * r;
        }
        let rhs = self.lumped.mul_vec(&rhs_nodal);
        let coeff = tensor_field_from_phi(&self.space, &phi, &p.diffusivity)?;
        let stiffness = assemble_stiffness(&self.space, &coeff)?;
        let system = self.lumped.add_scaled(tau, &stiffness);
        let opts = CgOptions { tol: self.cg_tol, ..Default::default() };
        let (mut c_s, report) = cg_solve(&system, &rhs, opts, Some(&old.c_s))?;
        // Since 1ᵀ(M_L + τK) = 1ᵀM_L, shifting by a constant removes the
        // residual component that would change the total mass.
        let residual_sum: f64 = rhs.iter().sum::<f64>() - system.mul_vec(&c_s).iter().sum::<f64>();
        let shift = residual_sum / self.lumped.values().iter().sum::<f64>();
        c_s.iter_mut().for_each(|c| *c += shift);

        let mut w = old.w.clone();
        for i in 0..n {
            let prod = p.kappa_b * f_b(old.phi[i]) * (1.0 - old.phi[i]);
            w[i] += tau * (prod - (susc(i) * p.mu_b * old.phi[i] + p.beta_b) * old.w[i]);
        }

        let s = if s_on {
            (0..n).map(|i| old.s[i] - tau * p.delta_s * old.w[i] * old.s[i]).collect()
        } else {
            vec![0.0; n]
        };

        Ok((FieldState { phi, c_s, w, s, t: old.t + tau }, report.iterations))
    }

    /// Checks the state bounds; in permissive mode out-of-range values are
    /// clipped and described in the returned warnings.
    pub fn enforce_invariants(&self, state: &mut FieldState, bounds: (f64, f64), step: usize) -> Result<Vec<String>> {
        let (m_s, m_b) = bounds;
        let cs_floor = -CS_SOLVER_FLOOR * m_s.max(1.0);
        let checks: [(&str, &mut Vec<f64>, f64, f64, f64); 4] = [
            ("phi", &mut state.phi, 0.0, 1.0 + PHI_TOL, 0.0),
            ("c_s", &mut state.c_s, cs_floor, m_s + MMP_TOL, 0.0),
            ("w", &mut state.w, 0.0, m_b + MMP_TOL, 0.0),
            ("s", &mut state.s, 0.0, 1.0 + PHI_TOL, 0.0),
        ];
        let mut warnings = Vec::new();
        for (name, field, lo, hi, clip_lo) in checks {
            let bad = field.iter().position(|&v| !(v >= lo && v <= hi));
            if let Some(i) = bad {
                let detail = format!("{name} = {:e} at dof {i} outside [{lo:e}, {hi}]", field[i]);
                match self.mode {
                    InvariantMode::Strict => return Err(Error::Invariant { step, time: state.t, detail }),
                    InvariantMode::Permissive => {
                        let top = hi.min(if name == "phi" || name == "s" { 1.0 } else { hi });
                        field.iter_mut().for_each(|v| *v = if v.is_nan() { clip_lo } else { v.clamp(clip_lo, top) });
                        warnings.push(format!("step {step}: {detail} (clipped)"));
                    }
                }
            }
        }
        Ok(warnings)
    }

    pub fn metrics(&self, state: &FieldState, cg_iterations: usize) -> Result<Metrics> {
        let (phi_min, phi_max) = min_max(&state.phi);
        let (c_s_min, c_s_max) = min_max(&state.c_s);
        let (w_min, w_max) = min_max(&state.w);
        let (s_min, s_max) = min_max(&state.s);
        Ok(Metrics {
            t: state.t,
            invaded_fraction: invaded_area_fraction(&self.space, &state.phi, self.threshold)?,
            phi_min,
            phi_max,
            c_s_min,
            c_s_max,
            w_min,
            w_max,
            s_min,
            s_max,
            c_s_mass: self.mass.mul_vec(&state.c_s).iter().sum(),
            cg_iterations,
        })
    }

    /// Runs `round(t_end / τ)` steps. `on_snapshot(step, state)` is called
    /// for the initial state and every `cadence` steps, and for the final
    /// state.
    pub fn run(
        &self,
        initial: FieldState,
        t_end: f64,
        cadence: usize,
        mut on_snapshot: impl FnMut(usize, &FieldState) -> Result<()>,
    ) -> Result<RunOutput> {
        if !(t_end >= 0.0) {
            return Err(Error::InvalidArgument(format!("final time must be non-negative, got {t_end}")));
        }
        if cadence == 0 {
            return Err(Error::InvalidArgument("snapshot cadence must be at least 1".into()));
        }
        let n_steps = (t_end / self.tau).round() as usize;
        let mut state = initial;
        state.check_lengths(self.space.n_dofs())?;
        if !self.params.suitability_enabled {
            state.s.iter_mut().for_each(|v| *v = 0.0);
        }
        let bounds = self.params.bounds(min_max(&state.c_s).1.max(0.0), min_max(&state.w).1.max(0.0));
        let mut warnings = self.enforce_invariants(&mut state, bounds, 0)?;
        let mut metrics = vec![self.metrics(&state, 0)?];
        on_snapshot(0, &state)?;
        for k in 1..=n_steps {
            let (mut next, its) = self.step(&state)?;
            // keep t on the uniform grid
            next.t = k as f64 * self.tau;
            warnings.extend(self.enforce_invariants(&mut next, bounds, k)?);
            metrics.push(self.metrics(&next, its)?);
            if k % cadence == 0 || k == n_steps {
                on_snapshot(k, &next)?;
            }
            state = next;
        }
        Ok(RunOutput { final_state: state, metrics, warnings, bounds })
    }
}

/// Result of [`Simulator::run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_state: FieldState,
    /// One entry per step, starting with the initial state.
    pub metrics: Vec<Metrics>,
    pub warnings: Vec<String>,
    /// `(M_s, M_b)` used by the invariant checks.
    pub bounds: (f64, f64),
}

/// One IMEX step without a persistent [`Simulator`].
pub fn step(state: &FieldState, params: &ModelParams, tau: f64, space: &P1Space) -> Result<FieldState> {
    Ok(Simulator::new(space.clone(), params.clone(), tau)?.step(state)?.0)
}

/// Fraction of a triangle `(values a ≤ b ≤ c)` where the linear interpolant
/// is below `t`.
fn triangle_fraction_below(mut v: [f64; 3], t: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let [a, b, c] = v;
    if t <= a {
        0.0
    } else if t > c {
        1.0
    } else if t <= b {
        (t - a) * (t - a) / ((b - a) * (c - a))
    } else {
        1.0 - (c - t) * (c - t) / ((c - a) * (c - b))
    }
}

fn lerp3(p: &[f64; 3], q: &[f64; 3], s: f64) -> [f64; 3] {
    [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1]), p[2] + s * (q[2] - p[2])]
}

fn tet_volume(p: &[[f64; 3]; 4]) -> f64 {
    crate::mesh::simplex_signed_measure(3, p).abs()
}

/// Fraction of a tetrahedron where the linear interpolant is below `t`.
fn tet_fraction_below(v: [f64; 4], t: f64) -> f64 {
    let mut idx = [0usize, 1, 2, 3];
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let [a, b, c, d] = idx.map(|i| v[i]);
    if t <= a {
        return 0.0;
    }
    if t > d {
        return 1.0;
    }
    if t <= b {
        return (t - a).powi(3) / ((b - a) * (c - a) * (d - a));
    }
    if t > c {
        return 1.0 - (d - t).powi(3) / ((d - a) * (d - b) * (d - c));
    }
    // two vertices below: a wedge in reference coordinates, split into
    // three tetrahedra
    let corners = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let val = [a, b, c, d];
    let cut = |lo: usize, hi: usize| lerp3(&corners[lo], &corners[hi], (t - val[lo]) / (val[hi] - val[lo]));
    let (pa, pb) = (corners[0], corners[1]);
    let (pac, pad, pbc, pbd) = (cut(0, 2), cut(0, 3), cut(1, 2), cut(1, 3));
    let below = tet_volume(&[pa, pac, pad, pbd]) + tet_volume(&[pa, pac, pbd, pbc]) + tet_volume(&[pa, pbc, pbd, pb]);
    below * 6.0
}

/// Measure of `{I_h φ < threshold}` divided by the domain measure.
pub fn invaded_area_fraction(space: &P1Space, phi: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if phi.len() != space.n_dofs() {
        return Err(Error::InvalidArgument("phi length does not match the dof count".into()));
    }
    let mesh = space.mesh();
    let mut below = 0.0;
    for k in 0..mesh.n_elements() {
        let vol = space.geometry(k).measure;
        let frac = match mesh.dim() {
            2 => {
                let mut v = [0.0; 3];
                for (slot, d) in v.iter_mut().zip(space.element_dofs(k)) {
                    *slot = phi[d];
                }
                triangle_fraction_below(v, threshold)
            }
            _ => {
                let mut v = [0.0; 4];
                for (slot, d) in v.iter_mut().zip(space.element_dofs(k)) {
                    *slot = phi[d];
                }
                tet_fraction_below(v, threshold)
            }
        };
        below += vol * frac;
    }
    Ok((below / mesh.total_measure()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_box, generate_rectangle, Mesh};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize) -> P1Space {
        P1Space::standard(generate_rectangle([-1.0, -1.0], [1.0, 1.0], n, n).unwrap())
    }

    fn unit_triangle() -> P1Space {
        let m = Mesh::new(2, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![0, 1, 2], vec![], vec![])
            .unwrap();
        P1Space::standard(m)
    }

    fn unit_tet() -> P1Space {
        let m = Mesh::new(
            3,
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![0, 1, 2, 3],
            vec![],
            vec![],
        )
        .unwrap();
        P1Space::standard(m)
    }

    /// Monte-Carlo estimate of the sub-level fraction on the reference simplex.
    fn sampled_fraction(vals: &[f64], t: f64, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = vals.len() - 1;
        let mut hits = 0usize;
        let mut taken = 0usize;
        while taken < samples {
            let x: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            if x.iter().sum::<f64>() > 1.0 {
                continue;
            }
            taken += 1;
            let l0 = 1.0 - x.iter().sum::<f64>();
            let v = l0 * vals[0] + x.iter().zip(&vals[1..]).map(|(a, b)| a * b).sum::<f64>();
            if v < t {
                hits += 1;
            }
        }
        hits as f64 / samples as f64
    }

    #[test]
    fn reaction_factors() {
        assert_eq!(f_b(0.0), 0.0);
        assert_eq!(f_b(1.0), 0.5);
        assert_eq!(f_s(0.0), 1.0);
        assert!((f_s(3.0) - 0.25).abs() < 1e-16);
    }

    #[test]
    fn default_bounds_are_40_and_50() {
        assert_eq!(ModelParams::default().bounds(0.0, 0.0), (40.0, 50.0));
        assert_eq!(ModelParams::default().bounds(45.0, 0.0), (45.0, 50.0));
    }

    #[test]
    fn fixed_point_with_intact_matrix() {
        let space = square(4);
        let sim = Simulator::new(space, ModelParams::default(), 1e-2).unwrap();
        let n = sim.space().n_dofs();
        let s0 = FieldState::uniform(n, 1.0, 0.0, 0.0, 0.0);
        let (s1, _) = sim.step(&s0).unwrap();
        assert_eq!(s1.phi, s0.phi);
        assert!(s1.c_s.iter().all(|&c| c == 0.0));
        assert_eq!(s1.w, s0.w);
    }

    #[test]
    fn homogeneous_state_matches_explicit_euler() {
        let space = square(5);
        let params = ModelParams { suitability_enabled: true, ..Default::default() };
        let sim = Simulator::new(space, params.clone(), 1e-2).unwrap();
        let n = sim.space().n_dofs();
        let (phi, c, w, s) = (0.9, 1.0, 2.0, 0.5);
        let (next, _) = sim.step(&FieldState::uniform(n, phi, c, w, s)).unwrap();
        let tau = 1e-2;
        let p = &params;
        let phi1 = phi - tau * (1.0 - s) * (p.mu_b * phi * w + p.mu_s * phi * c);
        let c1 = c + tau * (p.kappa_s / (1.0 + c) * (1.0 - phi) - ((1.0 - s) * p.mu_s * phi + p.beta_s) * c);
        let w1 = w + tau * (p.kappa_b * phi / (1.0 + phi) * (1.0 - phi) - ((1.0 - s) * p.mu_b * phi + p.beta_b) * w);
        let s1 = s - tau * p.delta_s * w * s;
        for i in 0..n {
            assert!((next.phi[i] - phi1).abs() < 1e-15);
            assert!((next.c_s[i] - c1).abs() < 1e-9);
            assert!((next.w[i] - w1).abs() < 1e-15);
            assert!((next.s[i] - s1).abs() < 1e-15);
        }
    }

    #[test]
    fn suitability_off_keeps_s_zero() {
        let space = square(3);
        let sim = Simulator::new(space, ModelParams::default(), 1e-2).unwrap();
        let n = sim.space().n_dofs();
        let (next, _) = sim.step(&FieldState::uniform(n, 0.5, 0.1, 0.1, 0.7)).unwrap();
        assert!(next.s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_suitability_freezes_matrix() {
        let space = square(6);
        let params = ModelParams { suitability_enabled: true, delta_s: 0.0, ..Default::default() };
        let sim = Simulator::new(space, params, 1e-2).unwrap();
        let mut st = initial_preset(Preset::Ellipse2d, sim.space()).unwrap();
        st.s.iter_mut().for_each(|v| *v = 1.0);
        let out = sim.run(st.clone(), 0.2, 1, |_, _| Ok(())).unwrap();
        assert_eq!(out.final_state.phi, st.phi);
        assert_eq!(out.final_state.s, st.s);
    }

    #[test]
    fn zero_time_returns_initial_data() {
        let space = square(4);
        let sim = Simulator::new(space, ModelParams::default(), 1e-2).unwrap();
        let st = initial_preset(Preset::Ellipse2d, sim.space()).unwrap();
        let mut snaps = 0;
        let out = sim
            .run(st.clone(), 0.0, 5, |_, _| {
                snaps += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(out.final_state, st);
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(snaps, 1);
    }

    #[test]
    fn strict_mode_aborts_and_permissive_clips() {
        let space = square(2);
        let sim = Simulator::new(space, ModelParams::default(), 1e-2).unwrap();
        let n = sim.space().n_dofs();
        let mut st = FieldState::uniform(n, 0.5, 0.0, 0.0, 0.0);
        st.phi[3] = 1.5;
        assert!(matches!(sim.enforce_invariants(&mut st.clone(), (40.0, 50.0), 7), Err(Error::Invariant { step: 7, .. })));
        let sim = sim.with_mode(InvariantMode::Permissive);
        let warnings = sim.enforce_invariants(&mut st, (40.0, 50.0), 7).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(st.phi[3], 1.0);
    }

    #[test]
    fn presets_at_reference_points() {
        assert_eq!(Preset::Ellipse2d.phi0(&[0.0; 3]), 0.0);
        assert_eq!(Preset::Deakin2d.phi0(&[-1.0, 0.3, 0.0]), 0.0);
        assert!((Preset::LowSuit2d.s0(&[0.0; 3]) - 0.9).abs() < 1e-15);
        assert_eq!(Preset::Deakin2d.s0(&[0.0; 3]), 1.0);
        assert!(Preset::from_name("nope").is_err());
        let sp = square(4);
        let st = initial_preset(Preset::LowSuit2d, &sp).unwrap();
        assert!(st.c_s.iter().chain(&st.w).all(|&v| v == 0.0));
        assert!(initial_preset(Preset::Ellipse3d, &sp).is_err());
    }

    #[test]
    fn c_b_reporting() {
        let st = FieldState { phi: vec![0.5, 1.0], c_s: vec![0.0; 2], w: vec![1.0, 1.0], s: vec![0.0; 2], t: 0.0 };
        assert_eq!(st.c_b(), vec![2.0, 0.0]);
    }

    #[test]
    fn invaded_fraction_constant_fields() {
        let sp = square(4);
        let n = sp.n_dofs();
        assert_eq!(invaded_area_fraction(&sp, &vec![0.0; n], 0.25).unwrap(), 1.0);
        assert_eq!(invaded_area_fraction(&sp, &vec![1.0; n], 0.25).unwrap(), 0.0);
        assert!(invaded_area_fraction(&sp, &vec![1.0; n], 1.0).is_err());
    }

    #[test]
    fn invaded_fraction_on_unit_triangle() {
        let sp = unit_triangle();
        // values (0, 0, 0.5): region below 0.25 is the triangle minus the
        // corner triangle at the third vertex, scaled by 1/2
        let f = invaded_area_fraction(&sp, &[0.0, 0.0, 0.5], 0.25).unwrap();
        assert!((f - 0.75).abs() < 1e-15);
        let mc = sampled_fraction(&[0.0, 0.0, 0.5], 0.25, 400_000, 1);
        assert!((f - mc).abs() < 3e-3);
    }

    #[test]
    fn invaded_fraction_on_box_with_linear_field() {
        let sp = P1Space::standard(generate_box([0.0; 3], [1.0; 3], [3, 3, 3]).unwrap());
        let phi = sp.interpolate(|p| p[0]);
        let f = invaded_area_fraction(&sp, &phi, 0.4).unwrap();
        assert!((f - 0.4).abs() < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn triangle_fraction_matches_sampling(v in proptest::collection::vec(0.0f64..1.0, 3), t in 0.05f64..0.95) {
            let sp = unit_triangle();
            let f = invaded_area_fraction(&sp, &v, t).unwrap();
            let mc = sampled_fraction(&v, t, 100_000, 7);
            prop_assert!((f - mc).abs() < 8e-3, "{f} vs {mc}");
        }

        #[test]
        fn tet_fraction_matches_sampling(v in proptest::collection::vec(0.0f64..1.0, 4), t in 0.05f64..0.95) {
            let sp = unit_tet();
            let f = invaded_area_fraction(&sp, &v, t).unwrap();
            let mc = sampled_fraction(&v, t, 100_000, 11);
            prop_assert!((f - mc).abs() < 8e-3, "{f} vs {mc}");
        }

        #[test]
        fn phi_and_s_are_nonincreasing(seed in 0u64..1000) {
            let sp = square(4);
            let params = ModelParams { suitability_enabled: true, ..Default::default() };
            let sim = Simulator::new(sp, params, 1e-2).unwrap();
            let n = sim.space().n_dofs();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let st = FieldState {
                phi: (0..n).map(|_| rng.gen::<f64>()).collect(),
                c_s: (0..n).map(|_| 40.0 * rng.gen::<f64>()).collect(),
                w: (0..n).map(|_| 50.0 * rng.gen::<f64>()).collect(),
                s: (0..n).map(|_| rng.gen::<f64>()).collect(),
                t: 0.0,
            };
            let (next, _) = sim.step(&st).unwrap();
            for i in 0..n {
                prop_assert!(next.phi[i] <= st.phi[i] && next.phi[i] >= 0.0);
                prop_assert!(next.s[i] <= st.s[i] && next.s[i] >= 0.0);
                prop_assert!(next.w[i] >= 0.0);
            }
        }
    }
}
