//! Independent oracles and invariant monitors.

use std::fmt;

use crate::error::{Error, Result};
use crate::fem::P1Space;
use crate::homog::{maxwell_garnett, EffectiveTensor};
use crate::invasion::{f_b, f_s, FieldState, ModelParams, Simulator, MMP_TOL, PHI_TOL};
use crate::mesh::generate_rectangle;

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub scenario: String,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<40} abs {:>10.3e}  rel {:>10.3e}  tol {:>9.2e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.scenario,
            self.max_abs_dev,
            self.max_rel_dev,
            self.tolerance,
            self.detail
        )
    }
}

/// State `(φ, c_s, w, s)` of the spatially homogeneous system.
pub type OdeState = [f64; 4];

/// Right-hand side of the homogeneous reduction.
pub fn ode_rhs(p: &ModelParams, y: &OdeState) -> OdeState {
    let [phi, c, w, s] = *y;
    let susc = if p.suitability_enabled { 1.0 - s } else { 1.0 };
    [
        -susc * (p.mu_b * phi * w + p.mu_s * phi * c),
        p.kappa_s * f_s(c) * (1.0 - phi) - (susc * p.mu_s * phi + p.beta_s) * c,
        p.kappa_b * f_b(phi) * (1.0 - phi) - (susc * p.mu_b * phi + p.beta_b) * w,
        if p.suitability_enabled { -p.delta_s * w * s } else { 0.0 },
    ]
}

fn axpy(y: &OdeState, h: f64, k: &OdeState) -> OdeState {
    [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2], y[3] + h * k[3]]
}

fn rk4(p: &ModelParams, y0: &OdeState, t_end: f64, steps: usize) -> Vec<(f64, OdeState)> {
    let h = t_end / steps as f64;
    let mut y = *y0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, y));
    for i in 0..steps {
        let k1 = ode_rhs(p, &y);
        let k2 = ode_rhs(p, &axpy(&y, 0.5 * h, &k1));
        let k3 = ode_rhs(p, &axpy(&y, 0.5 * h, &k2));
        let k4 = ode_rhs(p, &axpy(&y, h, &k3));
        for j in 0..4 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        out.push(((i + 1) as f64 * h, y));
    }
    out
}

/// Trajectory of the refined RK4 solution.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeTrajectory {
    pub points: Vec<(f64, OdeState)>,
    pub steps: usize,
    /// Componentwise deviation between the last two refinements at `T`.
    pub refinement_change: f64,
}

impl OdeTrajectory {
    pub fn final_state(&self) -> OdeState {
        self.points.last().expect("trajectory has the initial point").1
    }
}

const MAX_HALVINGS: usize = 24;

fn rel_change(a: &OdeState, b: &OdeState) -> f64 {
    (0..4).map(|j| (a[j] - b[j]).abs() / (a[j].abs().max(b[j].abs()) + 1e-12)).fold(0.0, f64::max)
}

/// Classical RK4 with the step count doubled until two successive
/// refinements agree at `T` to `rtol` (relative, with a 1e-12 floor).
pub fn ode_oracle(params: &ModelParams, y0: OdeState, t_end: f64, rtol: f64) -> Result<OdeTrajectory> {
    if !(t_end >= 0.0) || !(rtol > 0.0) {
        return Err(Error::InvalidArgument("final time must be non-negative and rtol positive".into()));
    }
    if t_end == 0.0 {
        return Ok(OdeTrajectory { points: vec![(0.0, y0)], steps: 0, refinement_change: 0.0 });
    }
    let mut steps = 16;
    let mut coarse = rk4(params, &y0, t_end, steps);
    for _ in 0..MAX_HALVINGS {
        steps *= 2;
        let fine = rk4(params, &y0, t_end, steps);
        let change = rel_change(&coarse.last().unwrap().1, &fine.last().unwrap().1);
        if change <= rtol {
            return Ok(OdeTrajectory { points: fine, steps, refinement_change: change });
        }
        coarse = fine;
    }
    Err(Error::OracleNotConverged { rtol, halvings: MAX_HALVINGS })
}

/// Max-over-components error of the IMEX scheme on a spatially uniform
/// state at `t_end`, against the RK4 oracle.
pub fn homogeneous_reduction_error(params: &ModelParams, y0: OdeState, t_end: f64, tau: f64) -> Result<f64> {
    let space = P1Space::standard(generate_rectangle([-1.0, -1.0], [1.0, 1.0], 4, 4)?);
    let n = space.n_dofs();
    let sim = Simulator::new(space, params.clone(), tau)?;
    let out = sim.run(FieldState::uniform(n, y0[0], y0[1], y0[2], y0[3]), t_end, usize::MAX, |_, _| Ok(()))?;
    let exact = ode_oracle(params, y0, t_end, 1e-8)?.final_state();
    let st = &out.final_state;
    let mut err: f64 = 0.0;
    for i in 0..n {
        for (v, e) in [st.phi[i], st.c_s[i], st.w[i], st.s[i]].iter().zip(exact) {
            err = err.max((v - e).abs());
        }
    }
    Ok(err)
}

/// All state invariants. Strict positivity of `φ` is required at nodes where
/// `initial.phi > 0`. Deviations are the largest bound excesses.
pub fn check_bounds(state: &FieldState, initial: &FieldState, params: &ModelParams) -> OracleReport {
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let (m_s, m_b) = params.bounds(max(&initial.c_s), max(&initial.w));
    let cs_floor = -crate::invasion::CS_SOLVER_FLOOR * m_s.max(1.0);
    let fields: [(&str, &[f64], f64, f64); 4] = [
        ("phi", &state.phi, 0.0, 1.0 + PHI_TOL),
        ("c_s", &state.c_s, cs_floor, m_s + MMP_TOL),
        ("w", &state.w, 0.0, m_b + MMP_TOL),
        ("s", &state.s, 0.0, 1.0 + PHI_TOL),
    ];
    let mut worst = 0.0f64;
    let mut worst_rel = 0.0f64;
    let mut detail = String::new();
    for (name, v, lo, hi) in fields {
        for (i, &x) in v.iter().enumerate() {
            let excess = if x.is_nan() { f64::INFINITY } else { (lo - x).max(x - hi).max(0.0) };
            if excess > 0.0 && detail.is_empty() {
                detail = format!("{name} = {x:e} at node {i} outside [{lo:e}, {hi}]");
            }
            worst = worst.max(excess);
            worst_rel = worst_rel.max(excess / hi.abs().max(1.0));
        }
    }
    for (i, (&p, &p0)) in state.phi.iter().zip(&initial.phi).enumerate() {
        if p0 > 0.0 && !(p > 0.0) && detail.is_empty() {
            detail = format!("phi = {p:e} at node {i} is not strictly positive (initial {p0:e})");
            worst = worst.max(p0);
        }
    }
    OracleReport {
        scenario: format!("bounds at t = {}", state.t),
        max_abs_dev: worst,
        max_rel_dev: worst_rel,
        tolerance: 0.0,
        passed: detail.is_empty(),
        detail: if detail.is_empty() { format!("M_s = {m_s}, M_b = {m_b}") } else { detail },
    }
}

/// Mean diagonal ratio against Maxwell-Garnett, tolerance 0.01 absolute.
pub fn dilute_limit_check(tensor: &EffectiveTensor, theta: f64, dim: usize) -> Result<OracleReport> {
    if !(0.0..=0.05).contains(&theta) {
        return Err(Error::InvalidArgument(format!("inclusion fraction {theta} is outside the dilute regime [0, 0.05]")));
    }
    let oracle = maxwell_garnett(theta, dim)?;
    let got = tensor.diagonal_mean_ratio();
    let dev = (got - oracle).abs();
    Ok(OracleReport {
        scenario: format!("dilute limit, theta = {theta:.4}, {dim}d"),
        max_abs_dev: dev,
        max_rel_dev: dev / oracle,
        tolerance: 0.01,
        passed: dev <= 0.01,
        detail: format!("computed {got:.5}, Maxwell-Garnett {oracle:.5}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn zero_rates() -> ModelParams {
        ModelParams {
            kappa_s: 0.0,
            kappa_b: 0.0,
            mu_s: 0.0,
            mu_b: 0.0,
            beta_s: 0.0,
            beta_b: 0.0,
            delta_s: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rates_give_constant_trajectory() {
        let y0 = [0.7, 0.3, 0.2, 0.0];
        let tr = ode_oracle(&zero_rates(), y0, 5.0, 1e-8).unwrap();
        assert!(tr.points.iter().all(|(_, y)| *y == y0));
    }

    #[test]
    fn pure_decay_matches_exponential() {
        let p = ModelParams { beta_s: 0.1, beta_b: 0.1, ..zero_rates() };
        let tr = ode_oracle(&p, [0.5, 1.0, 1.0, 0.0], 5.0, 1e-8).unwrap();
        let y = tr.final_state();
        let exact = (-0.5f64).exp();
        assert!((y[1] - exact).abs() <= 1e-8 * exact);
        assert!((y[2] - exact).abs() <= 1e-8 * exact);
        assert_eq!(y[0], 0.5);
    }

    #[test]
    fn intact_matrix_is_a_fixed_point() {
        let p = ModelParams { suitability_enabled: true, ..Default::default() };
        let y = ode_oracle(&p, [1.0, 0.0, 0.0, 0.0], 5.0, 1e-8).unwrap().final_state();
        assert_eq!(y, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_is_self_consistent() {
        let p = ModelParams { suitability_enabled: true, ..Default::default() };
        let y0 = [0.9, 1.0, 2.0, 0.5];
        let a = ode_oracle(&p, y0, 5.0, 1e-8).unwrap();
        let b = rk4(&p, &y0, 5.0, 2 * a.steps);
        assert!(rel_change(&a.final_state(), &b.last().unwrap().1) < 1e-8);
    }

    #[test]
    fn bounds_report() {
        let p = ModelParams::default();
        let init = FieldState::uniform(4, 0.8, 0.0, 0.0, 0.0);
        assert!(check_bounds(&init, &init, &p).passed);
        let mut bad = init.clone();
        bad.phi[2] = 1.0 + 1e-3;
        let r = check_bounds(&bad, &init, &p);
        assert!(!r.passed && r.detail.contains("phi") && r.detail.contains("node 2"));
        let mut edge = init.clone();
        edge.w[1] = 50.0;
        assert!(check_bounds(&edge, &init, &p).passed);
        let mut zero = init.clone();
        zero.phi[0] = 0.0;
        assert!(!check_bounds(&zero, &init, &p).passed);
    }

    #[test]
    fn dilute_limit_examples() {
        let identity = EffectiveTensor {
            tensor: DMatrix::identity(2, 2) * 3.0,
            d_bar: 3.0,
            volume_fraction: 1.0,
            iterations: vec![0, 0],
        };
        let r = dilute_limit_check(&identity, 0.0, 2).unwrap();
        assert!(r.passed && r.max_abs_dev == 0.0);
        assert!(dilute_limit_check(&identity, 0.2, 2).is_err());
    }
}
