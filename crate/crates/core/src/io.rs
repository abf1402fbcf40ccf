//! Field and metric output, homogenization tables, simulation configs.
//!
//! Configs are TOML:
//!
//! ```toml
//! preset = "ellipse2d"
//! tau = 0.01
//! t_end = 5.0
//! snapshot_times = [1.0, 3.0, 5.0]
//! output_dir = "out/ellipse2d"
//!
//! [domain]
//! min = [-1.0, -1.0]
//! max = [1.0, 1.0]
//! resolution = [113, 113]
//!
//! [params]
//! mu_s = 0.0
//! ```
//!
//! Instead of `preset`, an `[initial]` table may give `phi`, `c_s`, `w` and
//! `s` as expressions in `x`, `y`, `z` (see [`crate::expr`]).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffusivity::DiffusivityModel;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fem::P1Space;
use crate::homog::EffectiveTensor;
use crate::invasion::{initial_preset, FieldState, InvariantMode, Metrics, ModelParams, Preset, DEFAULT_COEFFS, DEFAULT_D_REF};
use crate::mesh::{generate_box, generate_rectangle, import_mesh, Mesh};

/// Legacy-VTK ASCII unstructured grid with one scalar array per field.
pub fn write_vtu(mesh: &Mesh, fields: &[(&str, &[f64])], path: impl AsRef<Path>) -> Result<()> {
    for (name, values) in fields {
        if values.len() != mesh.n_vertices() {
            return Err(Error::InvalidArgument(format!(
                "field `{name}` has {} values for {} vertices",
                values.len(),
                mesh.n_vertices()
            )));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("field name `{name}` must be non-empty without whitespace")));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "mmpinv fields")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", mesh.n_vertices())?;
    for p in mesh.points() {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2])?;
    }
    let nv = mesh.dim() + 1;
    writeln!(out, "CELLS {} {}", mesh.n_elements(), mesh.n_elements() * (nv + 1))?;
    for e in mesh.elements() {
        let mut line = nv.to_string();
        for v in e {
            write!(line, " {v}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    let cell_type = if mesh.dim() == 2 { 5 } else { 10 };
    writeln!(out, "CELL_TYPES {}", mesh.n_elements())?;
    for _ in 0..mesh.n_elements() {
        writeln!(out, "{cell_type}")?;
    }
    if !fields.is_empty() {
        writeln!(out, "POINT_DATA {}", mesh.n_vertices())?;
        for (name, values) in fields {
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in *values {
                writeln!(out, "{v:.16e}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 13] = [
    "step",
    "t",
    "invaded_fraction",
    "phi_min",
    "phi_max",
    "c_s_min",
    "c_s_max",
    "w_min",
    "w_max",
    "s_min",
    "s_max",
    "c_s_mass",
    "cg_iterations",
];

pub fn write_metrics_csv(series: &[Metrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for (k, m) in series.iter().enumerate() {
        let reals = [
            m.t,
            m.invaded_fraction,
            m.phi_min,
            m.phi_max,
            m.c_s_min,
            m.c_s_max,
            m.w_min,
            m.w_max,
            m.s_min,
            m.s_max,
            m.c_s_mass,
        ];
        let mut rec = vec![k.to_string()];
        rec.extend(reals.iter().map(|v| format!("{v:.16e}")));
        rec.push(m.cg_iterations.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One homogenized cell. Entries beyond the cell dimension are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogRow {
    pub geometry: String,
    pub member: usize,
    pub dim: usize,
    pub phi: f64,
    pub d_bar: f64,
    pub d11: f64,
    pub d12: f64,
    pub d13: f64,
    pub d21: f64,
    pub d22: f64,
    pub d23: f64,
    pub d31: f64,
    pub d32: f64,
    pub d33: f64,
    pub iterations: usize,
}

impl HomogRow {
    pub fn new(geometry: &str, member: usize, t: &EffectiveTensor) -> Self {
        let d = |i: usize, j: usize| if i < t.dim() && j < t.dim() { t.tensor[(i, j)] } else { 0.0 };
        HomogRow {
            geometry: geometry.to_string(),
            member,
            dim: t.dim(),
            phi: t.volume_fraction,
            d_bar: t.d_bar,
            d11: d(0, 0),
            d12: d(0, 1),
            d13: d(0, 2),
            d21: d(1, 0),
            d22: d(1, 1),
            d23: d(1, 2),
            d31: d(2, 0),
            d32: d(2, 1),
            d33: d(2, 2),
            iterations: t.iterations.iter().sum(),
        }
    }

    pub fn tensor(&self) -> DMatrix<f64> {
        let all = [[self.d11, self.d12, self.d13], [self.d21, self.d22, self.d23], [self.d31, self.d32, self.d33]];
        DMatrix::from_fn(self.dim, self.dim, |i, j| all[i][j])
    }

    /// `tensor / d_bar`.
    pub fn ratio(&self) -> DMatrix<f64> {
        self.tensor() / self.d_bar
    }

    pub fn diagonal_mean_ratio(&self) -> f64 {
        self.tensor().diagonal().mean() / self.d_bar
    }
}

pub fn write_homog_csv(rows: &[HomogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_homog_csv(path: impl AsRef<Path>) -> Result<Vec<HomogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<HomogRow>, _>>()?;
    for row in &rows {
        if !(row.dim == 2 || row.dim == 3) || !(row.d_bar > 0.0) {
            return Err(Error::Config(format!("row `{}` {} has dim {} and d_bar {}", row.geometry, row.member, row.dim, row.d_bar)));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Cells per axis for the structured simplex mesh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Vec<usize>>,
    /// Mesh file in the ASCII mesh format; overrides `min`, `max` and
    /// `resolution`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig { min: vec![-1.0, -1.0], max: vec![1.0, 1.0], resolution: None, mesh: None }
    }
}

/// Rates default to the reference parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub kappa_s: f64,
    pub kappa_b: f64,
    pub mu_s: f64,
    pub mu_b: f64,
    pub beta_s: f64,
    pub beta_b: f64,
    pub delta_s: f64,
    pub d_ref: f64,
    pub coefficients: [f64; 3],
    /// Diffusivity model file written by `fit`; replaces `d_ref` and
    /// `coefficients`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    /// Defaults to whether the preset is a suitability preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suitability_enabled: Option<bool>,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        let p = ModelParams::default();
        ParamsConfig {
            kappa_s: p.kappa_s,
            kappa_b: p.kappa_b,
            mu_s: p.mu_s,
            mu_b: p.mu_b,
            beta_s: p.beta_s,
            beta_b: p.beta_b,
            delta_s: p.delta_s,
            d_ref: DEFAULT_D_REF,
            coefficients: DEFAULT_COEFFS,
            model_file: None,
            suitability_enabled: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub phi: String,
    #[serde(default = "zero_expr")]
    pub c_s: String,
    #[serde(default = "zero_expr")]
    pub w: String,
    #[serde(default = "zero_expr")]
    pub s: String,
}

fn zero_expr() -> String {
    "0".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeConfig {
    #[default]
    Strict,
    Permissive,
}

impl From<ModeConfig> for InvariantMode {
    fn from(m: ModeConfig) -> Self {
        match m {
            ModeConfig::Strict => InvariantMode::Strict,
            ModeConfig::Permissive => InvariantMode::Permissive,
        }
    }
}

fn default_tau() -> f64 {
    1e-2
}

fn default_t_end() -> f64 {
    5.0
}

fn default_cadence() -> usize {
    100
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Snapshot every `cadence` steps, unless `snapshot_times` is given.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_times: Option<Vec<f64>>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub params: ParamsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SimulationConfig {
    /// A validated config for a preset with everything else defaulted.
    pub fn for_preset(preset: Preset) -> Self {
        let mut c: SimulationConfig = toml::from_str(&format!("preset = \"{}\"", preset.name())).expect("minimal config parses");
        if preset.dim() == 3 {
            c.domain.min = vec![-1.0; 3];
            c.domain.max = vec![1.0; 3];
        }
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimulationConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("t_end must be non-negative, got {}", self.t_end)));
        }
        if self.cadence == 0 {
            return Err(Error::Config("cadence must be at least 1".into()));
        }
        if let Some(ts) = &self.snapshot_times {
            if let Some(t) = ts.iter().find(|&&t| !(0.0..=self.t_end).contains(&t)) {
                return Err(Error::Config(format!("snapshot time {t} is outside [0, t_end]")));
            }
        }
        match (&self.preset, &self.initial) {
            (Some(_), Some(_)) => return Err(Error::Config("give either `preset` or `[initial]`, not both".into())),
            (None, None) => return Err(Error::Config("missing `preset` or `[initial]`".into())),
            (Some(name), None) => {
                let p = Preset::from_name(name)?;
                if self.domain.mesh.is_none() && self.domain.min.len() != p.dim() {
                    return Err(Error::Config(format!("preset {name} needs a {}d domain", p.dim())));
                }
            }
            (None, Some(init)) => {
                for e in [&init.phi, &init.c_s, &init.w, &init.s] {
                    Expr::parse(e)?;
                }
            }
        }
        let d = &self.domain;
        if d.mesh.is_none() {
            let dim = d.min.len();
            if !(dim == 2 || dim == 3) || d.max.len() != dim {
                return Err(Error::Config("domain min and max must both have 2 or 3 entries".into()));
            }
            if d.min.iter().zip(&d.max).any(|(a, b)| !(a < b)) {
                return Err(Error::Config("domain min must be below max on every axis".into()));
            }
            if let Some(r) = &d.resolution {
                if r.len() != dim || r.contains(&0) {
                    return Err(Error::Config(format!("resolution needs {dim} positive entries")));
                }
            }
        }
        self.model_params()?.validate()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn preset(&self) -> Result<Option<Preset>> {
        self.preset.as_deref().map(Preset::from_name).transpose()
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let p = &self.params;
        let diffusivity = match &p.model_file {
            Some(f) => DiffusivityModel::load(&self.resolve(f))?,
            None => DiffusivityModel::scalar(p.coefficients, p.d_ref),
        };
        let suitability_enabled = match p.suitability_enabled {
            Some(v) => v,
            None => self.preset()?.is_some_and(Preset::uses_suitability),
        };
        Ok(ModelParams {
            kappa_s: p.kappa_s,
            kappa_b: p.kappa_b,
            mu_s: p.mu_s,
            mu_b: p.mu_b,
            beta_s: p.beta_s,
            beta_b: p.beta_b,
            delta_s: p.delta_s,
            diffusivity,
            suitability_enabled,
        })
    }

    /// Structured meshes default to 112 cells per axis in 2d and 24 in 3d.
    pub fn build_mesh(&self) -> Result<Mesh> {
        let d = &self.domain;
        if let Some(path) = &d.mesh {
            return import_mesh(self.resolve(path));
        }
        if d.min.len() == 2 {
            let r = d.resolution.clone().unwrap_or(vec![112, 112]);
            generate_rectangle([d.min[0], d.min[1]], [d.max[0], d.max[1]], r[0], r[1])
        } else {
            let r = d.resolution.clone().unwrap_or(vec![24, 24, 24]);
            generate_box([d.min[0], d.min[1], d.min[2]], [d.max[0], d.max[1], d.max[2]], [r[0], r[1], r[2]])
        }
    }

    pub fn initial_state(&self, space: &P1Space) -> Result<FieldState> {
        if let Some(p) = self.preset()? {
            return initial_preset(p, space);
        }
        let init = self.initial.as_ref().ok_or_else(|| Error::Config("missing `[initial]`".into()))?;
        let field = |src: &str| -> Result<Vec<f64>> {
            let e = Expr::parse(src)?;
            Ok(space.interpolate(|x| e.eval(x)))
        };
        Ok(FieldState { phi: field(&init.phi)?, c_s: field(&init.c_s)?, w: field(&init.w)?, s: field(&init.s)?, t: 0.0 })
    }

    /// Step indices at which snapshots are written.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let n = (self.t_end / self.tau).round() as usize;
        let mut steps: Vec<usize> = match &self.snapshot_times {
            Some(ts) => ts.iter().map(|t| (t / self.tau).round() as usize).collect(),
            None => (0..=n).filter(|k| k % self.cadence == 0).chain([n]).collect(),
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }
}

/// Reads and validates a config; relative paths resolve against its
/// directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<SimulationConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut cfg: SimulationConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}
