//! Run configuration: TOML file, `TSD_` environment overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsd::manifold::ShootConfig;
use tsd::model::{Perturbation, Term};
use tsd::{Params, Pert};

use crate::CliError;

/// Variables starting with this prefix override config keys; `__` separates
/// table levels, so `TSD_MODEL__EPS=1e-3` sets `model.eps`.
pub const ENV_PREFIX: &str = "TSD_";
/// Environment names read elsewhere and never treated as overrides.
const RESERVED: &[&str] = &["TSD_QUIET"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub lambda: f64,
    pub c: f64,
    pub eps: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        let p = Params::default();
        ModelCfg { a1: p.a1, a2: p.a2, b1: p.b1, b2: p.b2, lambda: p.lambda, c: p.c, eps: p.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PertCfg {
    /// `none`, `single_harmonic` or `two_harmonic`.
    pub preset: String,
    /// Extra terms added to the preset.
    pub terms: Vec<Term<f64>>,
}

impl Default for PertCfg {
    fn default() -> Self {
        PertCfg { preset: "two_harmonic".into(), terms: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateCfg {
    /// Initial state `(p1, q1, p2, q2, p3, q3)`; the section point
    /// `(j_frac * J_max, theta)` is used when absent.
    pub x0: Option<[f64; 6]>,
    pub j_frac: f64,
    pub theta: f64,
    pub t_end: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Keep every `stride`-th accepted step.
    pub stride: usize,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        SimulateCfg { x0: None, j_frac: 0.3, theta: 0.0, t_end: 100.0, rel_tol: 1e-12, abs_tol: 1e-14, stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SectionCfg {
    /// Action grid in units of `J_max`, inclusive ends.
    pub j_range: (f64, f64),
    pub n_j: usize,
    pub scan_iterates: usize,
    pub rotation_iterates: usize,
    pub scatter_orbits: usize,
    pub scatter_iterates: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Dispersion threshold for the circle label; `10 eps` when unset.
    pub dispersion_tol: Option<f64>,
}

impl Default for SectionCfg {
    fn default() -> Self {
        SectionCfg {
            j_range: (0.05, 0.95),
            n_j: 10,
            scan_iterates: 1000,
            rotation_iterates: 1000,
            scatter_orbits: 8,
            scatter_iterates: 200,
            rel_tol: 1e-11,
            abs_tol: 1e-13,
            dispersion_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelnikovCfg {
    pub i1_frac: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub n_tau: usize,
    /// Angles of the critical-time table.
    pub n_phi1: usize,
    pub coverage_n_i1: usize,
    pub coverage_n_phi1: usize,
    pub coverage_n_phi2: usize,
    pub quad_tol: f64,
}

impl Default for MelnikovCfg {
    fn default() -> Self {
        MelnikovCfg {
            i1_frac: 0.3,
            phi1: 0.0,
            phi2: 0.0,
            n_tau: 201,
            n_phi1: 36,
            coverage_n_i1: 10,
            coverage_n_phi1: 8,
            coverage_n_phi2: 2,
            quad_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScatteringCfg {
    pub n_bases: usize,
    /// Base actions drawn uniformly from this range, in units of `J_max`.
    pub i1_range: (f64, f64),
    pub shoot: ShootConfig,
}

impl Default for ScatteringCfg {
    fn default() -> Self {
        ScatteringCfg { n_bases: 10, i1_range: (0.2, 0.7), shoot: ShootConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CzCfg {
    /// Energy levels; the model's `c` when empty.
    pub c_list: Vec<f64>,
    /// Cover counts of each critical circle.
    pub covers: Vec<u32>,
}

impl Default for CzCfg {
    fn default() -> Self {
        CzCfg { c_list: Vec::new(), covers: vec![1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum TargetCfg {
    Circle { j_frac: f64 },
    /// Rotation number `rho` attained between two actions (units of `J_max`).
    Rotation { rho: f64, between: (f64, f64) },
    /// `rho(a) + (rho(b) - rho(a)) (sqrt 5 - 1) / 2` for actions `a < b`.
    GoldenRotation { between: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsCfg {
    pub targets: Vec<TargetCfg>,
    pub h_j: Option<f64>,
    pub h_theta: f64,
    pub theta0: Option<f64>,
    pub n_boundary: usize,
    pub n_interior: usize,
    pub margin_tol: f64,
    pub max_windows: usize,
    pub rotation_iterates: usize,
    pub shoot: ShootConfig,
}

impl Default for WindowsCfg {
    fn default() -> Self {
        WindowsCfg {
            targets: vec![TargetCfg::Circle { j_frac: 0.45 }, TargetCfg::Circle { j_frac: 0.452 }],
            h_j: None,
            h_theta: 0.03,
            theta0: None,
            n_boundary: 64,
            n_interior: 9,
            margin_tol: tsd::windows::DEFAULT_MARGIN_TOL,
            max_windows: 400,
            rotation_iterates: 400,
            shoot: ShootConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffuseCfg {
    pub search_depth: usize,
    pub flow_half_time: f64,
    /// Required neighbourhood size of each target visit.
    pub delta: f64,
}

impl Default for DiffuseCfg {
    fn default() -> Self {
        DiffuseCfg { search_depth: 16, flow_half_time: 0.5, delta: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCfg {
    pub i1_frac: f64,
    pub phi1: f64,
    pub phi2: f64,
    /// Separatrix phase of the splitting measurement.
    pub tau: f64,
    pub shoot: ShootConfig,
}

impl Default for SweepCfg {
    fn default() -> Self {
        SweepCfg { i1_frac: 0.4, phi1: 1.0, phi2: 0.0, tau: 0.3, shoot: ShootConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub seed: u64,
    pub model: ModelCfg,
    pub perturbation: PertCfg,
    pub eps_list: Vec<f64>,
    pub simulate: SimulateCfg,
    pub section: SectionCfg,
    pub melnikov: MelnikovCfg,
    pub scattering: ScatteringCfg,
    pub cz: CzCfg,
    pub windows: WindowsCfg,
    pub diffuse: DiffuseCfg,
    pub sweep: SweepCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            workers: 0,
            seed: 0,
            model: ModelCfg::default(),
            perturbation: PertCfg::default(),
            eps_list: vec![1e-4, 3e-4, 1e-3, 3e-3],
            simulate: SimulateCfg::default(),
            section: SectionCfg::default(),
            melnikov: MelnikovCfg::default(),
            scattering: ScatteringCfg::default(),
            cz: CzCfg::default(),
            windows: WindowsCfg::default(),
            diffuse: DiffuseCfg::default(),
            sweep: SweepCfg::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parse an override value as a TOML value, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().ok_or_else(|| invalid("empty override key"))?;
    let mut t = root;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| invalid(format!("override key {p} is not a table")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Config from an optional file plus environment overrides.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut vars: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !RESERVED.contains(&k.as_str()))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let key: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            apply_override(&mut table, &key, env_value(&v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn params(&self) -> Result<Params, CliError> {
        let m = &self.model;
        Params::new(m.a1, m.a2, m.b1, m.b2, m.lambda, m.c, m.eps).map_err(CliError::from)
    }

    pub fn pert(&self) -> Result<Pert, CliError> {
        let mut p = match self.perturbation.preset.as_str() {
            "none" => Perturbation::none(),
            "single_harmonic" => Perturbation::single_harmonic(),
            "two_harmonic" => Perturbation::two_harmonic(),
            other => return Err(invalid(format!("unknown perturbation preset {other:?}"))),
        };
        for t in &self.perturbation.terms {
            if !t.coef.is_finite() {
                return Err(invalid("perturbation coefficients must be finite"));
            }
            p = p.with_term(*t);
        }
        Ok(p)
    }

    /// Checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        self.params()?;
        self.pert()?;
        if self.eps_list.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(invalid("eps_list entries must be positive"));
        }
        let frac = |name: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {x} must lie in (0, 1)")))
            }
        };
        let s = &self.section;
        frac("section.j_range.0", s.j_range.0)?;
        frac("section.j_range.1", s.j_range.1)?;
        if s.j_range.0 > s.j_range.1 || s.n_j == 0 {
            return Err(invalid("section.j_range must increase and n_j be positive"));
        }
        frac("melnikov.i1_frac", self.melnikov.i1_frac)?;
        if self.melnikov.n_tau < 2 {
            return Err(invalid("melnikov.n_tau must be at least 2"));
        }
        frac("scattering.i1_range.0", self.scattering.i1_range.0)?;
        frac("scattering.i1_range.1", self.scattering.i1_range.1)?;
        frac("sweep.i1_frac", self.sweep.i1_frac)?;
        if self.simulate.stride == 0 || !(self.simulate.t_end > 0.0) {
            return Err(invalid("simulate.stride and simulate.t_end must be positive"));
        }
        for t in &self.windows.targets {
            match *t {
                TargetCfg::Circle { j_frac } => frac("circle target j_frac", j_frac)?,
                TargetCfg::Rotation { between: (a, b), .. } | TargetCfg::GoldenRotation { between: (a, b) } => {
                    frac("rotation target bracket", a)?;
                    frac("rotation target bracket", b)?;
                    if a >= b {
                        return Err(invalid("rotation target bracket must increase"));
                    }
                }
            }
        }
        if !(self.diffuse.delta > 0.0) {
            return Err(invalid("diffuse.delta must be positive"));
        }
        Ok(())
    }

    /// Canonical JSON echo used in every metadata header.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
