//! Run configuration: TOML with dotted sections, `section.key=value`
//! overrides, and validation against every module's preconditions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CloakError, Result};
use crate::helmholtz::{Observation, ProblemSettings, Source};
use crate::mesh::GeometrySpec;
use crate::optimizer::NewtonConfig;
use crate::sensitivity::taylor::EigenMethod;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub obstacle_radius: f64,
    pub cloak_radius: f64,
    pub half_width: f64,
    pub pml_width: f64,
    pub mesh_size: f64,
    /// Uniform refinements applied after generation (mesh2 = 1, mesh3 = 2).
    pub refinements: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let g = GeometrySpec::standard(crate::MESH1_SIZE);
        GeometryConfig {
            obstacle_radius: g.obstacle_radius,
            cloak_radius: g.cloak_radius,
            half_width: g.half_width,
            pml_width: g.pml_width,
            mesh_size: g.mesh_size,
            refinements: 0,
        }
    }
}

impl GeometryConfig {
    pub fn spec(&self) -> GeometrySpec {
        GeometrySpec {
            obstacle_radius: self.obstacle_radius,
            cloak_radius: self.cloak_radius,
            half_width: self.half_width,
            pml_width: self.pml_width,
            mesh_size: self.mesh_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Mesh file to load instead of generating one.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub k0: f64,
    pub c0: f64,
    /// Every direction is combined with every frequency factor.
    pub directions: Vec<[f64; 2]>,
    pub frequency_factors: Vec<f64>,
    /// PML amplitude; defaults to 2·k0.
    pub pml_sigma0: Option<f64>,
    /// "host" or "host_and_pml".
    pub observation: String,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            k0: 2.0 * std::f64::consts::PI,
            c0: 1.0,
            directions: vec![[1.0, 0.0]],
            frequency_factors: vec![1.0],
            pml_sigma0: None,
            observation: "host".into(),
        }
    }
}

impl PhysicsConfig {
    pub fn settings(&self) -> Result<ProblemSettings> {
        let observation = match self.observation.as_str() {
            "host" => Observation::Host,
            "host_and_pml" => Observation::HostAndPml,
            other => return Err(CloakError::config(format!("unknown observation region '{other}'"))),
        };
        let mut s = ProblemSettings::standard(self.k0);
        s.c0 = self.c0;
        s.observation = observation;
        if let Some(sigma) = self.pml_sigma0 {
            s.sigma0 = sigma;
        }
        Ok(s)
    }

    pub fn sources(&self) -> Vec<Source> {
        self.directions
            .iter()
            .flat_map(|d| self.frequency_factors.iter().map(move |f| Source::new(*d, *f)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub gamma: f64,
    pub delta: f64,
    /// Fractional order of the covariance; only 2 is supported.
    pub alpha: f64,
    /// Constant mean of the random field.
    pub mean: f64,
    pub seed: u64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig { gamma: 10.0, delta: 50.0, alpha: 2.0, mean: 0.0, seed: 2024 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub beta_v: f64,
    pub beta_p: f64,
    pub epsilon: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig { beta_v: 1.0, beta_p: 1e-2, epsilon: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonSection {
    pub max_newton: usize,
    pub max_cg: usize,
    pub max_line_search: usize,
    pub tol_newton: f64,
    pub tol_cg0: f64,
    pub armijo: f64,
    pub max_step: f64,
}

impl Default for NewtonSection {
    fn default() -> Self {
        let d = NewtonConfig::default();
        NewtonSection {
            max_newton: d.max_newton,
            max_cg: d.max_cg,
            max_line_search: d.max_line_search,
            tol_newton: d.tol_newton,
            tol_cg0: d.tol_cg0,
            armijo: d.armijo,
            max_step: d.max_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    /// "deterministic", "saa" or "taylor".
    pub kind: String,
    /// SAA sample count.
    pub samples: usize,
    /// Taylor eigenpair count.
    pub rank: usize,
    pub oversampling: usize,
    pub eigen_seed: u64,
    /// Use dense eigensolves (small meshes only).
    pub dense: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            kind: "taylor".into(),
            samples: 100,
            rank: 50,
            oversampling: 10,
            eigen_seed: 7,
            dense: false,
        }
    }
}

impl VariantConfig {
    pub fn eigen_method(&self) -> EigenMethod {
        if self.dense {
            EigenMethod::Dense { limit: crate::spectral::DENSE_LIMIT }
        } else {
            EigenMethod::Randomized { oversampling: self.oversampling, seed: self.eigen_seed }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub vtk: bool,
    pub csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), vtk: true, csv: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub samples: usize,
    /// Design files for the robustness study; empty means "optimize each variant".
    pub designs: Vec<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig { samples: 10, designs: vec![] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub parallel: bool,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig { parallel: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub mesh: MeshConfig,
    pub physics: PhysicsConfig,
    pub measure: MeasureConfig,
    pub weights: WeightsConfig,
    pub newton: NewtonSection,
    pub variant: VariantConfig,
    pub output: OutputConfig,
    pub study: StudyConfig,
    pub execution: ExecutionConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for the right-hand side; bare words become strings.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parses TOML text and applies `section.key=value` overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table =
            text.parse().map_err(|e: toml::de::Error| CloakError::config(format!("invalid config: {e}")))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| CloakError::config(format!("override '{ov}' is not of the form key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(CloakError::config(format!("invalid override key '{key}'")));
            }
            let mut table = &mut root;
            for p in &parts[..parts.len() - 1] {
                let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| CloakError::config(format!("override '{key}' descends into a non-table")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| CloakError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CloakError::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn newton(&self) -> NewtonConfig {
        let n = &self.newton;
        NewtonConfig {
            max_newton: n.max_newton,
            max_cg: n.max_cg,
            max_line_search: n.max_line_search,
            tol_newton: n.tol_newton,
            tol_cg0: n.tol_cg0,
            armijo: n.armijo,
            max_step: n.max_step,
            beta_v: self.weights.beta_v,
            beta_p: self.weights.beta_p,
            epsilon: self.weights.epsilon,
        }
    }

    pub fn execution(&self) -> crate::exec::Execution {
        if self.execution.parallel {
            crate::exec::Execution::Parallel
        } else {
            crate::exec::Execution::Sequential
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh.path.is_none() {
            self.geometry.spec().validate()?;
        }
        let p = &self.physics;
        if !(p.k0 > 0.0 && p.k0.is_finite()) || !(p.c0 > 0.0) {
            return Err(CloakError::config("k0 and c0 must be positive"));
        }
        if p.directions.is_empty() || p.frequency_factors.is_empty() {
            return Err(CloakError::config("at least one direction and one frequency factor are required"));
        }
        for d in &p.directions {
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if (n - 1.0).abs() > 1e-12 {
                return Err(CloakError::config(format!("direction {d:?} is not a unit vector")));
            }
        }
        if p.frequency_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(CloakError::config("frequency factors must be positive"));
        }
        if p.pml_sigma0.is_some_and(|s| !(s > 0.0)) {
            return Err(CloakError::config("PML amplitude must be positive"));
        }
        p.settings()?;
        let m = &self.measure;
        if !(m.gamma > 0.0 && m.delta > 0.0) {
            return Err(CloakError::config("measure gamma and delta must be positive"));
        }
        if m.alpha != 2.0 {
            return Err(CloakError::config(format!("only alpha = 2 is supported, got {}", m.alpha)));
        }
        self.newton().validate()?;
        match self.variant.kind.as_str() {
            "deterministic" => {}
            "saa" if self.variant.samples >= 1 => {}
            "saa" => return Err(CloakError::config("SAA needs at least one sample")),
            "taylor" if self.variant.oversampling <= 10 || self.variant.dense => {}
            "taylor" => return Err(CloakError::config("oversampling may not exceed 10")),
            other => return Err(CloakError::config(format!("unknown variant '{other}'"))),
        }
        if self.study.samples < 2 {
            return Err(CloakError::config("studies need at least two samples"));
        }
        Ok(())
    }
}
