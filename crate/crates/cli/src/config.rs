//! Run configuration: the JSON document every command reads.

use std::fmt;
use std::path::{Path, PathBuf};

use rtsom::experiments::ExperimentSpec;
use rtsom::grid::Rect;
use rtsom::medium::{Coefficient, PhantomSpec};
use rtsom::recon::{Algorithm, BfgsOptions, ReconConfig, Step2Solver};
use rtsom::spectral::{LPolicy, SvdMethod};
use serde::{Deserialize, Serialize};

/// Bad or inconsistent configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub mesh: MeshSection,
    pub angular: AngularSection,
    pub sources: CountSection,
    pub detectors: CountSection,
    pub phantom: PhantomSpec,
    pub mode: Coefficient,
    #[serde(default)]
    pub svd: SvdSection,
    #[serde(default)]
    pub recon: ReconSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    #[serde(default = "default_domain")]
    pub domain: Rect,
    pub nx: usize,
    pub ny: usize,
    /// Forward cells per inversion cell along each axis.
    #[serde(default = "default_factor")]
    pub forward_factor: usize,
}

fn default_domain() -> Rect {
    Rect::square(2.0)
}

fn default_factor() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularSection {
    pub ns: usize,
    pub forward_ns: usize,
    #[serde(default)]
    pub anisotropy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountSection {
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdSection {
    /// Cache file; defaults to `<output>/cache/<name>-<mode>.svd`.
    pub cache: Option<PathBuf>,
    pub truncation: LPolicy,
    pub method: SvdMethod,
}

impl Default for SvdSection {
    fn default() -> Self {
        Self {
            cache: None,
            truncation: ReconConfig::default().truncation,
            method: SvdMethod::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub algorithm: Algorithm,
    /// Start from the stored result of an earlier algorithm run.
    pub init_from: Option<Algorithm>,
    pub optimizer: BfgsOptions,
    pub step2_solver: Step2Solver,
    pub positivity_floor: Option<f64>,
    pub initial_value: Option<f64>,
}

impl Default for ReconSection {
    fn default() -> Self {
        let base = ReconConfig::default();
        Self {
            algorithm: base.algorithm,
            init_from: None,
            optimizer: base.optimizer,
            step2_solver: base.step2_solver,
            positivity_floor: base.positivity_floor,
            initial_value: base.initial_value,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Levels in percent.
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            levels: vec![0.0],
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError(msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name {:?} must be a non-empty plain file name", self.name));
        }
        if let Some(l) = self.noise.levels.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return bad(format!("noise level {l} must be finite and >= 0"));
        }
        if self.recon.init_from == Some(self.recon.algorithm) {
            return bad("recon.init_from must name a different algorithm".into());
        }
        if let LPolicy::Fixed { value: 0 } = self.svd.truncation {
            return bad("svd.truncation fixed value must be >= 1".into());
        }
        self.recon
            .optimizer
            .validate()
            .map_err(|e| ConfigError(format!("recon.optimizer: {e}")))?;
        let spec = self.experiment();
        let check = || -> rtsom::Result<()> {
            spec.validate()?;
            spec.inversion_mesh()?;
            spec.forward_mesh()?;
            spec.inversion_angular()?;
            spec.forward_angular()?;
            Ok(())
        };
        check().map_err(|e| ConfigError(e.to_string()))
    }

    pub fn experiment(&self) -> ExperimentSpec {
        ExperimentSpec {
            name: self.name.clone(),
            phantom: self.phantom.clone(),
            domain: self.mesh.domain,
            nx: self.mesh.nx,
            ny: self.mesh.ny,
            ns: self.angular.ns,
            forward_mesh_factor: self.mesh.forward_factor,
            forward_ns: self.angular.forward_ns,
            anisotropy: self.angular.anisotropy,
            n_sources: self.sources.count,
            n_detectors: self.detectors.count,
            noise_levels: self.noise.levels.clone(),
            seed: self.noise.seed,
            mode: self.mode,
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            algorithm: self.recon.algorithm,
            truncation: self.svd.truncation.clone(),
            optimizer: self.recon.optimizer.clone(),
            step2_solver: self.recon.step2_solver,
            positivity_floor: self.recon.positivity_floor,
            initial_value: self.recon.initial_value,
            ..ReconConfig::default()
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.svd.cache.clone().unwrap_or_else(|| {
            let mode = match self.mode {
                Coefficient::Absorption => "absorption",
                Coefficient::Scattering => "scattering",
            };
            self.output
                .directory
                .join("cache")
                .join(format!("{}-{mode}.svd", self.name))
        })
    }
}
