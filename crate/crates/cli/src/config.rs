//! Run configuration. One JSON document serves every subcommand; each
//! subcommand reads only the sections it needs and falls back to defaults for
//! the rest. Unknown keys are rejected at every level. Angles are in degrees.

use std::path::Path;

use eit_dipole::newton::{NewtonConfig, RecoveryExperiment};
use eit_dipole::oed::{CompareConfig, DesignGrid, EigOptions, McmcOptions, SurfaceOptions};
use eit_dipole::oracle::QuadratureSpec;
use eit_dipole::{DesignAngles, EllipseAnomaly, EllipseParams, GaussianPrior3, NoiseKind, NoiseModel, SymmetricDesign};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: Option<u64>,
    pub anomaly: Option<AnomalyConfig>,
    pub design: Option<DesignConfig>,
    pub noise: Option<NoiseConfig>,
    /// Conductivity contrast for the polarization-tensor model.
    pub gamma: Option<f64>,
    pub point: Option<PointConfig>,
    pub field: Option<FieldConfig>,
    pub prior: Option<GaussianPrior3>,
    pub grid: Option<DesignGrid>,
    pub mc: Option<McConfig>,
    pub posterior: Option<PosteriorConfig>,
    pub newton: Option<NewtonConfig>,
    pub start: Option<StartConfig>,
    pub table2: Option<Table2Config>,
    pub compare: Option<CompareConfig>,
    pub quadrature: Option<QuadratureSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyConfig {
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
    pub xi_deg: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self { b1: 0.4, b2: 0.5, a1: 0.08, a2: 0.04, xi_deg: 45.0 }
    }
}

impl AnomalyConfig {
    pub fn ellipse(&self) -> Result<EllipseAnomaly, CliError> {
        Ok(EllipseAnomaly::from_degrees(self.b1, self.b2, self.a1, self.a2, self.xi_deg)?)
    }

    pub fn params(&self) -> EllipseParams {
        EllipseParams { b1: self.b1, b2: self.b2, a1: self.a1, a2: self.a2, xi: self.xi_deg.to_radians() }
    }
}

/// Either explicit angles or a symmetric design `(φ−ψ, φ+ψ, φ)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub angles_deg: Option<Vec<f64>>,
    pub symmetric: Option<SymmetricConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricConfig {
    pub phi_deg: f64,
    pub psi_deg: f64,
}

impl DesignConfig {
    pub fn angles(&self) -> Result<Option<DesignAngles>, CliError> {
        match (&self.angles_deg, &self.symmetric) {
            (Some(_), Some(_)) => Err(CliError::Config("design: give either angles_deg or symmetric, not both".into())),
            (Some(a), None) => Ok(Some(DesignAngles::from_degrees(a)?)),
            (None, Some(s)) => Ok(Some(SymmetricDesign::from_degrees(s.phi_deg, s.psi_deg)?.angles()?)),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseConfig {
    pub fn model(&self) -> Result<NoiseModel, CliError> {
        Ok(NoiseModel::new(self.kind, self.sigma)?)
    }
}

/// Prior point `(A, b₁, b₂)` for the deterministic design and stability checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    pub area: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for PointConfig {
    fn default() -> Self {
        Self { area: 0.01, b1: 0.4, b2: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub phi_deg: f64,
    /// Grid points per axis over `[-1, 1]`.
    pub resolution: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { phi_deg: 30.0, resolution: 101 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub n_out: usize,
    pub n_in: usize,
    pub sigma: f64,
    pub reuse_outer: bool,
    pub common_random_numbers: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        let s = SurfaceOptions::default();
        Self {
            n_out: s.eig.n_out,
            n_in: s.eig.n_in,
            sigma: s.eig.sigma,
            reuse_outer: s.eig.reuse_outer,
            common_random_numbers: s.common_random_numbers,
        }
    }
}

impl McConfig {
    pub fn surface(&self) -> SurfaceOptions {
        SurfaceOptions {
            eig: EigOptions { n_out: self.n_out, n_in: self.n_in, sigma: self.sigma, reuse_outer: self.reuse_outer },
            common_random_numbers: self.common_random_numbers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorConfig {
    /// Ground truth `(A, b₁, b₂)` used when no data file is given.
    pub truth: [f64; 3],
    pub sigma: f64,
    pub mcmc: McmcOptions,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self { truth: [0.0107, 0.2760, 0.1874], sigma: 1e-3, mcmc: McmcOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartConfig {
    /// Angles (by index) used for the three-measurement starting point.
    pub subset: [usize; 3],
    /// Starting values of `ζ = sin ξ`; the best final residual wins.
    pub zetas: Vec<f64>,
}

impl Default for StartConfig {
    fn default() -> Self {
        Self { subset: [0, 1, 2], zetas: vec![0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table2Config {
    pub truth: AnomalyConfig,
    pub angles_deg: Vec<f64>,
    pub subset: [usize; 3],
    pub levels: Vec<f64>,
    pub seeds_per_level: usize,
    pub zeta0: f64,
}

impl Default for Table2Config {
    fn default() -> Self {
        let d = RecoveryExperiment::default();
        Self {
            truth: AnomalyConfig::default(),
            angles_deg: d.angles_deg,
            subset: d.subset,
            levels: d.levels,
            seeds_per_level: d.seeds_per_level,
            zeta0: d.zeta0,
        }
    }
}

impl Table2Config {
    pub fn experiment(&self, newton: NewtonConfig) -> RecoveryExperiment {
        RecoveryExperiment {
            truth: self.truth.params(),
            angles_deg: self.angles_deg.clone(),
            subset: self.subset,
            levels: self.levels.clone(),
            seeds_per_level: self.seeds_per_level,
            zeta0: self.zeta0,
            newton,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn design_or(&self, default_deg: &[f64]) -> Result<DesignAngles, CliError> {
        match self.design.as_ref().map(DesignConfig::angles).transpose()?.flatten() {
            Some(d) => Ok(d),
            None => Ok(DesignAngles::from_degrees(default_deg)?),
        }
    }

    pub fn noise_model(&self) -> Result<Option<NoiseModel>, CliError> {
        self.noise.as_ref().map(NoiseConfig::model).transpose()
    }
}
