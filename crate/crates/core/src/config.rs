//! Run configuration schema shared by the command line driver: JSON in,
//! validated domain objects out, with field-path error messages.

use crate::lattice::{ChargeLattice, GeneratorData, SpectrumData, TowerSpec};
use crate::metric::{CentralChargeMap, ModuliPatch, PatchPoint};
use crate::quaddiff::QuadraticDifferential;
use crate::sections::{ErrorModel, ErrorProfile, HiggsLocalModel, RationalClosedForm};
use crate::C;
use num_complex::Complex64;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config validation error at {path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

fn c(v: [f64; 2]) -> C {
    Complex64::new(v[0], v[1])
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub quaddiff: Option<QuadDiffConfig>,
    pub model: Option<ModelConfig>,
    pub spectrum: Option<SpectrumConfig>,
    pub patch: Option<PatchConfig>,
    pub sweep: Option<SweepConfig>,
    pub tolerances: Option<TolerancesConfig>,
    pub seed: Option<u64>,
    pub out: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadDiffConfig {
    pub zeros: Vec<[f64; 2]>,
    pub poles: Vec<[f64; 2]>,
    pub normalization: [f64; 2],
    #[serde(default)]
    pub theta: f64,
    /// Seed points for trajectory tracing.
    #[serde(default)]
    pub seeds: Vec<[f64; 2]>,
    /// Zero index for the separatrices command.
    #[serde(default)]
    pub zero_index: usize,
    /// Angle grid for the saddle scan.
    pub theta_grid: Option<AngleGrid>,
    /// Cycles for the period command: each a list of polyline nodes.
    #[serde(default)]
    pub cycles: Vec<Vec<[f64; 2]>>,
    #[serde(default = "default_budget")]
    pub budget: f64,
}

fn default_budget() -> f64 {
    60.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl AngleGrid {
    pub fn values(&self) -> Vec<f64> {
        (0..self.n)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / self.n as f64)
            .collect()
    }
}

impl QuadDiffConfig {
    pub fn build(&self) -> Result<QuadraticDifferential, ConfigError> {
        QuadraticDifferential::new(
            self.zeros.iter().map(|&z| c(z)).collect(),
            self.poles.iter().map(|&p| c(p)).collect(),
            c(self.normalization),
        )
        .map_err(|e| invalid("quaddiff", e.to_string()))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Only the bundled four-pole geometry is configurable for now.
    #[serde(default = "default_preset")]
    pub preset: String,
    pub r: f64,
    pub zeta: [f64; 2],
    #[serde(default)]
    pub error: Option<ErrorConfig>,
    #[serde(default = "default_theta_residue")]
    pub theta_residue: f64,
    /// R values for the remainder sweep (xcoord command).
    #[serde(default)]
    pub r_sweep: Vec<f64>,
}

fn default_preset() -> String {
    "four-pole".into()
}

fn default_theta_residue() -> f64 {
    -0.05
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorConfig {
    pub amplitude: f64,
    pub mu: f64,
    pub delta: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn build(&self, seed_override: Option<u64>) -> Result<HiggsLocalModel, ConfigError> {
        if self.preset != "four-pole" {
            return Err(invalid("model.preset", "only \"four-pole\" is available"));
        }
        let error = match &self.error {
            None => ErrorModel::zero(),
            Some(e) => ErrorModel {
                amplitude: e.amplitude,
                mu: e.mu,
                delta: e.delta,
                profile: ErrorProfile::Seeded {
                    seed: seed_override.unwrap_or(e.seed),
                },
            },
        };
        let model =
            crate::sections::presets::model(self.r, c(self.zeta), error, self.theta_residue);
        model
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        Ok(model)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub rank: usize,
    pub pairing: Vec<Vec<i64>>,
    pub generators: Vec<GeneratorConfig>,
    #[serde(default)]
    pub support: Vec<SupportConfig>,
    #[serde(default)]
    pub towers: Vec<TowerConfig>,
    pub r: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(rename = "Z")]
    pub z: [f64; 2],
    pub theta: f64,
    #[serde(rename = "Omega")]
    pub omega: i64,
    pub sigma: i8,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportConfig {
    pub charge: Vec<i64>,
    #[serde(rename = "Omega")]
    pub omega: i64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerConfig {
    pub base: Vec<i64>,
    pub step: Vec<i64>,
    #[serde(rename = "Omega")]
    pub omega: i64,
    pub m_max: usize,
}

impl SpectrumConfig {
    pub fn build(&self) -> Result<(SpectrumData, Option<f64>), ConfigError> {
        let flat: Vec<i64> = self.pairing.iter().flatten().cloned().collect();
        let lattice = ChargeLattice::new(self.rank, flat)
            .map_err(|e| invalid("spectrum.pairing", e.to_string()))?;
        if self.generators.len() != self.rank {
            return Err(invalid(
                "spectrum.generators",
                format!("expected {} entries, got {}", self.rank, self.generators.len()),
            ));
        }
        let mut spectrum = SpectrumData {
            lattice,
            generators: self
                .generators
                .iter()
                .map(|g| GeneratorData {
                    z: c(g.z),
                    theta: g.theta,
                    omega: g.omega,
                    sigma: g.sigma,
                })
                .collect(),
            extra_support: self
                .support
                .iter()
                .map(|s| (crate::lattice::Charge(s.charge.clone()), s.omega))
                .collect(),
        };
        let towers: Vec<TowerSpec> = self
            .towers
            .iter()
            .map(|t| TowerSpec {
                base: crate::lattice::Charge(t.base.clone()),
                step: crate::lattice::Charge(t.step.clone()),
                omega: t.omega,
                m_max: t.m_max,
            })
            .collect();
        let tail = crate::lattice::expand_towers(&mut spectrum, &towers, self.r);
        spectrum
            .validate()
            .map_err(|e| invalid("spectrum", e.to_string()))?;
        Ok((spectrum, tail))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub rank: usize,
    pub pairing: Vec<Vec<i64>>,
    pub base_dim: usize,
    pub matrix: Vec<Vec<[f64; 2]>>,
    pub offset: Vec<[f64; 2]>,
    pub omega: Vec<i64>,
    pub sigma: Vec<i8>,
    pub r: f64,
    pub point: PatchPointConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchPointConfig {
    pub u: Vec<[f64; 2]>,
    pub theta: Vec<f64>,
}

impl PatchConfig {
    pub fn build(&self) -> Result<(ModuliPatch, PatchPoint), ConfigError> {
        let flat: Vec<i64> = self.pairing.iter().flatten().cloned().collect();
        let lattice = ChargeLattice::new(self.rank, flat)
            .map_err(|e| invalid("patch.pairing", e.to_string()))?;
        if self.matrix.len() != self.rank || self.offset.len() != self.rank {
            return Err(invalid(
                "patch.matrix",
                "one row and one offset per lattice generator required",
            ));
        }
        let patch = ModuliPatch {
            lattice,
            base_dim: self.base_dim,
            charges: CentralChargeMap {
                matrix: self
                    .matrix
                    .iter()
                    .map(|row| row.iter().map(|&v| c(v)).collect())
                    .collect(),
                offset: self.offset.iter().map(|&v| c(v)).collect(),
            },
            omega: self.omega.clone(),
            sigma: self.sigma.clone(),
            r: self.r,
        };
        let point = PatchPoint {
            u: self.point.u.iter().map(|&v| c(v)).collect(),
            theta: self.point.theta.clone(),
        };
        patch
            .validate(&point)
            .map_err(|e| invalid("patch", e.to_string()))?;
        Ok((patch, point))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub r_values: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TolerancesConfig {
    pub abs: Option<f64>,
    pub rel: Option<f64>,
    pub tail: Option<f64>,
    pub tba_tol: Option<f64>,
}

/// Convenience constructor mirroring the sections presets, used by the
/// bundled configurations.
pub fn preset_a1(theta_residue: f64) -> RationalClosedForm {
    let q = crate::sections::presets::four_pole_differential();
    let mut terms: Vec<(C, C)> = q
        .poles
        .iter()
        .enumerate()
        .map(|(k, &p)| (p, Complex64::new(0.02 + 0.01 * k as f64, 0.015)))
        .collect();
    terms.push((Complex64::new(0.0, 0.0), Complex64::new(theta_residue, 0.0)));
    RationalClosedForm {
        terms,
        constant: Complex64::new(0.0, 0.01),
    }
}
