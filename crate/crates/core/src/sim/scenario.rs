//! Scenario configuration: vehicle, reference, controller, timing and events.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::controller::InputBounds;
use crate::error::{Error, Result};
use crate::mechanism::{AMParams, ParamsConfig};
use crate::reduced::ExtendedState;

use super::reference::ReferenceSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    #[serde(default = "default_dt_physics")]
    pub dt_physics: f64,
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    pub duration: f64,
}

fn default_dt_physics() -> f64 {
    1e-4
}

fn default_control_period() -> f64 {
    1e-3
}

impl TimingConfig {
    /// Physics steps per control update.
    pub fn substeps(&self) -> Result<usize> {
        let ratio = self.control_period / self.dt_physics;
        let n = ratio.round();
        if !(self.dt_physics > 0.0 && n >= 1.0 && (ratio - n).abs() < 1e-9 * n) {
            return Err(Error::Config(format!(
                "control period {} must be a positive integer multiple of dt_physics {}",
                self.control_period, self.dt_physics
            )));
        }
        Ok(n as usize)
    }

    pub fn control_steps(&self) -> Result<usize> {
        let n = (self.duration / self.control_period).round();
        if !(self.duration > 0.0) || (n * self.control_period - self.duration).abs() > 1e-9 * self.duration.max(1.0) {
            return Err(Error::Config(format!(
                "duration {} must be a positive multiple of the control period {}",
                self.duration, self.control_period
            )));
        }
        Ok(n as usize)
    }
}

/// Additive offsets applied to the reference-consistent initial state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    #[serde(default)]
    pub p: Option<[f64; 3]>,
    #[serde(default)]
    pub l: Option<[f64; 3]>,
    #[serde(default)]
    pub xi: Option<[f64; 3]>,
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    #[serde(default)]
    pub eta_dot: Option<Vec<f64>>,
    #[serde(default)]
    pub thrust: Option<f64>,
}

impl Disturbance {
    pub fn apply(&self, q: &mut ExtendedState) -> Result<()> {
        let k = q.k();
        let check = |v: &Option<Vec<f64>>, name: &str| match v {
            Some(v) if v.len() != k => Err(Error::Config(format!("disturbance {name} needs {k} entries"))),
            _ => Ok(()),
        };
        check(&self.eta, "eta")?;
        check(&self.eta_dot, "eta_dot")?;
        if let Some(d) = self.p {
            q.q.p += Vector3::from(d);
        }
        if let Some(d) = self.l {
            q.q.l += Vector3::from(d);
        }
        if let Some([a, b, c]) = self.xi {
            q.q.xi.phi += a;
            q.q.xi.theta += b;
            q.q.xi.psi += c;
        }
        if let Some(d) = &self.eta {
            q.q.eta += DVector::from_column_slice(d);
        }
        if let Some(d) = &self.eta_dot {
            q.q.eta_dot += DVector::from_column_slice(d);
        }
        if let Some(d) = self.thrust {
            q.thrust += d;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Diagonal of the CARE weight.
    #[serde(default)]
    pub q_diag: Option<Vec<f64>>,
    /// Full CARE weight, row-major.
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
    /// Override of the decay rate `lambda_min(Q) / lambda_max(P)`.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub bounds: Option<InputBounds>,
}

impl ControllerConfig {
    pub fn weight(&self, k: usize) -> Result<DMatrix<f64>> {
        let n = 11 + 2 * k;
        match (&self.q_diag, &self.q) {
            (Some(_), Some(_)) => Err(Error::Config("give either controller.q_diag or controller.q".into())),
            (Some(d), None) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            (None, Some(rows)) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            (None, None) => Ok(DMatrix::identity(n, n)),
            _ => Err(Error::Config(format!("controller weight must be {n}x{n}"))),
        }
    }
}

/// How momenta are carried across a mass change.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferModel {
    #[default]
    PreserveVelocity,
    PreserveMomentum,
}

/// Instantaneous change of one link's mass; its inertia scales with the mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadEvent {
    pub time: f64,
    /// One-based link index.
    pub link: usize,
    pub mass_delta: f64,
    #[serde(default)]
    pub transfer: TransferModel,
}

impl PayloadEvent {
    pub fn apply_to(&self, params: &mut AMParams) -> Result<()> {
        let i = self
            .link
            .checked_sub(1)
            .filter(|&i| i < params.k())
            .ok_or_else(|| Error::Config(format!("payload event link {} out of range 1..={}", self.link, params.k())))?;
        let link = &mut params.links[i];
        let new_mass = link.mass + self.mass_delta;
        if !(new_mass >= 0.0) {
            return Err(Error::Config(format!("payload event leaves link {} with mass {new_mass}", self.link)));
        }
        if link.mass > 0.0 {
            link.inertia *= new_mass / link.mass;
        }
        link.mass = new_mass;
        params.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Record every n-th physics step.
    #[serde(default = "one")]
    pub decimate: usize,
}

fn one() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { decimate: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Window `[0, horizon]` over which the exponential envelope is evaluated.
    #[serde(default = "default_horizon")]
    pub envelope_horizon: f64,
}

fn default_horizon() -> f64 {
    5.0
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { envelope_horizon: default_horizon() }
    }
}

/// Parameters given inline or as a path relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamsSource {
    File { file: PathBuf },
    Inline(ParamsConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    pub params: ParamsSource,
    pub timing: TimingConfig,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub disturbance: Disturbance,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub events: Vec<PayloadEvent>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Validated scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub params: AMParams,
    pub timing: TimingConfig,
    pub reference: ReferenceSpec,
    pub disturbance: Disturbance,
    pub controller: ControllerConfig,
    pub events: Vec<PayloadEvent>,
    pub output: OutputConfig,
    pub analysis: AnalysisConfig,
}

impl Scenario {
    pub fn from_config(cfg: ScenarioConfig, base_dir: Option<&Path>) -> Result<Self> {
        let params = match &cfg.params {
            ParamsSource::Inline(p) => AMParams::from_config(p)?,
            ParamsSource::File { file } => {
                let path = match base_dir {
                    Some(dir) if file.is_relative() => dir.join(file),
                    _ => file.clone(),
                };
                AMParams::load(&path)?
            }
        };
        let scenario = Self {
            name: cfg.name.unwrap_or_else(|| "scenario".into()),
            params,
            timing: cfg.timing,
            reference: cfg.reference,
            disturbance: cfg.disturbance,
            controller: cfg.controller,
            events: cfg.events,
            output: cfg.output,
            analysis: cfg.analysis,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_config(cfg, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ScenarioConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Self::from_config(cfg, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.params.k();
        self.timing.substeps()?;
        self.timing.control_steps()?;
        self.reference.validate()?;
        if self.reference.k() != k {
            return Err(Error::Config(format!("reference has {} joints, vehicle {k}", self.reference.k())));
        }
        if self.reference.start() != 0.0 || self.reference.end() < self.timing.duration - 1e-12 {
            return Err(Error::Config(format!(
                "reference covers [{}, {}], simulation needs [0, {}]",
                self.reference.start(),
                self.reference.end(),
                self.timing.duration
            )));
        }
        self.controller.weight(k)?;
        if let Some(b) = &self.controller.bounds {
            b.validate(k)?;
        }
        let mut probe = self.params.clone();
        for e in &self.events {
            if !(e.time > 0.0 && e.time < self.timing.duration) {
                return Err(Error::Config(format!("event time {} outside (0, duration)", e.time)));
            }
            e.apply_to(&mut probe)?;
        }
        if self.output.decimate == 0 {
            return Err(Error::Config("output.decimate must be at least 1".into()));
        }
        Ok(())
    }

    /// Replaces the duration, keeping everything else.
    pub fn with_duration(mut self, duration: f64) -> Result<Self> {
        self.timing.duration = duration;
        self.events.retain(|e| e.time < duration);
        self.validate()?;
        Ok(self)
    }
}

/// The bundled two-link scenario shipped with the crate.
pub const BUNDLED_SCENARIO: &str = include_str!("../../scenarios/two_link_delivery.toml");

pub fn bundled_scenario() -> Result<Scenario> {
    Scenario::from_toml_str(BUNDLED_SCENARIO, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenario_is_valid() {
        let s = bundled_scenario().unwrap();
        assert_eq!(s.params.k(), 2);
        assert!((s.params.total_mass() - 4.2).abs() < 1e-12);
        assert_eq!(s.timing.substeps().unwrap(), 10);
    }

    #[test]
    fn timing_must_be_commensurate() {
        let t = TimingConfig { dt_physics: 3e-4, control_period: 1e-3, duration: 1.0 };
        assert!(t.substeps().is_err());
    }

    #[test]
    fn payload_event_scales_inertia() {
        let mut p = AMParams::planar_two_link();
        let before = p.links[1].inertia;
        PayloadEvent { time: 1.0, link: 2, mass_delta: -0.5, transfer: TransferModel::PreserveVelocity }
            .apply_to(&mut p)
            .unwrap();
        assert_eq!(p.links[1].mass, 0.5);
        assert!((p.links[1].inertia - before * 0.5).norm() < 1e-15);
        let bad = PayloadEvent { time: 1.0, link: 3, mass_delta: 0.1, transfer: TransferModel::PreserveMomentum };
        assert!(bad.apply_to(&mut p).is_err());
    }

    #[test]
    fn weight_shapes() {
        let c = ControllerConfig { q_diag: Some(vec![2.0; 15]), ..Default::default() };
        assert_eq!(c.weight(2).unwrap()[(3, 3)], 2.0);
        let c = ControllerConfig { q_diag: Some(vec![2.0; 14]), ..Default::default() };
        assert!(c.weight(2).is_err());
    }
}
