use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{Pose, RigidBodyTemplate};
use crate::measurement::{AnchorSet, MeasurementModel, Modality, NoiseSpec, RssiModelParams};
use crate::soft::SoftConstraint;

pub const SCHEMA_VERSION: u32 = 1;

/// Estimators the harness knows how to run.
pub const ESTIMATORS: [&str; 5] = ["point_ls", "rbl", "soft_joint", "gpr", "gpr_rbl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub template: RigidBodyTemplate,
    pub pose: Pose,
    /// Indices into the scenario anchors this body observes; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dim: usize,
    pub bodies: Vec<BodyConfig>,
    /// One row per anchor.
    pub anchors: Vec<Vec<f64>>,
    #[serde(default)]
    pub constraints: Vec<SoftConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseGrid {
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub nlos_prob: f64,
    #[serde(default)]
    pub nlos_bias: f64,
}

/// Uniform per-trial perturbation of every body's true pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpread {
    /// Half-width of the angle offset (radians).
    #[serde(default)]
    pub angle: f64,
    /// Half-width of each translation offset.
    #[serde(default)]
    pub translation: f64,
}

impl PoseSpread {
    pub fn is_zero(&self) -> bool {
        self.angle == 0.0 && self.translation == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub doa_starts: usize,
    pub penalty_rounds: usize,
    pub penalty_ramp: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            doa_starts: 8,
            penalty_rounds: 5,
            penalty_ramp: 10.0,
        }
    }
}

/// Regular training grid of node positions for the GPR estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GprConfig {
    pub grid_min: Vec<f64>,
    pub grid_max: Vec<f64>,
    pub grid_steps: Vec<usize>,
    #[serde(default = "one")]
    pub amp: f64,
    /// Initial value of every entry of `B`.
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    #[serde(default)]
    pub lin: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default = "yes")]
    pub train: bool,
    #[serde(default = "default_gpr_iterations")]
    pub max_iterations: usize,
}

fn one() -> f64 {
    1.0
}

fn default_length_scale() -> f64 {
    25.0
}

fn default_noise_var() -> f64 {
    0.01
}

fn yes() -> bool {
    true
}

fn default_gpr_iterations() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// One Monte Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub scenario: Scenario,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi: Option<RssiModelParams>,
    pub noise: NoiseGrid,
    pub estimators: Vec<String>,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub pose_spread: PoseSpread,
    /// Drop the estimator name from the noise seed so every estimator sees
    /// the same observations.
    #[serde(default)]
    pub paired_noise: bool,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpr: Option<GprConfig>,
    /// Record real wall-clock times; off by default so outputs are reproducible.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        match value.get("schema").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(HarnessError::Validation(vec![format!(
                    "unsupported schema {v}, expected {SCHEMA_VERSION}"
                )]))
            }
            None => {
                return Err(HarnessError::Validation(vec![
                    "missing integer \"schema\" field".into(),
                ]))
            }
        }
        let config: Self =
            serde_json::from_value(value).map_err(|e| HarnessError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn model(&self) -> MeasurementModel {
        match self.modality {
            Modality::Range => MeasurementModel::Range,
            Modality::Doa => MeasurementModel::Doa,
            Modality::Rssi => MeasurementModel::Rssi(self.rssi.unwrap_or_default()),
        }
    }

    pub fn noise_at(&self, sigma: f64) -> NoiseSpec {
        NoiseSpec::gaussian(sigma).with_nlos(self.noise.nlos_prob, self.noise.nlos_bias)
    }

    pub fn anchor_set(&self) -> Result<AnchorSet, HarnessError> {
        AnchorSet::from_rows("scenario", self.scenario.dim, &self.scenario.anchors)
            .map_err(|e| HarnessError::Validation(vec![format!("anchors: {e}")]))
    }

    /// Anchors observed by each body.
    pub fn body_anchors(&self) -> Result<Vec<AnchorSet>, HarnessError> {
        let all = self.anchor_set()?;
        self.scenario
            .bodies
            .iter()
            .map(|b| match &b.anchors {
                None => Ok(all.clone()),
                Some(idx) => all
                    .select(idx)
                    .map_err(|e| HarnessError::Validation(vec![format!("body anchors: {e}")])),
            })
            .collect()
    }

    pub fn templates(&self) -> Vec<RigidBodyTemplate> {
        self.scenario
            .bodies
            .iter()
            .map(|b| b.template.clone())
            .collect()
    }

    /// Every violation, not just the first.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut errs = Vec::new();
        if self.schema != SCHEMA_VERSION {
            errs.push(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                self.schema
            ));
        }
        if self.trials == 0 {
            errs.push("trials must be at least 1".into());
        }
        if self.noise.sigmas.is_empty() {
            errs.push("noise.sigmas must list at least one σ".into());
        }
        for (i, s) in self.noise.sigmas.iter().enumerate() {
            if !(s.is_finite() && *s >= 0.0) {
                errs.push(format!("noise.sigmas[{i}] = {s} must be finite and ≥ 0"));
            }
        }
        if let Err(e) = self.noise_at(0.0).validate() {
            errs.push(format!("noise: {e}"));
        }
        if self.estimators.is_empty() {
            errs.push("estimators must name at least one estimator".into());
        }
        let mut seen = BTreeSet::new();
        for name in &self.estimators {
            if !ESTIMATORS.contains(&name.as_str()) {
                errs.push(format!(
                    "unknown estimator \"{name}\" (known: {})",
                    ESTIMATORS.join(", ")
                ));
            }
            if !seen.insert(name.as_str()) {
                errs.push(format!("estimator \"{name}\" listed twice"));
            }
        }
        let d = self.scenario.dim;
        if !(d == 2 || d == 3) {
            errs.push(format!("scenario.dim must be 2 or 3, got {d}"));
        }
        if self.modality == Modality::Doa && d != 2 {
            errs.push("doa modality is 2D only".into());
        }
        if let Some(p) = &self.rssi {
            if self.modality != Modality::Rssi {
                errs.push("rssi parameters given for a non-rssi modality".into());
            }
            if let Err(e) = p.validate() {
                errs.push(format!("rssi: {e}"));
            }
        }
        if self.scenario.anchors.is_empty() {
            errs.push("scenario.anchors must list at least one anchor".into());
        } else if let Err(HarnessError::Validation(v)) = self.anchor_set() {
            errs.extend(v);
        }
        if self.scenario.bodies.is_empty() {
            errs.push("scenario.bodies must list at least one body".into());
        }
        let m = self.scenario.anchors.len();
        for (i, b) in self.scenario.bodies.iter().enumerate() {
            if b.template.dim() != d {
                errs.push(format!(
                    "body {i}: template is {}D in a {d}D scenario",
                    b.template.dim()
                ));
            }
            if b.pose.dim() != d {
                errs.push(format!(
                    "body {i}: pose is {}D in a {d}D scenario",
                    b.pose.dim()
                ));
            }
            if let Some(idx) = &b.anchors {
                if idx.is_empty() {
                    errs.push(format!("body {i}: anchor subset is empty"));
                }
                if let Some(bad) = idx.iter().find(|&&a| a >= m) {
                    errs.push(format!(
                        "body {i}: anchor index {bad} out of range ({m} anchors)"
                    ));
                }
                if idx.iter().collect::<BTreeSet<_>>().len() != idx.len() {
                    errs.push(format!("body {i}: anchor subset repeats an index"));
                }
            }
        }
        if self.scenario.bodies.iter().all(|b| b.template.dim() == d) {
            let templates = self.templates();
            for (i, c) in self.scenario.constraints.iter().enumerate() {
                if let Err(e) = c.validate(&templates) {
                    errs.push(format!("constraint {i}: {e}"));
                }
            }
        }
        let spread = self.pose_spread;
        if !(spread.angle >= 0.0 && spread.angle.is_finite())
            || !(spread.translation >= 0.0 && spread.translation.is_finite())
        {
            errs.push("pose_spread half-widths must be finite and ≥ 0".into());
        }
        let s = self.solver;
        if s.max_iterations == 0 || s.doa_starts == 0 || s.penalty_rounds == 0 {
            errs.push("solver iteration, start and round counts must be ≥ 1".into());
        }
        if !(s.penalty_ramp >= 1.0 && s.penalty_ramp.is_finite()) {
            errs.push(format!(
                "solver.penalty_ramp must be ≥ 1, got {}",
                s.penalty_ramp
            ));
        }
        let wants_gpr = self.estimators.iter().any(|e| e.starts_with("gpr"));
        if wants_gpr {
            if self.modality != Modality::Rssi {
                errs.push("gpr estimators need the rssi modality".into());
            }
            if self.scenario.bodies.iter().any(|b| b.anchors.is_some()) {
                errs.push("gpr estimators need every body to observe all anchors".into());
            }
            match &self.gpr {
                None => errs.push("gpr estimators need a \"gpr\" training block".into()),
                Some(g) => errs.extend(g.violations(d)),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Validation(errs))
        }
    }
}

impl GprConfig {
    fn violations(&self, dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.grid_min.len() != dim || self.grid_max.len() != dim || self.grid_steps.len() != dim
        {
            errs.push(format!("gpr grid bounds and steps need {dim} entries each"));
        } else {
            for i in 0..dim {
                if !(self.grid_min[i].is_finite()
                    && self.grid_max[i].is_finite()
                    && self.grid_min[i] <= self.grid_max[i])
                {
                    errs.push(format!("gpr grid axis {i} bounds are not ordered"));
                }
            }
            if self.grid_steps.contains(&0) {
                errs.push("gpr grid steps must be ≥ 1".into());
            }
            if self.grid_steps.iter().product::<usize>() < 2 {
                errs.push("gpr grid needs at least 2 training points".into());
            }
        }
        if !(self.amp > 0.0 && self.length_scale > 0.0 && self.lin >= 0.0 && self.noise_var >= 0.0)
            || ![self.amp, self.length_scale, self.lin, self.noise_var]
                .iter()
                .all(|v| v.is_finite())
        {
            errs.push(
                "gpr hyperparameters need amp > 0, length_scale > 0, lin ≥ 0, noise_var ≥ 0".into(),
            );
        }
        errs
    }

    /// Grid points, first axis fastest.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let dim = self.grid_steps.len();
        let total: usize = self.grid_steps.iter().product();
        (0..total)
            .map(|mut idx| {
                (0..dim)
                    .map(|axis| {
                        let n = self.grid_steps[axis];
                        let i = idx % n;
                        idx /= n;
                        if n == 1 {
                            0.5 * (self.grid_min[axis] + self.grid_max[axis])
                        } else {
                            self.grid_min[axis]
                                + (self.grid_max[axis] - self.grid_min[axis]) * i as f64
                                    / (n - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
