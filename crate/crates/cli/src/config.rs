//! Experiment configuration: JSON schema, presets and override merging.
//!
//! A config file is a JSON object. It may be complete (as written to
//! `manifest.json`) or partial, in which case missing fields are filled from
//! the preset named by `preset` (or by `--preset`). Objects merge key by key;
//! any other value replaces the preset value.

use std::fmt;

use neuroevo_core::dynamics::Beta;
use neuroevo_core::ensemble::Dynamics;
use neuroevo_core::model::Architecture;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Preset {
    Fig1,
    Fig2,
    Fig3,
    Deep,
    FiniteBeta,
    Reset,
    Boltzmann,
    DriftDiffusion,
    GradCheck,
    Custom,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("preset serializes");
        f.write_str(v.as_str().expect("preset is a string"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub scale: Scale,
    pub seed: u64,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Ensemble(EnsembleExperiment),
    Boltzmann(BoltzmannExperiment),
    DriftDiffusion(DriftExperiment),
    GradCheck(GradCheckExperiment),
}

/// Gradient descent against an ensemble of stochastic trajectories, one run
/// per entry of `lambdas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleExperiment {
    pub arch: Architecture,
    /// Number of training points `K`.
    pub samples: usize,
    /// Standard deviation of the initial parameters.
    pub init_std: f64,
    /// Stochastic dynamics; the reference is its gradient-descent counterpart.
    pub dynamics: Dynamics,
    pub alpha: f64,
    pub lambdas: Vec<f64>,
    pub trajectories: usize,
    pub t_max: f64,
    pub record_interval: f64,
    /// Parameter indices written to `timeseries.csv`.
    pub tracked_weights: Vec<usize>,
    /// Individual trajectories written next to the mean.
    pub sample_trajectories: usize,
    /// Ensemble sizes at which `Delta` is also reported.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub reset_period: Option<f64>,
    /// Tolerance on `|<U> - U_gd| / U_gd(0)` used by `--check`.
    pub loss_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoltzmannExperiment {
    pub kappa: f64,
    pub dim: usize,
    pub beta: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub bins: usize,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftCase {
    pub beta: Beta,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftExperiment {
    /// Gradient of the linear toy loss.
    pub gradient: Vec<f64>,
    pub point: Vec<f64>,
    pub probes: usize,
    pub cases: Vec<DriftCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckTarget {
    pub arch: Architecture,
    pub samples: usize,
    pub points: usize,
    #[serde(default)]
    pub coords_per_point: Option<usize>,
    pub param_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckExperiment {
    pub targets: Vec<GradCheckTarget>,
    pub tolerance: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {reason}")]
    Field { field: String, reason: String },
}

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), reason: reason.into() }
}

fn shallow_ensemble(scale: Scale) -> Value {
    let desk = scale == Scale::Desk;
    json!({
        "kind": "ensemble",
        "arch": {"kind": "shallow", "hidden": if desk { 10 } else { 30 }},
        "samples": if desk { 100 } else { 1000 },
        "init_std": 1e-2,
        "dynamics": {"method": "neuroevolution", "beta": "inf"},
        "alpha": if desk { 1e-3 } else { 1e-5 },
        "lambdas": [0.1],
        "trajectories": if desk { 200 } else { 1000 },
        "t_max": if desk { 2.0 } else { 10.0 },
        "record_interval": 0.1,
        "tracked_weights": [0, 1, 2, 3],
        "sample_trajectories": 25,
        "loss_tolerance": 0.05,
    })
}

/// The fully expanded preset as a JSON value.
pub fn preset_value(preset: Preset, scale: Scale) -> Value {
    let desk = scale == Scale::Desk;
    let experiment = match preset {
        Preset::Fig1 | Preset::Custom => shallow_ensemble(scale),
        Preset::Fig2 => {
            let mut v = shallow_ensemble(scale);
            v["lambdas"] = if desk { json!([1.0, 0.5, 0.1]) } else { json!([1.0, 0.1, 0.01]) };
            v["trajectories"] = json!(if desk { 100 } else { 1000 });
            v["tracked_weights"] = json!([0]);
            v["loss_tolerance"] = json!(0.1);
            v
        }
        Preset::Fig3 => {
            let mut v = shallow_ensemble(scale);
            v["lambdas"] = if desk { json!([10.0, 1.0, 0.1]) } else { json!([10.0, 1.0, 0.1, 0.01]) };
            v["trajectories"] = json!(if desk { 50 } else { 1000 });
            v["tracked_weights"] = json!([0]);
            v["sample_trajectories"] = json!(5);
            v["loss_tolerance"] = json!(0.1);
            v
        }
        Preset::Deep => {
            let mut v = shallow_ensemble(scale);
            v["arch"] = if desk {
                json!({"kind": "deep", "layers": 4, "width": 16})
            } else {
                json!({"kind": "deep", "layers": 8, "width": 32})
            };
            v["init_std"] = json!(0.3);
            v["lambdas"] = json!([1.0, 0.1]);
            v["trajectories"] = json!(100);
            v["t_max"] = json!(if desk { 0.5 } else { 10.0 });
            v["tracked_weights"] = json!([0, 1]);
            v["loss_tolerance"] = json!(0.1);
            v
        }
        Preset::FiniteBeta => {
            let mut v = shallow_ensemble(scale);
            v["arch"] = json!({"kind": "shallow", "hidden": if desk { 32 } else { 256 }});
            v["dynamics"] = json!({"method": "neuroevolution", "beta": 1e3});
            v["alpha"] = json!(1e-4);
            v["lambdas"] = json!([1.0]);
            v["trajectories"] = json!(if desk { 500 } else { 1000 });
            v["t_max"] = json!(if desk { 0.2 } else { 10.0 });
            v["tracked_weights"] = json!([0, 1]);
            v["checkpoints"] = if desk { json!([50, 200, 500]) } else { json!([50, 200, 500, 1000]) };
            v["loss_tolerance"] = json!(0.1);
            v
        }
        Preset::Reset => {
            if desk {
                let mut v = shallow_ensemble(scale);
                v["reset_period"] = json!(0.5);
                v["tracked_weights"] = json!([0]);
                v["sample_trajectories"] = json!(0);
                v["loss_tolerance"] = json!(0.1);
                v
            } else {
                let mut v = preset_value(Preset::FiniteBeta, scale)["experiment"].clone();
                v["trajectories"] = json!(152);
                v["t_max"] = json!(20.0);
                v["checkpoints"] = json!([]);
                v["reset_period"] = json!(5.0);
                v["tracked_weights"] = json!([0]);
                v["sample_trajectories"] = json!(0);
                v
            }
        }
        Preset::Boltzmann => json!({
            "kind": "boltzmann",
            "kappa": 1.0,
            "dim": 2,
            "beta": 10.0,
            "steps": 1_000_000,
            "burn_in": 100_000,
            "thin": 50,
            "bins": 20,
            "batches": 100,
        }),
        Preset::DriftDiffusion => json!({
            "kind": "drift_diffusion",
            "gradient": [0.6, -0.8],
            "point": [0.0, 0.0],
            "probes": if desk { 100_000 } else { 1_000_000 },
            "cases": [
                {"beta": "inf", "sigma": 0.05},
                {"beta": 10.0, "sigma": 3e-4},
            ],
        }),
        Preset::GradCheck => json!({
            "kind": "grad_check",
            "targets": [
                {"arch": {"kind": "shallow", "hidden": 30}, "samples": 1000, "points": 100, "param_std": 1.0},
                {"arch": {"kind": "deep", "layers": 8, "width": 32}, "samples": 100, "points": 20,
                 "coords_per_point": if desk { json!(20) } else { json!(null) }, "param_std": 0.3},
            ],
            "tolerance": 1e-5,
        }),
    };
    json!({"preset": preset, "scale": scale, "seed": 42, "experiment": experiment})
}

/// Recursively overlays `patch` onto `base`.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() && k != "arch" && k != "dynamics" => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub struct Overrides {
    pub preset: Option<Preset>,
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
}

/// Resolves the final config from an optional file and command-line flags.
/// Flags take precedence over the file, which takes precedence over the preset.
pub fn resolve(file: Option<&str>, flags: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let user: Value = match file {
        Some(text) => serde_json::from_str(text).map_err(|e| ConfigError::Parse(format!("config JSON: {e}")))?,
        None => json!({}),
    };
    if !user.is_object() {
        return Err(ConfigError::Parse("config JSON: top level must be an object".into()));
    }
    let from_file = |key: &str| -> Result<Option<Value>, ConfigError> { Ok(user.get(key).cloned()) };
    let preset = match (flags.preset, from_file("preset")?) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| field("preset", e.to_string()))?,
        (None, None) => return Err(field("preset", "no preset given (use --preset or a config file)")),
    };
    let scale = match (flags.scale, from_file("scale")?) {
        (Some(s), _) => s,
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| field("scale", e.to_string()))?,
        (None, None) => Scale::Desk,
    };

    let mut value = preset_value(preset, scale);
    merge(&mut value, &user);
    value["preset"] = json!(preset);
    value["scale"] = json!(scale);
    if let Some(seed) = flags.seed {
        value["seed"] = json!(seed);
    }
    let config: ExperimentConfig = serde_json::from_value(value).map_err(|e| ConfigError::Parse(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field(name, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.experiment {
            Experiment::Ensemble(e) => e.validate(),
            Experiment::Boltzmann(b) => {
                positive("experiment.kappa", b.kappa)?;
                positive("experiment.beta", b.beta)?;
                if b.dim == 0 {
                    return Err(field("experiment.dim", "must be at least 1"));
                }
                if b.steps == 0 || b.thin == 0 {
                    return Err(field("experiment.steps", "steps and thin must be at least 1"));
                }
                if b.bins < 2 || b.batches < 2 {
                    return Err(field("experiment.bins", "bins and batches must be at least 2"));
                }
                Ok(())
            }
            Experiment::DriftDiffusion(d) => {
                if d.gradient.is_empty() || d.gradient.len() != d.point.len() {
                    return Err(field("experiment.point", "must have the same nonzero length as experiment.gradient"));
                }
                if d.probes < 1000 {
                    return Err(field("experiment.probes", "must be at least 1000"));
                }
                if d.cases.is_empty() {
                    return Err(field("experiment.cases", "must not be empty"));
                }
                for (i, c) in d.cases.iter().enumerate() {
                    positive(&format!("experiment.cases[{i}].sigma"), c.sigma)?;
                    c.beta
                        .validate()
                        .map_err(|e| field(&format!("experiment.cases[{i}].beta"), e.to_string()))?;
                }
                Ok(())
            }
            Experiment::GradCheck(g) => {
                if g.targets.is_empty() {
                    return Err(field("experiment.targets", "must not be empty"));
                }
                positive("experiment.tolerance", g.tolerance)?;
                for (i, t) in g.targets.iter().enumerate() {
                    t.arch
                        .validate()
                        .map_err(|e| field(&format!("experiment.targets[{i}].arch"), e.to_string()))?;
                    if t.samples == 0 || t.points == 0 {
                        return Err(field(&format!("experiment.targets[{i}]"), "samples and points must be at least 1"));
                    }
                    positive(&format!("experiment.targets[{i}].param_std"), t.param_std)?;
                }
                Ok(())
            }
        }
    }
}

impl EnsembleExperiment {
    fn validate(&self) -> Result<(), ConfigError> {
        self.arch
            .validate()
            .map_err(|e| field("experiment.arch", e.to_string()))?;
        if self.samples == 0 {
            return Err(field("experiment.samples", "must be at least 1"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(field("experiment.init_std", "must be finite and >= 0"));
        }
        match self.dynamics {
            Dynamics::GradientDescent { .. } => {
                return Err(field(
                    "experiment.dynamics",
                    "must be neuroevolution or langevin; gradient descent is the reference",
                ))
            }
            Dynamics::Neuroevolution { beta } | Dynamics::Langevin { beta } => beta
                .validate()
                .map_err(|e| field("experiment.dynamics.beta", e.to_string()))?,
        }
        positive("experiment.alpha", self.alpha)?;
        if self.lambdas.is_empty() {
            return Err(field("experiment.lambdas", "must not be empty"));
        }
        for (i, &l) in self.lambdas.iter().enumerate() {
            positive(&format!("experiment.lambdas[{i}]"), l)?;
        }
        if self.trajectories == 0 {
            return Err(field("experiment.trajectories", "must be at least 1"));
        }
        positive("experiment.t_max", self.t_max)?;
        positive("experiment.record_interval", self.record_interval)?;
        let n = self.arch.param_count();
        if let Some(&w) = self.tracked_weights.iter().find(|&&w| w >= n) {
            return Err(field("experiment.tracked_weights", format!("index {w} out of range for {n} parameters")));
        }
        if self.sample_trajectories > self.trajectories {
            return Err(field("experiment.sample_trajectories", "exceeds experiment.trajectories"));
        }
        if let Some(&c) = self.checkpoints.iter().find(|&&c| c == 0 || c > self.trajectories) {
            return Err(field("experiment.checkpoints", format!("{c} is outside 1..=trajectories")));
        }
        if let Some(p) = self.reset_period {
            positive("experiment.reset_period", p)?;
            if self.sample_trajectories > 0 || !self.checkpoints.is_empty() {
                return Err(field(
                    "experiment.reset_period",
                    "sample_trajectories and checkpoints are not recorded under resets; set them to 0 and []",
                ));
            }
        }
        positive("experiment.loss_tolerance", self.loss_tolerance)?;
        Ok(())
    }
}
