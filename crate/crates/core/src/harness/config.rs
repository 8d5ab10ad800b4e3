//! Experiment configuration: JSON ingestion, validation, resolution of
//! defaults and sweep-grid expansion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::rng::aux_stream;
use crate::numerics::{NoiseSpec, ParameterVector, ProblemSpec};
use crate::optim::{BaseOptimizerConfig, OptimizerKind};
use crate::protocol::ProtocolSpec;
use crate::slowmo::SlowMoConfig;
use crate::topology::{Stochasticity, TopologySchedule, TopologySpec};

const INIT_STREAM: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub workers: usize,
    /// Total inner steps `K`; the run has `⌈K/τ⌉` outer iterations.
    pub total_steps: u64,
    pub problem: ProblemSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default = "BaseOptimizerConfig::plain_sgd")]
    pub base_optimizer: BaseOptimizerConfig,
    pub protocol: ProtocolSpec,
    #[serde(default = "default_topology")]
    pub topology: TopologySpec,
    pub slowmo: SlowMoConfig,
    #[serde(default)]
    pub init: InitSpec,
    /// Coefficient of an `½λ‖x‖²` penalty added to every worker gradient.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Compute worker gradients and directions on a thread pool.
    #[serde(default)]
    pub parallel: bool,
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::AdditiveGaussian { sigma: 0.0 }
}

fn default_topology() -> TopologySpec {
    TopologySpec::ExponentialDirected
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Zeros,
    Constant {
        value: f64,
    },
    /// `N(0, scale²)` coordinates from a seeded stream.
    Gaussian {
        scale: f64,
    },
    Explicit {
        values: Vec<f64>,
    },
}

impl InitSpec {
    pub fn initial_point(&self, dim: usize, seed: u64) -> Result<ParameterVector> {
        let x = match self {
            InitSpec::Zeros => ParameterVector::zeros(dim),
            InitSpec::Constant { value } => ParameterVector::filled(dim, *value),
            InitSpec::Gaussian { scale } => {
                let mut rng = aux_stream(seed, INIT_STREAM);
                (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            InitSpec::Explicit { values } => {
                crate::error::check_dim(dim, values.len())?;
                ParameterVector::from(values.clone())
            }
        };
        if !x.is_finite() {
            return Err(Error::config("initial point is not finite"));
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Record every `every`-th inner step of each outer iteration.
    #[serde(default = "default_every")]
    pub every: u64,
}

fn default_every() -> u64 {
    1
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { every: 1 }
    }
}

impl ExperimentConfig {
    /// Checks ranges and cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if self.metrics.every == 0 {
            return Err(Error::config("metrics.every must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be finite and ≥ 0, got {}",
                self.weight_decay
            )));
        }
        self.base_optimizer.validate()?;
        self.slowmo.validate()?;
        match &self.protocol {
            ProtocolSpec::DoubleAverage { period } => {
                if !matches!(self.base_optimizer.rule, OptimizerKind::SgdNesterov { .. }) {
                    return Err(Error::config(
                        "double-average averages Nesterov momentum buffers and needs the sgd-nesterov base",
                    ));
                }
                if *period == 0 {
                    return Err(Error::config("double-average period must be at least 1"));
                }
            }
            ProtocolSpec::Osgp { delay, .. } => {
                delay.validate()?;
                if self.slowmo.noaverage {
                    return Err(Error::config(
                        "noaverage is not supported with osgp: in-flight messages would never be reconciled",
                    ));
                }
            }
            ProtocolSpec::Dpsgd => {
                let schedule = TopologySchedule::from_spec(&self.topology, self.workers)?;
                for round in 0..schedule.period() as u64 {
                    schedule.mixing_matrix(round, Stochasticity::Doubly)?;
                }
            }
            ProtocolSpec::Sgp => {
                TopologySchedule::from_spec(&self.topology, self.workers)?;
            }
            ProtocolSpec::Allreduce | ProtocolSpec::Local => {}
        }
        Ok(())
    }

    /// Fully resolved configuration as pretty JSON; every default is
    /// spelled out.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn from_value(value: Value, path: &Path) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = serde_json::from_value(value.clone()).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let resolved = serde_json::to_value(&config).expect("config serializes");
    reject_unknown_keys(&value, &resolved, "")?;
    // Custom graph files are looked up relative to the config file.
    if let TopologySpec::Custom { path: graph } = &mut config.topology {
        if graph.is_relative() {
            if let Some(dir) = path.parent() {
                *graph = dir.join(&*graph);
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Serde silently accepts extra keys next to the tag of a unit enum
/// variant. Every field is serialized back out, so any input key missing
/// from the resolved value is unknown.
fn reject_unknown_keys(input: &Value, resolved: &Value, at: &str) -> Result<()> {
    match (input, resolved) {
        (Value::Object(a), Value::Object(b)) => {
            for (key, v) in a {
                let here = format!("{at}.{key}");
                match b.get(key) {
                    Some(r) => reject_unknown_keys(v, r, &here)?,
                    None => return Err(Error::config(format!("unknown field {}", &here[1..]))),
                }
            }
            Ok(())
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => a
            .iter()
            .zip(b)
            .enumerate()
            .try_for_each(|(i, (x, y))| reject_unknown_keys(x, y, &format!("{at}[{i}]"))),
        _ => Ok(()),
    }
}

/// Reads, resolves and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    from_value(read_json(path)?, path)
}

/// Parses a configuration from a JSON string.
pub fn parse_config_str(json: &str) -> Result<ExperimentConfig> {
    from_value(
        serde_json::from_str(json).map_err(|e| Error::config(e.to_string()))?,
        Path::new("."),
    )
}

/// One configuration produced by a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    /// `key=value` pairs joined by commas, keys sorted.
    pub label: String,
    pub config: ExperimentConfig,
}

/// Expands a sweep file: a normal configuration plus a top-level `grid`
/// object mapping dotted field paths (e.g. `"slowmo.beta"`) to arrays of
/// values. The result is the Cartesian product, keys in sorted order.
pub fn expand_sweep(path: &Path) -> Result<Vec<SweepPoint>> {
    expand_sweep_value(read_json(path)?, path)
}

pub fn expand_sweep_value(mut value: Value, path: &Path) -> Result<Vec<SweepPoint>> {
    let grid = value
        .as_object_mut()
        .and_then(|o| o.remove("grid"))
        .ok_or_else(|| Error::config("sweep file needs a top-level \"grid\" object"))?;
    let grid: BTreeMap<String, Vec<Value>> =
        serde_json::from_value(grid).map_err(|e| Error::config(format!("grid: {e}")))?;
    if grid.values().any(Vec::is_empty) {
        return Err(Error::config("every grid axis needs at least one value"));
    }

    let mut points = vec![(Vec::<String>::new(), value)];
    for (key, values) in &grid {
        let pointer = format!("/{}", key.replace('.', "/"));
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (labels, base) in &points {
            for v in values {
                let mut cfg = base.clone();
                set_pointer(&mut cfg, &pointer, v.clone())
                    .ok_or_else(|| Error::config(format!("grid key {key} does not name a config object field")))?;
                let mut labels = labels.clone();
                labels.push(format!("{key}={v}"));
                next.push((labels, cfg));
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|(labels, v)| {
            Ok(SweepPoint {
                label: labels.join(","),
                config: from_value(v, path)?,
            })
        })
        .collect()
}

fn set_pointer(root: &mut Value, pointer: &str, value: Value) -> Option<()> {
    let (parent, leaf) = pointer.rsplit_once('/')?;
    let obj = if parent.is_empty() {
        root.as_object_mut()?
    } else {
        root.pointer_mut(parent)?.as_object_mut()?
    };
    obj.insert(leaf.to_string(), value);
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "workers": 2,
        "total_steps": 10,
        "problem": {"kind": "quadratic", "dim": 3},
        "protocol": {"kind": "local"},
        "slowmo": {"tau": 5, "learning_rate": {"base": 0.1}}
    }"#;

    #[test]
    fn minimal_config_resolves_every_field() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let resolved: Value = serde_json::from_str(&cfg.resolved_json()).unwrap();
        for key in [
            "seed",
            "workers",
            "total_steps",
            "problem",
            "noise",
            "base_optimizer",
            "protocol",
            "topology",
            "slowmo",
            "init",
            "weight_decay",
            "metrics",
            "parallel",
        ] {
            assert!(resolved.get(key).is_some(), "missing {key}");
        }
        for key in ["alpha", "beta", "tau", "noaverage", "learning_rate"] {
            assert!(resolved["slowmo"].get(key).is_some(), "missing slowmo.{key}");
        }
        let again = parse_config_str(&cfg.resolved_json()).unwrap();
        assert_eq!(again, cfg);
    }

    fn with(patch: impl FnOnce(&mut Value)) -> Result<ExperimentConfig> {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        patch(&mut v);
        parse_config_str(&v.to_string())
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(with(|v| v["slowmo"]["beta"] = 1.0.into()).is_err());
        assert!(with(|v| v["slowmo"]["tau"] = 0.into()).is_err());
        assert!(with(|v| v["slowmo"]["learning_rate"]["base"] = 0.0.into()).is_err());
        assert!(with(|v| v["surprise"] = 1.into()).is_err());
        assert!(with(|v| v["slowmo"]["gamma"] = 1.into()).is_err());
        let err = with(|v| v["protocol"]["bogus"] = 1.into()).unwrap_err();
        assert!(err.to_string().contains("protocol.bogus"), "{err}");
    }

    #[test]
    fn double_average_needs_nesterov() {
        let adam = with(|v| {
            v["protocol"] = serde_json::json!({"kind": "double-average"});
            v["base_optimizer"] = serde_json::json!({"rule": {"kind": "adam"}, "buffer_strategy": "reset"});
        });
        assert!(matches!(adam, Err(Error::Config(_))));
        let nesterov = with(|v| {
            v["protocol"] = serde_json::json!({"kind": "double-average"});
            v["base_optimizer"] =
                serde_json::json!({"rule": {"kind": "sgd-nesterov", "momentum": 0.9}, "buffer_strategy": "reset"});
        });
        assert!(nesterov.is_ok());
    }

    #[test]
    fn osgp_rejects_noaverage() {
        let r = with(|v| {
            v["protocol"] = serde_json::json!({"kind": "osgp", "delay": {"kind": "fixed", "rounds": 1}, "staleness": 2});
            v["slowmo"]["noaverage"] = true.into();
        });
        assert!(r.is_err());
    }

    #[test]
    fn dpsgd_checks_matching_feasibility() {
        let r = with(|v| {
            v["workers"] = 3.into();
            v["protocol"] = serde_json::json!({"kind": "dpsgd"});
        });
        assert!(r.is_err());
        let r = with(|v| {
            v["workers"] = 8.into();
            v["protocol"] = serde_json::json!({"kind": "dpsgd"});
        });
        assert!(r.is_ok());
    }

    #[test]
    fn sweep_grid_is_a_cartesian_product() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["grid"] = serde_json::json!({"slowmo.beta": [0.0, 0.5], "seed": [1, 2, 3]});
        let points = expand_sweep_value(v, Path::new("sweep.json")).unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!(points[0].label, "seed=1,slowmo.beta=0.0");
        assert_eq!(points[5].config.seed, 3);
        assert_eq!(points[5].config.slowmo.beta, 0.5);
    }

    #[test]
    fn explicit_init_checks_dimension() {
        assert!(InitSpec::Explicit { values: vec![1.0] }.initial_point(2, 0).is_err());
        let g = InitSpec::Gaussian { scale: 1.0 };
        assert_eq!(g.initial_point(4, 9).unwrap(), g.initial_point(4, 9).unwrap());
    }
}
