//! Experiment configuration: JSON documents layered over per-dataset
//! defaults, with dotted-path overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sparseflow_core::cnf::{DivergenceMode, Noise};
use sparseflow_core::data::{DatasetKind, Geometry};
use sparseflow_core::eval::GridSpec;
use sparseflow_core::hessian::HessianSettings;
use sparseflow_core::prune::{Optimizer, PruneConfig, PruneMode, TrainConfig};
use sparseflow_core::{Activation, MlpSpec, SolverConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub kind: DatasetKind,
    pub n_points: usize,
    pub seed: u64,
    pub geometry: Geometry,
    pub split: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub seeds: Vec<u64>,
    /// Cumulative prune ratios reported per seed.
    pub target_ratios: Vec<f64>,
    /// Named configuration variants, each a map of dotted overrides.
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    pub grid: GridSpec,
    pub n_samples: usize,
    pub n_std: Vec<f64>,
    pub n_trajectories: usize,
    pub n_time_samples: usize,
    pub sample_seed: u64,
    /// Training points in the Hessian loss; 0 takes the whole training split.
    pub hessian_points: usize,
    /// Cumulative prune ratios at which the classifier is exported.
    pub classify_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    pub model: MlpSpec,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub divergence: DivergenceMode,
    pub hessian: HessianSettings,
    pub eval: EvalBlock,
    pub sweep: SweepBlock,
    /// Write zero wall-clock times so repeated runs are byte-identical.
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Hyperparameters of the toy experiments for `kind`.
    pub fn defaults_for(kind: DatasetKind) -> Self {
        let (hidden, act, tol, opt, epochs, batch, lr, wd): (&[usize], _, _, _, _, _, _, _) = match kind {
            DatasetKind::Gaussians => (&[128], Activation::Sigmoid, 1e-5, Optimizer::AdamW, 100, 1024, 5e-3, 1e-5),
            DatasetKind::GaussianSpiral => {
                (&[64, 64, 64], Activation::Sigmoid, 1e-5, Optimizer::AdamW, 100, 1024, 5e-2, 1e-2)
            }
            DatasetKind::Spirals => (&[64, 64, 64], Activation::Sigmoid, 1e-5, Optimizer::AdamW, 100, 1024, 5e-2, 1e-6),
            DatasetKind::Moons => (&[128], Activation::Tanh, 1e-4, Optimizer::Adam, 50, 128, 1e-2, 1e-4),
        };
        let n_points = if kind == DatasetKind::Moons { 1000 } else { 2000 };
        ExperimentConfig {
            dataset: DatasetBlock {
                kind,
                n_points,
                seed: 0,
                geometry: Geometry::default(),
                split: [0.8, 0.1, 0.1],
            },
            model: MlpSpec::for_dim(2, hidden, act).expect("default architecture is valid"),
            solver: SolverConfig::dopri5(0.0, 1.0, tol, tol),
            train: TrainConfig {
                optimizer: opt,
                lr,
                lr_steps: Vec::new(),
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: wd,
                batch_size: batch,
                epochs,
                seed: 0,
            },
            prune: PruneConfig {
                mode: PruneMode::Unstructured,
                pr_per_iter: 0.1,
                epochs_per_cycle: epochs,
                patience: 2,
                max_iters: 25,
            },
            divergence: DivergenceMode::hutchinson(Noise::Rademacher, 1),
            hessian: HessianSettings::default(),
            eval: EvalBlock {
                grid: if kind == DatasetKind::Moons {
                    GridSpec {
                        x_range: (-2.0, 3.0),
                        y_range: (-1.5, 2.0),
                        resolution: 100,
                        t_eval: 0.0,
                    }
                } else {
                    GridSpec::default()
                },
                n_samples: 10_000,
                n_std: vec![2.0, 3.0, 5.0],
                n_trajectories: 50,
                n_time_samples: 21,
                sample_seed: 0,
                hessian_points: 0,
                classify_ratios: vec![0.0, 0.84, 0.96],
            },
            sweep: SweepBlock {
                seeds: vec![0, 1, 2],
                target_ratios: vec![0.0, 0.3, 0.5, 0.7, 0.9],
                variants: vec![Variant {
                    name: "base".into(),
                    set: Map::new(),
                }],
            },
            deterministic: false,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.dim() != 2 {
            return bad(format!("model output width must be 2, got {}", self.model.dim()));
        }
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.prune.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.prune.epochs_per_cycle == 0 {
            return bad("prune.epochs_per_cycle must be positive".into());
        }
        if self.divergence.probes_per_sample == 0 {
            return bad("divergence.probes_per_sample must be at least 1".into());
        }
        let s = self.dataset.split;
        if s.iter().any(|&f| !(f > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("dataset.split must be positive and sum to 1, got {s:?}"));
        }
        if self.dataset.n_points < 3 {
            return bad("dataset.n_points must be at least 3".into());
        }
        self.eval.grid.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep.seeds.is_empty() || self.sweep.variants.is_empty() {
            return bad("sweep needs at least one seed and one variant".into());
        }
        if self.sweep.target_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("sweep.target_ratios must lie in [0, 1)".into());
        }
        if self.hessian.n_probes < 2 || self.hessian.power_iters == 0 {
            return bad("hessian needs n_probes ≥ 2 and power_iters ≥ 1".into());
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// Applies dotted overrides to a copy of this configuration.
    pub fn with_overrides(&self, set: &Map<String, Value>) -> Result<Self, CliError> {
        let mut v = self.to_value();
        for (k, val) in set {
            set_path(&mut v, k, val.clone())?;
        }
        from_value(v)
    }
}

fn from_value(v: Value) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `top` onto `base`; objects merge, anything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` in a JSON object tree. The key must already exist, so
/// typos are reported rather than silently ignored.
pub fn set_path(root: &mut Value, path: &str, val: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not an object", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| CliError::Config(format!("unknown key `{path}`")))?;
        if i + 1 == parts.len() {
            *slot = val;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Parses `key=value`; the value is read as JSON when possible and as a
/// bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form key=value")))?;
    let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), val))
}

/// Defaults for the dataset kind named in the file or overrides, then the
/// file, then the overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let file: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let sets = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    let kind_value = sets
        .iter()
        .rev()
        .find(|(k, _)| k == "dataset.kind")
        .map(|(_, v)| v.clone())
        .or_else(|| file.pointer("/dataset/kind").cloned());
    let kind: DatasetKind = match kind_value {
        Some(v) => serde_json::from_value(v).map_err(|e| CliError::Config(format!("dataset.kind: {e}")))?,
        None => DatasetKind::Gaussians,
    };
    let mut v = ExperimentConfig::defaults_for(kind).to_value();
    merge(&mut v, file);
    for (k, val) in sets {
        set_path(&mut v, &k, val)?;
    }
    from_value(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparseflow_core::odeint::{Backprop, Method};

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let g = ExperimentConfig::defaults_for(DatasetKind::Gaussians);
        assert_eq!(g.model.layer_sizes, vec![3, 128, 2]);
        assert_eq!(g.model.activation, Activation::Sigmoid);
        assert_eq!((g.solver.method, g.solver.rtol, g.solver.backprop), (Method::Dopri5, 1e-5, Backprop::Adjoint));
        assert_eq!((g.train.optimizer, g.train.lr, g.train.batch_size), (Optimizer::AdamW, 5e-3, 1024));
        assert_eq!(g.prune.pr_per_iter, 0.1);
        let m = ExperimentConfig::defaults_for(DatasetKind::Moons);
        assert_eq!(m.model.activation, Activation::Tanh);
        assert_eq!((m.train.optimizer, m.train.epochs, m.solver.atol), (Optimizer::Adam, 50, 1e-4));
        let s = ExperimentConfig::defaults_for(DatasetKind::Spirals);
        assert_eq!(s.model.layer_sizes, vec![3, 64, 64, 64, 2]);
        assert_eq!(s.train.weight_decay, 1e-6);
        for k in [DatasetKind::Gaussians, DatasetKind::GaussianSpiral, DatasetKind::Spirals, DatasetKind::Moons] {
            ExperimentConfig::defaults_for(k).validate().unwrap();
        }
    }

    #[test]
    fn overrides_and_merging() {
        let cfg = load(None, &["dataset.kind=moons".into(), "train.lr=0.005".into()]).unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::Moons);
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.model.activation, Activation::Tanh);
        assert!(matches!(load(None, &["train.lrr=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, &["solver.backprop=bptt".into()]), Err(CliError::Config(_))));
        let mut a = serde_json::json!({"x": {"y": 1, "z": 2}});
        merge(&mut a, serde_json::json!({"x": {"z": 3}}));
        assert_eq!(a, serde_json::json!({"x": {"y": 1, "z": 3}}));
    }
}
