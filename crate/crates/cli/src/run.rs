//! The checkpointed prune/retrain driver shared by `train`, `sweep` and
//! `classify`, plus data and model setup from a configuration.

use std::path::{Path, PathBuf};

use sparseflow_core::cnf::FlowModel;
use sparseflow_core::data::{make_dataset, split, Dataset};
use sparseflow_core::net::{mlp_init, ParamVector};
use sparseflow_core::prune::{apply_prune, sparsity, FlowObjective, Objective, Snapshot, SparseTrainer};
use sparseflow_core::{Mask, MlpSpec};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";
pub const HISTORY: &str = "history.csv";

pub fn iter_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("iter_{iter:03}.ckpt"))
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), CliError> {
    write_atomic(path, serde_json::to_string_pretty(v).expect("json serializes") + "\n")
}

pub struct Splits {
    pub full: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let d = &cfg.dataset;
    let full = make_dataset(d.kind, d.n_points, d.seed, d.geometry.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let (train, val, test) = split(&full, d.split, d.seed).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Splits { full, train, val, test })
}

/// Saves the generated points with a sidecar naming how they were made.
pub fn write_data(dir: &Path, cfg: &ExperimentConfig, data: &Splits) -> Result<(), CliError> {
    write_atomic(&dir.join("data.csv"), data.full.to_csv())?;
    let mut side = data.full.sidecar();
    side["split"] = serde_json::json!(cfg.dataset.split);
    side["split_sizes"] = serde_json::json!([data.train.len(), data.val.len(), data.test.len()]);
    write_json(&dir.join("data.json"), &side)
}

pub fn flow_objective(cfg: &ExperimentConfig, data: &Splits) -> FlowObjective<f64> {
    FlowObjective {
        spec: cfg.model.clone(),
        solver: cfg.solver.clone(),
        divergence: cfg.divergence,
        train: data.train.batch(),
        val: data.val.batch(),
        test: data.test.batch(),
    }
}

pub fn flow_model(cfg: &ExperimentConfig, params: &[f64], mask: &Mask) -> Result<FlowModel<f64>, CliError> {
    let p = ParamVector::from_values(&cfg.model, params[..cfg.model.n_params()].to_vec()).map_err(CliError::runtime)?;
    let mut m = FlowModel::new(cfg.model.clone(), p, cfg.solver.clone(), cfg.divergence);
    m.mask = mask.clone();
    Ok(m)
}

/// Cumulative sparsity after each prune iteration, from the counting rules
/// alone, until `target` is reached or pruning stalls.
pub fn planned_ratios(cfg: &ExperimentConfig, target: f64) -> Result<Vec<f64>, CliError> {
    let spec: &MlpSpec = &cfg.model;
    let params = mlp_init::<f64>(spec, 0);
    let mut mask = Mask::ones(spec.n_params());
    let mut out = vec![0.0];
    while *out.last().expect("non-empty") < target - 1e-12 && out.len() < 10_000 {
        let next = match apply_prune(&params, &mask, spec, cfg.prune.mode, cfg.prune.pr_per_iter) {
            Ok(m) => m,
            Err(_) => break,
        };
        if next == mask {
            break;
        }
        mask = next;
        out.push(sparsity(&mask, spec, cfg.prune.mode));
    }
    Ok(out)
}

/// Index of the entry closest to `target`; ties go to the earlier entry.
pub fn nearest(ratios: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, r) in ratios.iter().enumerate() {
        if (r - target).abs() < (ratios[best] - target).abs() {
            best = i;
        }
    }
    best
}

/// Iterations at which each target is read off, and a copy of `cfg` that
/// runs exactly that far without early stopping.
pub fn plan_targets(cfg: &ExperimentConfig, targets: &[f64]) -> Result<(Vec<usize>, ExperimentConfig), CliError> {
    let top = targets.iter().copied().fold(0.0, f64::max);
    let ratios = planned_ratios(cfg, top)?;
    let iters: Vec<usize> = targets.iter().map(|&t| nearest(&ratios, t)).collect();
    let last = iters.iter().copied().max().unwrap_or(0);
    let mut c = cfg.clone();
    c.prune.max_iters = last;
    c.prune.patience = last;
    Ok((iters, c))
}

/// Runs (or resumes) the prune/retrain loop in `dir`, checkpointing after
/// every cycle. A finished run is loaded without further training.
pub fn drive<O: Objective<f64>>(
    objective: O,
    init: Vec<f64>,
    cfg: &ExperimentConfig,
    dir: &Path,
    fresh: bool,
    label: &str,
) -> Result<SparseTrainer<f64, O>, CliError> {
    std::fs::create_dir_all(dir)?;
    if fresh {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".ckpt") || name == HISTORY {
                std::fs::remove_file(&p)?;
            }
        }
    }
    let last = dir.join(LAST);
    let mut trainer = if last.exists() {
        let (ck, _) = Checkpoint::load(&last)?;
        if ck.config.to_value() != cfg.to_value() {
            return Err(CliError::Config(format!(
                "{} holds a run with a different configuration; pass --fresh to discard it",
                dir.display()
            )));
        }
        let mut snaps = Vec::new();
        for r in &ck.state.history.records {
            let (s, _) = Checkpoint::load(&iter_path(dir, r.iter))?;
            snaps.push(Snapshot {
                iter: r.iter,
                params: s.state.params,
                mask: s.state.mask,
            });
        }
        if !ck.state.done {
            eprintln!("{label}: resuming at iteration {}", ck.state.next_iter);
        }
        SparseTrainer::resume(objective, cfg.train.clone(), cfg.prune.clone(), ck.state, snaps).map_err(CliError::runtime)?
    } else {
        SparseTrainer::new(objective, init, cfg.train.clone(), cfg.prune.clone()).map_err(CliError::runtime)?
    };
    let save = |t: &SparseTrainer<f64, O>, path: &Path| -> Result<(), CliError> {
        Checkpoint {
            config: cfg.clone(),
            state: t.state().clone(),
        }
        .save(path)
        .map(|_| ())
    };
    while !trainer.is_done() {
        let iter = trainer.state().next_iter;
        let result = trainer.step();
        if let Err(e) = result {
            save(&trainer, &last)?;
            write_atomic(&dir.join(HISTORY), trainer.history().to_csv(cfg.deterministic))?;
            if trainer.snapshots().is_empty() {
                return Err(CliError::Runtime(format!("{label}: iteration {iter} failed: {e}")));
            }
            eprintln!("{label}: iteration {iter} failed, keeping completed iterations: {e}");
            break;
        }
        if trainer.history().records.last().map(|r| r.iter) == Some(iter) {
            save(&trainer, &iter_path(dir, iter))?;
            if trainer.state().best_iter == Some(iter) {
                std::fs::copy(iter_path(dir, iter), dir.join(BEST))?;
            }
            let r = trainer.history().records.last().expect("just pushed");
            eprintln!(
                "{label}: iter {} pruned {:.3} val {:.4} test {:.4} ({:.1}s)",
                r.iter, r.prune_ratio, r.val_nll, r.test_nll, r.seconds
            );
        }
        save(&trainer, &last)?;
        write_atomic(&dir.join(HISTORY), trainer.history().to_csv(cfg.deterministic))?;
    }
    write_atomic(&dir.join(HISTORY), trainer.history().to_csv(cfg.deterministic))?;
    Ok(trainer)
}
