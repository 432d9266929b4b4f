//! Magnitude pruning and the iterative prune/retrain loop.
//!
//! Two scoring schemes:
//!
//! | mode         | target  | score          | scope  |
//! |--------------|---------|----------------|--------|
//! | unstructured | weights | `|W_ij|`       | global |
//! | structured   | neurons | `‖W_i:‖₁`      | local  |
//!
//! Unstructured pruning pools every unmasked weight entry across layers
//! (biases are never scored) and removes the `⌊pr·remaining⌋` smallest.
//! Structured pruning works per hidden layer, removing the
//! `⌊pr·remaining⌋` neurons with the smallest incoming-row ℓ1 norm together
//! with their bias and outgoing column. Ties go to the lowest flat index.

mod optim;
mod train;

pub use optim::{adam_step, lr_at, AdamState, Optimizer, TrainConfig};
pub use train::{
    CycleRecord, EvalResult, FlowObjective, Objective, PruneHistory, Snapshot, SparseTrainer, TrainError, TrainerState,
};

use serde::{Deserialize, Serialize};

use crate::net::{Mask, MlpSpec, ParamVector};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("prune ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("pruning would remove every remaining {0}")]
    WouldEmpty(&'static str),
    #[error("mask length {mask} does not match parameter count {params}")]
    Misaligned { mask: usize, params: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    Unstructured,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub mode: PruneMode,
    /// Fraction of the remaining targets removed per iteration.
    pub pr_per_iter: f64,
    pub epochs_per_cycle: usize,
    /// Non-improving prune iterations tolerated before stopping.
    pub patience: usize,
    pub max_iters: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            mode: PruneMode::Unstructured,
            pr_per_iter: 0.1,
            epochs_per_cycle: 100,
            patience: 2,
            max_iters: 25,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.pr_per_iter > 0.0 && self.pr_per_iter < 1.0) {
            return Err(PruneError::BadRatio(self.pr_per_iter));
        }
        Ok(())
    }
}

/// Scores of the currently prunable targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Scores<T> {
    /// `(flat parameter index, |w|)` for every unmasked weight entry.
    Weights(Vec<(usize, T)>),
    /// Per hidden layer, `(neuron index, ‖incoming row‖₁)` for live neurons.
    Neurons(Vec<Vec<(usize, T)>>),
}

/// A hidden neuron is live while its bias entry is unmasked.
fn neuron_alive(mask: &Mask, spec: &MlpSpec, layer: usize, neuron: usize) -> bool {
    mask.bits[spec.layout()[layer].bias_offset + neuron]
}

pub fn score_params<T: Scalar>(params: &ParamVector<T>, mask: &Mask, spec: &MlpSpec, mode: PruneMode) -> Scores<T> {
    let layout = spec.layout();
    match mode {
        PruneMode::Unstructured => Scores::Weights(
            layout
                .iter()
                .flat_map(|b| b.weight_offset..b.bias_offset)
                .filter(|&i| mask.bits[i])
                .map(|i| (i, params.values[i].abs()))
                .collect(),
        ),
        PruneMode::Structured => Scores::Neurons(
            layout[..layout.len() - 1]
                .iter()
                .enumerate()
                .map(|(l, b)| {
                    (0..b.outputs)
                        .filter(|&i| neuron_alive(mask, spec, l, i))
                        .map(|i| {
                            let row = b.weight_index(i, 0)..b.weight_index(i, 0) + b.inputs;
                            let norm = row
                                .filter(|&k| mask.bits[k])
                                .map(|k| params.values[k].abs())
                                .fold(T::zero(), |a, v| a + v);
                            (i, norm)
                        })
                        .collect()
                })
                .collect(),
        ),
    }
}

/// `⌊pr·n⌋`, nudged so products that are integral in exact arithmetic are not
/// rounded down by representation error.
pub fn prune_count(pr: f64, n: usize) -> usize {
    (pr * n as f64 + 1e-9).floor() as usize
}

fn lowest<T: Scalar>(mut scored: Vec<(usize, T)>, k: usize) -> Vec<usize> {
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Returns the mask after one prune step at ratio `pr` of the remaining
/// targets. `pr = 0` leaves the mask unchanged.
pub fn apply_prune<T: Scalar>(
    params: &ParamVector<T>,
    mask: &Mask,
    spec: &MlpSpec,
    mode: PruneMode,
    pr: f64,
) -> Result<Mask, PruneError> {
    if !(0.0..1.0).contains(&pr) {
        return Err(PruneError::BadRatio(pr));
    }
    if mask.len() != params.len() || params.len() != spec.n_params() {
        return Err(PruneError::Misaligned {
            mask: mask.len(),
            params: params.len(),
        });
    }
    let mut out = mask.clone();
    match score_params(params, mask, spec, mode) {
        Scores::Weights(pool) => {
            let k = prune_count(pr, pool.len());
            if k > 0 && k == pool.len() {
                return Err(PruneError::WouldEmpty("weight"));
            }
            for i in lowest(pool, k) {
                out.bits[i] = false;
            }
        }
        Scores::Neurons(layers) => {
            let layout = spec.layout();
            let mut plan = Vec::with_capacity(layers.len());
            for pool in layers {
                let k = prune_count(pr, pool.len());
                if k > 0 && k == pool.len() {
                    return Err(PruneError::WouldEmpty("neuron"));
                }
                plan.push(lowest(pool, k));
            }
            for (l, neurons) in plan.into_iter().enumerate() {
                let (cur, next) = (layout[l], layout[l + 1]);
                for i in neurons {
                    for j in 0..cur.inputs {
                        out.bits[cur.weight_index(i, j)] = false;
                    }
                    out.bits[cur.bias_offset + i] = false;
                    for r in 0..next.outputs {
                        out.bits[next.weight_index(r, i)] = false;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cumulative prune ratio of `mask`: pruned weights over all weights
/// (unstructured) or pruned hidden neurons over all hidden neurons
/// (structured).
pub fn sparsity(mask: &Mask, spec: &MlpSpec, mode: PruneMode) -> f64 {
    let layout = spec.layout();
    match mode {
        PruneMode::Unstructured => {
            let total = spec.n_weights();
            let pruned = layout
                .iter()
                .flat_map(|b| b.weight_offset..b.bias_offset)
                .filter(|&i| !mask.bits[i])
                .count();
            pruned as f64 / total as f64
        }
        PruneMode::Structured => {
            let total = spec.n_hidden_neurons();
            if total == 0 {
                return 0.0;
            }
            let pruned: usize = layout[..layout.len() - 1]
                .iter()
                .map(|b| (0..b.outputs).filter(|&i| !mask.bits[b.bias_offset + i]).count())
                .sum();
            pruned as f64 / total as f64
        }
    }
}

/// Physically removes structurally pruned neurons, returning the smaller
/// network and its parameters.
pub fn shrink_structured<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    mask: &Mask,
) -> (MlpSpec, ParamVector<T>) {
    let layout = spec.layout();
    let n_layers = layout.len();
    // kept units per layer boundary (inputs of layer 0 and final outputs all kept)
    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(n_layers + 1);
    keep.push((0..spec.layer_sizes[0]).collect());
    for (l, b) in layout.iter().enumerate() {
        if l + 1 == n_layers {
            keep.push((0..b.outputs).collect());
        } else {
            keep.push((0..b.outputs).filter(|&i| mask.bits[b.bias_offset + i]).collect());
        }
    }
    let sizes: Vec<usize> = keep.iter().map(Vec::len).collect();
    let small = MlpSpec {
        layer_sizes: sizes,
        ..spec.clone()
    };
    let mut values = Vec::with_capacity(small.n_params());
    for (l, b) in layout.iter().enumerate() {
        for &i in &keep[l + 1] {
            for &j in &keep[l] {
                let k = b.weight_index(i, j);
                values.push(if mask.bits[k] { params.values[k] } else { T::zero() });
            }
        }
        for &i in &keep[l + 1] {
            let k = b.bias_offset + i;
            values.push(if mask.bits[k] { params.values[k] } else { T::zero() });
        }
    }
    let p = ParamVector::from_values(&small, values).expect("shrunk layout is consistent");
    (small, p)
}
