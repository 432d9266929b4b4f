//! The prune/retrain loop.
//!
//! Cycle 0 trains the dense network. Every later cycle prunes a fraction of
//! what remains and retrains with the learning-rate schedule restarted from
//! epoch 0 and fresh optimizer moments. Validation decides when to stop and
//! which iterate is returned.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cnf::{self, CnfError, DivergenceMode, FlowModel};
use crate::net::{Mask, MlpSpec, ParamVector};
use crate::odeint::SolverConfig;
use crate::rng::{self, Rng, Stream};
use crate::scalar::Scalar;

use super::optim::{adam_step, lr_at, AdamState, TrainConfig};
use super::{apply_prune, sparsity, PruneConfig, PruneError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient at index {index} on optimizer step {step}")]
    NonFiniteGradient { index: usize, step: u64 },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Cnf(#[from] CnfError),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

/// Split-level metrics of one parameter setting. `val_score` drives early
/// stopping (lower is better); the other fields are reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub val_score: f64,
    pub n_evals: usize,
}

/// A training problem over the parameters of `spec()` followed by
/// `n_extra()` trailing parameters that are trained but never pruned.
pub trait Objective<T: Scalar> {
    fn spec(&self) -> &MlpSpec;

    fn n_extra(&self) -> usize {
        0
    }

    fn n_train(&self) -> usize;

    /// Mean loss over the training points `idx`, its gradient with respect to
    /// all parameters, and the solver cost.
    fn loss_grad(&self, params: &[T], mask: &Mask, idx: &[usize], rng: &mut Rng)
        -> Result<(f64, Vec<T>, usize), TrainError>;

    fn evaluate(&self, params: &[T], mask: &Mask) -> Result<EvalResult, TrainError>;
}

/// Density estimation: the NLL of a CNF. Training uses the configured
/// divergence; evaluation uses the exact trace.
#[derive(Debug, Clone)]
pub struct FlowObjective<T> {
    pub spec: MlpSpec,
    pub solver: SolverConfig,
    pub divergence: DivergenceMode,
    pub train: Vec<Vec<T>>,
    pub val: Vec<Vec<T>>,
    pub test: Vec<Vec<T>>,
}

impl<T: Scalar> FlowObjective<T> {
    pub fn model(&self, params: &[T], mask: &Mask) -> Result<FlowModel<T>, TrainError> {
        let p = ParamVector::from_values(&self.spec, params.to_vec()).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut m = FlowModel::new(self.spec.clone(), p, self.solver.clone(), self.divergence);
        m.mask = mask.clone();
        Ok(m)
    }

    fn split_nll(&self, model: &FlowModel<T>, xs: &[Vec<T>]) -> Result<(f64, usize), TrainError> {
        if xs.is_empty() {
            return Ok((f64::NAN, 0));
        }
        let (lp, evals) = cnf::log_prob_batch(model, xs)?;
        let nll = -lp.iter().map(|v| v.as_f64()).sum::<f64>() / lp.len() as f64;
        Ok((nll, evals))
    }
}

impl<T: Scalar> Objective<T> for FlowObjective<T> {
    fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(
        &self,
        params: &[T],
        mask: &Mask,
        idx: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, Vec<T>, usize), TrainError> {
        let model = self.model(params, mask)?;
        let batch: Vec<Vec<T>> = idx.iter().map(|&i| self.train[i].clone()).collect();
        let g = cnf::nll_grad(&model, &batch, rng)?;
        Ok((g.nll.as_f64(), g.grad, g.n_evals))
    }

    fn evaluate(&self, params: &[T], mask: &Mask) -> Result<EvalResult, TrainError> {
        let model = self.model(params, mask)?;
        let (train, e1) = self.split_nll(&model, &self.train)?;
        let (val, e2) = self.split_nll(&model, &self.val)?;
        let (test, e3) = self.split_nll(&model, &self.test)?;
        Ok(EvalResult {
            train,
            val,
            test,
            val_score: val,
            n_evals: e1 + e2 + e3,
        })
    }
}

/// One row of the prune history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub iter: usize,
    pub prune_ratio: f64,
    pub params_remaining: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub test_nll: f64,
    pub val_score: f64,
    pub n_evals: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneHistory {
    pub records: Vec<CycleRecord>,
    /// Iteration and message of a cycle that failed; its result was discarded.
    pub aborted: Option<(usize, String)>,
}

impl PruneHistory {
    pub const HEADER: &'static str = "iter,prune_ratio,params_remaining,train_nll,val_nll,test_nll,n_evals,seconds";

    /// CSV rendering. With `zero_time` the wall-clock column is written as 0
    /// so identical runs produce identical bytes.
    pub fn to_csv(&self, zero_time: bool) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let secs = if zero_time { 0.0 } else { r.seconds };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iter, r.prune_ratio, r.params_remaining, r.train_nll, r.val_nll, r.test_nll, r.n_evals, secs
            );
        }
        s
    }
}

/// Per-iteration model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<T> {
    pub iter: usize,
    pub params: Vec<T>,
    pub mask: Mask,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState<T> {
    pub params: Vec<T>,
    pub mask: Mask,
    pub adam: AdamState<T>,
    /// Index of the next cycle to run.
    pub next_iter: usize,
    pub best_iter: Option<usize>,
    pub best_score: f64,
    pub stale: usize,
    pub done: bool,
    pub history: PruneHistory,
    pub batch_rng: Rng,
    pub noise_rng: Rng,
}

pub struct SparseTrainer<T: Scalar, O: Objective<T>> {
    pub objective: O,
    pub train_cfg: TrainConfig,
    pub prune_cfg: PruneConfig,
    state: TrainerState<T>,
    snapshots: Vec<Snapshot<T>>,
}

impl<T: Scalar, O: Objective<T>> SparseTrainer<T, O> {
    pub fn new(objective: O, params: Vec<T>, train_cfg: TrainConfig, prune_cfg: PruneConfig) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        prune_cfg.validate()?;
        let n_net = objective.spec().n_params();
        if params.len() != n_net + objective.n_extra() {
            return Err(TrainError::Config(format!(
                "expected {} parameters, got {}",
                n_net + objective.n_extra(),
                params.len()
            )));
        }
        if objective.n_train() == 0 {
            return Err(TrainError::Config("empty training set".into()));
        }
        let state = TrainerState {
            adam: AdamState::new(params.len()),
            params,
            mask: Mask::ones(n_net),
            next_iter: 0,
            best_iter: None,
            best_score: f64::INFINITY,
            stale: 0,
            done: false,
            history: PruneHistory::default(),
            batch_rng: rng::stream(train_cfg.seed, Stream::Batching),
            noise_rng: rng::stream(train_cfg.seed, Stream::Hutchinson),
        };
        Ok(SparseTrainer {
            objective,
            train_cfg,
            prune_cfg,
            state,
            snapshots: Vec::new(),
        })
    }

    /// Resumes from a saved state and the snapshots taken so far.
    pub fn resume(
        objective: O,
        train_cfg: TrainConfig,
        prune_cfg: PruneConfig,
        state: TrainerState<T>,
        snapshots: Vec<Snapshot<T>>,
    ) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        prune_cfg.validate()?;
        Ok(SparseTrainer {
            objective,
            train_cfg,
            prune_cfg,
            state,
            snapshots,
        })
    }

    pub fn state(&self) -> &TrainerState<T> {
        &self.state
    }

    pub fn snapshots(&self) -> &[Snapshot<T>] {
        &self.snapshots
    }

    pub fn history(&self) -> &PruneHistory {
        &self.state.history
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    /// Snapshot of the best-validation iterate seen so far.
    pub fn best(&self) -> Option<&Snapshot<T>> {
        let b = self.state.best_iter?;
        self.snapshots.iter().find(|s| s.iter == b)
    }

    fn full_mask(&self) -> Mask {
        let mut bits = self.state.mask.bits.clone();
        bits.resize(self.state.params.len(), true);
        Mask { bits }
    }

    fn train_cycle(&mut self) -> Result<usize, TrainError> {
        self.state.adam = AdamState::new(self.state.params.len());
        let full = self.full_mask();
        let mut order: Vec<usize> = (0..self.objective.n_train()).collect();
        let mut evals = 0;
        for epoch in 0..self.prune_cfg.epochs_per_cycle {
            let lr = lr_at(&self.train_cfg, epoch);
            order.shuffle(&mut self.state.batch_rng);
            for idx in order.chunks(self.train_cfg.batch_size) {
                let (loss, grad, n) =
                    self.objective
                        .loss_grad(&self.state.params, &self.state.mask, idx, &mut self.state.noise_rng)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss(loss));
                }
                evals += n;
                adam_step(&mut self.state.params, &grad, &mut self.state.adam, &self.train_cfg, lr, Some(&full))?;
            }
        }
        Ok(evals)
    }

    /// Runs the next cycle. Returns `Ok(false)` once the run is finished.
    pub fn step(&mut self) -> Result<bool, TrainError> {
        if self.state.done {
            return Ok(false);
        }
        let iter = self.state.next_iter;
        let spec = self.objective.spec().clone();
        let n_net = spec.n_params();
        let start = Instant::now();
        if iter > 0 {
            let p = ParamVector::from_values(&spec, self.state.params[..n_net].to_vec())
                .map_err(|e| TrainError::Config(e.to_string()))?;
            match apply_prune(&p, &self.state.mask, &spec, self.prune_cfg.mode, self.prune_cfg.pr_per_iter) {
                Ok(m) => self.state.mask = m,
                Err(PruneError::WouldEmpty(_)) => {
                    self.state.done = true;
                    return Ok(false);
                }
                Err(e) => return Err(e.into()),
            }
            self.state.mask.apply_in_place(&mut self.state.params[..n_net]);
        }
        let backup = (self.state.clone(), iter);
        let outcome = self
            .train_cycle()
            .and_then(|ev| Ok((ev, self.objective.evaluate(&self.state.params, &self.state.mask)?)));
        let (train_evals, eval) = match outcome {
            Ok(v) => v,
            Err(e) => {
                let (mut restored, it) = backup;
                restored.history.aborted = Some((it, e.to_string()));
                restored.done = true;
                // discard the pruned mask of the failed cycle as well
                if let Some(last) = self.snapshots.last() {
                    restored.params = last.params.clone();
                    restored.mask = last.mask.clone();
                }
                self.state = restored;
                return Err(e);
            }
        };
        let extra = self.state.params.len() - n_net;
        let record = CycleRecord {
            iter,
            prune_ratio: sparsity(&self.state.mask, &spec, self.prune_cfg.mode),
            params_remaining: self.state.mask.count_ones() + extra,
            train_nll: eval.train,
            val_nll: eval.val,
            test_nll: eval.test,
            val_score: eval.val_score,
            n_evals: train_evals + eval.n_evals,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.state.history.records.push(record);
        self.snapshots.push(Snapshot {
            iter,
            params: self.state.params.clone(),
            mask: self.state.mask.clone(),
        });
        if eval.val_score < self.state.best_score || self.state.best_iter.is_none() {
            self.state.best_score = eval.val_score;
            self.state.best_iter = Some(iter);
            self.state.stale = 0;
        } else {
            self.state.stale += 1;
        }
        self.state.next_iter = iter + 1;
        if iter >= self.prune_cfg.max_iters || self.state.stale > self.prune_cfg.patience {
            self.state.done = true;
        }
        Ok(!self.state.done)
    }

    /// Runs to completion. A failed cycle ends the run; the history notes
    /// it and the best iterate among completed cycles is still returned.
    pub fn run(&mut self) -> Result<Snapshot<T>, TrainError> {
        loop {
            match self.step() {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => {
                    if self.snapshots.is_empty() {
                        return Err(e);
                    }
                    break;
                }
            }
        }
        Ok(self.best().cloned().expect("at least one completed cycle"))
    }
}
