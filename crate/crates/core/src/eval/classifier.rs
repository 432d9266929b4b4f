//! Neural ODE classifier: a flow on R² followed by an affine head producing
//! two class logits from the terminal state.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::cnf::NodeBatch;
use crate::data::Dataset;
use crate::net::{self, Mask, MlpSpec};
use crate::odeint::{self, SolverConfig};
use crate::prune::{EvalResult, Objective, PruneConfig, PruneHistory, Snapshot, SparseTrainer, TrainConfig, TrainError};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Scalar;

use super::{EvalError, GridSpec};

/// Head parameters: a row-major 2×2 weight followed by 2 biases.
pub const HEAD_LEN: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    pub spec: MlpSpec,
    /// Network parameters followed by the head.
    pub params: Vec<T>,
    pub mask: Mask,
    pub solver: SolverConfig,
}

fn head_logits<T: Scalar>(head: &[T], z: &[T]) -> [T; 2] {
    [
        head[0] * z[0] + head[1] * z[1] + head[4],
        head[2] * z[0] + head[3] * z[1] + head[5],
    ]
}

/// `(p0, p1)` of a two-way softmax.
fn softmax2<T: Scalar>(l: [T; 2]) -> (T, T) {
    let m = l[0].max(l[1]);
    let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

fn flatten<T: Scalar>(pts: &[[f64; 2]]) -> Vec<T> {
    pts.iter().flat_map(|p| [T::of(p[0]), T::of(p[1])]).collect()
}

impl<T: Scalar> ClassifierModel<T> {
    /// Network weights from `mlp_init`, head weights uniform in `±1/√2`.
    pub fn init(spec: MlpSpec, solver: SolverConfig, seed: u64) -> Self {
        let mut params = net::mlp_init::<T>(&spec, seed).values;
        let mut r = rng::stream(seed, Stream::Custom(9));
        let b = 0.5f64.sqrt();
        params.extend((0..4).map(|_| T::of(r.random_range(-b..b))));
        params.extend([T::zero(), T::zero()]);
        let mask = Mask::ones(spec.n_params());
        ClassifierModel {
            spec,
            params,
            mask,
            solver,
        }
    }

    pub fn head(&self) -> &[T] {
        &self.params[self.spec.n_params()..]
    }

    fn flow_params(&self) -> Vec<T> {
        let mut p = self.params[..self.spec.n_params()].to_vec();
        self.mask.apply_in_place(&mut p);
        p
    }

    /// Terminal states of the flow for `pts`.
    pub fn transport(&self, pts: &[[f64; 2]]) -> Result<Vec<T>, EvalError> {
        if pts.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.flow_params();
        let mut sys = NodeBatch::new(&self.spec, &p);
        Ok(odeint::integrate(&mut sys, &flatten(pts), &self.solver)?.y)
    }

    pub fn logits(&self, pts: &[[f64; 2]]) -> Result<Vec<[T; 2]>, EvalError> {
        let z = self.transport(pts)?;
        Ok(z.chunks_exact(2).map(|z| head_logits(self.head(), z)).collect())
    }

    /// Probability of class 1 at each point.
    pub fn proba(&self, pts: &[[f64; 2]]) -> Result<Vec<f64>, EvalError> {
        Ok(self.logits(pts)?.into_iter().map(|l| softmax2(l).1.as_f64()).collect())
    }

    pub fn predict(&self, pts: &[[f64; 2]]) -> Result<Vec<u8>, EvalError> {
        Ok(self.logits(pts)?.into_iter().map(|l| u8::from(l[1] > l[0])).collect())
    }

    pub fn accuracy(&self, pts: &[[f64; 2]], labels: &[u8]) -> Result<f64, EvalError> {
        if pts.is_empty() {
            return Err(EvalError::NoSamples);
        }
        let pred = self.predict(pts)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pts.len() as f64)
    }
}

fn labelled(ds: &Dataset) -> Result<(Vec<[f64; 2]>, Vec<u8>), EvalError> {
    let labels = ds.labels.clone().ok_or(EvalError::MissingLabels)?;
    Ok((ds.points.clone(), labels))
}

/// Softmax cross-entropy of the classifier. Early stopping follows the
/// validation error rate, ties broken by validation cross-entropy.
#[derive(Debug, Clone)]
pub struct ClassifierObjective {
    pub spec: MlpSpec,
    pub solver: SolverConfig,
    pub train: (Vec<[f64; 2]>, Vec<u8>),
    pub val: (Vec<[f64; 2]>, Vec<u8>),
    pub test: (Vec<[f64; 2]>, Vec<u8>),
}

impl ClassifierObjective {
    pub fn new(spec: MlpSpec, solver: SolverConfig, train: &Dataset, val: &Dataset, test: &Dataset) -> Result<Self, EvalError> {
        Ok(ClassifierObjective {
            spec,
            solver,
            train: labelled(train)?,
            val: labelled(val)?,
            test: labelled(test)?,
        })
    }

    pub fn model<T: Scalar>(&self, params: &[T], mask: &Mask) -> ClassifierModel<T> {
        ClassifierModel {
            spec: self.spec.clone(),
            params: params.to_vec(),
            mask: mask.clone(),
            solver: self.solver.clone(),
        }
    }

    /// Mean cross-entropy and accuracy on a labelled set.
    pub fn score<T: Scalar>(
        &self,
        model: &ClassifierModel<T>,
        set: &(Vec<[f64; 2]>, Vec<u8>),
    ) -> Result<(f64, f64), EvalError> {
        if set.0.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let logits = model.logits(&set.0)?;
        let (mut ce, mut hits) = (0.0, 0usize);
        for (l, &y) in logits.iter().zip(&set.1) {
            let (p0, p1) = softmax2(*l);
            let p = if y == 1 { p1 } else { p0 };
            ce -= p.as_f64().max(1e-300).ln();
            hits += usize::from(u8::from(l[1] > l[0]) == y);
        }
        let n = set.0.len() as f64;
        Ok((ce / n, hits as f64 / n))
    }

    /// Train, validation, and test accuracy.
    pub fn accuracies<T: Scalar>(&self, params: &[T], mask: &Mask) -> Result<[f64; 3], EvalError> {
        let m = self.model(params, mask);
        Ok([
            self.score(&m, &self.train)?.1,
            self.score(&m, &self.val)?.1,
            self.score(&m, &self.test)?.1,
        ])
    }
}

fn to_train(e: EvalError) -> TrainError {
    match e {
        EvalError::Train(t) => t,
        EvalError::Cnf(c) => TrainError::Cnf(c),
        EvalError::Ode(o) => TrainError::Cnf(o.into()),
        other => TrainError::Config(other.to_string()),
    }
}

impl<T: Scalar> Objective<T> for ClassifierObjective {
    fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn n_extra(&self) -> usize {
        HEAD_LEN
    }

    fn n_train(&self) -> usize {
        self.train.0.len()
    }

    fn loss_grad(&self, params: &[T], mask: &Mask, idx: &[usize], _: &mut Rng) -> Result<(f64, Vec<T>, usize), TrainError> {
        let n_net = self.spec.n_params();
        let mut p = params[..n_net].to_vec();
        mask.apply_in_place(&mut p);
        let head = &params[n_net..];
        let pts: Vec<[f64; 2]> = idx.iter().map(|&i| self.train.0[i]).collect();
        let labels: Vec<u8> = idx.iter().map(|&i| self.train.1[i]).collect();
        let inv_n = T::one() / T::of(idx.len() as f64);
        let mut sys = NodeBatch::new(&self.spec, &p);
        let mut hg = vec![T::zero(); HEAD_LEN];
        let mut loss = T::zero();
        let g = odeint::gradient(&mut sys, &flatten::<T>(&pts), &self.solver, |y1| {
            let mut cot = vec![T::zero(); y1.len()];
            for ((z, c), &y) in y1.chunks_exact(2).zip(cot.chunks_exact_mut(2)).zip(&labels) {
                let (p0, p1) = softmax2(head_logits(head, z));
                loss -= if y == 1 { p1 } else { p0 }.max(T::min_positive_value()).ln();
                // ∂CE/∂logits = p − onehot
                let d = [
                    (p0 - if y == 0 { T::one() } else { T::zero() }) * inv_n,
                    (p1 - if y == 1 { T::one() } else { T::zero() }) * inv_n,
                ];
                for k in 0..2 {
                    hg[2 * k] += d[k] * z[0];
                    hg[2 * k + 1] += d[k] * z[1];
                    hg[4 + k] += d[k];
                }
                c[0] = head[0] * d[0] + head[2] * d[1];
                c[1] = head[1] * d[0] + head[3] * d[1];
            }
            cot
        })
        .map_err(|e| TrainError::Cnf(e.into()))?;
        let mut grad = g.grad_params;
        mask.apply_in_place(&mut grad);
        grad.extend(hg);
        Ok(((loss * inv_n).as_f64(), grad, g.n_evals))
    }

    fn evaluate(&self, params: &[T], mask: &Mask) -> Result<EvalResult, TrainError> {
        let m = self.model(params, mask);
        let (train, _) = self.score(&m, &self.train).map_err(to_train)?;
        let (val, val_acc) = self.score(&m, &self.val).map_err(to_train)?;
        let (test, _) = self.score(&m, &self.test).map_err(to_train)?;
        Ok(EvalResult {
            train,
            val,
            test,
            val_score: (1.0 - val_acc) + 1e-3 * val.min(1.0),
            n_evals: 0,
        })
    }
}

/// Outcome of a classifier prune run: the best-validation model plus every
/// per-iteration snapshot.
#[derive(Debug, Clone)]
pub struct ClassifierRun<T> {
    pub best: ClassifierModel<T>,
    pub best_iter: usize,
    pub history: PruneHistory,
    pub snapshots: Vec<Snapshot<T>>,
    pub objective: ClassifierObjective,
}

impl<T: Scalar> ClassifierRun<T> {
    pub fn model_at(&self, snapshot: &Snapshot<T>) -> ClassifierModel<T> {
        self.objective.model(&snapshot.params, &snapshot.mask)
    }
}

/// Trains a classifier on labelled splits through the prune/retrain loop.
pub fn train_classifier<T: Scalar>(
    splits: (&Dataset, &Dataset, &Dataset),
    spec: MlpSpec,
    solver: SolverConfig,
    train_cfg: TrainConfig,
    prune_cfg: PruneConfig,
) -> Result<ClassifierRun<T>, EvalError> {
    let obj = ClassifierObjective::new(spec.clone(), solver.clone(), splits.0, splits.1, splits.2)?;
    let init = ClassifierModel::<T>::init(spec, solver, train_cfg.seed);
    let mut trainer = SparseTrainer::new(obj, init.params, train_cfg, prune_cfg)?;
    let best = trainer.run()?;
    Ok(ClassifierRun {
        best: trainer.objective.model(&best.params, &best.mask),
        best_iter: best.iter,
        history: trainer.history().clone(),
        snapshots: trainer.snapshots().to_vec(),
        objective: trainer.objective,
    })
}

/// Class-1 probabilities on a grid plus the smallest distance from any of
/// the reference points to the 0.5 level set.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryExport {
    pub grid: GridSpec,
    pub rows: Vec<[f64; 3]>,
    /// `None` when the boundary does not cross the grid.
    pub margin: Option<f64>,
}

impl BoundaryExport {
    pub const HEADER: &'static str = "x,y,p_class1";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r[0], r[1], r[2]);
        }
        s
    }
}

pub fn export_decision_boundary<T: Scalar>(
    model: &ClassifierModel<T>,
    grid: &GridSpec,
    reference: &[[f64; 2]],
) -> Result<BoundaryExport, EvalError> {
    grid.validate()?;
    let nodes = grid.nodes();
    let p = model.proba(&nodes)?;
    let n = grid.resolution;
    // crossings of the 0.5 level along grid edges, linearly interpolated
    let mut crossings = Vec::new();
    let mut edge = |a: usize, b: usize| {
        let (fa, fb) = (p[a] - 0.5, p[b] - 0.5);
        if fa == 0.0 {
            crossings.push(nodes[a]);
        } else if fa * fb < 0.0 {
            let s = fa / (fa - fb);
            crossings.push([
                nodes[a][0] + s * (nodes[b][0] - nodes[a][0]),
                nodes[a][1] + s * (nodes[b][1] - nodes[a][1]),
            ]);
        }
    };
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if c + 1 < n {
                edge(i, i + 1);
            }
            if r + 1 < n {
                edge(i, i + n);
            }
        }
    }
    let margin = (!crossings.is_empty() && !reference.is_empty()).then(|| {
        reference
            .iter()
            .flat_map(|q| crossings.iter().map(move |c| (q[0] - c[0]).hypot(q[1] - c[1])))
            .fold(f64::INFINITY, f64::min)
    });
    Ok(BoundaryExport {
        grid: grid.clone(),
        rows: nodes.iter().zip(&p).map(|(n, &v)| [n[0], n[1], v]).collect(),
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, split, DatasetKind, Geometry};
    use crate::net::Activation;
    use crate::odeint::Method;
    use crate::prune::{Optimizer, PruneMode};

    fn small_spec() -> MlpSpec {
        MlpSpec::for_dim(2, &[16], Activation::Tanh).unwrap()
    }

    #[test]
    fn zero_flow_symmetric_head_is_indifferent() {
        let spec = small_spec();
        let mut m = ClassifierModel::<f64>::init(spec.clone(), SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25), 0);
        m.params.iter_mut().for_each(|v| *v = 0.0);
        let g = GridSpec {
            resolution: 4,
            x_range: (-2.0, 2.0),
            y_range: (-2.0, 2.0),
            t_eval: 0.0,
        };
        let b = export_decision_boundary(&m, &g, &[[0.0, 0.0]]).unwrap();
        assert!(b.rows.iter().all(|r| (r[2] - 0.5).abs() < 1e-12));
        assert_eq!(b.rows.len(), 16);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let ds = make_dataset(DatasetKind::Moons, 40, 2, Geometry::default()).unwrap();
        let (tr, va, te) = split(&ds, [0.8, 0.1, 0.1], 2).unwrap();
        let spec = small_spec();
        let solver = SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25);
        let obj = ClassifierObjective::new(spec.clone(), solver.clone(), &tr, &va, &te).unwrap();
        let m = ClassifierModel::<f64>::init(spec.clone(), solver, 4);
        let mask = Mask::ones(spec.n_params());
        let idx: Vec<usize> = (0..tr.len()).collect();
        let mut r = rng::stream(0, Stream::Batching);
        let (_, g, _) = obj.loss_grad(&m.params, &mask, &idx, &mut r).unwrap();
        for k in [0, 5, spec.n_params() - 1, spec.n_params(), spec.n_params() + 5] {
            let h = 1e-6;
            let mut p = m.params.clone();
            p[k] += h;
            let up = obj.loss_grad(&p, &mask, &idx, &mut r).unwrap().0;
            p[k] -= 2.0 * h;
            let down = obj.loss_grad(&p, &mask, &idx, &mut r).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn logit_scaling_keeps_predictions() {
        let spec = small_spec();
        let mut m = ClassifierModel::<f64>::init(spec.clone(), SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25), 7);
        let pts = [[0.3, -0.2], [1.5, 0.4], [-0.7, 0.9]];
        let before = m.predict(&pts).unwrap();
        let n = spec.n_params();
        m.params[n..].iter_mut().for_each(|v| *v *= 3.5);
        assert_eq!(m.predict(&pts).unwrap(), before);
    }

    #[test]
    fn short_training_separates_moons() {
        let ds = make_dataset(DatasetKind::Moons, 300, 1, Geometry::default()).unwrap();
        let (tr, va, te) = split(&ds, [0.8, 0.1, 0.1], 1).unwrap();
        let t = TrainConfig {
            optimizer: Optimizer::Adam,
            lr: 1e-2,
            weight_decay: 1e-4,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let p = PruneConfig {
            mode: PruneMode::Unstructured,
            pr_per_iter: 0.1,
            epochs_per_cycle: 150,
            patience: 0,
            max_iters: 0,
        };
        let run =
            train_classifier::<f64>((&tr, &va, &te), small_spec(), SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25), t, p)
                .unwrap();
        let acc = run.best.accuracy(&tr.points, tr.labels.as_ref().unwrap()).unwrap();
        assert!(acc > 0.9, "{acc}");
    }
}
