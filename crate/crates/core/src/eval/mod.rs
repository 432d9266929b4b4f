//! Sample quality, grid exports, and the moons classifier.

mod classifier;

pub use classifier::{
    export_decision_boundary, train_classifier, BoundaryExport, ClassifierModel, ClassifierObjective, ClassifierRun,
    HEAD_LEN,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cnf::{self, CnfError, FlowModel, NodeBatch};
use crate::net::{Mask, MlpSpec};
use crate::odeint::{self, OdeError, SolverConfig};
use crate::prune::TrainError;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no samples")]
    NoSamples,
    #[error("dataset carries no mode centers")]
    MissingModes,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dataset carries no labels")]
    MissingLabels,
    #[error(transparent)]
    Cnf(#[from] CnfError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Fraction of samples within `n_std · sigma` of their nearest mode center.
pub fn good_quality_fraction(
    samples: &[[f64; 2]],
    centers: &[[f64; 2]],
    sigma: f64,
    n_std: f64,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if centers.is_empty() {
        return Err(EvalError::MissingModes);
    }
    let r2 = (n_std * sigma).powi(2);
    let good = samples
        .iter()
        .filter(|s| {
            centers
                .iter()
                .map(|c| (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
                <= r2
        })
        .count();
    Ok(good as f64 / samples.len() as f64)
}

/// A regular grid over a rectangle. Nodes sit at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
    /// Time at which vector fields are sampled.
    pub t_eval: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_range: (-6.0, 6.0),
            y_range: (-6.0, 6.0),
            resolution: 100,
            t_eval: 0.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.1 > r.0;
        if !ok(self.x_range) || !ok(self.y_range) {
            return Err(EvalError::Grid("ranges must be finite with max > min".into()));
        }
        if self.resolution < 2 {
            return Err(EvalError::Grid("resolution must be at least 2".into()));
        }
        Ok(())
    }

    pub fn xs(&self) -> Vec<f64> {
        centers(self.x_range, self.resolution)
    }

    pub fn ys(&self) -> Vec<f64> {
        centers(self.y_range, self.resolution)
    }

    pub fn cell_area(&self) -> f64 {
        let n = self.resolution as f64;
        (self.x_range.1 - self.x_range.0) / n * (self.y_range.1 - self.y_range.0) / n
    }

    /// Nodes in row-major order: `y` outer, `x` inner.
    pub fn nodes(&self) -> Vec<[f64; 2]> {
        let xs = self.xs();
        self.ys().into_iter().flat_map(|y| xs.iter().map(move |&x| [x, y])).collect()
    }

    pub fn sidecar(&self, what: &str, seed: Option<u64>, checkpoint_hash: Option<&str>) -> serde_json::Value {
        serde_json::json!({
            "export": what,
            "grid": self,
            "node_layout": "cell centers, row-major with y outer",
            "seed": seed,
            "checkpoint_hash": checkpoint_hash,
        })
    }
}

fn centers(r: (f64, f64), n: usize) -> Vec<f64> {
    let w = (r.1 - r.0) / n as f64;
    (0..n).map(|i| r.0 + (i as f64 + 0.5) * w).collect()
}

/// Densities on a grid; `None` marks cells whose solve failed.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: GridSpec,
    pub values: Vec<Option<f64>>,
    pub missing: usize,
}

impl DensityGrid {
    /// Total mass captured by the grid, missing cells counted as zero.
    pub fn mass(&self) -> f64 {
        self.values.iter().flatten().sum::<f64>() * self.grid.cell_area()
    }

    /// Matrix form: the header row holds the x centers, each following row
    /// starts with its y center. Missing cells are written as `nan`.
    pub fn to_csv(&self) -> String {
        let n = self.grid.resolution;
        let mut s = String::from("y\\x");
        for x in self.grid.xs() {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
        for (r, y) in self.grid.ys().into_iter().enumerate() {
            let _ = write!(s, "{y}");
            for v in &self.values[r * n..(r + 1) * n] {
                match v {
                    Some(d) => {
                        let _ = write!(s, ",{d}");
                    }
                    None => s.push_str(",nan"),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn log_probs<T: Scalar>(model: &FlowModel<T>, pts: &[[f64; 2]]) -> Vec<Option<f64>> {
    let batch: Vec<Vec<T>> = pts.iter().map(|p| vec![T::of(p[0]), T::of(p[1])]).collect();
    match cnf::log_prob_batch(model, &batch) {
        Ok((lp, _)) => lp.into_iter().map(|v| Some(v.as_f64()).filter(|x| x.is_finite())).collect(),
        Err(_) if pts.len() > 1 => pts.iter().flat_map(|p| log_probs(model, std::slice::from_ref(p))).collect(),
        Err(_) => vec![None],
    }
}

/// `exp(log p)` at every grid node, evaluated row by row with the exact
/// divergence. A row whose joint solve fails is retried cell by cell.
pub fn export_density_grid<T: Scalar>(model: &FlowModel<T>, grid: &GridSpec) -> Result<DensityGrid, EvalError> {
    grid.validate()?;
    if model.dim() != 2 {
        return Err(CnfError::Dimension { expected: 2, got: model.dim() }.into());
    }
    let exact = model.with_exact_divergence();
    let nodes = grid.nodes();
    let values: Vec<Option<f64>> = nodes
        .chunks(grid.resolution)
        .flat_map(|row| log_probs(&exact, row))
        .map(|v| v.map(f64::exp))
        .collect();
    let missing = values.iter().filter(|v| v.is_none()).count();
    Ok(DensityGrid {
        grid: grid.clone(),
        values,
        missing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldRow {
    pub x: f64,
    pub y: f64,
    pub fx: f64,
    pub fy: f64,
    pub norm: f64,
}

pub const FIELD_HEADER: &str = "x,y,fx,fy,norm";

pub fn field_csv(rows: &[FieldRow]) -> String {
    let mut s = format!("{FIELD_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.x, r.y, r.fx, r.fy, r.norm);
    }
    s
}

/// `f(z, t_eval)` of the network `mask ⊙ params` at every grid node.
pub fn export_vector_field<T: Scalar>(
    spec: &MlpSpec,
    params: &[T],
    mask: &Mask,
    grid: &GridSpec,
) -> Result<Vec<FieldRow>, EvalError> {
    grid.validate()?;
    if spec.dim() != 2 {
        return Err(CnfError::Dimension { expected: 2, got: spec.dim() }.into());
    }
    let mut p = params[..spec.n_params()].to_vec();
    mask.apply_in_place(&mut p);
    let mut sys = NodeBatch::new(spec, &p);
    let nodes = grid.nodes();
    let y: Vec<T> = nodes.iter().flat_map(|n| [T::of(n[0]), T::of(n[1])]).collect();
    let mut dy = vec![T::zero(); y.len()];
    odeint::OdeSystem::rhs(&mut sys, T::of(grid.t_eval), &y, &mut dy);
    Ok(nodes
        .iter()
        .zip(dy.chunks_exact(2))
        .map(|(n, f)| {
            let (fx, fy) = (f[0].as_f64(), f[1].as_f64());
            FieldRow {
                x: n[0],
                y: n[1],
                fx,
                fy,
                norm: fx.hypot(fy),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub sample_id: usize,
    pub t: f64,
    pub z1: f64,
    pub z2: f64,
}

pub const TRAJECTORY_HEADER: &str = "sample_id,t,z1,z2";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.sample_id, r.t, r.z1, r.z2);
    }
    s
}

/// States of `inputs` at `n_time_samples` uniform knots from `solver.t0` to
/// `solver.t1`, both ends included.
pub fn export_trajectories<T: Scalar>(
    spec: &MlpSpec,
    params: &[T],
    mask: &Mask,
    solver: &SolverConfig,
    inputs: &[[f64; 2]],
    n_time_samples: usize,
) -> Result<Vec<TrajectoryRow>, EvalError> {
    if inputs.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if n_time_samples < 2 {
        return Err(EvalError::Grid("need at least two time samples".into()));
    }
    let mut p = params[..spec.n_params()].to_vec();
    mask.apply_in_place(&mut p);
    let mut sys = NodeBatch::new(spec, &p);
    let (t0, t1) = (solver.t0, solver.t1);
    let knots: Vec<f64> = (0..n_time_samples)
        .map(|k| if k + 1 == n_time_samples { t1 } else { t0 + (t1 - t0) * k as f64 / (n_time_samples - 1) as f64 })
        .collect();
    let y0: Vec<T> = inputs.iter().flat_map(|z| [T::of(z[0]), T::of(z[1])]).collect();
    let (states, _) = odeint::integrate_at(&mut sys, &y0, solver, &knots)?;
    let mut rows = Vec::with_capacity(inputs.len() * n_time_samples);
    for i in 0..inputs.len() {
        for (t, y) in knots.iter().zip(&states) {
            rows.push(TrajectoryRow {
                sample_id: i,
                t: *t,
                z1: y[2 * i].as_f64(),
                z2: y[2 * i + 1].as_f64(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnf::DivergenceMode;
    use crate::net::{Activation, ParamVector};

    fn identity_flow() -> FlowModel<f64> {
        let spec = MlpSpec::for_dim(2, &[4], Activation::Tanh).unwrap();
        FlowModel::new(
            spec.clone(),
            ParamVector::zeros(&spec),
            SolverConfig::dopri5(0.0, 1.0, 1e-6, 1e-6),
            DivergenceMode::exact(),
        )
    }

    /// Single linear layer with `W = diag(a, b)` on the state columns.
    fn linear(a: f64, b: f64) -> (MlpSpec, Vec<f64>) {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        (spec, vec![a, 0.0, 0.0, 0.0, b, 0.0, 0.0, 0.0])
    }

    #[test]
    fn quality_fraction_basics() {
        let c = [[0.0, 0.0], [5.0, 0.0]];
        assert_eq!(good_quality_fraction(&c, &c, 0.5, 2.0).unwrap(), 1.0);
        let s = [[0.9, 0.0], [6.2, 0.0], [2.5, 0.0]];
        assert_eq!(good_quality_fraction(&s, &c, 0.5, 2.0).unwrap(), 1.0 / 3.0);
        assert_eq!(good_quality_fraction(&s, &c, 0.5, 3.0).unwrap(), 2.0 / 3.0);
        assert_eq!(good_quality_fraction(&[], &c, 0.5, 2.0), Err(EvalError::NoSamples));
        assert_eq!(good_quality_fraction(&s, &[], 0.5, 2.0), Err(EvalError::MissingModes));
    }

    #[test]
    fn identity_density_is_symmetric_and_normalized() {
        let g = GridSpec {
            resolution: 24,
            ..GridSpec::default()
        };
        let d = export_density_grid(&identity_flow(), &g).unwrap();
        assert_eq!(d.missing, 0);
        let n = d.values.len();
        for i in 0..n {
            assert!((d.values[i].unwrap() - d.values[n - 1 - i].unwrap()).abs() < 1e-9);
        }
        let m = d.mass();
        assert!(m <= 1.0 + 1e-3 && m > 0.98, "{m}");
        let g2 = GridSpec {
            resolution: 2,
            ..GridSpec::default()
        };
        let d2 = export_density_grid(&identity_flow(), &g2).unwrap();
        assert_eq!(d2.values.len(), 4);
        assert_eq!(d2.to_csv().lines().count(), 3);
    }

    #[test]
    fn vector_field_of_contraction_points_inward() {
        let (spec, p) = linear(-1.0, -1.0);
        let g = GridSpec {
            resolution: 5,
            ..GridSpec::default()
        };
        let rows = export_vector_field(&spec, &p, &Mask::ones(8), &g).unwrap();
        assert_eq!(rows.len(), 25);
        for r in &rows {
            assert!((r.fx + r.x).abs() < 1e-15 && (r.fy + r.y).abs() < 1e-15);
            assert!((r.norm - r.x.hypot(r.y)).abs() < 1e-12);
        }
        let zero = export_vector_field(&spec, &p, &Mask::zeros(8), &g).unwrap();
        assert!(zero.iter().all(|r| r.norm == 0.0));
        assert!(field_csv(&rows).starts_with("x,y,fx,fy,norm\n"));
    }

    #[test]
    fn linear_trajectories_follow_exponentials() {
        let (spec, p) = linear(0.5, -0.3);
        let solver = SolverConfig::dopri5(0.0, 1.0, 1e-8, 1e-8);
        let rows = export_trajectories(&spec, &p, &Mask::ones(8), &solver, &[[1.0, 2.0], [-0.5, 0.1]], 7).unwrap();
        assert_eq!(rows.len(), 14);
        for r in &rows {
            let z0 = [[1.0, 2.0], [-0.5, 0.1]][r.sample_id];
            assert!((r.z1 - z0[0] * (0.5 * r.t).exp()).abs() < 1e-5);
            assert!((r.z2 - z0[1] * (-0.3 * r.t).exp()).abs() < 1e-5);
        }
        let still = export_trajectories(&spec, &p, &Mask::zeros(8), &solver, &[[1.0, 2.0]], 3).unwrap();
        assert!(still.iter().all(|r| r.z1 == 1.0 && r.z2 == 2.0));
    }
}
