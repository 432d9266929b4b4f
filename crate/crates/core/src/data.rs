//! Seeded 2D synthetic datasets and deterministic splitting.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown dataset kind `{0}`")]
    UnknownKind(String),
    #[error("need at least {need} points, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("malformed dataset csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gaussians,
    GaussianSpiral,
    Spirals,
    Moons,
}

impl DatasetKind {
    pub fn has_modes(self) -> bool {
        matches!(self, DatasetKind::Gaussians | DatasetKind::GaussianSpiral)
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gaussians => "gaussians",
            DatasetKind::GaussianSpiral => "gaussian_spiral",
            DatasetKind::Spirals => "spirals",
            DatasetKind::Moons => "moons",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussians" => Ok(DatasetKind::Gaussians),
            "gaussian_spiral" => Ok(DatasetKind::GaussianSpiral),
            "spirals" => Ok(DatasetKind::Spirals),
            "moons" => Ok(DatasetKind::Moons),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

/// Generator geometry. Every value is a default and may be overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub gaussians_modes: usize,
    pub gaussians_radius: f64,
    pub gaussians_sigma: f64,
    pub spiral_modes: usize,
    pub spiral_sigma: f64,
    /// Mode `k` sits at angle `φ_k = k·spiral_turn/(modes−1)`, radius
    /// `spiral_r0 + spiral_growth·φ_k`.
    pub spiral_r0: f64,
    pub spiral_growth: f64,
    pub spiral_turn: f64,
    pub spirals_turn: f64,
    pub spirals_radius: f64,
    pub spirals_noise: f64,
    pub moons_radius: f64,
    pub moons_noise: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            gaussians_modes: 6,
            gaussians_radius: 4.0,
            gaussians_sigma: 0.5,
            spiral_modes: 8,
            spiral_sigma: 0.25,
            spiral_r0: 0.5,
            spiral_growth: 0.35,
            spiral_turn: 3.0 * PI,
            spirals_turn: 3.0 * PI,
            spirals_radius: 4.0,
            spirals_noise: 0.1,
            moons_radius: 1.0,
            moons_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    /// Generating component of each point, for mode-bearing kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_centers: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_sigma: Option<f64>,
    pub seed: u64,
    pub geometry: Geometry,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as owned vectors, the batch form used by the flow code.
    pub fn batch(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            components: self.components.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            ..self.clone()
        }
    }

    /// `x,y[,label]` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.labels {
            Some(labels) => {
                out.push_str("x,y,label\n");
                for (p, l) in self.points.iter().zip(labels) {
                    let _ = writeln!(out, "{},{},{}", p[0], p[1], l);
                }
            }
            None => {
                out.push_str("x,y\n");
                for p in &self.points {
                    let _ = writeln!(out, "{},{}", p[0], p[1]);
                }
            }
        }
        out
    }

    /// JSON sidecar with everything except the points.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "n_points": self.points.len(),
            "seed": self.seed,
            "geometry": self.geometry,
            "mode_centers": self.mode_centers,
            "mode_sigma": self.mode_sigma,
            "components": self.components,
        })
    }

    pub fn from_csv(csv: &str, sidecar: &serde_json::Value) -> Result<Dataset, DataError> {
        let mut lines = csv.lines().enumerate();
        let header = lines.next().map(|(_, h)| h.trim()).unwrap_or("");
        let labelled = match header {
            "x,y" => false,
            "x,y,label" => true,
            other => {
                return Err(DataError::Csv {
                    line: 1,
                    msg: format!("unexpected header `{other}`"),
                })
            }
        };
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| DataError::Csv { line: i + 1, msg };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 2 + labelled as usize {
                return Err(bad(format!("expected {} columns", 2 + labelled as usize)));
            }
            let x: f64 = cols[0].trim().parse().map_err(|e| bad(format!("{e}")))?;
            let y: f64 = cols[1].trim().parse().map_err(|e| bad(format!("{e}")))?;
            points.push([x, y]);
            if labelled {
                labels.push(cols[2].trim().parse().map_err(|e| bad(format!("{e}")))?);
            }
        }
        let kind: DatasetKind = serde_json::from_value(sidecar["kind"].clone())?;
        Ok(Dataset {
            kind,
            points,
            labels: labelled.then_some(labels),
            components: serde_json::from_value(sidecar["components"].clone())?,
            mode_centers: serde_json::from_value(sidecar["mode_centers"].clone())?,
            mode_sigma: serde_json::from_value(sidecar["mode_sigma"].clone())?,
            seed: serde_json::from_value(sidecar["seed"].clone())?,
            geometry: serde_json::from_value(sidecar["geometry"].clone())?,
        })
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_centers(g: &Geometry) -> Vec<[f64; 2]> {
    (0..g.gaussians_modes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / g.gaussians_modes as f64;
            [g.gaussians_radius * a.cos(), g.gaussians_radius * a.sin()]
        })
        .collect()
}

pub fn spiral_centers(g: &Geometry) -> Vec<[f64; 2]> {
    let m = g.spiral_modes.max(1);
    (0..m)
        .map(|k| {
            let phi = if m == 1 { 0.0 } else { g.spiral_turn * k as f64 / (m - 1) as f64 };
            let r = g.spiral_r0 + g.spiral_growth * phi;
            [r * phi.cos(), r * phi.sin()]
        })
        .collect()
}

fn mixture(rng: &mut Rng, n: usize, centers: &[[f64; 2]], sigma: f64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut pts = Vec::with_capacity(n);
    let mut comp = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..centers.len());
        let c = centers[k];
        pts.push([c[0] + sigma * normal(rng), c[1] + sigma * normal(rng)]);
        comp.push(k);
    }
    (pts, comp)
}

/// Generates `n_points` samples of `kind` from the data stream of `seed`.
pub fn make_dataset(kind: DatasetKind, n_points: usize, seed: u64, geometry: Geometry) -> Result<Dataset, DataError> {
    if n_points == 0 {
        return Err(DataError::TooSmall { need: 1, got: 0 });
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let g = &geometry;
    let mut ds = Dataset {
        kind,
        points: Vec::new(),
        labels: None,
        components: None,
        mode_centers: None,
        mode_sigma: None,
        seed,
        geometry: geometry.clone(),
    };
    match kind {
        DatasetKind::Gaussians | DatasetKind::GaussianSpiral => {
            let (centers, sigma) = if kind == DatasetKind::Gaussians {
                (gaussian_centers(g), g.gaussians_sigma)
            } else {
                (spiral_centers(g), g.spiral_sigma)
            };
            let (pts, comp) = mixture(&mut rng, n_points, &centers, sigma);
            ds.points = pts;
            ds.components = Some(comp);
            ds.mode_centers = Some(centers);
            ds.mode_sigma = Some(sigma);
        }
        DatasetKind::Spirals => {
            let scale = g.spirals_radius / g.spirals_turn;
            ds.points = (0..n_points)
                .map(|i| {
                    let arm = (i % 2) as f64;
                    let phi = rng.random::<f64>().sqrt() * g.spirals_turn;
                    let r = scale * phi;
                    let a = phi + arm * PI;
                    [
                        r * a.cos() + g.spirals_noise * normal(&mut rng),
                        r * a.sin() + g.spirals_noise * normal(&mut rng),
                    ]
                })
                .collect();
        }
        DatasetKind::Moons => {
            let r = g.moons_radius;
            let mut labels = Vec::with_capacity(n_points);
            ds.points = (0..n_points)
                .map(|i| {
                    let label = (i % 2) as u8;
                    let th = rng.random::<f64>() * PI;
                    // upper arc centred at the origin; lower arc reflected and
                    // shifted by (r, r/2)
                    let (x, y) = if label == 0 {
                        (r * th.cos(), r * th.sin())
                    } else {
                        (r - r * th.cos(), 0.5 * r - r * th.sin())
                    };
                    labels.push(label);
                    [x + g.moons_noise * normal(&mut rng), y + g.moons_noise * normal(&mut rng)]
                })
                .collect();
            ds.labels = Some(labels);
        }
    }
    Ok(ds)
}

/// Seeded shuffle followed by a contiguous train/validation/test partition.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let n = dataset.len();
    if n < 3 {
        return Err(DataError::TooSmall { need: 3, got: n });
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((fractions[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((dataset.subset(train), dataset.subset(val), dataset.subset(test)))
}
