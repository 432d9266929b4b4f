//! Continuous normalizing flow on `R^D`.
//!
//! Latent space sits at `t0` with a standard normal base density, data at
//! `t1`. Density evaluation integrates the augmented state `(z, Δlogp)`
//! backward from the data point; sampling integrates `z` forward. The
//! log-density correction obeys `dΔ/dt = −tr(∂f/∂z)`, so that
//! `log p(x) = log N(z(t0)) − Δ(t0)` after the backward solve.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::net::{Mask, MlpSpec, ParamVector, Tape};
use crate::odeint::{self, OdeError, OdeSystem, SolverConfig, VjpSystem};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CnfError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("hutchinson divergence needs a noise vector")]
    MissingNoise,
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Rademacher,
    Gaussian,
}

impl Noise {
    pub fn draw<T: Scalar>(self, rng: &mut Rng) -> T {
        match self {
            Noise::Rademacher => {
                if rng.random::<bool>() {
                    T::one()
                } else {
                    -T::one()
                }
            }
            Noise::Gaussian => T::of(rng.sample::<f64, _>(StandardNormal)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceMode {
    pub kind: DivergenceKind,
    pub noise: Noise,
    pub probes_per_sample: usize,
}

impl Default for DivergenceMode {
    fn default() -> Self {
        DivergenceMode {
            kind: DivergenceKind::Hutchinson,
            noise: Noise::Rademacher,
            probes_per_sample: 1,
        }
    }
}

impl DivergenceMode {
    pub fn exact() -> Self {
        DivergenceMode {
            kind: DivergenceKind::Exact,
            ..Default::default()
        }
    }

    pub fn hutchinson(noise: Noise, probes_per_sample: usize) -> Self {
        DivergenceMode {
            kind: DivergenceKind::Hutchinson,
            noise,
            probes_per_sample,
        }
    }
}

/// Augmented state `(z, Δlogp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugState<T> {
    pub z: Vec<T>,
    pub delta_logp: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub spec: MlpSpec,
    pub params: ParamVector<T>,
    pub mask: Mask,
    pub solver: SolverConfig,
    pub divergence: DivergenceMode,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(spec: MlpSpec, params: ParamVector<T>, solver: SolverConfig, divergence: DivergenceMode) -> Self {
        let mask = Mask::ones(params.len());
        FlowModel {
            spec,
            params,
            mask,
            solver,
            divergence,
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// `mask ⊙ params`.
    pub fn effective_params(&self) -> Vec<T> {
        let mut v = self.params.values.clone();
        self.mask.apply_in_place(&mut v);
        v
    }

    pub fn validate(&self) -> Result<(), CnfError> {
        self.spec.validate().map_err(|e| CnfError::InvalidModel(e.to_string()))?;
        self.params.check(&self.spec).map_err(|e| CnfError::InvalidModel(e.to_string()))?;
        if self.mask.len() != self.params.len() {
            return Err(CnfError::InvalidModel("mask length differs from parameters".into()));
        }
        if self.divergence.probes_per_sample == 0 {
            return Err(CnfError::InvalidModel("probes_per_sample must be at least 1".into()));
        }
        Ok(())
    }

    /// The same model with exact divergence, as used for evaluation.
    pub fn with_exact_divergence(&self) -> Self {
        FlowModel {
            divergence: DivergenceMode::exact(),
            ..self.clone()
        }
    }
}

/// Log density of the standard normal on `R^D`.
pub fn std_normal_log_density<T: Scalar>(z: &[T]) -> T {
    let sq: T = z.iter().map(|&v| v * v).sum();
    -T::of(0.5) * sq - T::of(0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Batched neural ODE `dz/dt = f(z, t)` for every sample, state laid out
/// sample after sample.
pub struct NodeBatch<'a, T> {
    spec: &'a MlpSpec,
    params: &'a [T],
    tape: Tape<T>,
    gz: Vec<T>,
}

impl<'a, T: Scalar> NodeBatch<'a, T> {
    pub fn new(spec: &'a MlpSpec, params: &'a [T]) -> Self {
        NodeBatch {
            spec,
            params,
            tape: Tape::new(spec, 0),
            gz: vec![T::zero(); spec.dim()],
        }
    }
}

impl<T: Scalar> OdeSystem<T> for NodeBatch<'_, T> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn rhs(&mut self, t: T, y: &[T], dy: &mut [T]) {
        let d = self.spec.dim();
        for (z, out) in y.chunks_exact(d).zip(dy.chunks_exact_mut(d)) {
            self.tape.forward(self.params, z, t, &[]);
            out.copy_from_slice(self.tape.output());
        }
    }
}

impl<T: Scalar> VjpSystem<T> for NodeBatch<'_, T> {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(&mut self, t: T, y: &[T], a: &[T], dy: &mut [T], grad_y: &mut [T], grad_p: &mut [T]) {
        let d = self.spec.dim();
        grad_p.fill(T::zero());
        for ((z, az), (out, gy)) in y
            .chunks_exact(d)
            .zip(a.chunks_exact(d))
            .zip(dy.chunks_exact_mut(d).zip(grad_y.chunks_exact_mut(d)))
        {
            self.tape.forward(self.params, z, t, &[]);
            out.copy_from_slice(self.tape.output());
            self.tape.backward(self.params, az, &[], &mut self.gz, grad_p);
            gy.copy_from_slice(&self.gz);
        }
    }
}

/// Batched augmented CNF dynamics. Per sample the state is `[z (D), Δ]`.
pub struct CnfBatch<'a, T> {
    spec: &'a MlpSpec,
    params: &'a [T],
    n_dirs: usize,
    /// Tangent directions per sample (`n_dirs · D` values each).
    dirs: Vec<T>,
    /// Per-direction weight of `u_dᵀ J u_d` in the divergence estimate.
    weight: T,
    shared_dirs: bool,
    tape: Tape<T>,
    tan_bar: Vec<T>,
    gz: Vec<T>,
}

impl<'a, T: Scalar> CnfBatch<'a, T> {
    /// Exact divergence: the directions are the standard basis.
    pub fn exact(spec: &'a MlpSpec, params: &'a [T]) -> Self {
        let d = spec.dim();
        let mut dirs = vec![T::zero(); d * d];
        for i in 0..d {
            dirs[i * d + i] = T::one();
        }
        Self::build(spec, params, d, dirs, T::one(), true)
    }

    /// Hutchinson divergence with fixed probes: `noise` holds
    /// `batch · probes · D` values.
    pub fn hutchinson(spec: &'a MlpSpec, params: &'a [T], probes: usize, noise: Vec<T>) -> Self {
        let w = T::one() / T::of(probes as f64);
        Self::build(spec, params, probes, noise, w, false)
    }

    fn build(spec: &'a MlpSpec, params: &'a [T], n_dirs: usize, dirs: Vec<T>, weight: T, shared_dirs: bool) -> Self {
        let d = spec.dim();
        CnfBatch {
            spec,
            params,
            n_dirs,
            dirs,
            weight,
            shared_dirs,
            tape: Tape::new(spec, n_dirs),
            tan_bar: vec![T::zero(); n_dirs * d],
            gz: vec![T::zero(); d],
        }
    }

    fn dirs_range(&self, sample: usize) -> std::ops::Range<usize> {
        let len = self.n_dirs * self.spec.dim();
        let start = if self.shared_dirs { 0 } else { sample * len };
        start..start + len
    }

    /// `Σ_d w·u_dᵀ (J u_d)` from the current tape.
    fn divergence(&self, dirs: &[T]) -> T {
        let d = self.spec.dim();
        let mut s = T::zero();
        for k in 0..self.n_dirs {
            let u = &dirs[k * d..(k + 1) * d];
            s += crate::scalar::dot(u, self.tape.tangent_output(k));
        }
        s * self.weight
    }
}

impl<T: Scalar> OdeSystem<T> for CnfBatch<'_, T> {
    fn dim(&self) -> usize {
        self.spec.dim() + 1
    }

    fn rhs(&mut self, t: T, y: &[T], dy: &mut [T]) {
        let d = self.spec.dim();
        let dirs = std::mem::take(&mut self.dirs);
        for (b, (st, out)) in y.chunks_exact(d + 1).zip(dy.chunks_exact_mut(d + 1)).enumerate() {
            let u = &dirs[self.dirs_range(b)];
            self.tape.forward(self.params, &st[..d], t, u);
            out[..d].copy_from_slice(self.tape.output());
            out[d] = -self.divergence(u);
        }
        self.dirs = dirs;
    }
}

impl<T: Scalar> VjpSystem<T> for CnfBatch<'_, T> {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(&mut self, t: T, y: &[T], a: &[T], dy: &mut [T], grad_y: &mut [T], grad_p: &mut [T]) {
        let d = self.spec.dim();
        grad_p.fill(T::zero());
        let dirs = std::mem::take(&mut self.dirs);
        let mut tan_bar = std::mem::take(&mut self.tan_bar);
        for b in 0..y.len() / (d + 1) {
            let r = b * (d + 1)..(b + 1) * (d + 1);
            let (st, ab) = (&y[r.clone()], &a[r.clone()]);
            let u = &dirs[self.dirs_range(b)];
            self.tape.forward(self.params, &st[..d], t, u);
            dy[r.start..r.start + d].copy_from_slice(self.tape.output());
            dy[r.end - 1] = -self.divergence(u);
            // scalar: a_zᵀ f − a_Δ · w Σ_d u_dᵀ (J u_d)
            let coef = -ab[d] * self.weight;
            for (tb, &ui) in tan_bar.iter_mut().zip(u) {
                *tb = coef * ui;
            }
            self.tape.backward(self.params, &ab[..d], &tan_bar, &mut self.gz, grad_p);
            grad_y[r.start..r.start + d].copy_from_slice(&self.gz);
            grad_y[r.end - 1] = T::zero();
        }
        self.dirs = dirs;
        self.tan_bar = tan_bar;
    }
}

/// `d(z, Δ)/dt` at a single state. Exact mode ignores `noise`; Hutchinson
/// mode needs one probe per `probes_per_sample`, back to back.
pub fn augmented_dynamics<T: Scalar>(
    model: &FlowModel<T>,
    state: &AugState<T>,
    t: T,
    noise: Option<&[T]>,
) -> Result<AugState<T>, CnfError> {
    let d = model.dim();
    if state.z.len() != d {
        return Err(CnfError::Dimension {
            expected: d,
            got: state.z.len(),
        });
    }
    let params = model.effective_params();
    let mut sys = match model.divergence.kind {
        DivergenceKind::Exact => CnfBatch::exact(&model.spec, &params),
        DivergenceKind::Hutchinson => {
            let eps = noise.ok_or(CnfError::MissingNoise)?;
            let want = model.divergence.probes_per_sample * d;
            if eps.len() != want {
                return Err(CnfError::Dimension {
                    expected: want,
                    got: eps.len(),
                });
            }
            CnfBatch::hutchinson(&model.spec, &params, model.divergence.probes_per_sample, eps.to_vec())
        }
    };
    let mut y = state.z.clone();
    y.push(state.delta_logp);
    let mut dy = vec![T::zero(); d + 1];
    sys.rhs(t, &y, &mut dy);
    Ok(AugState {
        delta_logp: dy[d],
        z: dy[..d].to_vec(),
    })
}

fn pack_batch<T: Scalar>(batch: &[Vec<T>], d: usize) -> Result<Vec<T>, CnfError> {
    if batch.is_empty() {
        return Err(CnfError::EmptyBatch);
    }
    let mut y = Vec::with_capacity(batch.len() * (d + 1));
    for x in batch {
        if x.len() != d {
            return Err(CnfError::Dimension {
                expected: d,
                got: x.len(),
            });
        }
        y.extend_from_slice(x);
        y.push(T::zero());
    }
    Ok(y)
}

/// Log densities of a batch under exact divergence, solved jointly.
/// Returns the values and the number of right-hand side evaluations.
pub fn log_prob_batch<T: Scalar>(model: &FlowModel<T>, batch: &[Vec<T>]) -> Result<(Vec<T>, usize), CnfError> {
    let d = model.dim();
    let y = pack_batch(batch, d)?;
    let params = model.effective_params();
    let mut sys = CnfBatch::exact(&model.spec, &params);
    let sol = odeint::integrate(&mut sys, &y, &model.solver.reversed())?;
    let lp = sol
        .y
        .chunks_exact(d + 1)
        .map(|s| std_normal_log_density(&s[..d]) - s[d])
        .collect();
    Ok((lp, sol.n_evals))
}

pub fn log_prob<T: Scalar>(model: &FlowModel<T>, x: &[T]) -> Result<T, CnfError> {
    Ok(log_prob_batch(model, &[x.to_vec()])?.0[0])
}

/// Mean negative log-likelihood in nats, exact divergence.
pub fn nll<T: Scalar>(model: &FlowModel<T>, batch: &[Vec<T>]) -> Result<T, CnfError> {
    let (lp, _) = log_prob_batch(model, batch)?;
    let n = T::of(lp.len() as f64);
    Ok(-lp.into_iter().sum::<T>() / n)
}

/// Loss value, masked parameter gradient, and solver cost of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad<T> {
    pub nll: T,
    pub grad: Vec<T>,
    pub n_evals: usize,
}

/// Gradient of the batch NLL with respect to the raw parameters, using the
/// model's divergence mode and backprop path. Hutchinson probes are drawn
/// from `rng` once per sample and held fixed across the solve.
pub fn nll_grad<T: Scalar>(model: &FlowModel<T>, batch: &[Vec<T>], rng: &mut Rng) -> Result<NllGrad<T>, CnfError> {
    let d = model.dim();
    let y = pack_batch(batch, d)?;
    let params = model.effective_params();
    let mut sys = match model.divergence.kind {
        DivergenceKind::Exact => CnfBatch::exact(&model.spec, &params),
        DivergenceKind::Hutchinson => {
            let k = model.divergence.probes_per_sample;
            let noise = (0..batch.len() * k * d).map(|_| model.divergence.noise.draw(rng)).collect();
            CnfBatch::hutchinson(&model.spec, &params, k, noise)
        }
    };
    nll_grad_with(&mut sys, model, &y)
}

/// Like [`nll_grad`] with caller-supplied probes (`batch · probes · D`).
pub fn nll_grad_with_noise<T: Scalar>(
    model: &FlowModel<T>,
    batch: &[Vec<T>],
    noise: Vec<T>,
) -> Result<NllGrad<T>, CnfError> {
    let d = model.dim();
    let y = pack_batch(batch, d)?;
    let params = model.effective_params();
    let mut sys = CnfBatch::hutchinson(&model.spec, &params, model.divergence.probes_per_sample, noise);
    nll_grad_with(&mut sys, model, &y)
}

fn nll_grad_with<T: Scalar>(sys: &mut CnfBatch<'_, T>, model: &FlowModel<T>, y: &[T]) -> Result<NllGrad<T>, CnfError> {
    let d = model.dim();
    let n = y.len() / (d + 1);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let g = odeint::gradient(sys, y, &model.solver.reversed(), |y0| {
        let mut cot = vec![T::zero(); y0.len()];
        for (s, c) in y0.chunks_exact(d + 1).zip(cot.chunks_exact_mut(d + 1)) {
            loss -= std_normal_log_density(&s[..d]) - s[d];
            for i in 0..d {
                c[i] = s[i] * inv_n;
            }
            c[d] = inv_n;
        }
        cot
    })?;
    let mut grad = g.grad_params;
    model.mask.apply_in_place(&mut grad);
    Ok(NllGrad {
        nll: loss * inv_n,
        grad,
        n_evals: g.n_evals,
    })
}

/// Maps data points to latent space (`t1 → t0`).
pub fn encode<T: Scalar>(model: &FlowModel<T>, xs: &[Vec<T>]) -> Result<Vec<Vec<T>>, CnfError> {
    transport(model, xs, &model.solver.reversed())
}

/// Maps latent points to data space (`t0 → t1`).
pub fn decode<T: Scalar>(model: &FlowModel<T>, zs: &[Vec<T>]) -> Result<Vec<Vec<T>>, CnfError> {
    transport(model, zs, &model.solver)
}

fn transport<T: Scalar>(model: &FlowModel<T>, pts: &[Vec<T>], cfg: &SolverConfig) -> Result<Vec<Vec<T>>, CnfError> {
    let d = model.dim();
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    let mut y = Vec::with_capacity(pts.len() * d);
    for p in pts {
        if p.len() != d {
            return Err(CnfError::Dimension {
                expected: d,
                got: p.len(),
            });
        }
        y.extend_from_slice(p);
    }
    let params = model.effective_params();
    let mut sys = NodeBatch::new(&model.spec, &params);
    let sol = odeint::integrate(&mut sys, &y, cfg)?;
    Ok(sol.y.chunks_exact(d).map(|c| c.to_vec()).collect())
}

/// Draws `n` base samples with the sampling stream of `seed` and pushes them
/// through the flow.
pub fn sample<T: Scalar>(model: &FlowModel<T>, n: usize, seed: u64) -> Result<Vec<Vec<T>>, CnfError> {
    if n == 0 {
        return Err(CnfError::EmptyBatch);
    }
    let mut rng = rng::stream(seed, Stream::Sampling);
    let d = model.dim();
    let base: Vec<Vec<T>> = (0..n)
        .map(|_| (0..d).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect())
        .collect();
    decode(model, &base)
}

/// Hutchinson estimate of `tr(M)` for a dense row-major `dim × dim` matrix:
/// returns the probe mean and its standard error.
pub fn hutchinson_trace<T: Scalar>(matrix: &[T], dim: usize, n_probes: usize, noise: Noise, rng: &mut Rng) -> (T, T) {
    assert_eq!(matrix.len(), dim * dim);
    assert!(n_probes >= 2);
    let mut eps = vec![T::zero(); dim];
    let (mut mean, mut m2) = (T::zero(), T::zero());
    for k in 0..n_probes {
        eps.iter_mut().for_each(|e| *e = noise.draw(rng));
        let mut v = T::zero();
        for i in 0..dim {
            let row = &matrix[i * dim..(i + 1) * dim];
            v += eps[i] * crate::scalar::dot(row, &eps);
        }
        // Welford
        let delta = v - mean;
        mean += delta / T::of((k + 1) as f64);
        m2 += delta * (v - mean);
    }
    let var = m2 / T::of((n_probes - 1) as f64);
    (mean, (var / T::of(n_probes as f64)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{mlp_init, Activation};
    use crate::odeint::Method;

    const LOG_2PI: f64 = 1.8378770664093453;

    fn linear_flow(a: f64, b: f64, solver: SolverConfig) -> FlowModel<f64> {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        let p = ParamVector::from_values(&spec, vec![a, 0.0, 0.0, 0.0, b, 0.0, 0.0, 0.0]).unwrap();
        FlowModel::new(spec, p, solver, DivergenceMode::exact())
    }

    fn tight() -> SolverConfig {
        SolverConfig::dopri5(0.0, 1.0, 1e-10, 1e-10)
    }

    #[test]
    fn zero_field_has_zero_dynamics() {
        let m = linear_flow(0.0, 0.0, tight());
        let st = AugState {
            z: vec![1.0, 2.0],
            delta_logp: 0.3,
        };
        let d = augmented_dynamics(&m, &st, 0.5, None).unwrap();
        assert_eq!(d.z, vec![0.0, 0.0]);
        assert_eq!(d.delta_logp, 0.0);
    }

    #[test]
    fn diagonal_divergence_exact_and_hutchinson() {
        let mut m = linear_flow(0.5, 0.5, tight());
        let st = AugState {
            z: vec![0.3, -0.2],
            delta_logp: 0.0,
        };
        assert_eq!(augmented_dynamics(&m, &st, 0.0, None).unwrap().delta_logp, -1.0);
        m.divergence = DivergenceMode::hutchinson(Noise::Rademacher, 1);
        assert_eq!(augmented_dynamics(&m, &st, 0.0, None), Err(CnfError::MissingNoise));
        for eps in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
            let d = augmented_dynamics(&m, &st, 0.0, Some(&eps)).unwrap();
            assert_eq!(d.delta_logp, -1.0);
        }
    }

    #[test]
    fn identity_flow_log_prob() {
        let m = linear_flow(0.0, 0.0, tight());
        assert!((log_prob(&m, &[0.0, 0.0]).unwrap() + LOG_2PI).abs() < 1e-12);
        assert!((nll(&m, &[vec![0.0, 0.0]]).unwrap() - LOG_2PI).abs() < 1e-12);
    }

    #[test]
    fn linear_flow_log_prob_closed_form() {
        let (a, b) = (0.5, 0.5);
        let m = linear_flow(a, b, tight());
        assert!((log_prob(&m, &[0.0, 0.0]).unwrap() - (-LOG_2PI - 1.0)).abs() < 1e-6);
        let x = [0.7, -1.1];
        let z0 = [x[0] * (-a).exp(), x[1] * (-b).exp()];
        let expected = std_normal_log_density(&z0) - (a + b);
        assert!((log_prob(&m, &x).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn nll_mean_invariant_to_duplication() {
        let spec = MlpSpec::new(vec![3, 6, 2], Activation::Tanh).unwrap();
        let m = FlowModel::new(spec.clone(), mlp_init(&spec, 4), tight(), DivergenceMode::exact());
        let batch = vec![vec![0.2, 0.4], vec![-1.0, 0.5]];
        let mut tripled = batch.clone();
        tripled.extend(batch.clone());
        tripled.extend(batch.clone());
        let (a, b): (f64, f64) = (nll(&m, &batch).unwrap(), nll(&m, &tripled).unwrap());
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert_eq!(nll(&m, &[]), Err(CnfError::EmptyBatch));
    }

    #[test]
    fn zero_mask_zero_gradient() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Sigmoid).unwrap();
        let mut m = FlowModel::new(
            spec.clone(),
            mlp_init(&spec, 1),
            SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25),
            DivergenceMode::exact(),
        );
        m.mask = Mask::zeros(spec.n_params());
        let mut r = rng::stream(0, Stream::Hutchinson);
        let g = nll_grad(&m, &[vec![0.1, 0.2]], &mut r).unwrap();
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_field_samples_are_base_draws() {
        let m = linear_flow(0.0, 0.0, tight());
        let s = sample(&m, 5, 3).unwrap();
        let mut r = rng::stream(3, Stream::Sampling);
        for p in &s {
            for &v in p {
                assert_eq!(v, r.sample::<f64, _>(StandardNormal));
            }
        }
        assert_eq!(sample(&m, 5, 3).unwrap(), s);
    }

    #[test]
    fn encode_decode_round_trip() {
        let spec = MlpSpec::new(vec![3, 8, 2], Activation::Tanh).unwrap();
        let m = FlowModel::new(spec.clone(), mlp_init(&spec, 9), SolverConfig::dopri5(0.0, 1.0, 1e-7, 1e-7), DivergenceMode::exact());
        let xs: Vec<Vec<f64>> = vec![vec![0.5, -0.3], vec![2.0, 1.0]];
        let back = decode(&m, &encode(&m, &xs).unwrap()).unwrap();
        for (a, b) in xs.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - b).abs() < 1e-4f64);
        }
    }

    #[test]
    fn hutchinson_diagonal_probe_is_exact() {
        let mut r = rng::stream(1, Stream::Hutchinson);
        let m = [2.0, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 1.25];
        let (mean, se) = hutchinson_trace(&m, 3, 10, Noise::Rademacher, &mut r);
        assert_eq!(mean, 2.75);
        assert_eq!(se, 0.0);
    }
}
