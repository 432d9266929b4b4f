//! Curvature of a trained loss: Hessian-vector products by central
//! differences of the exact gradient, extremal eigenvalues by power
//! iteration, and a Hutchinson estimate of the trace.
//!
//! Every operator acts on the subspace of unmasked coordinates: inputs and
//! outputs are multiplied by the mask, so pruned weights contribute nothing
//! and receive exactly zero.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cnf::{self, CnfError, DivergenceMode, FlowModel};
use crate::net::Mask;
use crate::odeint::{Method, SolverConfig};
use crate::rng::{self, Stream};
use crate::scalar::{dot, max_abs, norm2, Scalar};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HessianError {
    #[error("direction vector is zero")]
    ZeroDirection,
    #[error("length mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {0}")]
    TooFew(&'static str),
    #[error(transparent)]
    Cnf(#[from] CnfError),
}

/// A twice-differentiable scalar loss with an exact gradient.
pub trait SmoothLoss<T: Scalar> {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[T]) -> Result<T, HessianError>;
    fn grad(&self, theta: &[T]) -> Result<Vec<T>, HessianError>;
}

/// Mean NLL of a flow over a fixed batch, with exact divergence and a
/// fixed-step RK4 solve so the objective is smooth and deterministic.
#[derive(Debug, Clone)]
pub struct FlowLoss<T> {
    pub model: FlowModel<T>,
    pub batch: Vec<Vec<T>>,
}

impl<T: Scalar> FlowLoss<T> {
    pub fn new(model: &FlowModel<T>, batch: Vec<Vec<T>>, rk4_step: f64) -> Self {
        let s = &model.solver;
        let mut model = model.clone();
        model.solver = SolverConfig::fixed(Method::Rk4, s.t0, s.t1, rk4_step);
        model.divergence = DivergenceMode::exact();
        FlowLoss { model, batch }
    }

    fn at(&self, theta: &[T]) -> Result<FlowModel<T>, HessianError> {
        if theta.len() != self.model.params.len() {
            return Err(HessianError::Dimension {
                expected: self.model.params.len(),
                got: theta.len(),
            });
        }
        let mut m = self.model.clone();
        m.params.values.copy_from_slice(theta);
        Ok(m)
    }
}

impl<T: Scalar> SmoothLoss<T> for FlowLoss<T> {
    fn dim(&self) -> usize {
        self.model.params.len()
    }

    fn value(&self, theta: &[T]) -> Result<T, HessianError> {
        Ok(cnf::nll(&self.at(theta)?, &self.batch)?)
    }

    fn grad(&self, theta: &[T]) -> Result<Vec<T>, HessianError> {
        // exact divergence draws no noise
        let mut unused = rng::stream(0, Stream::Hutchinson);
        Ok(cnf::nll_grad(&self.at(theta)?, &self.batch, &mut unused)?.grad)
    }
}

fn check_len<T>(v: &[T], n: usize) -> Result<(), HessianError> {
    if v.len() != n {
        return Err(HessianError::Dimension {
            expected: n,
            got: v.len(),
        });
    }
    Ok(())
}

/// `H·v` by central differences of the gradient with step
/// `fd_step·(1 + ‖θ‖∞)/‖v‖∞`, restricted to the unmasked coordinates.
pub fn hvp<T: Scalar, L: SmoothLoss<T> + ?Sized>(
    loss: &L,
    theta: &[T],
    mask: &Mask,
    v: &[T],
    fd_step: f64,
) -> Result<Vec<T>, HessianError> {
    let n = loss.dim();
    check_len(theta, n)?;
    check_len(v, n)?;
    check_len(&mask.bits, n)?;
    if max_abs(v) == T::zero() {
        return Err(HessianError::ZeroDirection);
    }
    let mut vm = v.to_vec();
    mask.apply_in_place(&mut vm);
    let vmax = max_abs(&vm);
    if vmax == T::zero() {
        return Ok(vec![T::zero(); n]);
    }
    let eps = T::of(fd_step) * (T::one() + max_abs(theta)) / vmax;
    let shifted = |sign: T| -> Vec<T> { theta.iter().zip(&vm).map(|(&t, &d)| t + sign * eps * d).collect() };
    let gp = loss.grad(&shifted(T::one()))?;
    let gm = loss.grad(&shifted(-T::one()))?;
    let two_eps = eps + eps;
    let mut out: Vec<T> = gp.iter().zip(&gm).map(|(&a, &b)| (a - b) / two_eps).collect();
    mask.apply_in_place(&mut out);
    Ok(out)
}

/// Result of a power iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen<T> {
    pub value: f64,
    pub vector: Vec<T>,
    pub iters: usize,
    pub converged: bool,
}

fn random_start<T: Scalar>(mask: &Mask, seed: u64) -> Vec<T> {
    let mut r = rng::stream(seed, Stream::HessianProbe);
    let mut v: Vec<T> = (0..mask.len()).map(|_| T::of(r.random_range(-1.0..1.0))).collect();
    mask.apply_in_place(&mut v);
    v
}

/// Power iteration of `op` on the masked subspace. Stops when successive
/// Rayleigh quotients differ by less than `tol`.
fn power<T: Scalar>(
    mut op: impl FnMut(&[T]) -> Result<Vec<T>, HessianError>,
    mask: &Mask,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<Eigen<T>, HessianError> {
    if iters == 0 {
        return Err(HessianError::TooFew("one iteration"));
    }
    let mut v = random_start::<T>(mask, seed);
    let nv = norm2(&v);
    if nv == T::zero() {
        return Ok(Eigen {
            value: 0.0,
            vector: v,
            iters: 0,
            converged: true,
        });
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut last = f64::NAN;
    for it in 1..=iters {
        let w = op(&v)?;
        let rq = dot(&v, &w).as_f64();
        let nw = norm2(&w);
        let done = (rq - last).abs() < tol;
        last = rq;
        if nw == T::zero() {
            return Ok(Eigen {
                value: 0.0,
                vector: v,
                iters: it,
                converged: true,
            });
        }
        if done {
            return Ok(Eigen {
                value: rq,
                vector: v,
                iters: it,
                converged: true,
            });
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Ok(Eigen {
        value: last,
        vector: v,
        iters,
        converged: false,
    })
}

/// Eigenvalue of largest magnitude, with its sign.
pub fn top_eigenvalue<T: Scalar, L: SmoothLoss<T> + ?Sized>(
    loss: &L,
    theta: &[T],
    mask: &Mask,
    settings: &HessianSettings,
) -> Result<Eigen<T>, HessianError> {
    power(
        |v| hvp(loss, theta, mask, v, settings.fd_step),
        mask,
        settings.power_iters,
        settings.tol,
        settings.seed,
    )
}

/// Smallest eigenvalue via the shifted map `v ↦ λ_ref·v − H·v`, where
/// `λ_ref` bounds the spectral radius from above.
pub fn min_eigenvalue<T: Scalar, L: SmoothLoss<T> + ?Sized>(
    loss: &L,
    theta: &[T],
    mask: &Mask,
    lambda_ref: f64,
    settings: &HessianSettings,
) -> Result<Eigen<T>, HessianError> {
    let s = T::of(lambda_ref);
    let e = power(
        |v| Ok(hvp(loss, theta, mask, v, settings.fd_step)?.into_iter().zip(v).map(|(h, &x)| s * x - h).collect()),
        mask,
        settings.power_iters,
        settings.tol,
        settings.seed.wrapping_add(1),
    )?;
    Ok(Eigen {
        value: lambda_ref - e.value,
        ..e
    })
}

/// Largest eigenvalue when the dominant one is negative, via the map
/// `v ↦ H·v + shift·v` with `shift ≥ |λ_min|`.
fn max_eigenvalue_shifted<T: Scalar, L: SmoothLoss<T> + ?Sized>(
    loss: &L,
    theta: &[T],
    mask: &Mask,
    shift: f64,
    settings: &HessianSettings,
) -> Result<Eigen<T>, HessianError> {
    let s = T::of(shift);
    let e = power(
        |v| Ok(hvp(loss, theta, mask, v, settings.fd_step)?.into_iter().zip(v).map(|(h, &x)| h + s * x).collect()),
        mask,
        settings.power_iters,
        settings.tol,
        settings.seed.wrapping_add(2),
    )?;
    Ok(Eigen {
        value: e.value - shift,
        ..e
    })
}

/// `tr(H)` over the unmasked coordinates and its standard error. When the
/// probe budget covers every unmasked coordinate the diagonal is summed
/// exactly along basis vectors (standard error 0); otherwise this is the
/// Hutchinson mean over Rademacher probes.
pub fn hessian_trace<T: Scalar, L: SmoothLoss<T> + ?Sized>(
    loss: &L,
    theta: &[T],
    mask: &Mask,
    n_probes: usize,
    fd_step: f64,
    seed: u64,
) -> Result<(f64, f64), HessianError> {
    if n_probes < 2 {
        return Err(HessianError::TooFew("two probes"));
    }
    if mask.count_ones() == 0 {
        return Ok((0.0, 0.0));
    }
    let free = mask.count_ones();
    if free <= n_probes {
        let mut total = 0.0;
        for i in (0..mask.len()).filter(|&i| mask.bits[i]) {
            let mut e = vec![T::zero(); mask.len()];
            e[i] = T::one();
            total += hvp(loss, theta, mask, &e, fd_step)?[i].as_f64();
        }
        return Ok((total, 0.0));
    }
    let mut r = rng::stream(seed, Stream::Custom(4));
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=n_probes {
        let mut v: Vec<T> = (0..mask.len()).map(|_| if r.random::<bool>() { T::one() } else { -T::one() }).collect();
        mask.apply_in_place(&mut v);
        let q = dot(&v, &hvp(loss, theta, mask, &v, fd_step)?).as_f64();
        let d = q - mean;
        mean += d / k as f64;
        m2 += d * (q - mean);
    }
    let var = m2 / (n_probes - 1) as f64;
    Ok((mean, (var / n_probes as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianSettings {
    pub power_iters: usize,
    /// Absolute change of the Rayleigh quotient that ends power iteration.
    pub tol: f64,
    pub n_probes: usize,
    pub fd_step: f64,
    /// Step of the RK4 solve the curvature is measured on.
    pub rk4_step: f64,
    pub seed: u64,
}

impl Default for HessianSettings {
    fn default() -> Self {
        HessianSettings {
            power_iters: 200,
            tol: 1e-7,
            n_probes: 100,
            fd_step: 1e-4,
            rk4_step: 0.05,
            seed: 0,
        }
    }
}

/// Curvature summary. `kappa = |lambda_max| / |lambda_min|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub nll: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub trace: f64,
    pub se_trace: f64,
    pub kappa: f64,
    pub n_probes: usize,
    pub power_iters: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub converged: bool,
}

impl HessianReport {
    pub const CSV_HEADER: &'static str = "tag,prune_ratio,nll,lambda_max,lambda_min,trace,kappa,n_probes,se_trace";

    pub fn csv_row(&self, tag: &str, prune_ratio: f64) -> String {
        format!(
            "{tag},{prune_ratio},{},{},{},{},{},{},{}",
            self.nll, self.lambda_max, self.lambda_min, self.trace, self.kappa, self.n_probes, self.se_trace
        )
    }

    /// `(lambda_max, trace, kappa)` relative to a reference report.
    pub fn normalized(&self, reference: &HessianReport) -> (f64, f64, f64) {
        (
            self.lambda_max / reference.lambda_max,
            self.trace / reference.trace,
            self.kappa / reference.kappa,
        )
    }
}

pub fn hessian_report<T: Scalar, L: SmoothLoss<T> + ?Sized>(
    loss: &L,
    theta: &[T],
    mask: &Mask,
    settings: &HessianSettings,
) -> Result<HessianReport, HessianError> {
    let nll = loss.value(theta)?.as_f64();
    let top = top_eigenvalue(loss, theta, mask, settings)?;
    let (lmax, lmin, ok) = if top.value >= 0.0 {
        let lo = min_eigenvalue(loss, theta, mask, top.value, settings)?;
        (top.value, lo.value, top.converged && lo.converged)
    } else {
        let hi = max_eigenvalue_shifted(loss, theta, mask, -top.value, settings)?;
        (hi.value, top.value, top.converged && hi.converged)
    };
    let (trace, se_trace) = hessian_trace(loss, theta, mask, settings.n_probes, settings.fd_step, settings.seed)?;
    Ok(HessianReport {
        nll,
        lambda_max: lmax,
        lambda_min: lmin,
        trace,
        se_trace,
        kappa: lmax.abs() / lmin.abs(),
        n_probes: settings.n_probes,
        power_iters: settings.power_iters,
        fd_step: settings.fd_step,
        seed: settings.seed,
        converged: ok,
    })
}

/// Report for a flow model over `batch`, measured at its current parameters.
pub fn flow_hessian_report<T: Scalar>(
    model: &FlowModel<T>,
    batch: Vec<Vec<T>>,
    settings: &HessianSettings,
) -> Result<HessianReport, HessianError> {
    let loss = FlowLoss::new(model, batch, settings.rk4_step);
    let theta = model.effective_params();
    hessian_report(&loss, &theta, &model.mask, settings)
}
