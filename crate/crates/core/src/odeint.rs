//! Explicit integrators and gradients through them.
//!
//! Fixed-step Euler and RK4, and adaptive Dormand–Prince 5(4) with PI step
//! control. Gradients come either from differentiating the unrolled
//! fixed-step map exactly ([`backprop_bptt`]) or from integrating the adjoint
//! system backward in time ([`backprop_adjoint`]).

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("integration exceeded {max_steps} steps at t = {t}")]
    StepLimit { t: f64, max_steps: usize },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("unsupported combination: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backprop {
    Bptt,
    Adjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    pub fixed_step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub backprop: Backprop,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            t0: 0.0,
            t1: 1.0,
            fixed_step: 0.05,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            backprop: Backprop::Adjoint,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, t0: f64, t1: f64, step: f64) -> Self {
        SolverConfig {
            method,
            t0,
            t1,
            fixed_step: step,
            backprop: Backprop::Bptt,
            ..Default::default()
        }
    }

    pub fn dopri5(t0: f64, t1: f64, rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            t0,
            t1,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |m: &str| Err(OdeError::InvalidConfig(m.to_string()));
        if !(self.t0.is_finite() && self.t1.is_finite()) || self.t0 == self.t1 {
            return bad("t0 and t1 must be finite and distinct");
        }
        if !(self.fixed_step > 0.0) {
            return bad("fixed_step must be positive");
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.backprop == Backprop::Bptt && self.method == Method::Dopri5 {
            return Err(OdeError::Unsupported(
                "backprop through time needs a fixed-step method".into(),
            ));
        }
        Ok(())
    }

    /// The same solver run over `[t1, t0]`.
    pub fn reversed(&self) -> Self {
        SolverConfig {
            t0: self.t1,
            t1: self.t0,
            ..self.clone()
        }
    }

    /// The same solver over a different interval.
    pub fn with_interval(&self, t0: f64, t1: f64) -> Self {
        SolverConfig { t0, t1, ..self.clone() }
    }

    /// Number of equal steps a fixed-step method takes.
    pub fn fixed_step_count(&self) -> usize {
        let span = (self.t1 - self.t0).abs() / self.fixed_step;
        (span - 1e-9).ceil().max(1.0) as usize
    }
}

/// Right-hand side `dy/dt = g(t, y)`.
pub trait OdeSystem<T: Scalar> {
    fn dim(&self) -> usize;
    fn rhs(&mut self, t: T, y: &[T], dy: &mut [T]);
}

/// A right-hand side that also provides vector-Jacobian products.
pub trait VjpSystem<T: Scalar>: OdeSystem<T> {
    fn n_params(&self) -> usize;

    /// Writes `g(t, y)` into `dy`, `aᵀ ∂g/∂y` into `grad_y`, and `aᵀ ∂g/∂θ`
    /// into `grad_p` (all overwritten).
    fn vjp(&mut self, t: T, y: &[T], a: &[T], dy: &mut [T], grad_y: &mut [T], grad_p: &mut [T]);
}

/// Adapter turning a closure into an [`OdeSystem`].
pub struct FnSystem<F> {
    pub dim: usize,
    pub f: F,
}

impl<T: Scalar, F: FnMut(T, &[T], &mut [T])> OdeSystem<T> for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&mut self, t: T, y: &[T], dy: &mut [T]) {
        (self.f)(t, y, dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub y: Vec<T>,
    pub n_evals: usize,
    pub n_steps: usize,
    pub n_rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Terminal state of the forward solve.
    pub y1: Vec<T>,
    pub grad_y0: Vec<T>,
    pub grad_params: Vec<T>,
    /// Right-hand side evaluations, forward and backward combined.
    pub n_evals: usize,
}

struct Tableau {
    c: &'static [f64],
    a: &'static [&'static [f64]],
    b: &'static [f64],
}

const EULER: Tableau = Tableau {
    c: &[0.0],
    a: &[&[]],
    b: &[1.0],
};

const RK4: Tableau = Tableau {
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
};

fn tableau(method: Method) -> Option<&'static Tableau> {
    match method {
        Method::Euler => Some(&EULER),
        Method::Rk4 => Some(&RK4),
        Method::Dopri5 => None,
    }
}

fn all_finite<T: Scalar>(y: &[T]) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// Integrates `sys` from `cfg.t0` to `cfg.t1` starting at `y0`.
pub fn integrate<T: Scalar, S: OdeSystem<T> + ?Sized>(
    sys: &mut S,
    y0: &[T],
    cfg: &SolverConfig,
) -> Result<Solution<T>, OdeError> {
    if cfg.method == Method::Dopri5 {
        if !(cfg.rtol > 0.0 && cfg.atol > 0.0) || cfg.t0 == cfg.t1 || cfg.max_steps == 0 {
            return Err(OdeError::InvalidConfig("bad dopri5 settings".into()));
        }
    } else if !(cfg.fixed_step > 0.0) || cfg.t0 == cfg.t1 {
        return Err(OdeError::InvalidConfig("bad fixed-step settings".into()));
    }
    if !all_finite(y0) {
        return Err(OdeError::NonFinite { t: cfg.t0 });
    }
    match tableau(cfg.method) {
        Some(tab) => fixed_steps(sys, y0, cfg, tab, None),
        None => dopri5(sys, y0, cfg),
    }
}

/// Stage inputs of every fixed step, kept for the reverse sweep.
struct StageRecord<T> {
    stages: Vec<Vec<T>>,
}

fn fixed_steps<T: Scalar, S: OdeSystem<T> + ?Sized>(
    sys: &mut S,
    y0: &[T],
    cfg: &SolverConfig,
    tab: &Tableau,
    mut record: Option<&mut StageRecord<T>>,
) -> Result<Solution<T>, OdeError> {
    let n = y0.len();
    let steps = cfg.fixed_step_count();
    if steps > cfg.max_steps {
        return Err(OdeError::StepLimit {
            t: cfg.t0,
            max_steps: cfg.max_steps,
        });
    }
    let h = T::of((cfg.t1 - cfg.t0) / steps as f64);
    let s = tab.b.len();
    let mut y = y0.to_vec();
    let mut ks = vec![vec![T::zero(); n]; s];
    let mut stage = vec![T::zero(); n];
    let mut n_evals = 0;
    for step in 0..steps {
        let t = T::of(cfg.t0) + h * T::of(step as f64);
        for i in 0..s {
            stage.copy_from_slice(&y);
            for (j, &aij) in tab.a[i].iter().enumerate() {
                if aij != 0.0 {
                    let coef = h * T::of(aij);
                    for (st, &k) in stage.iter_mut().zip(&ks[j]) {
                        *st += coef * k;
                    }
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.stages.push(stage.clone());
            }
            sys.rhs(t + h * T::of(tab.c[i]), &stage, &mut ks[i]);
            n_evals += 1;
        }
        for (i, &bi) in tab.b.iter().enumerate() {
            let coef = h * T::of(bi);
            for (yv, &k) in y.iter_mut().zip(&ks[i]) {
                *yv += coef * k;
            }
        }
        if !all_finite(&y) {
            return Err(OdeError::NonFinite {
                t: (t + h).as_f64(),
            });
        }
    }
    Ok(Solution {
        y,
        n_evals,
        n_steps: steps,
        n_rejected: 0,
    })
}

// Dormand–Prince 5(4) coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const H_MIN: f64 = 1e-8;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

/// Mixed-tolerance RMS norm of `err` scaled by `atol + rtol·max(|y|, |ŷ|)`.
fn error_norm<T: Scalar>(err: &[T], y: &[T], y_new: &[T], rtol: T, atol: T) -> T {
    if err.is_empty() {
        return T::zero();
    }
    let sum = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(&e, (&a, &b))| {
            let sk = atol + rtol * a.abs().max(b.abs());
            let r = e / sk;
            r * r
        })
        .fold(T::zero(), |acc, v| acc + v);
    (sum / T::of(err.len() as f64)).sqrt()
}

fn rms_scaled<T: Scalar>(v: &[T], y: &[T], rtol: T, atol: T) -> T {
    error_norm(v, y, y, rtol, atol)
}

fn axpy_into<T: Scalar>(out: &mut [T], y: &[T], terms: &[(T, &[T])]) {
    for i in 0..out.len() {
        let mut acc = y[i];
        for (c, k) in terms {
            acc += *c * k[i];
        }
        out[i] = acc;
    }
}

fn initial_step<T: Scalar, S: OdeSystem<T> + ?Sized>(
    sys: &mut S,
    t: T,
    y: &[T],
    f0: &[T],
    dir: T,
    h_max: T,
    rtol: T,
    atol: T,
) -> T {
    let d0 = rms_scaled(y, y, rtol, atol);
    let d1 = rms_scaled(f0, y, rtol, atol);
    let tiny = T::of(1e-10);
    let mut h0 = if d0 < tiny || d1 < tiny {
        T::of(1e-6)
    } else {
        T::of(0.01) * d0 / d1
    };
    h0 = h0.min(h_max);
    let y1: Vec<T> = y.iter().zip(f0).map(|(&yi, &fi)| yi + dir * h0 * fi).collect();
    let mut f1 = vec![T::zero(); y.len()];
    sys.rhs(t + dir * h0, &y1, &mut f1);
    let diff: Vec<T> = f1.iter().zip(f0).map(|(&a, &b)| a - b).collect();
    let d2 = rms_scaled(&diff, y, rtol, atol) / h0;
    let der12 = d1.max(d2);
    let h1 = if der12 <= T::of(1e-15) {
        T::of(1e-6).max(h0 * T::of(1e-3))
    } else {
        (T::of(0.01) / der12).powf(T::of(0.2))
    };
    (T::of(100.0) * h0).min(h1).min(h_max)
}

fn dopri5<T: Scalar, S: OdeSystem<T> + ?Sized>(
    sys: &mut S,
    y0: &[T],
    cfg: &SolverConfig,
) -> Result<Solution<T>, OdeError> {
    let n = y0.len();
    let (t0, t1) = (T::of(cfg.t0), T::of(cfg.t1));
    let dir = if t1 > t0 { T::one() } else { -T::one() };
    let span = (t1 - t0).abs();
    let (rtol, atol) = (T::of(cfg.rtol), T::of(cfg.atol));
    let h_min = T::of(H_MIN).min(span);
    let expo1 = T::of(0.2 - BETA * 0.75);

    let mut y = y0.to_vec();
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut k5 = vec![T::zero(); n];
    let mut k6 = vec![T::zero(); n];
    let mut k7 = vec![T::zero(); n];
    let mut ys = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    let mut err = vec![T::zero(); n];

    let mut t = t0;
    sys.rhs(t, &y, &mut k1);
    let mut n_evals = 1;
    let mut h = initial_step(sys, t, &y, &k1, dir, span, rtol, atol).max(h_min);
    n_evals += 1;

    let mut fac_old = T::of(1e-4);
    let mut last_rejected = false;
    let (mut n_steps, mut n_rejected) = (0usize, 0usize);

    loop {
        let remaining = (t1 - t).abs();
        if remaining <= span * T::of(1e-12) {
            break;
        }
        if n_steps + n_rejected >= cfg.max_steps {
            return Err(OdeError::StepLimit {
                t: t.as_f64(),
                max_steps: cfg.max_steps,
            });
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = dir * h;

        axpy_into(&mut ys, &y, &[(hs * T::of(A21), &k1)]);
        sys.rhs(t + hs * T::of(C2), &ys, &mut k2);
        axpy_into(&mut ys, &y, &[(hs * T::of(A31), &k1), (hs * T::of(A32), &k2)]);
        sys.rhs(t + hs * T::of(C3), &ys, &mut k3);
        axpy_into(
            &mut ys,
            &y,
            &[(hs * T::of(A41), &k1), (hs * T::of(A42), &k2), (hs * T::of(A43), &k3)],
        );
        sys.rhs(t + hs * T::of(C4), &ys, &mut k4);
        axpy_into(
            &mut ys,
            &y,
            &[
                (hs * T::of(A51), &k1),
                (hs * T::of(A52), &k2),
                (hs * T::of(A53), &k3),
                (hs * T::of(A54), &k4),
            ],
        );
        sys.rhs(t + hs * T::of(C5), &ys, &mut k5);
        axpy_into(
            &mut ys,
            &y,
            &[
                (hs * T::of(A61), &k1),
                (hs * T::of(A62), &k2),
                (hs * T::of(A63), &k3),
                (hs * T::of(A64), &k4),
                (hs * T::of(A65), &k5),
            ],
        );
        let t_new = if last { t1 } else { t + hs };
        sys.rhs(t_new, &ys, &mut k6);
        axpy_into(
            &mut y_new,
            &y,
            &[
                (hs * T::of(A71), &k1),
                (hs * T::of(A73), &k3),
                (hs * T::of(A74), &k4),
                (hs * T::of(A75), &k5),
                (hs * T::of(A76), &k6),
            ],
        );
        sys.rhs(t_new, &y_new, &mut k7);
        n_evals += 6;
        for i in 0..n {
            err[i] = hs
                * (T::of(E1) * k1[i]
                    + T::of(E3) * k3[i]
                    + T::of(E4) * k4[i]
                    + T::of(E5) * k5[i]
                    + T::of(E6) * k6[i]
                    + T::of(E7) * k7[i]);
        }
        let e = error_norm(&err, &y, &y_new, rtol, atol);

        if !e.is_finite() || !all_finite(&y_new) {
            if h <= h_min {
                return Err(OdeError::NonFinite { t: t.as_f64() });
            }
            h = (h * T::of(0.2)).max(h_min);
            n_rejected += 1;
            last_rejected = true;
            continue;
        }

        let fac11 = e.powf(expo1);
        let fac = (fac11 / fac_old.powf(T::of(BETA)) / T::of(SAFETY))
            .max(T::one() / T::of(FAC_MAX))
            .min(T::one() / T::of(FAC_MIN));
        let h_new = h / fac;

        if e <= T::one() || h <= h_min {
            fac_old = e.max(T::of(1e-4));
            n_steps += 1;
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            let mut next = h_new.min(span);
            if last_rejected {
                next = next.min(h);
            }
            h = next.max(h_min);
            last_rejected = false;
            if last {
                break;
            }
        } else {
            h = (h / (T::one() / T::of(FAC_MIN)).min(fac11 / T::of(SAFETY))).max(h_min);
            n_rejected += 1;
            last_rejected = true;
        }
    }
    Ok(Solution {
        y,
        n_evals,
        n_steps,
        n_rejected,
    })
}

/// Integrates and records the state at each of `knots` (the first knot must
/// be `cfg.t0`; knots must be monotone in the integration direction).
pub fn integrate_at<T: Scalar, S: OdeSystem<T> + ?Sized>(
    sys: &mut S,
    y0: &[T],
    cfg: &SolverConfig,
    knots: &[f64],
) -> Result<(Vec<Vec<T>>, usize), OdeError> {
    let mut out = Vec::with_capacity(knots.len());
    let mut y = y0.to_vec();
    let mut evals = 0;
    let mut prev = cfg.t0;
    for &tk in knots {
        if tk != prev {
            let sol = integrate(sys, &y, &cfg.with_interval(prev, tk))?;
            y = sol.y;
            evals += sol.n_evals;
            prev = tk;
        }
        out.push(y.clone());
    }
    Ok((out, evals))
}

/// Gradient of a loss at `y(t1)` by exact differentiation of the unrolled
/// fixed-step solver. `cotangent` maps the terminal state to `∂loss/∂y1`.
pub fn backprop_bptt<T, S, C>(sys: &mut S, y0: &[T], cfg: &SolverConfig, cotangent: C) -> Result<Gradients<T>, OdeError>
where
    T: Scalar,
    S: VjpSystem<T> + ?Sized,
    C: FnOnce(&[T]) -> Vec<T>,
{
    let tab = tableau(cfg.method).ok_or_else(|| {
        OdeError::Unsupported("backprop through time needs a fixed-step method".into())
    })?;
    if !(cfg.fixed_step > 0.0) || cfg.t0 == cfg.t1 {
        return Err(OdeError::InvalidConfig("bad fixed-step settings".into()));
    }
    let n = y0.len();
    let p = sys.n_params();
    let mut rec = StageRecord { stages: Vec::new() };
    let sol = fixed_steps(sys, y0, cfg, tab, Some(&mut rec))?;
    let steps = sol.n_steps;
    let h = T::of((cfg.t1 - cfg.t0) / steps as f64);
    let s = tab.b.len();

    let mut y_bar = cotangent(&sol.y);
    assert_eq!(y_bar.len(), n, "cotangent length must match the state");
    let mut p_bar = vec![T::zero(); p];
    let mut k_bar = vec![vec![T::zero(); n]; s];
    let mut stage_bar = vec![T::zero(); n];
    let mut dy = vec![T::zero(); n];
    let mut gp = vec![T::zero(); p];
    let mut n_evals = sol.n_evals;

    for step in (0..steps).rev() {
        let t = T::of(cfg.t0) + h * T::of(step as f64);
        for i in 0..s {
            let coef = h * T::of(tab.b[i]);
            for (kb, &yb) in k_bar[i].iter_mut().zip(&y_bar) {
                *kb = coef * yb;
            }
        }
        for i in (0..s).rev() {
            let stage = &rec.stages[step * s + i];
            sys.vjp(t + h * T::of(tab.c[i]), stage, &k_bar[i], &mut dy, &mut stage_bar, &mut gp);
            n_evals += 1;
            for (a, &b) in p_bar.iter_mut().zip(&gp) {
                *a += b;
            }
            for (yb, &sb) in y_bar.iter_mut().zip(&stage_bar) {
                *yb += sb;
            }
            for (j, &aij) in tab.a[i].iter().enumerate() {
                if aij != 0.0 {
                    let coef = h * T::of(aij);
                    for (kb, &sb) in k_bar[j].iter_mut().zip(&stage_bar) {
                        *kb += coef * sb;
                    }
                }
            }
        }
    }
    Ok(Gradients {
        y1: sol.y,
        grad_y0: y_bar,
        grad_params: p_bar,
        n_evals,
    })
}

/// Backward-in-time augmented system `[y; a; g_θ]`.
struct AdjointRhs<'a, T, S: ?Sized> {
    sys: &'a mut S,
    n: usize,
    dy: Vec<T>,
    gy: Vec<T>,
    gp: Vec<T>,
}

impl<T: Scalar, S: VjpSystem<T> + ?Sized> OdeSystem<T> for AdjointRhs<'_, T, S> {
    fn dim(&self) -> usize {
        2 * self.n + self.gp.len()
    }

    fn rhs(&mut self, t: T, state: &[T], out: &mut [T]) {
        let n = self.n;
        let (y, rest) = state.split_at(n);
        let a = &rest[..n];
        self.sys.vjp(t, y, a, &mut self.dy, &mut self.gy, &mut self.gp);
        out[..n].copy_from_slice(&self.dy);
        for (o, &g) in out[n..2 * n].iter_mut().zip(&self.gy) {
            *o = -g;
        }
        for (o, &g) in out[2 * n..].iter_mut().zip(&self.gp) {
            *o = -g;
        }
    }
}

/// Gradient of a loss at `y(t1)` via the adjoint sensitivity method: the
/// forward terminal state is integrated backward together with the adjoint
/// `a(t)` and the running parameter gradient, using the same solver settings.
pub fn backprop_adjoint<T, S, C>(sys: &mut S, y0: &[T], cfg: &SolverConfig, cotangent: C) -> Result<Gradients<T>, OdeError>
where
    T: Scalar,
    S: VjpSystem<T> + ?Sized,
    C: FnOnce(&[T]) -> Vec<T>,
{
    let n = y0.len();
    let p = sys.n_params();
    let fwd = integrate(sys, y0, cfg)?;
    let a1 = cotangent(&fwd.y);
    assert_eq!(a1.len(), n, "cotangent length must match the state");
    let mut state = Vec::with_capacity(2 * n + p);
    state.extend_from_slice(&fwd.y);
    state.extend_from_slice(&a1);
    state.resize(2 * n + p, T::zero());
    let mut adj = AdjointRhs {
        sys,
        n,
        dy: vec![T::zero(); n],
        gy: vec![T::zero(); n],
        gp: vec![T::zero(); p],
    };
    let back = integrate(&mut adj, &state, &cfg.reversed())?;
    Ok(Gradients {
        y1: fwd.y,
        grad_y0: back.y[n..2 * n].to_vec(),
        grad_params: back.y[2 * n..].to_vec(),
        n_evals: fwd.n_evals + back.n_evals,
    })
}

/// Dispatches on `cfg.backprop`.
pub fn gradient<T, S, C>(sys: &mut S, y0: &[T], cfg: &SolverConfig, cotangent: C) -> Result<Gradients<T>, OdeError>
where
    T: Scalar,
    S: VjpSystem<T> + ?Sized,
    C: FnOnce(&[T]) -> Vec<T>,
{
    match cfg.backprop {
        Backprop::Bptt => backprop_bptt(sys, y0, cfg, cotangent),
        Backprop::Adjoint => backprop_adjoint(sys, y0, cfg, cotangent),
    }
}
