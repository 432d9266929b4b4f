//! Fully connected dynamics network `f(z, t, θ)` with exact reverse-mode
//! derivatives.
//!
//! Parameters live in one flat vector. Each layer owns a row-major weight block
//! (`out × in`) followed by its bias block, layers in order. Time enters as an
//! extra trailing input feature, so a network acting on `R^D` has input width
//! `D + 1` and output width `D`.
//!
//! [`Tape`] is the workhorse: a reusable workspace that evaluates the network
//! together with forward-mode tangents along a few input directions, then runs
//! a reverse sweep through both. The second-order terms that appear when the
//! tangents themselves are differentiated are what the augmented CNF dynamics
//! need for their parameter gradients.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    /// Returns `(σ(a), σ'(a), σ''(a))`.
    #[inline]
    pub fn eval<T: Scalar>(self, a: T) -> (T, T, T) {
        let one = T::one();
        match self {
            Activation::Sigmoid => {
                let s = logistic(a);
                let d1 = s * (one - s);
                (s, d1, d1 * (one - s - s))
            }
            Activation::Tanh => {
                let y = a.tanh();
                let d1 = one - y * y;
                (y, d1, -(y + y) * d1)
            }
            Activation::Relu => {
                if a > T::zero() {
                    (a, one, T::zero())
                } else {
                    (T::zero(), T::zero(), T::zero())
                }
            }
            Activation::Softplus => {
                let y = a.max(T::zero()) + (-a.abs()).exp().ln_1p();
                let s = logistic(a);
                (y, s, s * (one - s))
            }
        }
    }
}

#[inline]
fn logistic<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    /// `t` appended to the state as an extra input feature.
    #[default]
    Concat,
}

/// Architecture of the dynamics network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub time_mode: TimeMode,
}

/// Position of one layer's blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBlock {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerBlock {
    #[inline]
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    #[inline]
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.weight_offset + row * self.inputs + col
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.outputs
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self, NetError> {
        let spec = MlpSpec {
            layer_sizes,
            activation,
            time_mode: TimeMode::Concat,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Network on `R^dim` with the given hidden widths and time concatenated.
    pub fn for_dim(dim: usize, hidden: &[usize], activation: Activation) -> Result<Self, NetError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim + 1);
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self::new(sizes, activation)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_sizes.len() < 2 {
            return Err(NetError::InvalidSpec(format!(
                "need at least two layer sizes, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(NetError::InvalidSpec("layer sizes must be positive".into()));
        }
        let (inp, out) = (self.layer_sizes[0], *self.layer_sizes.last().unwrap());
        match self.time_mode {
            TimeMode::Concat if inp != out + 1 => Err(NetError::InvalidSpec(format!(
                "concat time conditioning needs input width {} for output width {out}, got {inp}",
                out + 1
            ))),
            _ => Ok(()),
        }
    }

    /// Data dimension `D` (the output width).
    pub fn dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn max_width(&self) -> usize {
        *self.layer_sizes.iter().max().unwrap()
    }

    pub fn layout(&self) -> Vec<LayerBlock> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let block = LayerBlock {
                    inputs: w[0],
                    outputs: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = block.end();
                block
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Total number of weight entries (biases excluded).
    pub fn n_weights(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Hidden neurons, the targets of structured pruning.
    pub fn n_hidden_neurons(&self) -> usize {
        self.layer_sizes[1..self.layer_sizes.len() - 1].iter().sum()
    }
}

/// Flat parameter vector with its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    layout: Vec<LayerBlock>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector {
            values: vec![T::zero(); spec.n_params()],
            layout: spec.layout(),
        }
    }

    pub fn from_values(spec: &MlpSpec, values: Vec<T>) -> Result<Self, NetError> {
        if values.len() != spec.n_params() {
            return Err(NetError::DimensionMismatch {
                what: "parameter vector",
                expected: spec.n_params(),
                got: values.len(),
            });
        }
        Ok(ParamVector {
            values,
            layout: spec.layout(),
        })
    }

    pub fn layout(&self) -> &[LayerBlock] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let b = &self.layout[layer];
        &self.values[b.weight_offset..b.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let b = &self.layout[layer];
        &self.values[b.bias_offset..b.end()]
    }

    pub fn weight_mut(&mut self, layer: usize, row: usize, col: usize) -> &mut T {
        let idx = self.layout[layer].weight_index(row, col);
        &mut self.values[idx]
    }

    pub fn bias_mut(&mut self, layer: usize, row: usize) -> &mut T {
        let idx = self.layout[layer].bias_offset + row;
        &mut self.values[idx]
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<(), NetError> {
        if self.values.len() != spec.n_params() {
            return Err(NetError::DimensionMismatch {
                what: "parameter vector",
                expected: spec.n_params(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Binary connection pattern aligned with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn ones(len: usize) -> Self {
        Mask { bits: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Mask { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Zeroes every masked-out entry of `values` in place.
    pub fn apply_in_place<T: Scalar>(&self, values: &mut [T]) {
        debug_assert_eq!(values.len(), self.bits.len());
        for (v, &keep) in values.iter_mut().zip(&self.bits) {
            if !keep {
                *v = T::zero();
            }
        }
    }

    /// True when `self` keeps nothing that `other` dropped.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Draws weights uniformly from `±1/√fan_in`; biases start at zero.
pub fn mlp_init<T: Scalar>(spec: &MlpSpec, seed: u64) -> ParamVector<T> {
    let mut rng = rng::stream(seed, Stream::Init);
    let mut params = ParamVector::zeros(spec);
    for block in spec.layout() {
        let bound = 1.0 / (block.inputs as f64).sqrt();
        for w in &mut params.values[block.weight_offset..block.bias_offset] {
            *w = T::of(rng.random_range(-bound..bound));
        }
    }
    params
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NetError> {
    if expected != got {
        return Err(NetError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

pub fn mlp_forward<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    z: &[T],
    t: T,
) -> Result<Vec<T>, NetError> {
    params.check(spec)?;
    check_len("state", spec.dim(), z.len())?;
    let mut tape = Tape::new(spec, 0);
    tape.forward(&params.values, z, t, &[]);
    Ok(tape.output().to_vec())
}

/// Returns `(cᵀ ∂f/∂z, cᵀ ∂f/∂θ)` for cotangent `c`.
pub fn mlp_vjp<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    z: &[T],
    t: T,
    cotangent: &[T],
) -> Result<(Vec<T>, Vec<T>), NetError> {
    params.check(spec)?;
    check_len("state", spec.dim(), z.len())?;
    check_len("cotangent", spec.dim(), cotangent.len())?;
    let mut tape = Tape::new(spec, 0);
    tape.forward(&params.values, z, t, &[]);
    let mut grad_z = vec![T::zero(); spec.dim()];
    let mut grad_p = vec![T::zero(); spec.n_params()];
    tape.backward(&params.values, cotangent, &[], &mut grad_z, &mut grad_p);
    Ok((grad_z, grad_p))
}

/// Input Jacobian `∂f/∂z` as rows; row `i` is the VJP with cotangent `e_i`.
pub fn jacobian_input<T: Scalar>(
    spec: &MlpSpec,
    params: &ParamVector<T>,
    z: &[T],
    t: T,
) -> Result<Vec<Vec<T>>, NetError> {
    params.check(spec)?;
    check_len("state", spec.dim(), z.len())?;
    let d = spec.dim();
    let mut tape = Tape::new(spec, 0);
    tape.forward(&params.values, z, t, &[]);
    let mut scratch = vec![T::zero(); spec.n_params()];
    let mut cot = vec![T::zero(); d];
    (0..d)
        .map(|i| {
            cot.iter_mut().for_each(|c| *c = T::zero());
            cot[i] = T::one();
            let mut row = vec![T::zero(); d];
            tape.backward(&params.values, &cot, &[], &mut row, &mut scratch);
            Ok(row)
        })
        .collect()
}

pub fn apply_mask<T: Scalar>(params: &ParamVector<T>, mask: &Mask) -> Result<ParamVector<T>, NetError> {
    check_len("mask", params.len(), mask.len())?;
    let mut out = params.clone();
    mask.apply_in_place(&mut out.values);
    Ok(out)
}

/// Reusable evaluation workspace: primal pass, forward-mode tangents along
/// `n_dirs` input directions, and the matching reverse sweep.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    layout: Vec<LayerBlock>,
    activation: Activation,
    dim: usize,
    n_dirs: usize,
    /// `xs[l]` is the input of layer `l`; the last entry is the network output.
    xs: Vec<Vec<T>>,
    /// First and second activation derivatives at hidden pre-activations.
    d1: Vec<Vec<T>>,
    d2: Vec<Vec<T>>,
    /// `txs[d][l]`: tangent of `xs[l]` along direction `d`.
    txs: Vec<Vec<Vec<T>>>,
    /// `tas[d][l]`: tangent of the pre-activation of layer `l`.
    tas: Vec<Vec<Vec<T>>>,
    g: Vec<T>,
    g_prev: Vec<T>,
    gt: Vec<Vec<T>>,
    gt_prev: Vec<Vec<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new(spec: &MlpSpec, n_dirs: usize) -> Self {
        let layout = spec.layout();
        let sizes = &spec.layer_sizes;
        let per_layer = |n: usize| -> Vec<Vec<T>> { sizes[..n].iter().map(|&k| vec![T::zero(); k]).collect() };
        let w = spec.max_width();
        Tape {
            activation: spec.activation,
            dim: spec.dim(),
            n_dirs,
            xs: sizes.iter().map(|&k| vec![T::zero(); k]).collect(),
            d1: sizes[1..].iter().map(|&k| vec![T::zero(); k]).collect(),
            d2: sizes[1..].iter().map(|&k| vec![T::zero(); k]).collect(),
            txs: (0..n_dirs).map(|_| sizes.iter().map(|&k| vec![T::zero(); k]).collect()).collect(),
            tas: (0..n_dirs).map(|_| per_layer(sizes.len()).into_iter().skip(1).collect()).collect(),
            g: vec![T::zero(); w],
            g_prev: vec![T::zero(); w],
            gt: vec![vec![T::zero(); w]; n_dirs],
            gt_prev: vec![vec![T::zero(); w]; n_dirs],
            layout,
        }
    }

    pub fn n_dirs(&self) -> usize {
        self.n_dirs
    }

    /// Evaluates `f(z, t)` and, for each direction `u_d`, the tangent `J u_d`.
    /// `dirs` holds the directions back to back (`n_dirs · D` values) or is
    /// empty for a primal-only pass.
    pub fn forward(&mut self, params: &[T], z: &[T], t: T, dirs: &[T]) {
        let d = self.dim;
        let nd = dirs.len() / d;
        debug_assert!(nd == 0 || nd == self.n_dirs);
        self.xs[0][..d].copy_from_slice(z);
        self.xs[0][d] = t;
        for (k, dir) in dirs.chunks_exact(d).enumerate() {
            self.txs[k][0][..d].copy_from_slice(dir);
            self.txs[k][0][d] = T::zero();
        }
        let n_layers = self.layout.len();
        for (l, block) in self.layout.iter().enumerate() {
            let w = &params[block.weight_offset..block.bias_offset];
            let b = &params[block.bias_offset..block.end()];
            let last = l + 1 == n_layers;
            let (head, tail) = self.xs.split_at_mut(l + 1);
            let x_in = &head[l];
            let x_out = &mut tail[0];
            for i in 0..block.outputs {
                let row = &w[i * block.inputs..(i + 1) * block.inputs];
                let a = b[i] + crate::scalar::dot(row, x_in);
                if last {
                    x_out[i] = a;
                } else {
                    let (y, s1, s2) = self.activation.eval(a);
                    x_out[i] = y;
                    self.d1[l][i] = s1;
                    self.d2[l][i] = s2;
                }
            }
            for k in 0..nd {
                let (head, tail) = self.txs[k].split_at_mut(l + 1);
                let tx_in = &head[l];
                let tx_out = &mut tail[0];
                let ta = &mut self.tas[k][l];
                for i in 0..block.outputs {
                    let row = &w[i * block.inputs..(i + 1) * block.inputs];
                    let a = crate::scalar::dot(row, tx_in);
                    ta[i] = a;
                    tx_out[i] = if last { a } else { self.d1[l][i] * a };
                }
            }
        }
    }

    pub fn output(&self) -> &[T] {
        self.xs.last().unwrap()
    }

    /// Tangent output `J u_d` for direction `d` of the last forward call.
    pub fn tangent_output(&self, d: usize) -> &[T] {
        self.txs[d].last().unwrap()
    }

    /// Reverse sweep for the scalar `out_barᵀ f + Σ_d tan_bar_dᵀ (J u_d)`.
    ///
    /// Writes the state gradient into `grad_z` and accumulates the parameter
    /// gradient into `grad_p`. `tan_bar` is empty or holds one output-sized
    /// cotangent per direction of the preceding [`Tape::forward`], back to back.
    pub fn backward(&mut self, params: &[T], out_bar: &[T], tan_bar: &[T], grad_z: &mut [T], grad_p: &mut [T]) {
        let n_layers = self.layout.len();
        let out_w = self.layout[n_layers - 1].outputs;
        let nd = tan_bar.len() / out_w;
        self.g[..out_w].copy_from_slice(out_bar);
        for (k, tb) in tan_bar.chunks_exact(out_w).enumerate() {
            self.gt[k][..out_w].copy_from_slice(tb);
        }
        for l in (0..n_layers).rev() {
            let block = self.layout[l];
            let (n_in, n_out) = (block.inputs, block.outputs);
            let x_in = &self.xs[l];
            // parameter gradient
            {
                let gw = &mut grad_p[block.weight_offset..block.bias_offset];
                for i in 0..n_out {
                    let gi = self.g[i];
                    let row = &mut gw[i * n_in..(i + 1) * n_in];
                    if gi != T::zero() {
                        for (r, &x) in row.iter_mut().zip(x_in) {
                            *r += gi * x;
                        }
                    }
                    for k in 0..nd {
                        let gti = self.gt[k][i];
                        if gti != T::zero() {
                            for (r, &x) in row.iter_mut().zip(&self.txs[k][l]) {
                                *r += gti * x;
                            }
                        }
                    }
                }
                let gb = &mut grad_p[block.bias_offset..block.end()];
                for (b, &gi) in gb.iter_mut().zip(&self.g[..n_out]) {
                    *b += gi;
                }
            }
            let w = &params[block.weight_offset..block.bias_offset];
            // input cotangents: Wᵀ g
            let g_prev = &mut self.g_prev[..n_in];
            g_prev.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..n_out {
                let gi = self.g[i];
                if gi != T::zero() {
                    for (p, &wv) in g_prev.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                        *p += gi * wv;
                    }
                }
            }
            for k in 0..nd {
                let gtp = &mut self.gt_prev[k][..n_in];
                gtp.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..n_out {
                    let gi = self.gt[k][i];
                    if gi != T::zero() {
                        for (p, &wv) in gtp.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                            *p += gi * wv;
                        }
                    }
                }
            }
            if l == 0 {
                grad_z.copy_from_slice(&self.g_prev[..self.dim]);
                return;
            }
            // through the activation of layer l-1
            let (d1, d2) = (&self.d1[l - 1], &self.d2[l - 1]);
            for j in 0..n_in {
                let mut a_bar = self.g_prev[j] * d1[j];
                for k in 0..nd {
                    a_bar += self.gt_prev[k][j] * d2[j] * self.tas[k][l - 1][j];
                    self.gt[k][j] = self.gt_prev[k][j] * d1[j];
                }
                self.g[j] = a_bar;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_forward(spec: &MlpSpec, p: &ParamVector<f64>, z: &[f64], t: f64) -> Vec<f64> {
        mlp_forward(spec, p, z, t).unwrap()
    }

    #[test]
    fn init_length_and_determinism() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        let a: ParamVector<f64> = mlp_init(&spec, 7);
        let b: ParamVector<f64> = mlp_init(&spec, 7);
        assert_eq!(a.len(), 8);
        assert_eq!(a.values, b.values);
        assert!(a.bias(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let spec = MlpSpec::new(vec![3, 128, 2], Activation::Sigmoid).unwrap();
        let p: ParamVector<f64> = mlp_init(&spec, 0);
        let b1 = 1.0 / 3f64.sqrt();
        let b2 = 1.0 / 128f64.sqrt();
        assert!(p.weights(0).iter().all(|w| w.abs() <= b1));
        assert!(p.weights(1).iter().all(|w| w.abs() <= b2));
        // the bounds are actually approached
        assert!(p.weights(0).iter().any(|w| w.abs() > 0.8 * b1));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![2, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Sigmoid).unwrap();
        let p = ParamVector::<f64>::zeros(&spec);
        assert_eq!(fd_forward(&spec, &p, &[0.3, -1.2], 0.7), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        let mut p = ParamVector::<f64>::zeros(&spec);
        *p.weight_mut(0, 0, 0) = 1.0;
        *p.weight_mut(0, 1, 1) = 1.0;
        assert_eq!(fd_forward(&spec, &p, &[0.25, -3.5], 2.0), vec![0.25, -3.5]);
    }

    #[test]
    fn hand_evaluated_tanh_chain() {
        // one hidden tanh unit: h = tanh(0.5 z1 - 0.25 z2 + 0.1 t + 0.2), f = (2h - 1, -h)
        let spec = MlpSpec::new(vec![3, 1, 2], Activation::Tanh).unwrap();
        let p = ParamVector::from_values(&spec, vec![0.5, -0.25, 0.1, 0.2, 2.0, -1.0, -1.0, 0.0]).unwrap();
        let (z, t) = ([0.4, 1.2], 0.5);
        let h = (0.5f64 * 0.4 - 0.25 * 1.2 + 0.1 * 0.5 + 0.2).tanh();
        let f = fd_forward(&spec, &p, &z, t);
        assert!((f[0] - (2.0 * h - 1.0)).abs() < 1e-15);
        assert!((f[1] + h).abs() < 1e-15);
    }

    #[test]
    fn vjp_of_zero_cotangent_is_zero() {
        let spec = MlpSpec::new(vec![3, 6, 2], Activation::Softplus).unwrap();
        let p: ParamVector<f64> = mlp_init(&spec, 3);
        let (gz, gp) = mlp_vjp(&spec, &p, &[0.1, 0.2], 0.3, &[0.0, 0.0]).unwrap();
        assert!(gz.iter().chain(&gp).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_vjp_closed_form() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        let p = ParamVector::from_values(&spec, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5]).unwrap();
        let (z, t, c): ([f64; 2], f64, [f64; 2]) = ([0.7, -0.2], 0.4, [1.5, -2.0]);
        let (gz, gp) = mlp_vjp(&spec, &p, &z, t, &c).unwrap();
        // Wᵀc restricted to the z-columns
        assert_eq!(gz, vec![1.5 * 1.0 - 2.0 * 4.0, 1.5 * 2.0 - 2.0 * 5.0]);
        let x: [f64; 3] = [0.7, -0.2, 0.4];
        for i in 0..2 {
            for j in 0..3 {
                assert!((gp[i * 3 + j] - c[i] * x[j]).abs() < 1e-15);
            }
        }
        assert_eq!(&gp[6..], &c);
    }

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu).unwrap();
        let p = ParamVector::from_values(&spec, vec![0.3, -1.1, 9.0, 2.5, 0.7, -9.0, 0.0, 0.0]).unwrap();
        let j = jacobian_input(&spec, &p, &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(j, vec![vec![0.3, -1.1], vec![2.5, 0.7]]);
        let zero = ParamVector::<f64>::zeros(&spec);
        let j0 = jacobian_input(&spec, &zero, &[1.0, 2.0], 0.5).unwrap();
        assert!(j0.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_application() {
        let spec = MlpSpec::new(vec![3, 1], Activation::Tanh);
        assert!(spec.is_err());
        let spec = MlpSpec::new(vec![2, 1], Activation::Tanh).unwrap();
        let p = ParamVector::from_values(&spec, vec![0.5, -0.1, 0.3]).unwrap();
        let m = Mask { bits: vec![true, false, true] };
        let q = apply_mask(&p, &m).unwrap();
        assert_eq!(q.values, vec![0.5, 0.0, 0.3]);
        assert_eq!(apply_mask(&q, &m).unwrap(), q);
        assert_eq!(apply_mask(&p, &Mask::ones(3)).unwrap(), p);
        assert!(apply_mask(&p, &Mask::zeros(3)).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(apply_mask(&p, &Mask::ones(2)).is_err());
    }

    #[test]
    fn elementwise_mask_example() {
        let mut v = vec![0.5, -0.1, 0.3, -0.7];
        Mask { bits: vec![true, false, true, false] }.apply_in_place(&mut v);
        assert_eq!(v, vec![0.5, 0.0, 0.3, 0.0]);
    }

    #[test]
    fn dimension_errors() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let p: ParamVector<f64> = mlp_init(&spec, 1);
        assert!(matches!(mlp_forward(&spec, &p, &[1.0], 0.0), Err(NetError::DimensionMismatch { .. })));
        assert!(mlp_vjp(&spec, &p, &[1.0, 2.0], 0.0, &[1.0]).is_err());
    }

    #[test]
    fn single_precision_forward_agrees() {
        let spec = MlpSpec::new(vec![3, 8, 2], Activation::Sigmoid).unwrap();
        let p64: ParamVector<f64> = mlp_init(&spec, 11);
        let p32 = ParamVector::from_values(&spec, p64.values.iter().map(|&v| v as f32).collect()).unwrap();
        let a = mlp_forward(&spec, &p64, &[0.2, -0.4], 0.1).unwrap();
        let b = mlp_forward(&spec, &p32, &[0.2f32, -0.4], 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
