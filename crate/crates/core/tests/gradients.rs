mod common;

use common::{fd_gradient, max_rel_err, norm_rel_err};
use proptest::prelude::*;
use sparseflow_core::cnf::{self, DivergenceMode, FlowModel, Noise};
use sparseflow_core::net::{self, Activation, MlpSpec, ParamVector};
use sparseflow_core::odeint::{Backprop, Method, SolverConfig};
use sparseflow_core::rng::{self, Stream};

fn activation(k: u8) -> Activation {
    [Activation::Sigmoid, Activation::Tanh, Activation::Softplus, Activation::Relu][k as usize % 4]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vjp_matches_finite_differences(
        act in 0u8..3, hidden in 1usize..6, depth in 1usize..3, seed in 0u64..1000,
        z in prop::array::uniform2(-2.0f64..2.0), t in -1.0f64..1.0,
        c in prop::array::uniform2(-1.5f64..1.5),
    ) {
        let spec = MlpSpec::for_dim(2, &vec![hidden; depth], activation(act)).unwrap();
        let p: ParamVector<f64> = net::mlp_init(&spec, seed);
        let (gz, gp) = net::mlp_vjp(&spec, &p, &z, t, &c).unwrap();
        let scalar = |zz: &[f64], pp: &[f64]| {
            let pv = ParamVector::from_values(&spec, pp.to_vec()).unwrap();
            let f = net::mlp_forward(&spec, &pv, zz, t).unwrap();
            f[0] * c[0] + f[1] * c[1]
        };
        let fz = fd_gradient(&z, 1e-5, |zz| scalar(zz, &p.values));
        let fp = fd_gradient(&p.values, 1e-5, |pp| scalar(&z, pp));
        prop_assert!(max_rel_err(&gz, &fz, 1e-4) <= 1e-5, "z: {:?} vs {:?}", gz, fz);
        prop_assert!(max_rel_err(&gp, &fp, 1e-4) <= 1e-5);
    }

    #[test]
    fn jacobian_matches_directional_derivative(
        act in 0u8..3, seed in 0u64..1000,
        z in prop::array::uniform2(-2.0f64..2.0), v in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let spec = MlpSpec::for_dim(2, &[7, 5], activation(act)).unwrap();
        let p: ParamVector<f64> = net::mlp_init(&spec, seed);
        let j = net::jacobian_input(&spec, &p, &z, 0.3).unwrap();
        let jv: Vec<f64> = j.iter().map(|row| row[0] * v[0] + row[1] * v[1]).collect();
        let eps = 1e-5;
        let fp = net::mlp_forward(&spec, &p, &[z[0] + eps * v[0], z[1] + eps * v[1]], 0.3).unwrap();
        let fm = net::mlp_forward(&spec, &p, &[z[0] - eps * v[0], z[1] - eps * v[1]], 0.3).unwrap();
        let dd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        // vector relative error: a near-zero component of J·v is dominated by
        // the rounding error of the difference quotient itself
        prop_assert!(norm_rel_err(&jv, &dd) <= 1e-6, "{:?} vs {:?}", jv, dd);
    }
}

fn batch(seed: u64, n: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut r = rng::stream(seed, Stream::Custom(77));
    (0..n).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect()
}

fn flow(spec: &MlpSpec, seed: u64, solver: SolverConfig, div: DivergenceMode) -> FlowModel<f64> {
    let mut p: ParamVector<f64> = net::mlp_init(spec, seed);
    // nonzero biases exercise every parameter block
    for (i, v) in p.values.iter_mut().enumerate() {
        if *v == 0.0 {
            *v = 0.05 * ((i % 7) as f64 - 3.0);
        }
    }
    FlowModel::new(spec.clone(), p, solver, div)
}

#[test]
fn exact_nll_gradient_matches_finite_differences() {
    for act in [Activation::Sigmoid, Activation::Tanh, Activation::Softplus] {
        let spec = MlpSpec::for_dim(2, &[16], act).unwrap();
        let model = flow(&spec, 5, SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.1), DivergenceMode::exact());
        let xs = batch(1, 8);
        let g = cnf::nll_grad(&model, &xs, &mut rng::stream(0, Stream::Hutchinson)).unwrap();
        let fd = fd_gradient(&model.params.values, 1e-5, |p| {
            let mut m = model.clone();
            m.params.values.copy_from_slice(p);
            cnf::nll(&m, &xs).unwrap()
        });
        let err = max_rel_err(&g.grad, &fd, 1e-3);
        assert!(err <= 1e-5, "{act:?}: max rel err {err}");
        assert!((g.nll - cnf::nll(&model, &xs).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn deep_net_exact_gradient_matches_finite_differences() {
    let spec = MlpSpec::for_dim(2, &[6, 5, 4], Activation::Sigmoid).unwrap();
    let model = flow(&spec, 8, SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25), DivergenceMode::exact());
    let xs = batch(2, 4);
    let g = cnf::nll_grad(&model, &xs, &mut rng::stream(0, Stream::Hutchinson)).unwrap();
    let fd = fd_gradient(&model.params.values, 1e-5, |p| {
        let mut m = model.clone();
        m.params.values.copy_from_slice(p);
        cnf::nll(&m, &xs).unwrap()
    });
    let err = max_rel_err(&g.grad, &fd, 1e-3);
    assert!(err <= 1e-5, "max rel err {err}");
}

#[test]
fn hutchinson_gradient_with_fixed_noise_matches_finite_differences() {
    let spec = MlpSpec::for_dim(2, &[8], Activation::Tanh).unwrap();
    for probes in [1, 3] {
        let model = flow(
            &spec,
            3,
            SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.2),
            DivergenceMode::hutchinson(Noise::Gaussian, probes),
        );
        let xs = batch(4, 3);
        let noise: Vec<f64> = {
            let mut r = rng::stream(5, Stream::Hutchinson);
            (0..xs.len() * probes * 2).map(|_| Noise::Gaussian.draw(&mut r)).collect()
        };
        let g = cnf::nll_grad_with_noise(&model, &xs, noise.clone()).unwrap();
        let fd = fd_gradient(&model.params.values, 1e-5, |p| {
            let mut m = model.clone();
            m.params.values.copy_from_slice(p);
            cnf::nll_grad_with_noise(&m, &xs, noise.clone()).unwrap().nll
        });
        let err = max_rel_err(&g.grad, &fd, 1e-3);
        assert!(err <= 1e-5, "probes {probes}: {err}");
    }
}

#[test]
fn adjoint_agrees_with_bptt() {
    let spec = MlpSpec::for_dim(2, &[16], Activation::Sigmoid).unwrap();
    let xs = batch(9, 6);
    let bptt = flow(&spec, 2, SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.02), DivergenceMode::exact());
    let mut adj = bptt.clone();
    adj.solver = SolverConfig::dopri5(0.0, 1.0, 1e-7, 1e-7);
    assert_eq!(adj.solver.backprop, Backprop::Adjoint);
    let mut r = rng::stream(0, Stream::Hutchinson);
    let gb = cnf::nll_grad(&bptt, &xs, &mut r).unwrap();
    let ga = cnf::nll_grad(&adj, &xs, &mut r).unwrap();
    let err = norm_rel_err(&ga.grad, &gb.grad);
    assert!(err <= 1e-3, "relative difference {err}");
}

#[test]
fn masked_gradients_vanish() {
    let spec = MlpSpec::for_dim(2, &[6], Activation::Sigmoid).unwrap();
    let mut model = flow(&spec, 2, SolverConfig::fixed(Method::Rk4, 0.0, 1.0, 0.25), DivergenceMode::exact());
    for (i, b) in model.mask.bits.iter_mut().enumerate() {
        *b = i % 3 != 0;
    }
    let g = cnf::nll_grad(&model, &batch(3, 4), &mut rng::stream(0, Stream::Hutchinson)).unwrap();
    for (v, &keep) in g.grad.iter().zip(&model.mask.bits) {
        if !keep {
            assert_eq!(*v, 0.0);
        }
    }
}
