use proptest::prelude::*;
use sparseflow_core::net::{apply_mask, mlp_forward, Activation, Mask, MlpSpec, ParamVector};
use sparseflow_core::prune::{apply_prune, prune_count, shrink_structured, sparsity, PruneMode};

fn net(hidden: &[usize], values: &[f64]) -> (MlpSpec, ParamVector<f64>) {
    let spec = MlpSpec::for_dim(2, hidden, Activation::Tanh).unwrap();
    let n = spec.n_params();
    let p = ParamVector::from_values(&spec, values.iter().cycle().take(n).copied().collect()).unwrap();
    (spec, p)
}

fn weights(spec: &MlpSpec) -> Vec<usize> {
    spec.layout().iter().flat_map(|b| b.weight_offset..b.bias_offset).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn unstructured_matches_sort_oracle(
        hidden in prop::collection::vec(1usize..10, 1..4),
        values in prop::collection::vec(-3.0f64..3.0, 50..120),
        pr in 0.01f64..0.7,
        iters in 1usize..10,
    ) {
        let (spec, mut p) = net(&hidden, &values);
        let w = weights(&spec);
        let mut mask = Mask::ones(spec.n_params());
        let mut remaining = w.len();
        for _ in 0..iters {
            let next = match apply_prune(&p, &mask, &spec, PruneMode::Unstructured, pr) {
                Ok(m) => m,
                Err(_) => break,
            };
            let k = prune_count(pr, remaining);
            remaining -= k;
            let mut alive: Vec<usize> = w.iter().copied().filter(|&i| mask.bits[i]).collect();
            alive.sort_by(|&a, &b| p.values[a].abs().total_cmp(&p.values[b].abs()).then(a.cmp(&b)));
            let mut want = mask.clone();
            for &i in &alive[..k] {
                want.bits[i] = false;
            }
            prop_assert_eq!(&next, &want);
            prop_assert!(next.is_subset_of(&mask));
            prop_assert_eq!(w.iter().filter(|&&i| next.bits[i]).count(), remaining);
            prop_assert!((sparsity(&next, &spec, PruneMode::Unstructured) - (1.0 - remaining as f64 / w.len() as f64)).abs() < 1e-12);
            mask = next;
            p = apply_mask(&p, &mask).unwrap();
        }
        // biases are never pruned
        for b in spec.layout() {
            prop_assert!((b.bias_offset..b.end()).all(|i| mask.bits[i]));
        }
    }

    #[test]
    fn structured_prunes_whole_neurons_per_layer(
        hidden in prop::collection::vec(2usize..10, 1..4),
        values in prop::collection::vec(-3.0f64..3.0, 50..120),
        pr in 0.05f64..0.6,
        iters in 1usize..5,
    ) {
        let (spec, p) = net(&hidden, &values);
        let layout = spec.layout();
        let mut mask = Mask::ones(spec.n_params());
        let mut alive: Vec<usize> = hidden.clone();
        for _ in 0..iters {
            let Ok(next) = apply_prune(&p, &mask, &spec, PruneMode::Structured, pr) else { break };
            prop_assert!(next.is_subset_of(&mask));
            for (l, a) in alive.iter_mut().enumerate() {
                *a -= prune_count(pr, *a);
                let b = layout[l];
                let live: Vec<usize> = (0..b.outputs).filter(|&i| next.bits[b.bias_offset + i]).collect();
                prop_assert_eq!(live.len(), *a);
                for i in (0..b.outputs).filter(|&i| !next.bits[b.bias_offset + i]) {
                    prop_assert!((0..b.inputs).all(|j| !next.bits[b.weight_index(i, j)]));
                    let nb = layout[l + 1];
                    prop_assert!((0..nb.outputs).all(|r| !next.bits[nb.weight_index(r, i)]));
                }
            }
            mask = next;
        }
        let (small, sp) = shrink_structured(&spec, &p, &mask);
        let masked = apply_mask(&p, &mask).unwrap();
        prop_assert_eq!(&small.layer_sizes[1..small.layer_sizes.len() - 1], &alive[..]);
        for k in 0..20 {
            let z = [(k as f64 * 0.37).sin() * 2.0, (k as f64 * 0.61).cos() * 2.0];
            let t = k as f64 / 20.0;
            let a = mlp_forward(&spec, &masked, &z, t).unwrap();
            let b = mlp_forward(&small, &sp, &z, t).unwrap();
            prop_assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
        }
    }
}
