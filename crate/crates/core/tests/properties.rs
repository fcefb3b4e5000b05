use conformer::autodiff::{Graph, Var};
use conformer::data::{make_windows, masked_metrics, synth_generate, NormalizationStats, SplitSpec, SynthConfig};
use conformer::graph::{normalize_adjacency, propagate, Edge, GraphSpec};
use conformer::params::ParamStore;
use conformer::tensor::{softmax_last_axis, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Compares reverse-mode gradients of `sum(f(params) * w)` with central differences.
fn check_jacobian(seed: u64, shapes: &[Vec<usize>], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes.iter().enumerate().map(|(i, s)| store.add(format!("p{i}"), random(&mut rng, s))).collect();
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let out = f(&mut g, &vars);
        random(&mut rng, g.shape(out))
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = f(&mut g, &vars);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        (g.value(loss).item(), g.backward(loss, store).unwrap())
    };
    let (_, grads) = eval(&store);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&store).0;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&store).0;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads.get(ids[k]).data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
        }
    }
    worst
}

const JAC_TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_jacobians(seed in any::<u64>(), a in 1usize..4, b in 1usize..5) {
        let e = check_jacobian(seed, &[vec![a, b], vec![b]], |g, p| {
            let s = g.add(p[0], p[1]).unwrap();
            let m = g.mul(s, p[0]).unwrap();
            let d = g.sub(m, p[1]).unwrap();
            let c = g.scale(d, 0.7).unwrap();
            g.add_scalar(c, 1.5).unwrap()
        });
        prop_assert!(e < JAC_TOL, "{e}");
    }

    #[test]
    fn matmul_and_affine_jacobians(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let e = check_jacobian(seed, &[vec![2, m, k], vec![k, n], vec![n]], |g, p| {
            let y = g.matmul(p[0], p[1]).unwrap();
            let z = g.affine(p[0], p[1], p[2]).unwrap();
            g.add(y, z).unwrap()
        });
        prop_assert!(e < JAC_TOL, "{e}");
    }

    #[test]
    fn softmax_normalize_gelu_jacobians(seed in any::<u64>(), a in 1usize..4, d in 2usize..6) {
        let e = check_jacobian(seed, &[vec![a, d]], |g, p| {
            let s = g.softmax(p[0]).unwrap();
            let n = g.normalize(p[0], 1e-5).unwrap();
            let u = g.gelu(p[0]).unwrap();
            let t = g.add(s, n).unwrap();
            g.add(t, u).unwrap()
        });
        prop_assert!(e < JAC_TOL, "{e}");
    }

    #[test]
    fn shape_op_jacobians(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, d in 2usize..5) {
        let e = check_jacobian(seed, &[vec![a, b, d], vec![a, b, 1], vec![3, d]], |g, p| {
            let c = g.concat(&[p[0], p[1]]).unwrap();
            let s = g.slice(c, 1, d).unwrap();
            let t = g.permute(s, &[1, 0, 2]).unwrap();
            let r = g.reshape(t, &[b, a * d]).unwrap();
            let ids: Vec<usize> = (0..a * b).map(|i| i % 3).collect();
            let emb = g.gather(p[2], &ids, &[b, a]).unwrap();
            let emb = g.reshape(emb, &[b, a * d]).unwrap();
            g.add(r, emb).unwrap()
        });
        prop_assert!(e < JAC_TOL, "{e}");
    }

    #[test]
    fn softmax_rows_match_oracle(seed in any::<u64>(), a in 1usize..6, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[a, d], |_| rng.random_range(-30.0..30.0));
        let y = softmax_last_axis(&x).unwrap();
        for (row, out) in x.data().chunks(d).zip(y.data().chunks(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (v, o) in row.iter().zip(out) {
                prop_assert!(((v - max).exp() / z - o).abs() < 1e-14);
                prop_assert!(*o >= 0.0);
            }
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_rows_are_stochastic_or_zero(seed in any::<u64>(), n in 1usize..9, loops in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for src in 0..n {
            for dst in 0..n {
                if rng.random_bool(0.25) {
                    edges.push(Edge { src, dst, weight: rng.random_range(0.0..3.0) });
                }
            }
        }
        let op = normalize_adjacency(&GraphSpec::new(n, edges).unwrap(), loops).unwrap();
        for row in op.matrix().data().chunks(n) {
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let x = random(&mut rng, &[2, n, 3]);
        let y = propagate(&x, &op, 3).unwrap();
        prop_assert_eq!(y.shape(), &[2, n, 12]);
        prop_assert_eq!(&y.data()[..3], &x.data()[..3]);
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), len in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(1.0..90.0) }).collect();
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..90.0)).collect();
        let got = masked_metrics(&Tensor::new(vec![len], y.clone()).unwrap(), &Tensor::new(vec![len], p.clone()).unwrap()).unwrap();
        let kept: Vec<(f64, f64)> = y.iter().zip(&p).filter(|(a, _)| **a != 0.0).map(|(a, b)| (*a, *b)).collect();
        match got {
            None => prop_assert!(kept.is_empty()),
            Some(m) => {
                let c = kept.len() as f64;
                let mae = kept.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / c;
                let rmse = (kept.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c).sqrt();
                let mape = 100.0 * kept.iter().map(|(a, b)| ((a - b) / a).abs()).sum::<f64>() / c;
                prop_assert!((m.mae - mae).abs() < 1e-12);
                prop_assert!((m.rmse - rmse).abs() < 1e-12);
                prop_assert!((m.mape - mape).abs() < 1e-10);
                prop_assert_eq!(m.count, kept.len());
            }
        }
    }

    #[test]
    fn normalization_round_trips(mean in -50.0f64..50.0, std in 0.1f64..20.0, z in -5.0f64..5.0, node in 0usize..4) {
        let stats = NormalizationStats { mean: vec![mean], std: vec![std] };
        let v = stats.denormalize(z, node);
        prop_assert!((stats.normalize(v, node) - z).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn windows_never_cross_their_split(seed in 0u64..50, t_in in 1usize..13, t_out in 1usize..13) {
        let cfg = SynthConfig { n_nodes: 4, days: 2, interval_minutes: 30, incident_rate: 2.0, ..SynthConfig::default() };
        let bundle = synth_generate(&cfg, seed).unwrap();
        let splits = SplitSpec::chronological(bundle.n_steps());
        prop_assert_eq!(splits.train.end, splits.val.start);
        prop_assert_eq!(splits.val.end, splits.test.start);
        for range in [splits.train.clone(), splits.val.clone(), splits.test.clone()] {
            let Ok(windows) = make_windows(&bundle, range.clone(), t_in, t_out) else {
                prop_assert!(range.len() < t_in + t_out);
                continue;
            };
            prop_assert_eq!(windows.len(), range.len() - t_in - t_out + 1);
            let n = bundle.n_nodes();
            for w in &windows {
                prop_assert!(w.t0 >= range.start && w.t0 + t_in + t_out <= range.end);
                let v = bundle.values.data();
                prop_assert_eq!(w.input.data(), &v[w.t0 * n..(w.t0 + t_in) * n]);
                prop_assert_eq!(w.target.data(), &v[(w.t0 + t_in) * n..(w.t0 + t_in + t_out) * n]);
            }
        }
    }
}
