use numkit::checkpoint::Checkpoint;
use numkit::gradcheck::{layer_suite, LAYER_NAMES};
use numkit::{Adam, AdamConfig, ParamStore, StepDecay, Tape, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |i, j| v[(i * cols + j) % v.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // d/dA sum(A B) = 1 B^T, so every row of dA holds the row sums of B.
    #[test]
    fn matmul_gradient_matches_closed_form(
        m in 1usize..6, k in 1usize..6, n in 1usize..6,
        va in prop::collection::vec(-2.0f64..2.0, 1..40),
        vb in prop::collection::vec(-2.0f64..2.0, 1..40),
    ) {
        let mut store = ParamStore::new();
        let a = store.add("a", tensor(m, k, &va));
        let b = store.add("b", tensor(k, n, &vb));
        let mut tape = Tape::new();
        let (xa, xb) = (tape.param(&store, a), tape.param(&store, b));
        let y = tape.matmul(xa, xb).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap().param_grads(&store);
        let bt = store.get(b);
        for i in 0..m {
            for kk in 0..k {
                let expect: f64 = bt.row(kk).iter().sum();
                prop_assert!((grads[0].row(i)[kk] - expect).abs() < 1e-12);
            }
        }
        let at = store.get(a);
        for kk in 0..k {
            let expect: f64 = (0..m).map(|i| at.row(i)[kk]).sum();
            for j in 0..n {
                prop_assert!((grads[1].row(kk)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_rows_are_unit_and_sigmoid_is_bounded(
        rows in 1usize..8,
        v in prop::collection::vec(-5.0f64..5.0, 3..30),
    ) {
        let t = tensor(rows, 3, &v);
        let norms: Vec<f64> = (0..rows).map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let u = tape.l2_normalize_rows(x).unwrap();
        let s = tape.sigmoid(x);
        for (i, norm) in norms.iter().enumerate() {
            let n: f64 = tape.value(u).row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if *norm > 1e-3 {
                prop_assert!((n - 1.0).abs() < 1e-6);
            } else {
                prop_assert!(n <= 1.0);
            }
        }
        prop_assert!(tape.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    // Each pooled output routes its gradient to exactly one input row.
    #[test]
    fn max_pool_routes_one_gradient_per_output(
        groups in 1usize..5, group in 1usize..6, cols in 1usize..5,
        v in prop::collection::vec(-3.0f64..3.0, 1..60),
    ) {
        let mut store = ParamStore::new();
        let p = store.add("x", tensor(groups * group, cols, &v));
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let y = tape.max_pool_over_set(x, group).unwrap();
        for g in 0..groups {
            for c in 0..cols {
                let best = (0..group).map(|r| store.get(p).row(g * group + r)[c]).fold(f64::MIN, f64::max);
                prop_assert_eq!(tape.value(y).row(g)[c], best);
            }
        }
        let loss = tape.sum(y);
        let grad = &tape.backward(loss).unwrap().param_grads(&store)[0];
        let total: f64 = grad.data().iter().sum();
        prop_assert_eq!(total, (groups * cols) as f64);
        prop_assert!(grad.data().iter().all(|&g| g == 0.0 || g == 1.0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(
        meta in "[ -~]{0,40}",
        shapes in prop::collection::vec((1usize..5, 1usize..5), 0..4),
        seed in any::<u32>(),
    ) {
        let entries: Vec<(String, Tensor<f32>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let t = Tensor::from_fn(r, c, |a, b| f32::from_bits(seed.wrapping_add((i * 31 + a * 7 + b) as u32) & 0x7f7f_ffff));
                (format!("layer{i}.w"), t)
            })
            .collect();
        let ck = Checkpoint { meta, entries };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.meta, ck.meta);
        prop_assert_eq!(back.entries.len(), ck.entries.len());
        for ((na, ta), (nb, tb)) in back.entries.iter().zip(&ck.entries) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
        if !buf.is_empty() {
            prop_assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        }
    }

    // First step: m_hat = g and v_hat = g^2, so the move is lr g / (|g| + eps).
    #[test]
    fn adam_first_step_closed_form(g in -10.0f64..10.0, p0 in -1.0f64..1.0, lr in 1e-4f64..1e-1) {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(p0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::scalar(g)], lr).unwrap();
        let expect = p0 - lr * g / (g.abs() + 1e-8);
        prop_assert!((store.get(numkit::ParamId(0)).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn step_decay_never_increases(initial in 1e-5f64..1.0, ratio in 0.05f64..1.0, every in 1usize..20, epoch in 0usize..200) {
        let s = StepDecay { initial, ratio, every };
        prop_assert!(s.lr_at(epoch + 1) <= s.lr_at(epoch));
        prop_assert_eq!(s.lr_at(epoch % every), initial);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn layer_suite_passes_for_any_seed(seed in any::<u64>()) {
        for r in layer_suite(seed, None).unwrap() {
            prop_assert!(r.passed, "{} max rel error {}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn every_corrupted_layer_is_caught() {
    for &name in LAYER_NAMES {
        let reports = layer_suite(1, Some(name)).unwrap();
        for r in reports {
            assert_eq!(r.passed, r.name != name, "{}", r.name);
        }
    }
}
