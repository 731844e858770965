use advlab::attacks::fgsm::perturb;
use advlab::attacks::patch::{patch_apply, PatchSpec};
use advlab::autodiff::{log_softmax_row, Tape};
use advlab::checkpoint;
use advlab::dataset::batches;
use advlab::evaluation::{top_k_error, EvalReport};
use advlab::network::{Network, IMAGE_PIXELS};
use advlab::Tensor;
use proptest::prelude::*;

fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn temperatures() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.5, 1.0, 10.0, 100.0])
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 2..12), t in temperatures()) {
        let s: f64 = log_softmax_row(&row, t).map(f64::exp).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_grows_with_temperature(
        row in prop::collection::vec(-10.0f64..10.0, 2..12),
        t1 in 0.1f64..20.0,
        dt in 0.1f64..20.0,
    ) {
        let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - row.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let p1: Vec<f64> = log_softmax_row(&row, t1).map(f64::exp).collect();
        let p2: Vec<f64> = log_softmax_row(&row, t1 + dt).map(f64::exp).collect();
        prop_assert!(entropy(&p2) > entropy(&p1));
    }

    #[test]
    fn unit_temperature_is_plain_log_softmax(row in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let plain: Vec<f64> = row.iter().map(|z| z - lse).collect();
        let tempered: Vec<f64> = log_softmax_row(&row, 1.0).collect();
        prop_assert_eq!(plain, tempered);
    }

    #[test]
    fn soft_ce_identities(row in prop::collection::vec(-5.0f64..5.0, 4), label in 0usize..4) {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 4], row).unwrap());
        let lp = tape.log_softmax(z, 1.0).unwrap();
        let mut onehot = vec![0.0; 4];
        onehot[label] = 1.0;
        let probs: Vec<f64> = tape.value(lp).data().iter().map(|v| v.exp()).collect();
        let nll = tape.nll_loss(lp, &[label]).unwrap();
        let ce = tape.soft_cross_entropy(lp, &onehot).unwrap();
        prop_assert_eq!(tape.value(nll).data()[0], tape.value(ce).data()[0]);
        let self_ce = tape.soft_cross_entropy(lp, &probs).unwrap();
        prop_assert!((tape.value(self_ce).data()[0] - entropy(&probs)).abs() < 1e-12);
    }

    #[test]
    fn fgsm_perturbation_structure(
        pixels in prop::collection::vec(0.0f64..=1.0, 1..64),
        grads in prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 64),
        eps in 0.0f64..=0.5,
    ) {
        let grads = &grads[..pixels.len()];
        let adv = perturb(&pixels, grads, eps);
        for ((&x, &g), &a) in pixels.iter().zip(grads).zip(&adv) {
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - x).abs() <= eps + 1e-15);
            let step = a - x;
            if g == 0.0 {
                prop_assert_eq!(a, x);
            } else if a > 0.0 && a < 1.0 {
                prop_assert!((step.abs() - eps).abs() < 1e-12 && step * g >= 0.0);
            }
        }
    }

    #[test]
    fn patch_apply_touches_only_its_region(
        size in 1usize..28,
        target in 0usize..10,
        seed in any::<u64>(),
        r in 0usize..28,
        c in 0usize..28,
    ) {
        let patch = PatchSpec::random(size, target, seed).unwrap();
        let image: Vec<f64> = (0..IMAGE_PIXELS).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
        let fits = r + size <= 28 && c + size <= 28;
        let out = patch_apply(&image, &patch, (r, c));
        prop_assert_eq!(out.is_ok(), fits);
        if let Ok(out) = out {
            for i in 0..IMAGE_PIXELS {
                let (row, col) = (i / 28, i % 28);
                if (r..r + size).contains(&row) && (c..c + size).contains(&col) {
                    prop_assert_eq!(out[i], patch.pixels()[(row - r) * size + col - c]);
                } else {
                    prop_assert_eq!(out[i].to_bits(), image[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn top_k_error_non_increasing(
        scores in prop::collection::vec(-3.0f64..3.0, 10 * 20),
        labels in prop::collection::vec(0usize..10, 20),
    ) {
        let errs: Vec<f64> = (1..=10).map(|k| top_k_error(&scores, 10, &labels, k).unwrap()).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(errs[9], 0.0);
    }

    #[test]
    fn report_accuracy_is_exact_and_csv_round_trips(
        rows in prop::collection::vec((0u32..=1000, 1usize..20000, 0.0f64..=1.0), 0..6),
    ) {
        let mut report = EvalReport::new("fgsm", "epsilon");
        for (i, &(setting, total, frac)) in rows.iter().enumerate() {
            let correct = (total as f64 * frac) as usize;
            report.push(setting as f64 / 1000.0 + i as f64, correct, total).unwrap();
        }
        for row in &report.rows {
            prop_assert_eq!(row.accuracy(), row.correct as f64 / row.total as f64);
        }
        let back = EvalReport::parse_csv(&report.to_csv()).unwrap();
        prop_assert_eq!(back.rows.len(), report.rows.len());
        for (a, b) in back.rows.iter().zip(&report.rows) {
            prop_assert_eq!((a.correct, a.total), (b.correct, b.total));
        }
    }

    #[test]
    fn batches_partition_the_indices(len in 1usize..500, size in 1usize..80, seed in any::<u64>()) {
        let order = batches(len, size, seed).unwrap();
        prop_assert_eq!(order.len(), len.div_ceil(size));
        prop_assert!(order[..order.len() - 1].iter().all(|b| b.len() == size));
        let mut all: Vec<usize> = order.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(order, batches(len, size, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn checkpoint_round_trip_is_byte_identical(seed in any::<u64>(), t in 0.5f64..200.0) {
        let mut net = Network::build(seed);
        net.set_temperature(t);
        let bytes = checkpoint::encode(&net);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        prop_assert_eq!(back.temperature(), t);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic(seed in any::<u64>(), shade in 0.0f64..=1.0) {
        let net = Network::build(seed);
        let x = Tensor::new(
            vec![2, 1, 28, 28],
            (0..2 * IMAGE_PIXELS).map(|i| (shade * i as f64 / 1568.0).min(1.0)).collect(),
        )
        .unwrap();
        let a = net.predict(&x, 1.0).unwrap();
        let b = net.predict(&x, 1.0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
