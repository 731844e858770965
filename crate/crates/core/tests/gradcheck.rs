//! Analytic gradients from the tape against central finite differences.

use advlab::autodiff::{Mode, Tape, Var};
use advlab::network::{Network, IMAGE_PIXELS, NUM_CLASSES};
use advlab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const MAX_REL_ERR: f64 = 1e-4;
// gradients smaller than this are compared absolutely; central differences
// cannot resolve them relative to rounding of an O(1) loss
const MAGNITUDE_FLOOR: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR)
}

/// Builds a scalar loss from the leaves; `check` compares the analytic
/// gradient of every leaf element against central differences.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad(false)))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("leaf tracked").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Contracts any output with fixed random weights so every element matters.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(uniform(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        uniform(&mut rng, &[2, 2, 6, 5], -1.0, 1.0),
        uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
        uniform(&mut rng, &[3], -1.0, 1.0),
    ];
    for stride in [1, 2] {
        let err = check(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride).unwrap();
            weighted_sum(t, y, 7)
        });
        assert!(err < MAX_REL_ERR, "stride {stride}: {err}");
    }
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0)];
    let err = check(&inputs, |t, v| {
        let y = t.maxpool2d(v[0], 2).unwrap();
        weighted_sum(t, y, 8)
    });
    assert!(err < MAX_REL_ERR, "{err}");
}

#[test]
fn relu_gradients() {
    let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_grad(true));
    let y = tape.relu(v);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[0.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // keep inputs away from the kink so the difference quotient is exact
    let data = (0..40)
        .map(|_| {
            let m = rng.gen_range(0.01..1.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    let inputs = [Tensor::new(vec![4, 10], data).unwrap()];
    let err = check(&inputs, |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 9)
    });
    assert!(err < MAX_REL_ERR, "{err}");
}

#[test]
fn affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        uniform(&mut rng, &[3, 5], -1.0, 1.0),
        uniform(&mut rng, &[4, 5], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
    ];
    let err = check(&inputs, |t, v| {
        let y = t.affine(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, 10)
    });
    assert!(err < MAX_REL_ERR, "{err}");
}

#[test]
fn dropout_gradients_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [uniform(&mut rng, &[2, 4, 3, 3], -1.0, 1.0)];
    let err = check(&inputs, |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(v[0], 0.25, Mode::Train, &mut mask_rng).unwrap();
        weighted_sum(t, y, 11)
    });
    assert!(err < MAX_REL_ERR, "{err}");
}

#[test]
fn log_softmax_nll_and_soft_ce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = [uniform(&mut rng, &[3, 4], -1.0, 1.0)];
    for temperature in [0.5, 1.0, 10.0, 100.0] {
        let err = check(&logits, |t, v| {
            let lp = t.log_softmax(v[0], temperature).unwrap();
            weighted_sum(t, lp, 12)
        });
        assert!(err < MAX_REL_ERR, "log_softmax T={temperature}: {err}");
        let err = check(&logits, |t, v| {
            let lp = t.log_softmax(v[0], temperature).unwrap();
            t.nll_loss(lp, &[0, 3, 1]).unwrap()
        });
        assert!(err < MAX_REL_ERR, "nll T={temperature}: {err}");
    }
    let targets = [
        0.2, 0.3, 0.1, 0.4, 0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25,
    ];
    let err = check(&logits, |t, v| {
        let lp = t.log_softmax(v[0], 2.0).unwrap();
        t.soft_cross_entropy(lp, &targets).unwrap()
    });
    assert!(err < MAX_REL_ERR, "soft ce: {err}");
}

#[test]
fn reshape_and_mul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        uniform(&mut rng, &[2, 3, 2], -1.0, 1.0),
        uniform(&mut rng, &[2, 3, 2], -1.0, 1.0),
    ];
    let err = check(&inputs, |t, v| {
        let p = t.mul(v[0], v[1]).unwrap();
        let q = t.mul(p, v[0]).unwrap();
        let r = t.reshape(q, vec![3, 4]).unwrap();
        weighted_sum(t, r, 13)
    });
    assert!(err < MAX_REL_ERR, "{err}");
}

fn random_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(&mut rng, &[1, 1, 28, 28], 0.0, 1.0)
}

/// Single-image loss plus its activation pattern: the sign of every ReLU
/// input and the winning cell of every pooling window. Central differences
/// are only meaningful when both probes share the pattern of the base point.
fn loss_and_pattern(
    net: &Network,
    x: &Tensor,
    label: usize,
    temperature: f64,
) -> (f64, Vec<usize>) {
    let mut tape = Tape::new();
    let params: Vec<Var> = net.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pattern = Vec::new();
    let signs = |t: &Tape, v: Var, pattern: &mut Vec<usize>| {
        pattern.extend(t.value(v).data().iter().map(|&z| usize::from(z > 0.0)));
    };
    let c1 = tape.conv2d(xv, params[0], params[1], 1).unwrap();
    signs(&tape, c1, &mut pattern);
    let h = tape.relu(c1);
    let c2 = tape.conv2d(h, params[2], params[3], 1).unwrap();
    signs(&tape, c2, &mut pattern);
    let h = tape.relu(c2);
    {
        let a = tape.value(h).data();
        for c in 0..64 {
            for r in 0..12 {
                for q in 0..12 {
                    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dr, dq)| a[c * 576 + (2 * r + dr) * 24 + 2 * q + dq]);
                    let best = (0..4).fold(0, |b, k| if cells[k] > cells[b] { k } else { b });
                    pattern.push(best);
                }
            }
        }
    }
    let h = tape.maxpool2d(h, 2).unwrap();
    let h = tape.dropout(h, 0.25, Mode::Eval, &mut rng).unwrap();
    let h = tape.flatten(h).unwrap();
    let f1 = tape.affine(h, params[4], params[5]).unwrap();
    signs(&tape, f1, &mut pattern);
    let h = tape.relu(f1);
    let z = tape.affine(h, params[6], params[7]).unwrap();
    let lp = tape.log_softmax(z, temperature).unwrap();
    let l = tape.nll_loss(lp, &[label]).unwrap();
    (tape.value(l).data()[0], pattern)
}

/// Central differences w.r.t. every pixel; `None` where a probe crosses a
/// ReLU or pooling boundary. Probes may leave `[0, 1]` by one step, which
/// is why the loss is traced directly rather than through `predict`.
fn numeric_input_gradient(
    net: &Network,
    image: &Tensor,
    label: usize,
    temperature: f64,
) -> Vec<Option<f64>> {
    let (_, base) = loss_and_pattern(net, image, label, temperature);
    (0..IMAGE_PIXELS)
        .map(|i| {
            let mut plus = image.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = image.clone();
            minus.data_mut()[i] -= STEP;
            let (lp, pp) = loss_and_pattern(net, &plus, label, temperature);
            let (lm, pm) = loss_and_pattern(net, &minus, label, temperature);
            (pp == base && pm == base).then(|| (lp - lm) / (2.0 * STEP))
        })
        .collect()
}

/// Worst error over the smooth pixels, and how many pixels were smooth.
fn input_check(analytic: &[f64], numeric: &[Option<f64>]) -> (f64, usize) {
    let pairs: Vec<(f64, f64)> = analytic
        .iter()
        .zip(numeric)
        .filter_map(|(&a, n)| n.map(|n| (a, n)))
        .collect();
    let worst = pairs
        .iter()
        .map(|&(a, n)| rel_err(a, n))
        .fold(0.0, f64::max);
    (worst, pairs.len())
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[test]
fn full_network_input_gradient() {
    let net = Network::build(21);
    let image = random_image(22);
    let analytic = net.input_gradient(&image, &[3], 1.0).unwrap();
    assert_eq!(analytic.shape(), image.shape());
    let numeric = numeric_input_gradient(&net, &image, 3, 1.0);
    let (err, smooth) = input_check(analytic.data(), &numeric);
    assert!(smooth * 2 > IMAGE_PIXELS, "only {smooth} smooth pixels");
    assert!(err < MAX_REL_ERR, "{err}");
}

#[test]
fn input_gradient_after_one_training_step() {
    let mut net = Network::build(31);
    let batch = Tensor::new(
        vec![4, 1, 28, 28],
        (0..4)
            .flat_map(|s| random_image(40 + s).into_data())
            .collect(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    net.accumulate_gradients(
        &batch,
        advlab::Targets::Hard(&[0, 1, 2, 3]),
        1.0,
        Mode::Train,
        &mut rng,
    )
    .unwrap();
    let mut adam = advlab::training::AdamState::for_network(&net, 1e-3);
    adam.step_network(&mut net).unwrap();
    net.zero_grad();

    let image = random_image(50);
    let analytic = net.input_gradient(&image, &[7], 1.0).unwrap();
    let numeric = numeric_input_gradient(&net, &image, 7, 1.0);
    let (err, smooth) = input_check(analytic.data(), &numeric);
    assert!(smooth * 2 > IMAGE_PIXELS, "only {smooth} smooth pixels");
    assert!(err < MAX_REL_ERR, "{err}");
}

#[test]
fn batched_input_gradient_matches_single_images() {
    let net = Network::build(3);
    let images: Vec<Tensor> = (0..3).map(|s| random_image(60 + s)).collect();
    let labels = [1, 5, 9];
    let batch = Tensor::new(
        vec![3, 1, 28, 28],
        images.iter().flat_map(|t| t.data().to_vec()).collect(),
    )
    .unwrap();
    let together = net.input_gradient(&batch, &labels, 1.0).unwrap();
    for (b, (img, &y)) in images.iter().zip(&labels).enumerate() {
        let alone = net.input_gradient(img, &[y], 1.0).unwrap();
        let part = &together.data()[b * IMAGE_PIXELS..(b + 1) * IMAGE_PIXELS];
        assert!(max_rel_err(part, alone.data()) < 1e-12);
    }
}

#[test]
fn zero_final_layer_gives_uniform_output_and_finite_gradient() {
    let mut net = Network::build(4);
    for p in &mut net.params_mut()[6..] {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let image = random_image(70);
    let lp = net.predict(&image, 1.0).unwrap();
    for v in lp.data() {
        assert!((v + (NUM_CLASSES as f64).ln()).abs() < 1e-12);
    }
    let g = net.input_gradient(&image, &[2], 1.0).unwrap();
    // logits do not depend on the input at all
    assert!(g.data().iter().all(|v| *v == 0.0));
}

#[test]
fn parameter_gradients_of_the_network() {
    let net = Network::build(8);
    let image = random_image(80);
    let mut trained = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    trained
        .accumulate_gradients(
            &image,
            advlab::Targets::Hard(&[6]),
            1.0,
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
    let mut sample = ChaCha8Rng::seed_from_u64(81);
    let (_, base) = loss_and_pattern(&net, &image, 6, 1.0);
    let (mut worst, mut smooth, mut probed) = (0.0f64, 0, 0);
    for (k, p) in trained.params().iter().enumerate() {
        let grad = p.grad().expect("parameter gradient");
        for _ in 0..12 {
            let i = sample.gen_range(0..p.len());
            let mut plus = net.clone();
            plus.params_mut()[k].data_mut()[i] += STEP;
            let mut minus = net.clone();
            minus.params_mut()[k].data_mut()[i] -= STEP;
            let (lp, pp) = loss_and_pattern(&plus, &image, 6, 1.0);
            let (lm, pm) = loss_and_pattern(&minus, &image, 6, 1.0);
            probed += 1;
            if pp == base && pm == base {
                smooth += 1;
                worst = worst.max(rel_err(grad[i], (lp - lm) / (2.0 * STEP)));
            }
        }
    }
    assert!(
        smooth * 2 > probed,
        "only {smooth} of {probed} probes smooth"
    );
    assert!(worst < MAX_REL_ERR, "{worst}");
}
