use advlab::attacks::fgsm;
use advlab::autodiff::{Mode, Tape};
use advlab::network::Network;
use advlab::training::AdamState;
use advlab::{Targets, Tensor};
use advlab_bench::{synthetic_batch, synthetic_labels};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let net = Network::build(0);
    let x = synthetic_batch(64);
    let mut group = c.benchmark_group("conv2d");
    group.sample_size(20);
    group.bench_function("conv1_b64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let w = tape.leaf(net.params()[0].clone());
            let bias = tape.leaf(net.params()[1].clone());
            tape.conv2d(xv, w, bias, 1).unwrap()
        })
    });
    let h = Tensor::new(
        vec![64, 32, 26, 26],
        (0..64 * 32 * 26 * 26)
            .map(|i| (i % 7) as f64 * 0.1)
            .collect(),
    )
    .unwrap();
    group.bench_function("conv2_b64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let hv = tape.leaf(h.clone());
            let w = tape.leaf(net.params()[2].clone());
            let bias = tape.leaf(net.params()[3].clone());
            tape.conv2d(hv, w, bias, 1).unwrap()
        })
    });
    group.finish();
}

fn network(c: &mut Criterion) {
    let net = Network::build(0);
    let x = synthetic_batch(64);
    let labels = synthetic_labels(64);
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("predict_b64", |b| b.iter(|| net.predict(&x, 1.0).unwrap()));
    group.bench_function("train_step_b64", |b| {
        b.iter_batched(
            || (net.clone(), AdamState::for_network(&net, 1e-4)),
            |(mut n, mut adam)| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                n.zero_grad();
                n.accumulate_gradients(&x, Targets::Hard(&labels), 1.0, Mode::Train, &mut rng)
                    .unwrap();
                adam.step_network(&mut n).unwrap();
                n
            },
            BatchSize::LargeInput,
        )
    });
    group.bench_function("fgsm_b64", |b| {
        b.iter(|| fgsm(&net, &x, &labels, 0.1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
