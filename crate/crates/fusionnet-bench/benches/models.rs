//! Whole-model forward/backward benchmarks at desk scale.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fusionnet_bench::desk_dgcnn;
use fusionnet_core::fusion::FusionSpec;
use fusionnet_core::model::{Model, ModelSpec};
use fusionnet_core::nn::Mode;
use fusionnet_core::params::ParamStore;
use fusionnet_core::tensor::{Tape, Tensor, VarId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_backbone_step(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let spec = ModelSpec::Backbone(desk_dgcnn(32));
    let model = Model::build(&spec, &mut store, 1).unwrap();
    let Model::Backbone(bb) = &model else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::rand_uniform(vec![8, 3, 32, 32], -1.0, 1.0, &mut rng);

    c.bench_function("dgcnn_forward_batch8_32px", |bench| {
        bench.iter_batched(
            || store.clone(),
            |mut store| {
                let mut tape = Tape::new();
                let xi = tape.leaf(black_box(&x));
                let out = bb.forward(&mut tape, &mut store, xi, Mode::Eval).unwrap();
                black_box(tape.data(out.features)[0])
            },
            BatchSize::SmallInput,
        )
    });

    c.bench_function("dgcnn_train_step_batch8_32px", |bench| {
        bench.iter_batched(
            || store.clone(),
            |mut store| {
                let mut tape = Tape::new();
                let xi = tape.leaf(&x);
                let out = bb.forward(&mut tape, &mut store, xi, Mode::Train).unwrap();
                let logits = out.logits.unwrap();
                let loss = tape
                    .weighted_cross_entropy(logits, &[0, 1, 1, 1, 0, 1, 1, 1], [3.0, 1.0])
                    .unwrap();
                tape.backward(loss).unwrap();
                tape.write_param_grads(&mut store);
                black_box(tape.data(loss)[0])
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_fusion_step(c: &mut Criterion) {
    let mut branch = desk_dgcnn(32);
    branch.channels = [40, 16, 24, 32, 32];
    let mut fspec = FusionSpec::new(branch);
    fspec.head_widths = vec![64, 48, 32, 16, 2];
    let spec = ModelSpec::Fusion(fspec);
    let mut store = ParamStore::new();
    let model = Model::build(&spec, &mut store, 3).unwrap();
    let Model::Fusion(net) = &model else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<Tensor> = (0..5)
        .map(|_| Tensor::rand_uniform(vec![4, 3, 32, 32], -1.0, 1.0, &mut rng))
        .collect();

    c.bench_function("fusion_train_step_batch4_32px", |bench| {
        bench.iter_batched(
            || store.clone(),
            |mut store| {
                let mut tape = Tape::new();
                let xs: [VarId; 5] = std::array::from_fn(|i| tape.leaf(&inputs[i]));
                let out = net.forward(&mut tape, &mut store, &xs, Mode::Train).unwrap();
                let loss = tape
                    .weighted_cross_entropy(out.logits, &[0, 1, 1, 1], [3.0, 1.0])
                    .unwrap();
                tape.backward(loss).unwrap();
                tape.write_param_grads(&mut store);
                black_box(tape.data(loss)[0])
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_backbone_step, bench_fusion_step
}
criterion_main!(benches);
