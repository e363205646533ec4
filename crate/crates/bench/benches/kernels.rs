use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use metadapt_core::bilevel::{hypergradient, Order};
use metadapt_core::data::{sample_episode, synth_dataset, EpisodeBatch, SynthSpec};
use metadapt_core::layers::Forward;
use metadapt_core::model::{Arch, Model, ModelConfig};
use metadapt_core::tensor::kernels::{conv2d, ConvGeom};
use metadapt_core::trainer::phases::SearchObjective;
use metadapt_core::{ParamGroup, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[16, 16, 8, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[16, 16, 3, 3], 0.1, &mut rng);
    let g = ConvGeom::new(x.shape(), w.shape(), 1, 1).unwrap();
    c.bench_function("conv2d 16x16x8x8 k3", |b| {
        b.iter(|| conv2d(x.data(), w.data(), &g))
    });
}

struct Fixture {
    model: Model,
    batches: Vec<EpisodeBatch>,
}

fn fixture() -> Fixture {
    let splits = synth_dataset(&SynthSpec::default(), 0).unwrap();
    let mut model = Model::new(&ModelConfig::default(), 0).unwrap();
    let cache = model.feature_cache(&splits.train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = splits.train.pool();
    let batches = (0..2)
        .map(|_| {
            EpisodeBatch::new(&sample_episode(&pool, 5, 1, 6, &mut rng).unwrap(), &cache).unwrap()
        })
        .collect();
    model.init_controllers(5, &mut rng);
    Fixture { model, batches }
}

fn bench_episode(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group("block episode");
    for adapt in [false, true] {
        group.bench_function(
            if adapt {
                "adapted fwd+bwd"
            } else {
                "frozen fwd+bwd"
            },
            |b| {
                b.iter(|| {
                    let tape = Tape::new();
                    let p = f.model.params.bind(&tape, &[ParamGroup::Block]);
                    let out = f
                        .model
                        .block_episode(
                            &tape,
                            &p,
                            &f.batches[0],
                            &Forward::train(&f.model.buffers),
                            &Arch::Soft,
                            adapt,
                        )
                        .unwrap();
                    tape.grad(out.loss, &p.vars(&f.model.block_ids())).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn bench_hypergradient(c: &mut Criterion) {
    let f = fixture();
    let w_ids = f.model.block_ids();
    let arch = [Arch::Soft];
    let obj = SearchObjective {
        model: &f.model,
        w_ids: &w_ids,
        alpha_ids: &f.model.alpha,
        batch_w: &f.batches[..1],
        arch_w: &arch,
        batch_alpha: &f.batches[1..],
        arch_alpha: &arch,
    };
    let w = f.model.params.values(&w_ids);
    let alpha = f.model.params.values(&f.model.alpha);
    let mut group = c.benchmark_group("hypergradient");
    group.sample_size(10);
    for order in [Order::First, Order::Second, Order::Exact] {
        group.bench_function(format!("{order:?}"), |b| {
            b.iter_batched(
                || (),
                |_| hypergradient(&obj, &w, &alpha, 1e-3, order).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_episode, bench_hypergradient);
criterion_main!(benches);
