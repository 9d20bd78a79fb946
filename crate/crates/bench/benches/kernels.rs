use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use histogen_core::backbone::{encode_conditions, mm_attention, AttentionParams, Denoiser, ModelConfig, ParamStore};
use histogen_core::diffusion::make_schedule;
use histogen_core::encoders::{Encoders, SurrogateEncoderParams};
use histogen_core::synthdata::gen_dataset;
use histogen_core::training::{make_batch, train_step, Adam, TrainItem, TrainOptions};
use histogen_core::numcore::matmul;
use histogen_core::{Graph, Rng};

fn dense_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let mut rng = Rng::new(1);
        let a = rng.normal_tensor(&[n, n]);
        let b = rng.normal_tensor(&[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(&a, &b).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("mm_attention_fwd_bwd");
    for (na, nb) in [(16, 8), (64, 16)] {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, &mut rng, "x", 32, 4).unwrap();
        let a = rng.normal_tensor(&[na, 32]);
        let b = rng.normal_tensor(&[nb, 32]);
        group.bench_function(format!("{na}x{nb}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let bound = store.bind(&mut g);
                let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
                let (oa, ob) = mm_attention(&mut g, &bound, &p, va, vb).unwrap();
                let (sa, sb) = (g.sum(oa), g.sum(ob));
                let s = g.add(sa, sb).unwrap();
                g.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let enc = Encoders::new(SurrogateEncoderParams::default()).unwrap();
    let items: Vec<TrainItem> = gen_dataset(8, 3)
        .iter()
        .map(|s| TrainItem {
            z0: enc.encode_image(&s.image).unwrap(),
            cond: encode_conditions(&enc, &s.caption_ids, &s.mask, &s.image).unwrap(),
        })
        .collect();
    let schedule = make_schedule(200, 1e-4, 0.03).unwrap();
    let mut model = Denoiser::new(ModelConfig::default(), enc, 0).unwrap();
    let opts = TrainOptions::default();
    let mut adam = Adam::new(&model.params, opts.lr);
    let mut step = 0;
    c.bench_function("train_step_batch8", |bench| {
        bench.iter(|| {
            let batch = make_batch(&items, &schedule, &opts, step);
            step += 1;
            train_step(&mut model, &mut adam, &batch, &schedule, opts.clip_norm).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = dense_matmul, attention, training_step
}
criterion_main!(benches);
