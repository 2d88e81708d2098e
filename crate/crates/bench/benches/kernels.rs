use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fibro_core::numerics::{conv3d, multi_head_attention, AttentionWeights, ConvSpec, Graph, Padding};
use fibro_core::synthetic::generate_case;
use fibro_core::{preprocess, Model, ModelConfig, PreprocessConfig, SynthConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[2, 16, 16, 16], &mut rng);
    let w = random(&[2, 2, 3, 3, 3], &mut rng);
    let w_down = random(&[4, 2, 3, 3, 3], &mut rng);
    c.bench_function("conv3d 2->2 16^3 zero pad", |b| {
        b.iter(|| conv3d(black_box(&x), &w, None, ConvSpec::same(Padding::Zero)).unwrap())
    });
    c.bench_function("conv3d 2->4 16^3 stride 2 reflect", |b| {
        b.iter(|| conv3d(black_box(&x), &w_down, None, ConvSpec { stride: 2, pad: 1, padding: Padding::Reflect }).unwrap())
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[64, 32], &mut rng);
    let w = AttentionWeights {
        w_q: random(&[32, 32], &mut rng),
        w_k: random(&[32, 32], &mut rng),
        w_v: random(&[32, 32], &mut rng),
        w_o: random(&[32, 32], &mut rng),
    };
    c.bench_function("attention 64x32 4 heads", |b| b.iter(|| multi_head_attention(black_box(&x), &x, &x, &w, 4).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let cfg = SynthConfig { p_drop: 0.0, ..Default::default() };
    let case = generate_case(&cfg, 0).unwrap();
    let bundle = preprocess::build_bundle(
        &case.case_id,
        [0, 1, 2].map(|i| case.volumes[i].as_ref()),
        Some(case.stage),
        &PreprocessConfig::desk(cfg.extents),
    )
    .unwrap();
    let model = Model::new(ModelConfig::desk(2), 0).unwrap();
    c.bench_function("desk forward 16^3", |b| b.iter(|| model.logits(black_box(&bundle)).unwrap()));
    c.bench_function("desk forward+backward 16^3", |b| {
        b.iter(|| {
            let mut g = Graph::training(0);
            let logits = model.forward(&mut g, &bundle).unwrap();
            let loss = g.cross_entropy(logits, 1).unwrap();
            g.backward(loss).unwrap()
        })
    });
}

criterion_group!(benches, bench_conv, bench_attention, bench_forward);
criterion_main!(benches);
