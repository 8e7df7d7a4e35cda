use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use madm_bench::Fixture;
use madm_core::metrics::ssim;
use madm_core::models::EpsModel;
use madm_core::phantom::{degrade, generate_phantom, DegradeSpec, PhantomSpec};
use madm_core::sampler::{madm_sample, SamplerConfig, SamplerMode};
use madm_core::schedule::NoiseSchedule;
use madm_core::volume::{ViewAxis, Volume};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_denoiser_batch(c: &mut Criterion) {
    let fx = Fixture::desk_like();
    let model = &fx.denoisers[&ViewAxis::Axial];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xb = Array4::from_shape_fn((16, 10, 48, 48), |_| {
        <f32 as madm_core::nn::Scalar>::sample_standard_normal(&mut rng)
    });
    c.bench_function("denoiser_infer_16x48x48", |b| {
        b.iter(|| black_box(model.predict_eps_batch(black_box(&xb), 7)))
    });
}

fn bench_reverse_chain_step(c: &mut Criterion) {
    let fx = Fixture::desk_like();
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.1).unwrap();
    let cfg = SamplerConfig {
        t_start: 1,
        views: ViewAxis::ALL.to_vec(),
        mode: SamplerMode::Averaging,
        sequential_order: None,
        seed: 3,
        use_prior: true,
        slice_batch: 16,
    };
    let mut group = c.benchmark_group("sampler");
    group.sample_size(10);
    group.bench_function("one_averaged_step_48cube", |b| {
        b.iter(|| {
            let bank = fx.bank();
            black_box(madm_sample(black_box(&fx.input), &bank, &schedule, &cfg).unwrap())
        })
    });
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Volume::random_normal((48, 48, 48), &mut rng);
    let b = Volume::new(a.data().mapv(|v| v * 0.9 + 0.05)).unwrap();
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    group.bench_function("ssim_48cube", |bch| bch.iter(|| black_box(ssim(&a, &b).unwrap())));
    group.finish();
}

fn bench_phantom(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    let dspec = DegradeSpec::default();
    let mut group = c.benchmark_group("phantom");
    group.sample_size(10);
    group.bench_function("generate_and_degrade_48cube", |b| {
        b.iter(|| {
            let (target, _) = generate_phantom(&spec, 7).unwrap();
            black_box(degrade(&target, 0.05, 8, &dspec).unwrap())
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_denoiser_batch,
    bench_reverse_chain_step,
    bench_metrics,
    bench_phantom
);
criterion_main!(benches);
