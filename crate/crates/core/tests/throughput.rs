//! Rough throughput probes used to size desk-scale presets. Ignored by
//! default; run with `--ignored --nocapture` to print numbers.

use std::time::Instant;

use madm_core::nn::{mse_grad, ParamStore, Scalar, Unet2d, Unet2dConfig, Unet3d, Unet3dConfig};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_denoiser(base: usize, s: usize) {
    let cfg = Unet2dConfig {
        in_channels: 2 * s + 2,
        out_channels: 1,
        base_channels: base,
        depth: 2,
        temb_dim: Some(32),
    };
    let net = Unet2d::build(cfg);
    let mut ps = ParamStore::<f32>::zeros(net.param_len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    net.init(&mut ps, &mut rng, false);

    let batch = 8;
    let x = Array4::from_shape_fn((batch, 2 * s + 2, 48, 48), |_| {
        f32::sample_standard_normal(&mut rng)
    });
    let t: Vec<usize> = (1..=batch).collect();

    // inference
    let start = Instant::now();
    let mut n_inf = 0;
    while start.elapsed().as_secs_f64() < 2.0 {
        let y = net.infer(&ps, &x, &t);
        std::hint::black_box(&y);
        n_inf += batch;
    }
    let inf_rate = n_inf as f64 / start.elapsed().as_secs_f64();

    // forward + backward
    let target = Array4::from_shape_fn((batch, 1, 48, 48), |_| f32::sample_standard_normal(&mut rng));
    let start = Instant::now();
    let mut n_fb = 0;
    while start.elapsed().as_secs_f64() < 2.0 {
        let (y, cache) = net.forward(&ps, x.clone(), &t);
        let dout = mse_grad(&y, &target);
        let mut grads = ParamStore::<f32>::zeros(ps.len());
        net.backward(&ps, &cache, &dout, &mut grads);
        std::hint::black_box(&grads);
        n_fb += batch;
    }
    let fb_rate = n_fb as f64 / start.elapsed().as_secs_f64();
    println!(
        "denoiser base={base} s={s} params={}: infer {:.0} slices/s, train {:.0} slices/s",
        net.param_len(),
        inf_rate,
        fb_rate
    );
}

fn bench_prior(base: usize) {
    let cfg = Unet3dConfig { in_channels: 1, out_channels: 1, base_channels: base, depth: 2 };
    let net = Unet3d::build(cfg);
    let mut ps = ParamStore::<f32>::zeros(net.param_len());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    net.init(&mut ps, &mut rng, false);
    let x = madm_core::nn::Array5::from_shape_fn((1, 1, 48, 48, 48), |_| {
        f32::sample_standard_normal(&mut rng)
    });

    let start = Instant::now();
    let mut n = 0;
    while start.elapsed().as_secs_f64() < 3.0 {
        let y = net.infer(&ps, &x);
        std::hint::black_box(&y);
        n += 1;
    }
    let inf = n as f64 / start.elapsed().as_secs_f64();

    let target = x.clone();
    let start = Instant::now();
    let mut n = 0;
    while start.elapsed().as_secs_f64() < 3.0 {
        let (y, cache) = net.forward(&ps, x.clone());
        let dout = mse_grad(&y, &target);
        let mut grads = ParamStore::<f32>::zeros(ps.len());
        net.backward(&ps, &cache, &dout, &mut grads);
        std::hint::black_box(&grads);
        n += 1;
    }
    let fb = n as f64 / start.elapsed().as_secs_f64();
    println!(
        "prior base={base} params={}: infer {:.2} vols/s, train {:.2} vols/s",
        net.param_len(),
        inf,
        fb
    );
}

#[test]
#[ignore = "manual throughput probe"]
fn throughput_probe() {
    for (base, s) in [(8, 4), (12, 4), (16, 4), (8, 0)] {
        bench_denoiser(base, s);
    }
    for base in [4, 6, 8] {
        bench_prior(base);
    }
}

#[test]
#[ignore = "manual determinism probe"]
fn gemm_column_batch_invariance_probe() {
    use ndarray::{linalg::general_mat_mul, Array2};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (m, k) in [(8usize, 90usize), (16, 144), (32, 288), (8, 324)] {
        let w = Array2::<f32>::from_shape_fn((m, k), |_| rng.sample(rand_distr::StandardNormal));
        let n_big = 48 * 2304;
        let b = Array2::<f32>::from_shape_fn((k, n_big), |_| rng.sample(rand_distr::StandardNormal));
        let mut full = Array2::<f32>::zeros((m, n_big));
        general_mat_mul(1.0, &w, &b, 0.0, &mut full);
        let mut worst = 0usize;
        for chunk in [1usize, 7, 2304, 512, 4608] {
            let mut out = Array2::<f32>::zeros((m, chunk));
            let bsub = b.slice(ndarray::s![.., 0..chunk]).to_owned();
            general_mat_mul(1.0, &w, &bsub, 0.0, &mut out);
            let diff = out
                .iter()
                .zip(full.slice(ndarray::s![.., 0..chunk]).iter())
                .filter(|(a, b)| a != b)
                .count();
            worst = worst.max(diff);
        }
        println!("m={m} k={k}: mismatched elements across chunk sizes = {worst}");
    }
}
