//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`).
//!
//! Criteria 4-7 need the full desk-scale pipeline (hours on one core) and
//! are `#[ignore]` by default. They verify the artifacts under
//! `$MADM_ACCEPT_OUT` (default `../../runs/desk`), running the pipeline
//! there first if the artifacts are absent. Run them with
//! `cargo test --release --test acceptance -- --include-ignored --nocapture`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use madm_core::experiments::{Pipeline, RunConfig, Study, TrainTarget, Variant};
use madm_core::metrics::{self, median_of, Psnr};
use madm_core::models::{
    Denoiser25D, Denoiser25DConfig, EpsModel, Prior3D, Prior3DConfig, PriorModel,
};
use madm_core::nn::{ParamStore, Scalar};
use madm_core::sampler::{madm_sample, ModelBank, SamplerConfig, SamplerMode};
use madm_core::schedule::{diffuse, reverse_step, NoiseSchedule};
use madm_core::store::CsvTable;
use madm_core::train::{diffusion_loss_batch, prior_loss_batch};
use madm_core::volume::{ViewAxis, Volume};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static HEAVY_LOCK: Mutex<()> = Mutex::new(());

// --- criterion 1 ---------------------------------------------------------

#[test]
fn c1_schedule_and_step_oracles() {
    let schedule = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let dims = (
            rng.gen_range(4..10usize),
            rng.gen_range(4..10usize),
            rng.gen_range(4..10usize),
        );
        let y0 = Volume::random_normal(dims, &mut rng);
        let eps = Volume::random_normal(dims, &mut rng);
        let y1 = diffuse(&y0, 1, &eps, &schedule).unwrap();
        let z = Volume::zeros(dims);
        let back = reverse_step(&y1, &eps, 1, &z, &schedule).unwrap();
        for (a, b) in back.data().iter().zip(y0.data()) {
            assert!(
                (a - b).abs() <= 1e-5 * b.abs().max(1.0),
                "case {case}: round trip {a} vs {b}"
            );
        }
    }

    // alpha_bar tables vs a reverse-order direct-product oracle
    for (steps, b0, b1) in [(1000usize, 1e-4, 0.02), (200, 1e-4, 0.1), (37, 0.003, 0.4)] {
        let s = NoiseSchedule::linear(steps, b0, b1).unwrap();
        for t in 1..=steps {
            let mut direct = 1.0f64;
            for i in (1..=t).rev() {
                direct *= 1.0 - s.beta(i);
            }
            assert!(
                (s.alpha_bar(t) - direct).abs() <= 1e-12,
                "T={steps} t={t}: {} vs {direct}",
                s.alpha_bar(t)
            );
        }
    }
    println!("ACCEPTANCE C1 (schedule/step oracles, 1e-5 / 1e-12): PASS");
}

// --- criterion 2 ---------------------------------------------------------

fn ssim_brute_force(pred: &Volume, reference: &Volume) -> f64 {
    let (d1, d2, d3) = pred.dims();
    let x = pred.data();
    let y = reference.data();
    let peak = (reference.max_value().max(pred.max_value()) as f64).max(f64::MIN_POSITIVE);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let sigma = 1.5f64;
    let r = 5isize;
    let kernel: Vec<f64> =
        (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();
    let mut acc = 0.0;
    for a in 0..d1 as isize {
        for b in 0..d2 as isize {
            for c in 0..d3 as isize {
                let (mut w, mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for da in -r..=r {
                    for db in -r..=r {
                        for dc in -r..=r {
                            let (pa, pb, pc) = (a + da, b + db, c + dc);
                            if pa < 0 || pb < 0 || pc < 0 {
                                continue;
                            }
                            let (pa, pb, pc) = (pa as usize, pb as usize, pc as usize);
                            if pa >= d1 || pb >= d2 || pc >= d3 {
                                continue;
                            }
                            let wk = kernel[(da + r) as usize]
                                * kernel[(db + r) as usize]
                                * kernel[(dc + r) as usize];
                            let xv = x[[pa, pb, pc]] as f64;
                            let yv = y[[pa, pb, pc]] as f64;
                            w += wk;
                            sx += wk * xv;
                            sy += wk * yv;
                            sxx += wk * xv * xv;
                            syy += wk * yv * yv;
                            sxy += wk * xv * yv;
                        }
                    }
                }
                let mx = sx / w;
                let my = sy / w;
                let vx = sxx / w - mx * mx;
                let vy = syy / w - my * my;
                let cov = sxy / w - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    acc / (d1 * d2 * d3) as f64
}

#[test]
fn c2_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for dims in [(5, 5, 5), (9, 7, 6), (16, 16, 16)] {
        let a = Volume::random_normal(dims, &mut rng);
        let b = Volume::new(a.data().mapv(|v| v.abs() + 0.2)).unwrap();

        // rmse / nmse against direct voxel loops (1e-7)
        let mut sq = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            sq += ((*x - *y) as f64).powi(2);
            den += (*y as f64).powi(2);
        }
        let n = a.data().len() as f64;
        assert!((metrics::rmse(&a, &b).unwrap() - (sq / n).sqrt()).abs() <= 1e-7);
        assert!((metrics::nmse(&a, &b).unwrap() - sq / den).abs() <= 1e-7);

        // psnr identity 20 log10(peak/rmse) to 1e-9
        let p = metrics::psnr_auto(&a, &b).unwrap().db().unwrap();
        let r = metrics::rmse(&a, &b).unwrap();
        let peak = b.max_value() as f64;
        assert!((p - 20.0 * (peak / r).log10()).abs() <= 1e-9);
        assert_eq!(metrics::psnr_auto(&b, &b).unwrap(), Psnr::Identical);

        // ssim vs the brute-force sliding-window oracle (1e-6)
        if dims.0 <= 9 {
            let got = metrics::ssim(&a, &b).unwrap();
            let want = ssim_brute_force(&a, &b);
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }

        // lesion mean error vs a direct masked mean (1e-7)
        let mut mask_data = Array3::<f32>::zeros(dims);
        mask_data[[1, 1, 1]] = 1.0;
        mask_data[[2, 1, 1]] = 1.0;
        let mask = Volume::new(mask_data).unwrap();
        let got = metrics::lesion_mean_error(&a, &b, &[mask]).unwrap()[0];
        let mp = (a.data()[[1, 1, 1]] as f64 + a.data()[[2, 1, 1]] as f64) / 2.0;
        let mr = (b.data()[[1, 1, 1]] as f64 + b.data()[[2, 1, 1]] as f64) / 2.0;
        assert!((got - (mp - mr).abs()).abs() <= 1e-7);
    }
    println!("ACCEPTANCE C2 (metric oracles, 1e-7 / 1e-9 / 1e-6 / 1e-7): PASS");
}

// --- criterion 3 ---------------------------------------------------------

#[test]
fn c3_gradient_checks() {
    let schedule = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    // diffusion loss through a tiny (<= 1000 parameter) denoiser, f64
    let dcfg =
        Denoiser25DConfig { context_radius: 0, base_channels: 2, depth: 1, temb_dim: 8, seed: 11 };
    let mut model = Denoiser25D::<f64>::new_with(dcfg, false);
    assert!(model.param_count() <= 1000, "denoiser has {} params", model.param_count());
    let y0 = Array3::from_shape_fn((2, 8, 8), |_| f64::sample_standard_normal(&mut rng));
    let cond = Array4::from_shape_fn((2, 1, 8, 8), |_| f64::sample_standard_normal(&mut rng));
    let eps = Array3::from_shape_fn((2, 8, 8), |_| f64::sample_standard_normal(&mut rng));
    let ts = vec![3usize, 7];

    let mut grads = ParamStore::<f64>::zeros(model.params().len());
    diffusion_loss_batch(&model, &y0, &cond, &ts, &eps, &schedule, Some(&mut grads)).unwrap();
    let n_params = model.params().len();
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    while checked < 50 {
        let i = rng.gen_range(0..n_params);
        let h = 1e-5;
        let orig = model.params().as_slice()[i];
        model.params_mut().as_mut_slice()[i] = orig + h;
        let fp =
            diffusion_loss_batch(&model, &y0, &cond, &ts, &eps, &schedule, None).unwrap();
        model.params_mut().as_mut_slice()[i] = orig - h;
        let fm =
            diffusion_loss_batch(&model, &y0, &cond, &ts, &eps, &schedule, None).unwrap();
        model.params_mut().as_mut_slice()[i] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = grads.as_slice()[i];
        // the 1e-6 floor absorbs central-difference cancellation noise on
        // parameters whose true gradient is zero
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        assert!(rel <= 1e-3, "diffusion param {i}: numeric {num} vs analytic {ana} (rel {rel})");
        checked += 1;
    }

    // prior loss through a tiny 3D network
    let pcfg = Prior3DConfig { base_channels: 1, depth: 1, seed: 12 };
    let mut prior = Prior3D::<f64>::new_with(pcfg, false);
    assert!(prior.param_count() <= 1000, "prior has {} params", prior.param_count());
    let x = madm_core::nn::Array5::from_shape_fn((1, 1, 6, 6, 6), |_| {
        f64::sample_standard_normal(&mut rng)
    });
    let target = madm_core::nn::Array5::from_shape_fn((1, 1, 6, 6, 6), |_| {
        f64::sample_standard_normal(&mut rng)
    });
    let mut pgrads = ParamStore::<f64>::zeros(prior.params().len());
    prior_loss_batch(&prior, &x, &target, Some(&mut pgrads)).unwrap();
    let n_params = prior.params().len();
    let mut max_rel_p = 0.0f64;
    for _ in 0..50 {
        let i = rng.gen_range(0..n_params);
        let h = 1e-5;
        let orig = prior.params().as_slice()[i];
        prior.params_mut().as_mut_slice()[i] = orig + h;
        let fp = prior_loss_batch(&prior, &x, &target, None).unwrap();
        prior.params_mut().as_mut_slice()[i] = orig - h;
        let fm = prior_loss_batch(&prior, &x, &target, None).unwrap();
        prior.params_mut().as_mut_slice()[i] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = pgrads.as_slice()[i];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        max_rel_p = max_rel_p.max(rel);
        assert!(rel <= 1e-3, "prior param {i}: numeric {num} vs analytic {ana} (rel {rel})");
    }
    println!(
        "ACCEPTANCE C3 (gradient checks <= 1e-3; observed max rel err {:.2e} / {:.2e}): PASS",
        max_rel, max_rel_p
    );
}

// --- heavy-criterion plumbing ---------------------------------------------

fn accept_out_dir() -> PathBuf {
    match std::env::var("MADM_ACCEPT_OUT") {
        Ok(v) => PathBuf::from(v),
        Err(_) => PathBuf::from("../../runs/desk"),
    }
}

fn study_csv(study: Study) -> &'static str {
    match study {
        Study::Views => "views.csv",
        Study::Sequential => "sequential.csv",
        Study::Context => "context.csv",
        Study::Ts => "ts_sweep.csv",
        Study::All => unreachable!(),
    }
}

/// Returns the study table, running the desk pipeline first if its
/// artifacts are absent. Verifies the run used the pinned desk geometry.
fn ensure_study(study: Study) -> CsvTable {
    let _guard = HEAVY_LOCK.lock().unwrap();
    let out = accept_out_dir();
    let csv_path = out.join("ablate").join(study_csv(study));
    if !csv_path.exists() {
        let mut cfg = RunConfig::desk_preset();
        cfg.out_dir = out.clone();
        let pipeline = Pipeline::new(cfg).unwrap();
        if !out.join("dataset").join("manifest.json").exists() {
            pipeline.build_dataset(false).unwrap();
        }
        pipeline.train(TrainTarget::All, true).unwrap();
        pipeline.ablate(study).unwrap();
    }

    // pinned desk geometry: 48^3 volumes, 40 train / 10 test, 5% dose,
    // T = 200, at least 3 training seeds
    let cfg = RunConfig::load(&out.join("config.json")).expect("run config recorded");
    assert_eq!(cfg.dataset.spec.phantom.size, [48, 48, 48], "desk preset pins 48^3");
    assert_eq!(cfg.dataset.spec.n_train, 40);
    assert_eq!(cfg.dataset.spec.n_test, 10);
    assert_eq!(cfg.schedule.steps, 200, "desk preset pins T=200");
    assert!((cfg.ablate.dose - 0.05).abs() < 1e-12, "ablations run at 5% dose");
    assert!(cfg.seeds.len() >= 3, "need >= 3 training seeds");

    let table = CsvTable::read(&csv_path).unwrap();
    assert_eq!(
        table.comments.get("config_hash"),
        Some(&cfg.config_hash()),
        "study table must come from the recorded config"
    );
    table
}

fn grouped_median(table: &CsvTable, group: &str, metric: &str) -> BTreeMap<String, f64> {
    let g = table.column(group).unwrap();
    let m = table.column(metric).unwrap();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &table.rows {
        if let Ok(Psnr::Db(v)) = Psnr::from_field(&row[m]) {
            values.entry(row[g].clone()).or_default().push(v);
        }
    }
    values.into_iter().map(|(k, v)| (k, median_of(&v))).collect()
}

// --- criterion 4 ---------------------------------------------------------

#[test]
#[ignore = "desk-scale pipeline (hours on one core); set MADM_ACCEPT_OUT to verify existing artifacts"]
fn c4_multi_view_ordering() {
    let table = ensure_study(Study::Views);
    // pool PSNR across seeds and samples per subset
    let medians = grouped_median(&table, "views", "psnr_db");
    let all3 = medians["co+sa+ax"];
    for single in ["co", "sa", "ax"] {
        assert!(
            all3 >= medians[single],
            "3-view averaging ({all3:.3} dB) must beat single view {single} ({:.3} dB)",
            medians[single]
        );
    }
    let best_pair = ["co+sa", "co+ax", "sa+ax"]
        .iter()
        .map(|k| medians[*k])
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        all3 >= best_pair - 0.1,
        "3-view averaging ({all3:.3} dB) must be within 0.1 dB of the best pair ({best_pair:.3} dB)"
    );
    println!(
        "ACCEPTANCE C4 (multi-view ordering; 3-view {all3:.3} dB, best pair {best_pair:.3} dB, singles {:.3}/{:.3}/{:.3}): PASS",
        medians["co"], medians["sa"], medians["ax"]
    );
}

// --- criterion 5 ---------------------------------------------------------

#[test]
#[ignore = "desk-scale pipeline (hours on one core); set MADM_ACCEPT_OUT to verify existing artifacts"]
fn c5_context_beats_2d() {
    let table = ensure_study(Study::Context);
    let medians = grouped_median(&table, "s", "psnr_db");
    let s0 = medians["0"];
    let s4 = medians["4"];
    assert!(
        s4 - s0 >= 0.2,
        "s=4 ({s4:.3} dB) must exceed s=0 ({s0:.3} dB) by at least 0.2 dB"
    );
    println!("ACCEPTANCE C5 (2.5D vs 2D; s=4 {s4:.3} dB vs s=0 {s0:.3} dB): PASS");
}

// --- criterion 6 ---------------------------------------------------------

#[test]
#[ignore = "desk-scale pipeline (hours on one core); set MADM_ACCEPT_OUT to verify existing artifacts"]
fn c6_prior_injection_interior_optimum() {
    let table = ensure_study(Study::Ts);
    let t_col = table.column("t_start").unwrap();
    let p_col = table.column("use_prior").unwrap();
    let n_col = table.column("nmse").unwrap();
    let mut grouped: BTreeMap<(usize, bool), Vec<f64>> = BTreeMap::new();
    for row in &table.rows {
        let t: usize = row[t_col].parse().unwrap();
        let prior: bool = row[p_col].parse().unwrap();
        grouped.entry((t, prior)).or_default().push(row[n_col].parse().unwrap());
    }
    let medians: BTreeMap<(usize, bool), f64> =
        grouped.into_iter().map(|(k, v)| (k, median_of(&v))).collect();
    let t_max = medians.keys().map(|(t, _)| *t).max().unwrap();
    let prior_only = medians[&(0, true)];
    let no_prior = *medians
        .get(&(t_max, false))
        .expect("pure-noise full-chain baseline present");
    let best_interior = medians
        .iter()
        .filter(|((t, prior), _)| *prior && *t > 0 && *t < t_max)
        .map(|(k, v)| (*k, *v))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .expect("interior sweep points present");
    assert!(
        best_interior.1 < prior_only && best_interior.1 < no_prior,
        "need interior t_s beating both ends: best {:?}, prior-only {prior_only:.4e}, no-prior {no_prior:.4e}",
        best_interior
    );
    // the sweep CSV and plot are the demonstrating artifacts
    assert!(accept_out_dir().join("ablate").join("ts_sweep.svg").exists());
    println!(
        "ACCEPTANCE C6 (prior injection; NMSE at t_s={} is {:.4e} < prior-only {:.4e} and < pure-noise {:.4e}): PASS",
        best_interior.0 .0, best_interior.1, prior_only, no_prior
    );
}

// --- criterion 7 ---------------------------------------------------------

#[test]
#[ignore = "desk-scale pipeline (hours on one core); set MADM_ACCEPT_OUT to verify existing artifacts"]
fn c7_sequential_order_insensitivity() {
    let table = ensure_study(Study::Sequential);
    let mode_col = table.column("mode").unwrap();
    let variant_col = table.column("variant").unwrap();
    let psnr_col = table.column("psnr_db").unwrap();
    let mut mvsd: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut avg: Vec<f64> = Vec::new();
    for row in &table.rows {
        if let Ok(Psnr::Db(v)) = Psnr::from_field(&row[psnr_col]) {
            if row[mode_col] == "sequential" {
                mvsd.entry(row[variant_col].clone()).or_default().push(v);
            } else {
                avg.push(v);
            }
        }
    }
    assert!(mvsd.len() >= 3, "need at least three rotation orders");
    let mvsd_medians: Vec<f64> = mvsd.values().map(|v| median_of(v)).collect();
    let avg_median = median_of(&avg);
    let best = mvsd_medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let worst = mvsd_medians.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = best - worst;
    let gap = avg_median - best;
    assert!(
        avg_median >= best,
        "averaging ({avg_median:.3} dB) must match or beat the best order ({best:.3} dB)"
    );
    assert!(
        spread < gap,
        "order spread ({spread:.3} dB) must be smaller than the averaging gap ({gap:.3} dB)"
    );
    println!(
        "ACCEPTANCE C7 (sequential orders; spread {spread:.3} dB < gap {gap:.3} dB, averaging {avg_median:.3} dB >= best order {best:.3} dB): PASS"
    );
}

// --- criterion 8 ---------------------------------------------------------

fn micro_config(out: &Path, workers: usize, slice_batch: usize) -> RunConfig {
    let mut cfg = RunConfig::desk_preset();
    cfg.out_dir = out.to_path_buf();
    cfg.master_seed = 905;
    cfg.dataset.spec.phantom.size = [12, 12, 12];
    cfg.dataset.spec.phantom.n_lesions = [1, 1];
    cfg.dataset.spec.n_train = 3;
    cfg.dataset.spec.n_test = 2;
    cfg.dataset.spec.seed = 31;
    cfg.schedule = madm_core::schedule::ScheduleConfig {
        steps: 8,
        beta_start: 1e-3,
        beta_end: 0.25,
    };
    cfg.context_radius = 1;
    cfg.denoiser.base_channels = 4;
    cfg.denoiser.depth = 1;
    cfg.denoiser.temb_dim = 8;
    cfg.prior.base_channels = 2;
    cfg.prior.depth = 1;
    cfg.train.view =
        madm_core::train::TrainParams { steps: 25, batch_size: 2, lr0: 1e-3, ema_rate: 0.9, log_every: 0, checkpoint_every: 0 };
    cfg.train.prior =
        madm_core::train::TrainParams { steps: 15, batch_size: 1, lr0: 1e-3, ema_rate: 0.9, log_every: 0, checkpoint_every: 0 };
    cfg.seeds = vec![0];
    cfg.sampler.t_start = 3;
    cfg.sampler.slice_batch = slice_batch;
    cfg.sampler.workers = workers;
    cfg.ablate.context_radii = vec![0, 1];
    cfg.ablate.ts_grid = vec![0, 2, 8];
    cfg
}

fn run_micro_end_to_end(cfg: RunConfig) -> PathBuf {
    let out = cfg.out_dir.clone();
    let pipeline = Pipeline::new(cfg).unwrap();
    pipeline.build_dataset(false).unwrap();
    pipeline.train(TrainTarget::All, false).unwrap();
    let variant = Variant::parse("madm", &pipeline.cfg).unwrap();
    pipeline.sample_variant(&variant).unwrap();
    pipeline.sample_variant(&Variant::parse("prior", &pipeline.cfg).unwrap()).unwrap();
    pipeline.ablate(Study::Ts).unwrap();
    pipeline.eval().unwrap();
    out
}

#[test]
fn c8_determinism_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let run_a = run_micro_end_to_end(micro_config(&tmp.path().join("a"), 1, 4));
    let run_b = run_micro_end_to_end(micro_config(&tmp.path().join("b"), 1, 4));
    // identical config + master seed: byte-identical metric CSVs
    for rel in ["eval/metrics.csv", "eval/lesions.csv", "ablate/ts_sweep.csv"] {
        let a = std::fs::read(run_a.join(rel)).unwrap();
        let b = std::fs::read(run_b.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    // sampler output invariant to worker count and slice batch size
    let run_c = run_micro_end_to_end(micro_config(&tmp.path().join("c"), 3, 4));
    let run_d = run_micro_end_to_end(micro_config(&tmp.path().join("d"), 1, 17));
    let variant_dir = "madm_co+sa+ax_t3_s1_seed0";
    for idx in 0..2 {
        let a = std::fs::read(run_a.join("samples").join(variant_dir).join(format!("{idx:03}_pred.madmvol"))).unwrap();
        for (other, what) in [(&run_c, "worker count"), (&run_d, "slice batch")] {
            let o = std::fs::read(
                other.join("samples").join(variant_dir).join(format!("{idx:03}_pred.madmvol")),
            )
            .unwrap();
            assert_eq!(a, o, "prediction {idx} changed with {what}");
        }
    }
    for rel in ["eval/metrics.csv", "ablate/ts_sweep.csv"] {
        let a = std::fs::read(run_a.join(rel)).unwrap();
        for other in [&run_c, &run_d] {
            assert_eq!(a, std::fs::read(other.join(rel)).unwrap(), "{rel} not invariant");
        }
    }
    // provenance embedded in every metric table
    let table = CsvTable::read(&run_a.join("eval/metrics.csv")).unwrap();
    assert!(table.comments.contains_key("config_hash"));
    assert!(table.comments.contains_key("master_seed"));
    assert!(table.comments.contains_key("version"));
    println!("ACCEPTANCE C8 (determinism and provenance): PASS");
}

// --- criterion 9 ---------------------------------------------------------

#[test]
fn c9_sampler_memory_contract() {
    let dims = (10, 10, 10);
    let schedule = NoiseSchedule::linear(20, 1e-3, 0.3).unwrap();
    let mut denoisers = BTreeMap::new();
    for (i, v) in ViewAxis::ALL.into_iter().enumerate() {
        let cfg = Denoiser25DConfig {
            context_radius: 1,
            base_channels: 2,
            depth: 1,
            temb_dim: 8,
            seed: 900 + i as u64,
        };
        denoisers.insert(v, Denoiser25D::<f32>::new_with(cfg, false));
    }
    let prior = Prior3D::<f32>::new_with(Prior3DConfig { base_channels: 2, depth: 1, seed: 7 }, false);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut x = Volume::random_normal(dims, &mut rng);
    x.set_meta_f64("norm_lo", 0.0);
    x.set_meta_f64("norm_hi", 2.0);

    let mut peaks = Vec::new();
    for t_start in [0usize, 1, 10, 20] {
        let mut views: BTreeMap<ViewAxis, &dyn EpsModel> = BTreeMap::new();
        for (v, m) in &denoisers {
            views.insert(*v, m as &dyn EpsModel);
        }
        let bank = ModelBank { views, prior: Some(&prior as &dyn PriorModel) };
        let cfg = SamplerConfig {
            t_start,
            views: ViewAxis::ALL.to_vec(),
            mode: SamplerMode::Averaging,
            sequential_order: None,
            seed: 5,
            use_prior: true,
            slice_batch: 4,
        };
        let (_, stats) = madm_sample(&x, &bank, &schedule, &cfg).unwrap();
        assert!(
            stats.peak_live_volumes <= 7,
            "t_start={t_start}: {} live volumes",
            stats.peak_live_volumes
        );
        peaks.push(stats.peak_live_volumes);
    }
    // independent of t_start (beyond the trivially cheaper t_start = 0)
    assert!(peaks[1..].windows(2).all(|w| w[0] == w[1]), "peaks {peaks:?}");
    println!("ACCEPTANCE C9 (sampler memory contract <= 7 volumes; observed {peaks:?}): PASS");
}

// --- embedding ablation used by criterion 3's architecture property -------

#[test]
fn timestep_embedding_is_only_t_path() {
    // architectural side condition: with the embedding frozen, t has no
    // other route into the network
    let cfg =
        Denoiser25DConfig { context_radius: 1, base_channels: 4, depth: 1, temb_dim: 8, seed: 3 };
    let model = Denoiser25D::<f32>::new_with(cfg, false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xb = Array4::from_shape_fn((1, 4, 8, 8), |_| f32::sample_standard_normal(&mut rng));
    assert_ne!(model.forward_batch(&xb, &[1]), model.forward_batch(&xb, &[5]));
    let frozen = Array2::from_elem((1, 8), 0.3f32);
    assert_eq!(
        model.forward_batch_frozen_temb(&xb, &frozen),
        model.forward_batch_frozen_temb(&xb, &frozen)
    );
}
