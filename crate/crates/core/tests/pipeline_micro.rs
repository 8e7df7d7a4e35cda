//! Integration checks of the experiment pipeline at micro scale: the
//! eval identity sentinel, dependency errors, idempotent re-runs, and the
//! one-view study shape.

use std::path::Path;

use madm_core::experiments::{Pipeline, RunConfig, Study, TrainTarget, Variant};
use madm_core::store::{self, CsvTable, Manifest};
use madm_core::volume::{ViewAxis, Volume};
use madm_core::Error;

fn micro_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk_preset();
    cfg.out_dir = out.to_path_buf();
    cfg.master_seed = 41;
    cfg.dataset.spec.phantom.size = [12, 12, 12];
    cfg.dataset.spec.phantom.n_lesions = [1, 1];
    cfg.dataset.spec.n_train = 2;
    cfg.dataset.spec.n_test = 2;
    cfg.dataset.spec.seed = 13;
    cfg.schedule = madm_core::schedule::ScheduleConfig { steps: 6, beta_start: 1e-3, beta_end: 0.3 };
    cfg.context_radius = 1;
    cfg.denoiser.base_channels = 2;
    cfg.denoiser.depth = 1;
    cfg.denoiser.temb_dim = 8;
    cfg.prior.base_channels = 2;
    cfg.prior.depth = 1;
    cfg.train.view = madm_core::train::TrainParams {
        steps: 8,
        batch_size: 2,
        lr0: 1e-3,
        ema_rate: 0.9,
        log_every: 0,
        checkpoint_every: 0,
    };
    cfg.train.prior = cfg.train.view.clone();
    cfg.seeds = vec![0];
    cfg.sampler.t_start = 2;
    cfg.sampler.slice_batch = 4;
    cfg.ablate.context_radii = vec![1];
    cfg.ablate.ts_grid = vec![0, 2];
    cfg
}

#[test]
fn eval_reports_identity_sentinel_for_target_copies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let pipeline = Pipeline::new(cfg).unwrap();
    pipeline.build_dataset(false).unwrap();
    let dataset = pipeline.load_dataset().unwrap();

    // fabricate a variant whose predictions are exact copies of the targets
    let dir = pipeline.samples_dir().join("identity");
    std::fs::create_dir_all(&dir).unwrap();
    let mut manifest = Manifest::new("samples", 41, &pipeline.hash);
    for (idx, pair) in dataset.test.iter().enumerate() {
        let rel = format!("{idx:03}_pred.madmvol");
        pair.target.write(&dir.join(&rel)).unwrap();
        manifest.add_file(&dir, &rel).unwrap();
    }
    store::write_manifest(&dir, &manifest).unwrap();

    let eval_dir = pipeline.eval().unwrap();
    let table = CsvTable::read(&eval_dir.join("metrics.csv")).unwrap();
    let m = table.column("method").unwrap();
    let psnr = table.column("psnr_db").unwrap();
    let rmse = table.column("rmse").unwrap();
    let identity_rows: Vec<_> =
        table.rows.iter().filter(|r| r[m] == "identity").collect();
    assert_eq!(identity_rows.len(), 2);
    for row in identity_rows {
        assert_eq!(row[psnr], "identical");
        assert_eq!(row[rmse].parse::<f64>().unwrap(), 0.0);
    }
    // the degraded input is always evaluated alongside
    assert!(table.rows.iter().any(|r| r[m] == "input"));
}

#[test]
fn one_view_config_yields_single_variant_study() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(tmp.path());
    cfg.sampler.views = vec![ViewAxis::Axial];
    cfg.ablate.sequential_orders = vec![vec![ViewAxis::Axial]];
    let pipeline = Pipeline::new(cfg).unwrap();
    pipeline.build_dataset(false).unwrap();
    pipeline.train(TrainTarget::All, false).unwrap();
    let path = pipeline.study_views().unwrap();
    let table = CsvTable::read(&path).unwrap();
    let views_col = table.column("views").unwrap();
    let variants: std::collections::BTreeSet<String> =
        table.rows.iter().map(|r| r[views_col].clone()).collect();
    assert_eq!(variants.len(), 1, "one-view config must produce exactly one subset");
    assert!(variants.contains("ax"));
    assert_eq!(table.rows.len(), 2, "one subset x two test samples");
}

#[test]
fn stages_fail_loudly_on_missing_prerequisites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let pipeline = Pipeline::new(cfg).unwrap();
    // no dataset yet
    match pipeline.train(TrainTarget::All, false) {
        Err(Error::MissingDependency(msg)) => assert!(msg.contains("dataset"), "{msg}"),
        other => panic!("expected missing dataset, got {other:?}"),
    }
    pipeline.build_dataset(false).unwrap();
    // no checkpoints yet
    let variant = Variant::parse("madm", &pipeline.cfg).unwrap();
    match pipeline.sample_variant(&variant) {
        Err(Error::MissingDependency(msg)) => assert!(msg.contains("checkpoint"), "{msg}"),
        other => panic!("expected missing checkpoint, got {other:?}"),
    }
    // no samples yet
    match pipeline.eval() {
        Err(Error::MissingDependency(msg)) => assert!(msg.contains("variant"), "{msg}"),
        other => panic!("expected missing samples, got {other:?}"),
    }
    // report needs eval
    match pipeline.report() {
        Err(Error::MissingDependency(msg)) => assert!(msg.contains("eval"), "{msg}"),
        other => panic!("expected missing eval, got {other:?}"),
    }
}

#[test]
fn stages_are_idempotent_and_never_silently_retrain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let pipeline = Pipeline::new(cfg).unwrap();
    pipeline.build_dataset(false).unwrap();
    pipeline.train(TrainTarget::All, false).unwrap();

    let ckpt = pipeline.checkpoints_dir().join("prior_seed0").join("weights.bin");
    let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    // re-running training skips finished units (weights untouched)
    pipeline.train(TrainTarget::All, false).unwrap();
    let after = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    assert_eq!(before, after, "training must not silently redo finished work");

    // sampling twice reuses the first run's artifacts
    let variant = Variant::parse("madm", &pipeline.cfg).unwrap();
    let dir = pipeline.sample_variant(&variant).unwrap();
    let pred = dir.join("000_pred.madmvol");
    let before = std::fs::metadata(&pred).unwrap().modified().unwrap();
    pipeline.sample_variant(&variant).unwrap();
    let after = std::fs::metadata(&pred).unwrap().modified().unwrap();
    assert_eq!(before, after);

    // ablation over a single study works end to end
    pipeline.ablate(Study::Ts).unwrap();
    assert!(pipeline.ablate_dir().join("ts_sweep.csv").exists());
    assert!(pipeline.ablate_dir().join("ts_sweep.svg").exists());
    // dataset rebuild without overwrite is refused
    assert!(matches!(pipeline.build_dataset(false), Err(Error::AlreadyExists(_))));
}
