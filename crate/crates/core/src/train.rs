//! Training loops for the prior network and the per-view diffusion
//! denoisers: L2 objectives, EMA tracking, linear LR decay to zero, and
//! resumable checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    CheckpointConfig, Denoiser25D, Denoiser25DConfig, NormalizationMeta, Prior3D, Prior3DConfig,
    KIND_DENOISER, KIND_PRIOR, OPTIMIZER_STATE, TRAINING_LOG, WEIGHTS_EMA, WEIGHTS_FINAL,
};
use crate::nn::{mse, mse_grad, Adam, Array5, ParamStore, Scalar};
use crate::phantom::Dataset;
use crate::schedule::{diffuse_arr, NoiseSchedule, ScheduleConfig};
use crate::seeding::derive_seed;
use crate::store::{self, CsvTable, Manifest};
use crate::volume::{ViewAxis, Volume};

/// Optimization hyperparameters shared by both trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub ema_rate: f64,
    pub log_every: usize,
    /// Mid-run checkpoint cadence in steps; 0 checkpoints only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(Error::Config(format!("ema_rate {} outside (0, 1)", self.ema_rate)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        Ok(())
    }

    /// Linear decay to zero: `lr0 * (1 - k/steps)` at 0-based step `k`.
    pub fn lr_at(&self, k: usize) -> f64 {
        self.lr0 * (1.0 - k as f64 / self.steps as f64)
    }
}

/// `ema <- rate * ema + (1 - rate) * new`, per parameter.
pub fn ema_update<F: Scalar>(ema: &mut [F], new: &[F], rate: F) {
    debug_assert_eq!(ema.len(), new.len());
    let one_minus = F::one() - rate;
    for (e, n) in ema.iter_mut().zip(new) {
        *e = rate * *e + one_minus * *n;
    }
}

/// Mean squared error between a prediction volume and its target (Eq
/// uses a mean over voxels so the scale is size-independent).
pub fn prior_loss(pred: &Volume, target: &Volume) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prior_loss: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let mut acc = 0.0f64;
    for (a, b) in pred.data().iter().zip(target.data()) {
        let d = (*a - *b) as f64;
        acc += d * d;
    }
    Ok(acc / pred.data().len() as f64)
}

/// Assembles the denoiser input: channel 0 the noisy slice, then the
/// condition planes.
fn assemble_input<F: Scalar>(noisy: &Array3<F>, cond: &Array4<F>) -> Array4<F> {
    let (n, h, w) = noisy.dim();
    let s_planes = cond.dim().1;
    let mut xb = Array4::zeros((n, 1 + s_planes, h, w));
    xb.slice_mut(ndarray::s![.., 0, .., ..]).assign(noisy);
    xb.slice_mut(ndarray::s![.., 1.., .., ..]).assign(cond);
    xb
}

/// Diffusion training objective for a batch: noise the clean slices to
/// their per-example levels, predict the noise, and take the mean squared
/// error against the true noise. Returns the loss and, when `grads` is
/// given, accumulates parameter gradients.
pub fn diffusion_loss_batch<F: Scalar>(
    model: &Denoiser25D<F>,
    y0: &Array3<F>,
    cond: &Array4<F>,
    t: &[usize],
    eps: &Array3<F>,
    schedule: &NoiseSchedule,
    grads: Option<&mut ParamStore<F>>,
) -> Result<F> {
    let (n, h, w) = y0.dim();
    if eps.dim() != (n, h, w) || cond.dim().0 != n || t.len() != n {
        return Err(Error::ShapeMismatch("diffusion_loss batch shapes disagree".into()));
    }
    if cond.dim().1 != 2 * model.cfg.context_radius + 1 {
        return Err(Error::ShapeMismatch(format!(
            "condition has {} planes, model expects {}",
            cond.dim().1,
            2 * model.cfg.context_radius + 1
        )));
    }
    let mut noisy = Array3::zeros((n, h, w));
    for i in 0..n {
        schedule.check_t(t[i])?;
        let y_t = diffuse_arr(
            &y0.index_axis(ndarray::Axis(0), i).to_owned(),
            t[i],
            &eps.index_axis(ndarray::Axis(0), i).to_owned(),
            schedule,
        )?;
        noisy.index_axis_mut(ndarray::Axis(0), i).assign(&y_t);
    }
    let xb = assemble_input(&noisy, cond);
    let eps4 = eps
        .clone()
        .into_shape_with_order((n, 1, h, w))
        .expect("standard layout");
    match grads {
        None => {
            let eps_hat = model.forward_batch(&xb, t);
            Ok(mse(&eps_hat, &eps4))
        }
        Some(g) => {
            let (eps_hat, cache) = model.net().forward(model.params(), xb, t);
            let loss = mse(&eps_hat, &eps4);
            let dout = mse_grad(&eps_hat, &eps4);
            model.net().backward(model.params(), &cache, &dout, g);
            Ok(loss)
        }
    }
}

/// Single-example diffusion loss (the batched path with n = 1).
pub fn diffusion_loss<F: Scalar>(
    model: &Denoiser25D<F>,
    y0_slice: &Array2<F>,
    cond_planes: &Array3<F>,
    t: usize,
    eps: &Array2<F>,
    schedule: &NoiseSchedule,
) -> Result<F> {
    let (h, w) = y0_slice.dim();
    let y0 = y0_slice.clone().into_shape_with_order((1, h, w)).unwrap();
    let e = eps.clone().into_shape_with_order((1, h, w)).unwrap();
    let (p, hh, ww) = cond_planes.dim();
    let cond = cond_planes.clone().into_shape_with_order((1, p, hh, ww)).unwrap();
    diffusion_loss_batch(model, &y0, &cond, &[t], &e, schedule, None)
}

/// Prior training objective for a batch of volumes.
pub fn prior_loss_batch<F: Scalar>(
    model: &Prior3D<F>,
    x: &Array5<F>,
    target: &Array5<F>,
    grads: Option<&mut ParamStore<F>>,
) -> Result<F> {
    if x.dim() != target.dim() {
        return Err(Error::ShapeMismatch("prior batch shapes disagree".into()));
    }
    match grads {
        None => Ok(mse(&model.forward_volume(x), target)),
        Some(g) => {
            let (pred, cache) = model.net().forward(model.params(), x.clone());
            let loss = mse(&pred, target);
            let dout = mse_grad(&pred, target);
            model.net().backward(model.params(), &cache, &dout, g);
            Ok(loss)
        }
    }
}

/// Uniform draw of `(sample index, slice index, timestep)`.
pub struct ExampleSampler {
    pub n_samples: usize,
    pub extent: usize,
    pub t_max: usize,
}

impl ExampleSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize, usize) {
        let sample = rng.gen_range(0..self.n_samples);
        let slice = rng.gen_range(0..self.extent);
        let t = rng.gen_range(1..=self.t_max);
        (sample, slice, t)
    }
}

// --- optimizer-state persistence ----------------------------------------

const OPT_MAGIC: &[u8; 8] = b"MADMOPT1";

fn write_optimizer(path: &Path, adam: &Adam<f32>) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    let io_err = |e| Error::io(&display, e);
    w.write_all(OPT_MAGIC).map_err(io_err)?;
    w.write_all(&adam.step.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(adam.m.len() as u32).to_le_bytes()).map_err(io_err)?;
    for part in [&adam.m, &adam.v] {
        let mut buf = Vec::with_capacity(part.len() * 4);
        for v in part {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_optimizer(path: &Path) -> Result<Adam<f32>> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&display, e))?);
    let io_err = |e| Error::io(&display, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != OPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad optimizer magic in {display}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io_err)?;
    let step = u64::from_le_bytes(b8);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let n = u32::from_le_bytes(b4) as usize;
    let read_vec = |r: &mut BufReader<File>| -> Result<Vec<f32>> {
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(|e| Error::io(&display, e))?;
        Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let m = read_vec(&mut r)?;
    let v = read_vec(&mut r)?;
    let mut adam = Adam::new(n);
    adam.m = m;
    adam.v = v;
    adam.step = step;
    Ok(adam)
}

// --- training jobs -------------------------------------------------------

/// Everything a single training run needs. Checkpoints land in `out_dir`.
pub struct TrainJob<'a> {
    pub dataset: &'a Dataset,
    pub schedule: ScheduleConfig,
    pub params: TrainParams,
    /// Seed of the training example stream (weights have their own seed
    /// inside the model config).
    pub data_seed: u64,
    pub out_dir: std::path::PathBuf,
    /// Provenance recorded in the log header and manifest.
    pub config_hash: String,
    pub master_seed: u64,
    pub resume: bool,
    /// Optional cap on optimizer steps for this invocation; the run
    /// checkpoints at the cap and can be resumed later.
    pub limit_steps: Option<usize>,
}

fn training_log_table(config_hash: &str, master_seed: u64) -> CsvTable {
    let mut t = CsvTable::new(&["step", "loss", "lr", "wall_time_s"]);
    t.comment("config_hash", config_hash);
    t.comment("master_seed", master_seed);
    t.comment("version", env!("CARGO_PKG_VERSION"));
    t
}

fn normalized_pairs(dataset: &Dataset) -> Result<Vec<(Volume, Volume)>> {
    dataset
        .train
        .iter()
        .map(|p| Ok((p.input_normalized()?, p.target_normalized()?)))
        .collect()
}

fn finalize_checkpoint(
    dir: &Path,
    ckpt: &CheckpointConfig,
    weights: &[f32],
    ema: &[f32],
    adam: &Adam<f32>,
    log: &CsvTable,
    config_hash: &str,
    master_seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    crate::models::write_checkpoint_config(dir, ckpt)?;
    crate::models::write_weights(&dir.join(WEIGHTS_FINAL), weights)?;
    crate::models::write_weights(&dir.join(WEIGHTS_EMA), ema)?;
    write_optimizer(&dir.join(OPTIMIZER_STATE), adam)?;
    log.write(&dir.join(TRAINING_LOG))?;
    let mut manifest = Manifest::new(&ckpt.kind, master_seed, config_hash);
    for f in [crate::models::CHECKPOINT_CONFIG, WEIGHTS_FINAL, WEIGHTS_EMA, OPTIMIZER_STATE, TRAINING_LOG]
    {
        manifest.add_file(dir, f)?;
    }
    store::write_manifest(dir, &manifest)?;
    Ok(())
}

/// Trains one per-view 2.5D denoiser. Each step draws a fresh batch of
/// `(sample, slice index, t, eps)` tuples keyed by `(data_seed, step)`,
/// so interrupted runs resume exactly.
pub fn train_view(job: &TrainJob, axis: ViewAxis, model_cfg: Denoiser25DConfig) -> Result<()> {
    job.params.validate()?;
    let schedule = job.schedule.build()?;
    let pairs = normalized_pairs(job.dataset)?;
    if pairs.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let dims = pairs[0].0.dims();
    if pairs.iter().any(|(a, b)| a.dims() != dims || b.dims() != dims) {
        return Err(Error::ShapeMismatch("training volumes must share dims".into()));
    }
    let extent = axis.extent(dims);
    let (h, w) = axis.slice_shape(dims);
    let s = model_cfg.context_radius;
    let sampler = ExampleSampler { n_samples: pairs.len(), extent, t_max: schedule.steps() };

    let mut model = Denoiser25D::<f32>::new(model_cfg.clone());
    let n_params = model.params().len();
    let mut ema: Vec<f32> = model.params().as_slice().to_vec();
    let mut adam = Adam::<f32>::new(n_params);
    let mut log = training_log_table(&job.config_hash, job.master_seed);
    let mut start_step = 0usize;

    if job.resume && job.out_dir.join(OPTIMIZER_STATE).exists() {
        let weights = crate::models::read_weights(&job.out_dir.join(WEIGHTS_FINAL))?;
        model = Denoiser25D::from_parts(model_cfg.clone(), weights)?;
        ema = crate::models::read_weights(&job.out_dir.join(WEIGHTS_EMA))?;
        adam = read_optimizer(&job.out_dir.join(OPTIMIZER_STATE))?;
        start_step = adam.step as usize;
        if let Ok(existing) = CsvTable::read(&job.out_dir.join(TRAINING_LOG)) {
            log.rows = existing.rows.into_iter().take(start_step).collect();
        }
    }

    let ckpt = CheckpointConfig {
        kind: KIND_DENOISER.into(),
        view: Some(axis),
        denoiser: Some(model_cfg.clone()),
        prior: None,
        schedule: job.schedule.clone(),
        normalization: NormalizationMeta {
            dataset_hash: job.dataset.manifest_hash.clone(),
            scheme: "per-sample [0, p99.5(target)] -> [-1, 1]".into(),
        },
        param_count: model.param_count(),
    };

    let started = Instant::now();
    let mut grads = ParamStore::<f32>::zeros(n_params);
    let b = job.params.batch_size;
    let end_step = match job.limit_steps {
        Some(limit) => job.params.steps.min(start_step + limit),
        None => job.params.steps,
    };
    for k in start_step..end_step {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job.data_seed, "step", k as u64));
        let mut y0 = Array3::<f32>::zeros((b, h, w));
        let mut cond = Array4::<f32>::zeros((b, 2 * s + 1, h, w));
        let mut eps = Array3::<f32>::zeros((b, h, w));
        let mut ts = Vec::with_capacity(b);
        for i in 0..b {
            let (sample, slice, t) = sampler.draw(&mut rng);
            ts.push(t);
            let (input_n, target_n) = &pairs[sample];
            y0.index_axis_mut(ndarray::Axis(0), i)
                .assign(&target_n.extract_slice(axis, slice)?);
            cond.index_axis_mut(ndarray::Axis(0), i)
                .assign(&input_n.extract_stack(axis, slice, s)?.planes);
            for v in eps.index_axis_mut(ndarray::Axis(0), i).iter_mut() {
                *v = rng.sample(rand_distr::StandardNormal);
            }
        }
        grads.fill_zero();
        let loss =
            diffusion_loss_batch(&model, &y0, &cond, &ts, &eps, &schedule, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite diffusion loss at step {k} ({axis}, s={s})"
            )));
        }
        let lr = job.params.lr_at(k);
        adam.update(model.params_mut().as_mut_slice(), grads.as_slice(), lr);
        ema_update(&mut ema, model.params().as_slice(), job.params.ema_rate as f32);
        log.push(vec![
            k.to_string(),
            format!("{loss:.6e}"),
            format!("{lr:.9e}"),
            format!("{:.3}", started.elapsed().as_secs_f64()),
        ]);
        if job.params.log_every > 0 && k % job.params.log_every == 0 {
            log::info!("train {axis} s={s} step {k}/{} loss {loss:.4e}", job.params.steps);
        }
        if job.params.checkpoint_every > 0 && (k + 1) % job.params.checkpoint_every == 0 {
            finalize_checkpoint(
                &job.out_dir,
                &ckpt,
                model.params().as_slice(),
                &ema,
                &adam,
                &log,
                &job.config_hash,
                job.master_seed,
            )?;
        }
    }
    finalize_checkpoint(
        &job.out_dir,
        &ckpt,
        model.params().as_slice(),
        &ema,
        &adam,
        &log,
        &job.config_hash,
        job.master_seed,
    )
}

/// Trains the one-step 3D prior network on whole normalized volumes.
pub fn train_prior(job: &TrainJob, model_cfg: Prior3DConfig) -> Result<()> {
    job.params.validate()?;
    let pairs = normalized_pairs(job.dataset)?;
    if pairs.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let dims = pairs[0].0.dims();
    let mut model = Prior3D::<f32>::new(model_cfg.clone());
    let n_params = model.params().len();
    let mut ema: Vec<f32> = model.params().as_slice().to_vec();
    let mut adam = Adam::<f32>::new(n_params);
    let mut log = training_log_table(&job.config_hash, job.master_seed);
    let mut start_step = 0usize;

    if job.resume && job.out_dir.join(OPTIMIZER_STATE).exists() {
        let weights = crate::models::read_weights(&job.out_dir.join(WEIGHTS_FINAL))?;
        model = Prior3D::from_parts(model_cfg.clone(), weights)?;
        ema = crate::models::read_weights(&job.out_dir.join(WEIGHTS_EMA))?;
        adam = read_optimizer(&job.out_dir.join(OPTIMIZER_STATE))?;
        start_step = adam.step as usize;
        if let Ok(existing) = CsvTable::read(&job.out_dir.join(TRAINING_LOG)) {
            log.rows = existing.rows.into_iter().take(start_step).collect();
        }
    }

    let ckpt = CheckpointConfig {
        kind: KIND_PRIOR.into(),
        view: None,
        denoiser: None,
        prior: Some(model_cfg.clone()),
        schedule: job.schedule.clone(),
        normalization: NormalizationMeta {
            dataset_hash: job.dataset.manifest_hash.clone(),
            scheme: "per-sample [0, p99.5(target)] -> [-1, 1]".into(),
        },
        param_count: model.param_count(),
    };

    let started = Instant::now();
    let mut grads = ParamStore::<f32>::zeros(n_params);
    let b = job.params.batch_size;
    let (d1, d2, d3) = dims;
    let end_step = match job.limit_steps {
        Some(limit) => job.params.steps.min(start_step + limit),
        None => job.params.steps,
    };
    for k in start_step..end_step {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job.data_seed, "step", k as u64));
        let mut x = Array5::<f32>::zeros((b, 1, d1, d2, d3));
        let mut target = Array5::<f32>::zeros((b, 1, d1, d2, d3));
        for i in 0..b {
            let sample = rng.gen_range(0..pairs.len());
            let (input_n, target_n) = &pairs[sample];
            x.slice_mut(ndarray::s![i, 0, .., .., ..]).assign(input_n.data());
            target.slice_mut(ndarray::s![i, 0, .., .., ..]).assign(target_n.data());
        }
        grads.fill_zero();
        let loss = prior_loss_batch(&model, &x, &target, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite prior loss at step {k}")));
        }
        let lr = job.params.lr_at(k);
        adam.update(model.params_mut().as_mut_slice(), grads.as_slice(), lr);
        ema_update(&mut ema, model.params().as_slice(), job.params.ema_rate as f32);
        log.push(vec![
            k.to_string(),
            format!("{loss:.6e}"),
            format!("{lr:.9e}"),
            format!("{:.3}", started.elapsed().as_secs_f64()),
        ]);
        if job.params.log_every > 0 && k % job.params.log_every == 0 {
            log::info!("train prior step {k}/{} loss {loss:.4e}", job.params.steps);
        }
        if job.params.checkpoint_every > 0 && (k + 1) % job.params.checkpoint_every == 0 {
            finalize_checkpoint(
                &job.out_dir,
                &ckpt,
                model.params().as_slice(),
                &ema,
                &adam,
                &log,
                &job.config_hash,
                job.master_seed,
            )?;
        }
    }
    finalize_checkpoint(
        &job.out_dir,
        &ckpt,
        model.params().as_slice(),
        &ema,
        &adam,
        &log,
        &job.config_hash,
        job.master_seed,
    )
}
