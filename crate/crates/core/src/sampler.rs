//! Reverse sampling: prior generation, prior noising to the start level,
//! per-view 2.5D reverse sweeps over a shared noise volume, and per-step
//! multi-view averaging (or the sequential view-rotation variant).
//!
//! Noise draw order is part of the reproducibility contract: the first
//! volume drawn is the prior-noising epsilon (or the pure-noise start),
//! then exactly one `z` volume per timestep with `t > 1`; `z = 0` at the
//! final step.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EpsModel, PriorModel, ViewModelSet};
use crate::schedule::NoiseSchedule;
use crate::seeding::derive_seed_str;
use crate::store::sha256_hex_bytes;
use crate::volume::{assign_slice, slice_of, ViewAxis, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Averaging,
    Sequential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Start timestep of the reverse chain, in `[0, T]`.
    pub t_start: usize,
    /// Non-empty view subset; averaging runs over exactly these views.
    pub views: Vec<ViewAxis>,
    pub mode: SamplerMode,
    /// Required in sequential mode: a permutation of `views` giving the
    /// per-timestep rotation order.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sequential_order: Option<Vec<ViewAxis>>,
    pub seed: u64,
    /// When false the chain starts from pure Gaussian noise at `t = T`.
    pub use_prior: bool,
    /// Slices per model invocation; results are independent of this value.
    pub slice_batch: usize,
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("sampler needs a non-empty view subset".into()));
        }
        let mut sorted = self.views.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.views.len() {
            return Err(Error::Config(format!("duplicate views in {:?}", self.views)));
        }
        if self.t_start > schedule.steps() {
            return Err(Error::TimestepOutOfRange { t: self.t_start, t_max: schedule.steps() });
        }
        if !self.use_prior && self.t_start != schedule.steps() {
            return Err(Error::Config(format!(
                "without a prior the chain must start at t = T = {}, got {}",
                schedule.steps(),
                self.t_start
            )));
        }
        if self.mode == SamplerMode::Sequential {
            let order = self
                .sequential_order
                .as_ref()
                .ok_or_else(|| Error::Config("sequential mode needs sequential_order".into()))?;
            let mut o = order.clone();
            o.sort();
            o.dedup();
            if o != sorted {
                return Err(Error::Config(format!(
                    "sequential_order {:?} is not a permutation of views {:?}",
                    order, self.views
                )));
            }
        }
        if self.slice_batch == 0 {
            return Err(Error::Config("slice_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Instrumentation of one sampling run.
#[derive(Debug, Clone, Default)]
pub struct SampleStats {
    /// Peak number of live volume-sized buffers (input, prior, average,
    /// per-view buffers, z).
    pub peak_live_volumes: usize,
    /// `(t, noise volume draws at that t)`, recorded per reverse step.
    pub noise_draws_per_step: Vec<(usize, usize)>,
    /// Total full-volume noise draws including the start noising.
    pub total_noise_draws: usize,
    pub steps_run: usize,
}

#[derive(Default)]
struct VolumeBudget {
    live: usize,
    peak: usize,
}

impl VolumeBudget {
    fn alloc(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }
    fn free(&mut self, n: usize) {
        self.live -= n;
    }
}

/// Borrowed trained models for one sampling run.
pub struct ModelBank<'a> {
    pub views: BTreeMap<ViewAxis, &'a dyn EpsModel>,
    pub prior: Option<&'a dyn PriorModel>,
}

impl ViewModelSet {
    /// Bank over a view subset of this set.
    pub fn bank(&self, views: &[ViewAxis]) -> Result<ModelBank<'_>> {
        let mut map: BTreeMap<ViewAxis, &dyn EpsModel> = BTreeMap::new();
        for &v in views {
            let model = self.denoisers.get(&v).ok_or_else(|| {
                Error::MissingDependency(format!("no trained denoiser for view {v}"))
            })?;
            map.insert(v, model as &dyn EpsModel);
        }
        Ok(ModelBank {
            views: map,
            prior: self.prior.as_ref().map(|p| p as &dyn PriorModel),
        })
    }
}

fn fill_gaussian(buf: &mut Array3<f32>, rng: &mut ChaCha8Rng) {
    for v in buf.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
}

/// One per-view reverse sweep: for every slice index, predict the noise
/// from the current average plus the condition stack from `x`, and apply
/// the reverse step with the shared `z`.
#[allow(clippy::too_many_arguments)]
fn sweep_view(
    model: &dyn EpsModel,
    view: ViewAxis,
    y_cur: &Array3<f32>,
    x_norm: &Volume,
    z: &Array3<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    slice_batch: usize,
    out: &mut Array3<f32>,
) -> Result<()> {
    let dims = x_norm.dims();
    let s = model.context_radius();
    let extent = view.extent(dims);
    let (h, w) = view.slice_shape(dims);
    let (c_rescale, c_eps, sigma) = schedule.reverse_coeffs(t);
    let (c_rescale, c_eps, sigma) = (c_rescale as f32, c_eps as f32, sigma as f32);
    let channels = 2 * s + 2;
    let mut start = 0usize;
    while start < extent {
        let n = slice_batch.min(extent - start);
        let mut xb = Array4::<f32>::zeros((n, channels, h, w));
        for j in 0..n {
            let i = start + j;
            xb.slice_mut(ndarray::s![j, 0, .., ..]).assign(&slice_of(y_cur, view, i));
            xb.slice_mut(ndarray::s![j, 1.., .., ..])
                .assign(&x_norm.extract_stack(view, i, s)?.planes);
        }
        let eps_hat = model.predict_eps_batch(&xb, t);
        for j in 0..n {
            let i = start + j;
            let y_slice = slice_of(y_cur, view, i);
            let z_slice = slice_of(z, view, i);
            let e_slice = eps_hat.slice(ndarray::s![j, 0, .., ..]);
            let mut new_slice = ndarray::Array2::<f32>::zeros((h, w));
            ndarray::Zip::from(&mut new_slice)
                .and(&y_slice)
                .and(&e_slice)
                .and(&z_slice)
                .for_each(|o, &y, &e, &zz| *o = c_rescale * (y - c_eps * e) + sigma * zz);
            assign_slice(out, view, i, &new_slice.view());
        }
        start += n;
    }
    Ok(())
}

/// Elementwise subset mean computed as `v0 + sum(vi - v0)/k`, so
/// identical inputs average to themselves bit-exactly.
fn average_views(bufs: &BTreeMap<ViewAxis, Array3<f32>>, y: &mut Array3<f32>) {
    let k = bufs.len();
    let mut it = bufs.values();
    let v0 = it.next().expect("non-empty view set");
    if k == 1 {
        y.assign(v0);
        return;
    }
    y.fill(0.0);
    for vi in it {
        ndarray::Zip::from(&mut *y).and(vi).and(v0).for_each(|acc, &a, &b| *acc += a - b);
    }
    let inv = 1.0 / k as f32;
    ndarray::Zip::from(&mut *y).and(v0).for_each(|acc, &b| *acc = *acc * inv + b);
}

fn check_finite(y: &Array3<f32>, t: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite volume after reverse step at t={t}")))
    }
}

fn run_chain(
    x: &Volume,
    bank: &ModelBank<'_>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Volume, SampleStats)> {
    cfg.validate(schedule)?;
    for &v in &cfg.views {
        if !bank.views.contains_key(&v) {
            return Err(Error::MissingDependency(format!("no model bound for view {v}")));
        }
    }
    let radii: Vec<usize> = bank.views.values().map(|m| m.context_radius()).collect();
    if radii.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config("view models disagree on context radius".into()));
    }
    if cfg.use_prior && bank.prior.is_none() {
        return Err(Error::MissingDependency("prior model required by use_prior".into()));
    }

    let mut stats = SampleStats::default();
    let mut budget = VolumeBudget::default();
    budget.alloc(1); // the input volume

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = x.dims();

    let prior_vol: Option<Array3<f32>> = match (cfg.use_prior, &bank.prior) {
        (true, Some(p)) => {
            budget.alloc(1);
            Some(p.predict_volume(x.data()))
        }
        _ => None,
    };

    if cfg.t_start == 0 {
        // empty chain: the prior is the output
        let data = prior_vol.expect("t_start 0 requires the prior");
        stats.peak_live_volumes = budget.peak;
        let out = Volume::from_parts(data, x.meta().clone())?;
        return Ok((out.denormalize()?, stats));
    }

    budget.alloc(2); // current estimate + noise buffer
    let mut y = Array3::<f32>::zeros(dims);
    let mut z = Array3::<f32>::zeros(dims);

    match &prior_vol {
        Some(prior) => {
            // diffuse the prior to the start level
            fill_gaussian(&mut z, &mut rng);
            stats.total_noise_draws += 1;
            let ab = schedule.alpha_bar(cfg.t_start);
            let c0 = ab.sqrt() as f32;
            let c1 = (1.0 - ab).sqrt() as f32;
            ndarray::Zip::from(&mut y)
                .and(prior)
                .and(&z)
                .for_each(|o, &p, &e| *o = c0 * p + c1 * e);
        }
        None => {
            fill_gaussian(&mut y, &mut rng);
            stats.total_noise_draws += 1;
        }
    }

    let mut views_sorted = cfg.views.clone();
    views_sorted.sort();
    let n_view_bufs = match cfg.mode {
        SamplerMode::Averaging => views_sorted.len(),
        SamplerMode::Sequential => 1,
    };
    budget.alloc(n_view_bufs);
    let mut view_bufs: BTreeMap<ViewAxis, Array3<f32>> = match cfg.mode {
        SamplerMode::Averaging => {
            views_sorted.iter().map(|&v| (v, Array3::zeros(dims))).collect()
        }
        SamplerMode::Sequential => BTreeMap::new(),
    };
    let mut seq_buf = match cfg.mode {
        SamplerMode::Sequential => Some(Array3::<f32>::zeros(dims)),
        SamplerMode::Averaging => None,
    };

    for t in (1..=cfg.t_start).rev() {
        let mut draws_this_step = 0usize;
        if t > 1 {
            fill_gaussian(&mut z, &mut rng);
            draws_this_step += 1;
        } else {
            z.fill(0.0);
        }
        stats.total_noise_draws += draws_this_step;
        stats.noise_draws_per_step.push((t, draws_this_step));

        match cfg.mode {
            SamplerMode::Averaging => {
                for &v in &views_sorted {
                    let model = bank.views[&v];
                    let buf = view_bufs.get_mut(&v).expect("buffer per view");
                    sweep_view(model, v, &y, x, &z, t, schedule, cfg.slice_batch, buf)?;
                }
                average_views(&view_bufs, &mut y);
            }
            SamplerMode::Sequential => {
                let order = cfg.sequential_order.as_ref().expect("validated");
                let v = order[(cfg.t_start - t) % order.len()];
                let model = bank.views[&v];
                let buf = seq_buf.as_mut().expect("sequential buffer");
                sweep_view(model, v, &y, x, &z, t, schedule, cfg.slice_batch, buf)?;
                y.assign(buf);
            }
        }
        check_finite(&y, t)?;
        stats.steps_run += 1;
    }

    budget.free(n_view_bufs + 2);
    stats.peak_live_volumes = budget.peak;
    let out = Volume::from_parts(y, x.meta().clone())?;
    Ok((out.denormalize()?, stats))
}

/// Runs the full multi-view averaging chain (Algorithm: prior, prior
/// noising, per-view reverse sweeps sharing one `z` per step, per-step
/// subset averaging). `x` must be normalized with its normalization
/// parameters in metadata; the result is denormalized.
pub fn madm_sample(
    x: &Volume,
    bank: &ModelBank<'_>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Volume, SampleStats)> {
    let mut cfg = cfg.clone();
    cfg.mode = SamplerMode::Averaging;
    run_chain(x, bank, schedule, &cfg)
}

/// Sequential variant: at each timestep exactly one view performs the
/// reverse step, views rotating through `sequential_order`; no averaging.
pub fn mvsd_sample(
    x: &Volume,
    bank: &ModelBank<'_>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Volume, SampleStats)> {
    let mut cfg = cfg.clone();
    cfg.mode = SamplerMode::Sequential;
    if cfg.sequential_order.is_none() {
        cfg.sequential_order = Some(cfg.views.clone());
    }
    run_chain(x, bank, schedule, &cfg)
}

/// Runs the configured sampler mode.
pub fn sample(
    x: &Volume,
    bank: &ModelBank<'_>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<(Volume, SampleStats)> {
    match cfg.mode {
        SamplerMode::Averaging => madm_sample(x, bank, schedule, cfg),
        SamplerMode::Sequential => mvsd_sample(x, bank, schedule, cfg),
    }
}

/// Per-input seed: keyed by the input's voxel content so permuting the
/// batch permutes the outputs, and a fixed master seed reproduces bytes.
pub fn per_input_seed(master: u64, x: &Volume) -> u64 {
    let mut bytes = Vec::with_capacity(x.data().len() * 4 + 24);
    let (d1, d2, d3) = x.dims();
    for d in [d1, d2, d3] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in x.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    derive_seed_str(master, "sample", &sha256_hex_bytes(&bytes))
}

/// Samples a batch of inputs with per-input derived seeds; outputs keep
/// the input order.
pub fn sample_batch(
    inputs: &[Volume],
    bank: &ModelBank<'_>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<(Volume, SampleStats)>> {
    inputs
        .iter()
        .map(|x| {
            let mut c = cfg.clone();
            c.seed = per_input_seed(cfg.seed, x);
            sample(x, bank, schedule, &c)
        })
        .collect()
}
