//! The two learnable function families: per-view 2.5D conditional
//! denoisers and the one-step 3D prior network, plus checkpoint IO and the
//! trained-model bundle the sampler consumes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Array5, ParamStore, Scalar, Unet2d, Unet2dConfig, Unet3d, Unet3dConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::volume::{SliceStack, ViewAxis, Volume};

/// Configuration of a per-view 2.5D conditional denoiser. Input channels
/// are the noisy target slice plus the `(2s+1)`-plane condition stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denoiser25DConfig {
    pub context_radius: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub temb_dim: usize,
    pub seed: u64,
}

impl Denoiser25DConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.context_radius + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prior3DConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub seed: u64,
}

/// A 2.5D conditional denoiser with its weights.
pub struct Denoiser25D<F> {
    pub cfg: Denoiser25DConfig,
    net: Unet2d,
    params: ParamStore<F>,
}

impl<F: Scalar> Denoiser25D<F> {
    pub fn new(cfg: Denoiser25DConfig) -> Self {
        Self::new_with(cfg, true)
    }

    /// `zero_head` zeroes the output convolution (fresh models predict
    /// zero noise); tests that need a nontrivial output pass `false`.
    pub fn new_with(cfg: Denoiser25DConfig, zero_head: bool) -> Self {
        let net = Unet2d::build(Unet2dConfig {
            in_channels: cfg.input_channels(),
            out_channels: 1,
            base_channels: cfg.base_channels,
            depth: cfg.depth,
            temb_dim: Some(cfg.temb_dim),
        });
        let mut params = ParamStore::zeros(net.param_len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        net.init(&mut params, &mut rng, zero_head);
        Denoiser25D { cfg, net, params }
    }

    pub fn from_parts(cfg: Denoiser25DConfig, weights: Vec<F>) -> Result<Self> {
        let net = Unet2d::build(Unet2dConfig {
            in_channels: cfg.input_channels(),
            out_channels: 1,
            base_channels: cfg.base_channels,
            depth: cfg.depth,
            temb_dim: Some(cfg.temb_dim),
        });
        if weights.len() != net.param_len() {
            return Err(Error::Checkpoint(format!(
                "weight count {} does not match model ({} params)",
                weights.len(),
                net.param_len()
            )));
        }
        Ok(Denoiser25D { cfg, net, params: ParamStore::from_vec(weights) })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn net(&self) -> &Unet2d {
        &self.net
    }

    /// Batched inference; channel 0 of `xb` is the noisy slice, the rest
    /// the condition stack. One timestep per batch element.
    pub fn forward_batch(&self, xb: &Array4<F>, t: &[usize]) -> Array4<F> {
        self.net.infer(&self.params, xb, t)
    }

    /// Ablation hook: inference with the timestep embedding activation
    /// pinned to a constant vector.
    pub fn forward_batch_frozen_temb(&self, xb: &Array4<F>, e_act: &Array2<F>) -> Array4<F> {
        self.net.infer_with_temb_override(&self.params, xb, Some(e_act))
    }
}

impl Denoiser25D<f32> {
    /// Predicts the noise component of one noisy slice given its 2.5D
    /// condition stack.
    pub fn predict_eps(
        &self,
        noisy: &Array2<f32>,
        condition: &SliceStack,
        t: usize,
    ) -> Result<Array2<f32>> {
        if condition.radius != self.cfg.context_radius {
            return Err(Error::ShapeMismatch(format!(
                "condition radius {} but model expects {}",
                condition.radius, self.cfg.context_radius
            )));
        }
        let (h, w) = noisy.dim();
        if condition.planes.dim().1 != h || condition.planes.dim().2 != w {
            return Err(Error::ShapeMismatch(format!(
                "noisy slice {:?} vs condition planes {:?}",
                noisy.dim(),
                condition.planes.dim()
            )));
        }
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, t_max: usize::MAX });
        }
        let mut xb = Array4::zeros((1, self.cfg.input_channels(), h, w));
        xb.slice_mut(ndarray::s![0, 0, .., ..]).assign(noisy);
        xb.slice_mut(ndarray::s![0, 1.., .., ..]).assign(&condition.planes);
        let y = self.forward_batch(&xb, &[t]);
        Ok(y.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

/// Model interface the sampler sweeps slices through.
pub trait EpsModel: Sync {
    fn context_radius(&self) -> usize;
    /// `xb` is `[n, 2s+2, h, w]` with channel 0 the noisy slice; all batch
    /// elements share the timestep.
    fn predict_eps_batch(&self, xb: &Array4<f32>, t: usize) -> Array4<f32>;
}

impl EpsModel for Denoiser25D<f32> {
    fn context_radius(&self) -> usize {
        self.cfg.context_radius
    }

    fn predict_eps_batch(&self, xb: &Array4<f32>, t: usize) -> Array4<f32> {
        let ts = vec![t; xb.dim().0];
        self.forward_batch(xb, &ts)
    }
}

/// One-step volume-to-volume prior network.
pub struct Prior3D<F> {
    pub cfg: Prior3DConfig,
    net: Unet3d,
    params: ParamStore<F>,
}

impl<F: Scalar> Prior3D<F> {
    pub fn new(cfg: Prior3DConfig) -> Self {
        Self::new_with(cfg, true)
    }

    pub fn new_with(cfg: Prior3DConfig, zero_head: bool) -> Self {
        let net = Unet3d::build(Unet3dConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: cfg.base_channels,
            depth: cfg.depth,
        });
        let mut params = ParamStore::zeros(net.param_len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        net.init(&mut params, &mut rng, zero_head);
        Prior3D { cfg, net, params }
    }

    pub fn from_parts(cfg: Prior3DConfig, weights: Vec<F>) -> Result<Self> {
        let net = Unet3d::build(Unet3dConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: cfg.base_channels,
            depth: cfg.depth,
        });
        if weights.len() != net.param_len() {
            return Err(Error::Checkpoint(format!(
                "weight count {} does not match model ({} params)",
                weights.len(),
                net.param_len()
            )));
        }
        Ok(Prior3D { cfg, net, params: ParamStore::from_vec(weights) })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn net(&self) -> &Unet3d {
        &self.net
    }

    pub fn forward_volume(&self, xb: &Array5<F>) -> Array5<F> {
        self.net.infer(&self.params, xb)
    }
}

impl Prior3D<f32> {
    /// One-step prior estimate of the clean target; dims and metadata are
    /// preserved.
    pub fn predict_prior(&self, x: &Volume) -> Result<Volume> {
        let (d1, d2, d3) = x.dims();
        let mut xb = Array5::zeros((1, 1, d1, d2, d3));
        xb.slice_mut(ndarray::s![0, 0, .., .., ..]).assign(x.data());
        let y = self.forward_volume(&xb);
        let data = y.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned();
        Volume::from_parts(data, x.meta().clone())
    }
}

pub trait PriorModel: Sync {
    fn predict_volume(&self, x: &Array3<f32>) -> Array3<f32>;
}

impl PriorModel for Prior3D<f32> {
    fn predict_volume(&self, x: &Array3<f32>) -> Array3<f32> {
        let (d1, d2, d3) = x.dim();
        let mut xb = Array5::zeros((1, 1, d1, d2, d3));
        xb.slice_mut(ndarray::s![0, 0, .., .., ..]).assign(x);
        let y = self.forward_volume(&xb);
        y.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned()
    }
}

// --- checkpoint format -------------------------------------------------

pub const CHECKPOINT_CONFIG: &str = "config.json";
pub const WEIGHTS_FINAL: &str = "weights.bin";
pub const WEIGHTS_EMA: &str = "weights_ema.bin";
pub const OPTIMIZER_STATE: &str = "optimizer.bin";
pub const TRAINING_LOG: &str = "training_log.csv";

const WEIGHTS_MAGIC: &[u8; 8] = b"MADMWTS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationMeta {
    /// Config hash of the dataset manifest the model was trained against.
    pub dataset_hash: String,
    pub scheme: String,
}

/// `config.json` contents of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub view: Option<ViewAxis>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub denoiser: Option<Denoiser25DConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prior: Option<Prior3DConfig>,
    pub schedule: ScheduleConfig,
    pub normalization: NormalizationMeta,
    pub param_count: usize,
}

pub const KIND_DENOISER: &str = "denoiser2p5d";
pub const KIND_PRIOR: &str = "prior3d";

pub fn write_weights(path: &Path, weights: &[f32]) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    let io_err = |e| Error::io(&display, e);
    w.write_all(WEIGHTS_MAGIC).map_err(io_err)?;
    w.write_all(&(weights.len() as u32).to_le_bytes()).map_err(io_err)?;
    let mut buf = Vec::with_capacity(weights.len() * 4);
    for v in weights {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_weights(path: &Path) -> Result<Vec<f32>> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(&display, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(&display, e))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Checkpoint(format!("bad weights magic in {display}")));
    }
    let mut nb = [0u8; 4];
    r.read_exact(&mut nb).map_err(|e| Error::io(&display, e))?;
    let n = u32::from_le_bytes(nb) as usize;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|e| Error::io(&display, e))?;
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_checkpoint_config(dir: &Path, cfg: &CheckpointConfig) -> Result<()> {
    let path = dir.join(CHECKPOINT_CONFIG);
    let display = path.display().to_string();
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Json { path: display.clone(), source: e })?;
    std::fs::write(&path, json).map_err(|e| Error::io(&display, e))
}

pub fn read_checkpoint_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join(CHECKPOINT_CONFIG);
    let display = path.display().to_string();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: display, source: e })
}

/// Which weight set to load. Sampling consumes EMA weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Final,
    Ema,
}

impl WeightKind {
    fn file(self) -> &'static str {
        match self {
            WeightKind::Final => WEIGHTS_FINAL,
            WeightKind::Ema => WEIGHTS_EMA,
        }
    }
}

pub fn load_denoiser(dir: &Path, kind: WeightKind) -> Result<(Denoiser25D<f32>, CheckpointConfig)> {
    let cfg = read_checkpoint_config(dir)?;
    if cfg.kind != KIND_DENOISER {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` checkpoint, expected `{KIND_DENOISER}`",
            dir.display(),
            cfg.kind
        )));
    }
    let mcfg = cfg
        .denoiser
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} missing denoiser config", dir.display())))?;
    let weights = read_weights(&dir.join(kind.file()))?;
    let model = Denoiser25D::from_parts(mcfg, weights)?;
    Ok((model, cfg))
}

pub fn load_prior(dir: &Path, kind: WeightKind) -> Result<(Prior3D<f32>, CheckpointConfig)> {
    let cfg = read_checkpoint_config(dir)?;
    if cfg.kind != KIND_PRIOR {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` checkpoint, expected `{KIND_PRIOR}`",
            dir.display(),
            cfg.kind
        )));
    }
    let mcfg = cfg
        .prior
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} missing prior config", dir.display())))?;
    let weights = read_weights(&dir.join(kind.file()))?;
    let model = Prior3D::from_parts(mcfg, weights)?;
    Ok((model, cfg))
}

/// Trained EMA denoisers keyed by view, plus the prior, all validated to
/// share one schedule, context radius, and normalization.
pub struct ViewModelSet {
    pub denoisers: BTreeMap<ViewAxis, Denoiser25D<f32>>,
    pub prior: Option<Prior3D<f32>>,
    pub schedule: NoiseSchedule,
    pub schedule_cfg: ScheduleConfig,
    pub context_radius: usize,
    pub normalization: NormalizationMeta,
}

impl ViewModelSet {
    /// Loads EMA weights from per-view checkpoint dirs plus an optional
    /// prior checkpoint. The view subset must be non-empty.
    pub fn load(
        view_dirs: &BTreeMap<ViewAxis, std::path::PathBuf>,
        prior_dir: Option<&Path>,
    ) -> Result<ViewModelSet> {
        if view_dirs.is_empty() {
            return Err(Error::Config("empty view subset".into()));
        }
        let mut denoisers = BTreeMap::new();
        let mut common: Option<(ScheduleConfig, usize, NormalizationMeta)> = None;
        for (&axis, dir) in view_dirs {
            let (model, ckpt) = load_denoiser(dir, WeightKind::Ema)?;
            if ckpt.view != Some(axis) {
                return Err(Error::Checkpoint(format!(
                    "{} trained for {:?}, requested {axis}",
                    dir.display(),
                    ckpt.view
                )));
            }
            let this = (ckpt.schedule.clone(), model.cfg.context_radius, ckpt.normalization.clone());
            match &common {
                None => common = Some(this),
                Some(c) => {
                    if *c != this {
                        return Err(Error::Checkpoint(format!(
                            "checkpoint {} disagrees on schedule/radius/normalization",
                            dir.display()
                        )));
                    }
                }
            }
            denoisers.insert(axis, model);
        }
        let (schedule_cfg, context_radius, normalization) = common.unwrap();
        let prior = match prior_dir {
            Some(dir) => {
                let (p, ckpt) = load_prior(dir, WeightKind::Ema)?;
                if ckpt.schedule != schedule_cfg || ckpt.normalization != normalization {
                    return Err(Error::Checkpoint(format!(
                        "prior checkpoint {} disagrees on schedule/normalization",
                        dir.display()
                    )));
                }
                Some(p)
            }
            None => None,
        };
        let schedule = schedule_cfg.build()?;
        Ok(ViewModelSet { denoisers, prior, schedule, schedule_cfg, context_radius, normalization })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn small_cfg() -> Denoiser25DConfig {
        Denoiser25DConfig { context_radius: 1, base_channels: 4, depth: 1, temb_dim: 8, seed: 3 }
    }

    #[test]
    fn predict_eps_contract() {
        let model = Denoiser25D::<f32>::new_with(small_cfg(), false);
        let vol = {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
            Volume::random_normal((6, 8, 6), &mut rng)
        };
        let noisy = vol.extract_slice(ViewAxis::Coronal, 2).unwrap();
        let cond = vol.extract_stack(ViewAxis::Coronal, 2, 1).unwrap();
        let out = model.predict_eps(&noisy, &cond, 3).unwrap();
        assert_eq!(out.dim(), noisy.dim());
        // deterministic under fixed weights
        let out2 = model.predict_eps(&noisy, &cond, 3).unwrap();
        assert_eq!(out, out2);
        // bounded on unit-gaussian inputs at init
        let mean_abs = out.iter().map(|v| v.abs() as f64).sum::<f64>() / out.len() as f64;
        assert!(mean_abs.is_finite() && mean_abs < 10.0);
        // radius mismatch rejected
        let bad = vol.extract_stack(ViewAxis::Coronal, 2, 2).unwrap();
        assert!(model.predict_eps(&noisy, &bad, 3).is_err());
    }

    #[test]
    fn zero_head_model_predicts_zero_noise() {
        let model = Denoiser25D::<f32>::new(small_cfg());
        let xb = Array4::from_elem((2, 4, 8, 8), 0.5f32);
        let y = model.forward_batch(&xb, &[1, 2]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract_for_non_square_slices() {
        let model = Denoiser25D::<f32>::new_with(small_cfg(), false);
        for (h, w) in [(48, 48), (64, 48), (10, 6)] {
            let xb = Array4::from_elem((1, 4, h, w), 0.1f32);
            let y = model.forward_batch(&xb, &[5]);
            assert_eq!(y.dim(), (1, 1, h, w));
        }
    }

    #[test]
    fn prior_preserves_dims_and_is_deterministic() {
        let cfg = Prior3DConfig { base_channels: 2, depth: 1, seed: 9 };
        let model = Prior3D::<f32>::new_with(cfg, false);
        let v = {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            Volume::random_normal((6, 5, 7), &mut rng)
        };
        let a = model.predict_prior(&v).unwrap();
        assert_eq!(a.dims(), v.dims());
        let b = model.predict_prior(&v).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Denoiser25D::<f32>::new_with(small_cfg(), false);
        let path = dir.path().join(WEIGHTS_FINAL);
        write_weights(&path, model.params().as_slice()).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(back, model.params().as_slice());

        let rebuilt = Denoiser25D::from_parts(model.cfg.clone(), back).unwrap();
        let xb = Array4::from_elem((1, 4, 8, 8), 0.3f32);
        assert_eq!(model.forward_batch(&xb, &[2]), rebuilt.forward_batch(&xb, &[2]));
    }

    #[test]
    fn param_count_reproducible_from_config() {
        let a = Denoiser25D::<f32>::new(small_cfg());
        let b = Denoiser25D::<f32>::new(small_cfg());
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.param_count(), a.params().len());
    }

    #[test]
    fn timestep_embedding_is_sole_t_dependence() {
        let model = Denoiser25D::<f32>::new_with(small_cfg(), false);
        let xb = {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
            Array4::from_shape_fn((1, 4, 8, 8), |_| {
                <f32 as crate::nn::Scalar>::sample_standard_normal(&mut rng)
            })
        };
        let y1 = model.forward_batch(&xb, &[1]);
        let y2 = model.forward_batch(&xb, &[9]);
        assert_ne!(y1, y2);
        let frozen = Array2::from_elem((1, 8), 0.1f32);
        let a = model.forward_batch_frozen_temb(&xb, &frozen);
        let b = model.forward_batch_frozen_temb(&xb, &frozen);
        assert_eq!(a, b);
        let _ = y1.index_axis(Axis(0), 0);
    }
}
