//! Run configuration: a single JSON document describing the dataset,
//! schedule, models, training, sampling, and ablation grids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{DatasetSpec, PhantomSpec};
use crate::sampler::SamplerMode;
use crate::schedule::ScheduleConfig;
use crate::store;
use crate::train::TrainParams;
use crate::volume::ViewAxis;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory of the dataset; defaults to `<out_dir>/dataset`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<PathBuf>,
    pub spec: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub depth: usize,
    pub temb_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub base_channels: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub view: TrainParams,
    pub prior: TrainParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub t_start: usize,
    pub views: Vec<ViewAxis>,
    pub mode: SamplerMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sequential_order: Option<Vec<ViewAxis>>,
    pub use_prior: bool,
    pub slice_batch: usize,
    /// Worker threads for per-volume parallel sampling/evaluation;
    /// 0 uses the runtime default. Outputs are worker-count invariant.
    #[serde(default)]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Context radii for the 2D-vs-2.5D study.
    pub context_radii: Vec<usize>,
    /// Start-timestep grid for the prior-injection sweep.
    pub ts_grid: Vec<usize>,
    /// Include the pure-noise full chain as the sweep's far-end baseline.
    pub include_no_prior: bool,
    /// View rotation orders for the sequential study.
    pub sequential_orders: Vec<Vec<ViewAxis>>,
    /// Restrict ablation evaluation to this dose fraction.
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub schedule: ScheduleConfig,
    /// Default 2.5D context radius `s`.
    pub context_radius: usize,
    pub denoiser: DenoiserSection,
    pub prior: PriorSection,
    pub train: TrainSection,
    /// Training seed indices; the first is the default for single-seed
    /// stages, all are used by the multi-seed view study.
    pub seeds: Vec<u64>,
    pub sampler: SamplerSection,
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn desk_preset() -> RunConfig {
        use ViewAxis::{Axial as Ax, Coronal as Co, Sagittal as Sa};
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed: 17,
            out_dir: PathBuf::from("runs/desk"),
            dataset: DatasetSection {
                path: None,
                spec: DatasetSpec {
                    phantom: PhantomSpec::default(),
                    n_train: 40,
                    n_test: 10,
                    dose_fractions: vec![0.05],
                    seed: 170,
                    ..DatasetSpec::default()
                },
            },
            // beta_end chosen so alpha_bar(200) is as small as the usual
            // 1000-step schedule's terminal value
            schedule: ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.1 },
            context_radius: 4,
            denoiser: DenoiserSection { base_channels: 8, depth: 2, temb_dim: 32 },
            prior: PriorSection { base_channels: 4, depth: 2 },
            train: TrainSection {
                view: TrainParams {
                    steps: 3000,
                    batch_size: 8,
                    lr0: 2e-4,
                    ema_rate: 0.999,
                    log_every: 200,
                    checkpoint_every: 1000,
                },
                prior: TrainParams {
                    steps: 800,
                    batch_size: 1,
                    lr0: 3e-4,
                    ema_rate: 0.995,
                    log_every: 100,
                    checkpoint_every: 400,
                },
            },
            seeds: vec![0, 1, 2],
            sampler: SamplerSection {
                t_start: 40,
                views: vec![Co, Sa, Ax],
                mode: SamplerMode::Averaging,
                sequential_order: None,
                use_prior: true,
                slice_batch: 16,
                workers: 0,
            },
            ablate: AblateSection {
                context_radii: vec![0, 4, 8],
                ts_grid: vec![0, 10, 25, 40, 70, 200],
                include_no_prior: true,
                sequential_orders: vec![vec![Ax, Co, Sa], vec![Co, Sa, Ax], vec![Sa, Ax, Co]],
                dose: 0.05,
            },
        }
    }

    /// The published protocol at full scale: 1000-step schedule, s = 8,
    /// 200K steps at batch 50, EMA 0.9999, interval-100 sweep.
    pub fn paper_scale_preset() -> RunConfig {
        use ViewAxis::{Axial as Ax, Coronal as Co, Sagittal as Sa};
        let mut cfg = Self::desk_preset();
        cfg.out_dir = PathBuf::from("runs/paper-scale");
        cfg.dataset.spec.phantom.size = [64, 64, 64];
        cfg.dataset.spec.n_train = 120;
        cfg.dataset.spec.n_test = 27;
        cfg.dataset.spec.dose_fractions = vec![0.05, 0.10];
        cfg.schedule = ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 };
        cfg.context_radius = 8;
        cfg.denoiser = DenoiserSection { base_channels: 32, depth: 3, temb_dim: 128 };
        cfg.prior = PriorSection { base_channels: 16, depth: 3 };
        cfg.train = TrainSection {
            view: TrainParams {
                steps: 200_000,
                batch_size: 50,
                lr0: 1e-4,
                ema_rate: 0.9999,
                log_every: 1000,
                checkpoint_every: 10_000,
            },
            prior: TrainParams {
                steps: 200_000,
                batch_size: 4,
                lr0: 1e-4,
                ema_rate: 0.9999,
                log_every: 1000,
                checkpoint_every: 10_000,
            },
        };
        cfg.sampler.t_start = 200;
        cfg.ablate = AblateSection {
            context_radii: vec![0, 4, 8, 12],
            ts_grid: (0..=10).map(|i| i * 100).collect(),
            include_no_prior: true,
            sequential_orders: vec![vec![Ax, Co, Sa], vec![Co, Sa, Ax], vec![Sa, Ax, Co]],
            dose: 0.05,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.dataset.spec.validate()?;
        self.schedule.build()?;
        self.train.view.validate()?;
        self.train.prior.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if self.sampler.views.is_empty() {
            return Err(Error::Config("sampler.views must be non-empty".into()));
        }
        if self.sampler.t_start > self.schedule.steps {
            return Err(Error::Config(format!(
                "sampler.t_start {} exceeds schedule steps {}",
                self.sampler.t_start, self.schedule.steps
            )));
        }
        if self.sampler.slice_batch == 0 {
            return Err(Error::Config("sampler.slice_batch must be positive".into()));
        }
        if self.denoiser.temb_dim < 2 || self.denoiser.temb_dim % 2 != 0 {
            return Err(Error::Config("denoiser.temb_dim must be even and >= 2".into()));
        }
        for &t in &self.ablate.ts_grid {
            if t > self.schedule.steps {
                return Err(Error::Config(format!(
                    "ablate.ts_grid value {t} exceeds schedule steps {}",
                    self.schedule.steps
                )));
            }
        }
        if !self
            .dataset
            .spec
            .dose_fractions
            .iter()
            .any(|&d| (d - self.ablate.dose).abs() < 1e-12)
        {
            return Err(Error::Config(format!(
                "ablate.dose {} is not among dataset dose_fractions {:?}",
                self.ablate.dose, self.dataset.spec.dose_fractions
            )));
        }
        for order in &self.ablate.sequential_orders {
            let mut o = order.clone();
            o.sort();
            o.dedup();
            let mut views = self.sampler.views.clone();
            views.sort();
            if o != views {
                return Err(Error::Config(format!(
                    "sequential order {order:?} is not a permutation of sampler.views"
                )));
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization; embedded in every
    /// output. Storage locations (`out_dir`, `dataset.path`), the worker
    /// count, and the slice batch are execution environment rather than
    /// experiment identity, so they are excluded: runs differing only in
    /// those knobs produce byte-identical artifacts.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        canon.dataset.path = None;
        canon.sampler.workers = 0;
        canon.sampler.slice_batch = 0;
        store::sha256_hex_bytes(
            serde_json::to_string(&canon).expect("serializable config").as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
        let mut de = serde_json::Deserializer::from_slice(&bytes);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            Error::Config(format!("{display}: at `{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json_pretty(path, self)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }
}
