//! Config-driven experiment stages: dataset build, the training matrix,
//! variant sampling over the test set, evaluation, and the ablation
//! studies. Stages never silently retrain; missing prerequisites surface
//! as dependency errors naming the absent artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{median_of, EvalReport};
use crate::models::{load_prior, Denoiser25DConfig, Prior3DConfig, ViewModelSet, WeightKind};
use crate::phantom::{build_dataset, Dataset, SamplePair};
use crate::sampler::{self, SamplerConfig, SamplerMode, SampleStats};
use crate::seeding::derive_seed_str;
use crate::store::{self, CsvTable, Manifest};
use crate::train::{train_prior, train_view, TrainJob};
use crate::volume::{ViewAxis, Volume};

use super::config::RunConfig;
use super::plot::{line_plot_svg, Series};
use super::variant::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Prior,
    View(ViewAxis),
    All,
}

impl std::str::FromStr for TrainTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(TrainTarget::Prior),
            "all" => Ok(TrainTarget::All),
            other => Ok(TrainTarget::View(ViewAxis::parse_short(other)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Views,
    Sequential,
    Context,
    Ts,
    All,
}

impl std::str::FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "views" => Ok(Study::Views),
            "sequential" => Ok(Study::Sequential),
            "context" => Ok(Study::Context),
            "ts" => Ok(Study::Ts),
            "all" => Ok(Study::All),
            other => Err(Error::Config(format!(
                "unknown study `{other}` (views|sequential|context|ts|all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitKind {
    Prior,
    View(ViewAxis),
}

#[derive(Debug, Clone, Copy)]
struct TrainUnit {
    kind: UnitKind,
    context_radius: usize,
    seed_idx: usize,
}

impl TrainUnit {
    fn name(&self) -> String {
        match self.kind {
            UnitKind::Prior => format!("prior_seed{}", self.seed_idx),
            UnitKind::View(v) => {
                format!("{v}_s{}_seed{}", self.context_radius, self.seed_idx)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleStatsRecord {
    sample_id: String,
    peak_live_volumes: usize,
    steps_run: usize,
    total_noise_draws: usize,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let hash = cfg.config_hash();
        Ok(Pipeline { cfg, hash })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.cfg.dataset_dir()
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("checkpoints")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("samples")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("eval")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("ablate")
    }

    pub fn comments(&self) -> Vec<(&'static str, String)> {
        vec![
            ("config_hash", self.hash.clone()),
            ("master_seed", self.cfg.master_seed.to_string()),
            ("version", env!("CARGO_PKG_VERSION").to_string()),
        ]
    }

    /// Records the resolved configuration in the output directory for
    /// provenance; refreshed whenever the hash changes.
    pub fn persist_config(&self) -> Result<()> {
        let dir = &self.cfg.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("config.json");
        let needs_write = match RunConfig::load(&path) {
            Ok(existing) => existing.config_hash() != self.hash,
            Err(_) => true,
        };
        if needs_write {
            self.cfg.save(&path)?;
        }
        Ok(())
    }

    // --- dataset -----------------------------------------------------------

    pub fn build_dataset(&self, overwrite: bool) -> Result<()> {
        self.persist_config()?;
        let dir = self.dataset_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        log::info!("building dataset in {}", dir.display());
        build_dataset(&self.cfg.dataset.spec, &dir, overwrite)?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let dir = self.dataset_dir();
        if !dir.join(store::MANIFEST_FILE).exists() {
            return Err(Error::MissingDependency(format!(
                "dataset manifest {} (run `madm dataset` first)",
                dir.join(store::MANIFEST_FILE).display()
            )));
        }
        Dataset::load(&dir)
    }

    // --- training ----------------------------------------------------------

    fn view_ckpt_dir(&self, view: ViewAxis, s: usize, seed_idx: usize) -> PathBuf {
        self.checkpoints_dir().join(format!("{view}_s{s}_seed{seed_idx}"))
    }

    fn prior_ckpt_dir(&self, seed_idx: usize) -> PathBuf {
        self.checkpoints_dir().join(format!("prior_seed{seed_idx}"))
    }

    /// The full training matrix: the default-radius view models and the
    /// prior for every seed, plus the extra context radii for the first
    /// seed only (they feed the context study).
    fn all_units(&self) -> Vec<TrainUnit> {
        let mut units = Vec::new();
        for seed_idx in 0..self.cfg.seeds.len() {
            units.push(TrainUnit { kind: UnitKind::Prior, context_radius: 0, seed_idx });
            for v in &self.cfg.sampler.views {
                units.push(TrainUnit {
                    kind: UnitKind::View(*v),
                    context_radius: self.cfg.context_radius,
                    seed_idx,
                });
            }
        }
        for &s in &self.cfg.ablate.context_radii {
            if s == self.cfg.context_radius {
                continue;
            }
            for v in &self.cfg.sampler.views {
                units.push(TrainUnit { kind: UnitKind::View(*v), context_radius: s, seed_idx: 0 });
            }
        }
        units
    }

    fn unit_done(&self, dir: &Path) -> bool {
        match store::load_manifest(dir) {
            Ok(m) => m.config_hash == self.hash,
            Err(_) => false,
        }
    }

    fn run_unit(&self, dataset: &Dataset, unit: TrainUnit, resume: bool) -> Result<()> {
        let name = unit.name();
        let dir = match unit.kind {
            UnitKind::Prior => self.prior_ckpt_dir(unit.seed_idx),
            UnitKind::View(v) => self.view_ckpt_dir(v, unit.context_radius, unit.seed_idx),
        };
        if self.unit_done(&dir) {
            log::info!("checkpoint {name} is up to date, skipping");
            return Ok(());
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let seed_val = self.cfg.seeds[unit.seed_idx];
        let init_seed = derive_seed_str(self.cfg.master_seed, "init", &format!("{name}/{seed_val}"));
        let data_seed = derive_seed_str(self.cfg.master_seed, "data", &format!("{name}/{seed_val}"));
        let params = match unit.kind {
            UnitKind::Prior => self.cfg.train.prior.clone(),
            UnitKind::View(_) => self.cfg.train.view.clone(),
        };
        let job = TrainJob {
            dataset,
            schedule: self.cfg.schedule.clone(),
            params,
            data_seed,
            out_dir: dir,
            config_hash: self.hash.clone(),
            master_seed: self.cfg.master_seed,
            resume,
            limit_steps: None,
        };
        log::info!("training {name}");
        match unit.kind {
            UnitKind::Prior => train_prior(
                &job,
                Prior3DConfig {
                    base_channels: self.cfg.prior.base_channels,
                    depth: self.cfg.prior.depth,
                    seed: init_seed,
                },
            ),
            UnitKind::View(v) => train_view(
                &job,
                v,
                Denoiser25DConfig {
                    context_radius: unit.context_radius,
                    base_channels: self.cfg.denoiser.base_channels,
                    depth: self.cfg.denoiser.depth,
                    temb_dim: self.cfg.denoiser.temb_dim,
                    seed: init_seed,
                },
            ),
        }
    }

    /// Trains every unit the target covers, skipping up-to-date
    /// checkpoints.
    pub fn train(&self, target: TrainTarget, resume: bool) -> Result<()> {
        self.persist_config()?;
        let dataset = self.load_dataset()?;
        for unit in self.all_units() {
            let wanted = match (target, unit.kind) {
                (TrainTarget::All, _) => true,
                (TrainTarget::Prior, UnitKind::Prior) => true,
                (TrainTarget::View(v), UnitKind::View(u)) => v == u,
                _ => false,
            };
            if wanted {
                self.run_unit(&dataset, unit, resume)?;
            }
        }
        Ok(())
    }

    // --- model loading -----------------------------------------------------

    fn require_dir(&self, dir: &Path, what: &str) -> Result<()> {
        if !dir.join(store::MANIFEST_FILE).exists() {
            return Err(Error::MissingDependency(format!(
                "{what} checkpoint {} (run `madm train` first)",
                dir.display()
            )));
        }
        Ok(())
    }

    fn load_view_set(
        &self,
        views: &[ViewAxis],
        s: usize,
        seed_idx: usize,
        with_prior: bool,
    ) -> Result<ViewModelSet> {
        let mut dirs = BTreeMap::new();
        for &v in views {
            let dir = self.view_ckpt_dir(v, s, seed_idx);
            self.require_dir(&dir, &format!("{v} s={s} seed{seed_idx}"))?;
            store::load_manifest(&dir)?;
            dirs.insert(v, dir);
        }
        let prior_dir = if with_prior {
            let dir = self.prior_ckpt_dir(seed_idx);
            self.require_dir(&dir, &format!("prior seed{seed_idx}"))?;
            store::load_manifest(&dir)?;
            Some(dir)
        } else {
            None
        };
        let set = ViewModelSet::load(&dirs, prior_dir.as_deref())?;
        if set.schedule_cfg != self.cfg.schedule {
            return Err(Error::CorruptArtifact(
                "checkpoint schedule differs from the run config schedule".into(),
            ));
        }
        Ok(set)
    }

    // --- sampling ----------------------------------------------------------

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if self.cfg.sampler.workers > 0 {
            builder = builder.num_threads(self.cfg.sampler.workers);
        }
        builder
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
    }

    fn pred_file(idx: usize) -> String {
        format!("{idx:03}_pred.madmvol")
    }

    /// Samples one variant over the whole test set into
    /// `samples/<variant>/`; skips work that is already present and
    /// up to date. Returns the variant directory.
    pub fn sample_variant(&self, variant: &Variant) -> Result<PathBuf> {
        if *variant == Variant::Input {
            return Err(Error::Config("the input pseudo-variant needs no sampling".into()));
        }
        let dataset = self.load_dataset()?;
        let dir = self.samples_dir().join(variant.dir_name());
        if self.unit_done(&dir) {
            log::info!("samples {} are up to date, skipping", variant.dir_name());
            return Ok(dir);
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        log::info!("sampling variant {}", variant.dir_name());

        let normalized: Vec<Volume> = dataset
            .test
            .iter()
            .map(|p| p.input_normalized())
            .collect::<Result<Vec<_>>>()?;

        let (preds, stats): (Vec<Volume>, Vec<SampleStats>) = match variant {
            Variant::Input => unreachable!(),
            Variant::Prior { seed_idx } => {
                let pdir = self.prior_ckpt_dir(*seed_idx);
                self.require_dir(&pdir, &format!("prior seed{seed_idx}"))?;
                store::load_manifest(&pdir)?;
                let (prior, _) = load_prior(&pdir, WeightKind::Ema)?;
                let preds = normalized
                    .iter()
                    .map(|x| prior.predict_prior(x)?.denormalize())
                    .collect::<Result<Vec<_>>>()?;
                (preds, vec![SampleStats::default(); normalized.len()])
            }
            Variant::Madm { views, t_start, context_radius, seed_idx } => {
                let set = self.load_view_set(views, *context_radius, *seed_idx, true)?;
                let scfg = SamplerConfig {
                    t_start: *t_start,
                    views: views.clone(),
                    mode: SamplerMode::Averaging,
                    sequential_order: None,
                    seed: self.cfg.master_seed,
                    use_prior: true,
                    slice_batch: self.cfg.sampler.slice_batch,
                };
                self.run_sampler(&set, &normalized, &scfg)?
            }
            Variant::NoPrior { views, context_radius, seed_idx } => {
                // pure-noise start at t = T, same averaging machinery
                let set = self.load_view_set(views, *context_radius, *seed_idx, false)?;
                let scfg = SamplerConfig {
                    t_start: self.cfg.schedule.steps,
                    views: views.clone(),
                    mode: SamplerMode::Averaging,
                    sequential_order: None,
                    seed: self.cfg.master_seed,
                    use_prior: false,
                    slice_batch: self.cfg.sampler.slice_batch,
                };
                self.run_sampler(&set, &normalized, &scfg)?
            }
            Variant::Mvsd { order, t_start, context_radius, seed_idx } => {
                let set = self.load_view_set(order, *context_radius, *seed_idx, true)?;
                let scfg = SamplerConfig {
                    t_start: *t_start,
                    views: order.clone(),
                    mode: SamplerMode::Sequential,
                    sequential_order: Some(order.clone()),
                    seed: self.cfg.master_seed,
                    use_prior: true,
                    slice_batch: self.cfg.sampler.slice_batch,
                };
                self.run_sampler(&set, &normalized, &scfg)?
            }
        };

        let mut manifest = Manifest::new("samples", self.cfg.master_seed, &self.hash);
        let mut stat_records = Vec::new();
        for (idx, (pred, stat)) in preds.iter().zip(&stats).enumerate() {
            let rel = Self::pred_file(idx);
            pred.write(&dir.join(&rel))?;
            manifest.add_file(&dir, &rel)?;
            stat_records.push(SampleStatsRecord {
                sample_id: dataset.test[idx].id.clone(),
                peak_live_volumes: stat.peak_live_volumes,
                steps_run: stat.steps_run,
                total_noise_draws: stat.total_noise_draws,
            });
        }
        store::write_json_pretty(&dir.join("stats.json"), &stat_records)?;
        manifest.add_file(&dir, "stats.json")?;
        manifest.payload = serde_json::to_value(variant).expect("serializable variant");
        store::write_manifest(&dir, &manifest)?;
        Ok(dir)
    }

    fn run_sampler(
        &self,
        set: &ViewModelSet,
        inputs: &[Volume],
        scfg: &SamplerConfig,
    ) -> Result<(Vec<Volume>, Vec<SampleStats>)> {
        let pool = self.pool()?;
        let results: Result<Vec<(Volume, SampleStats)>> = pool.install(|| {
            inputs
                .par_iter()
                .map(|x| {
                    let bank = set.bank(&scfg.views)?;
                    let mut c = scfg.clone();
                    c.seed = sampler::per_input_seed(scfg.seed, x);
                    sampler::sample(x, &bank, &set.schedule, &c)
                })
                .collect()
        });
        Ok(results?.into_iter().unzip())
    }

    // --- evaluation --------------------------------------------------------

    fn variant_dirs(&self) -> Result<Vec<String>> {
        let root = self.samples_dir();
        let mut names = Vec::new();
        if root.exists() {
            let entries =
                std::fs::read_dir(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
                if entry.path().join(store::MANIFEST_FILE).exists() {
                    names.push(entry.file_name().to_string_lossy().to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }

    /// Metric rows of one sampled variant against the test targets,
    /// optionally restricted to a dose fraction.
    fn evaluate_variant(
        &self,
        dataset: &Dataset,
        dir_name: &str,
        dose: Option<f64>,
    ) -> Result<EvalReport> {
        let dir = self.samples_dir().join(dir_name);
        if !dir.join(store::MANIFEST_FILE).exists() {
            return Err(Error::MissingDependency(format!(
                "sampled variant {} (run `madm sample` first)",
                dir.display()
            )));
        }
        store::load_manifest(&dir)?;
        let pool = self.pool()?;
        let picked: Vec<(usize, &SamplePair)> = dataset
            .test
            .iter()
            .enumerate()
            .filter(|(_, p)| dose.is_none_or(|d| (p.dose_fraction - d).abs() < 1e-12))
            .collect();
        let partials: Result<Vec<EvalReport>> = pool.install(|| {
            picked
                .par_iter()
                .map(|(idx, pair)| {
                    let pred = Volume::read(&dir.join(Self::pred_file(*idx)))?;
                    let mut r = EvalReport::default();
                    r.evaluate_into(
                        dir_name,
                        &pair.id,
                        pair.dose_fraction,
                        &pred,
                        &pair.target,
                        &pair.lesion_masks,
                    )?;
                    Ok(r)
                })
                .collect()
        });
        let mut report = EvalReport::default();
        for p in partials? {
            report.rows.extend(p.rows);
            report.lesion_rows.extend(p.lesion_rows);
        }
        Ok(report)
    }

    fn evaluate_input(&self, dataset: &Dataset, dose: Option<f64>) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        for pair in &dataset.test {
            if dose.is_some_and(|d| (pair.dose_fraction - d).abs() >= 1e-12) {
                continue;
            }
            report.evaluate_into(
                "input",
                &pair.id,
                pair.dose_fraction,
                &pair.input,
                &pair.target,
                &pair.lesion_masks,
            )?;
        }
        Ok(report)
    }

    /// Evaluates the input plus every sampled variant and writes
    /// `eval/{metrics.csv, lesions.csv, aggregate.json}`.
    pub fn eval(&self) -> Result<PathBuf> {
        let dataset = self.load_dataset()?;
        let variants = self.variant_dirs()?;
        if variants.is_empty() {
            return Err(Error::MissingDependency(format!(
                "no sampled variants under {} (run `madm sample` first)",
                self.samples_dir().display()
            )));
        }
        let mut report = self.evaluate_input(&dataset, None)?;
        for name in &variants {
            log::info!("evaluating {name}");
            let part = self.evaluate_variant(&dataset, name, None)?;
            report.rows.extend(part.rows);
            report.lesion_rows.extend(part.lesion_rows);
        }
        let dir = self.eval_dir();
        report.write(&dir, &self.comments())?;
        Ok(dir)
    }

    // --- ablation studies ---------------------------------------------------

    fn subsets(views: &[ViewAxis]) -> Vec<Vec<ViewAxis>> {
        let mut sorted = views.to_vec();
        sorted.sort();
        let n = sorted.len();
        let mut out = Vec::new();
        for mask in 1u32..(1 << n) {
            let subset: Vec<ViewAxis> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| sorted[i])
                .collect();
            out.push(subset);
        }
        out.sort_by_key(|s| (s.len(), s.clone()));
        out
    }

    fn study_table(&self, header: &[&str]) -> CsvTable {
        let mut t = CsvTable::new(header);
        for (k, v) in self.comments() {
            t.comment(k, v);
        }
        t
    }

    fn metric_fields(row: &crate::metrics::EvalRow) -> [String; 5] {
        [
            row.sample_id.clone(),
            row.psnr.to_field(),
            format!("{:.6}", row.ssim),
            format!("{:.6e}", row.rmse),
            format!("{:.6e}", row.nmse),
        ]
    }

    /// View-subset study: every non-empty subset of the configured views,
    /// for every training seed.
    pub fn study_views(&self) -> Result<PathBuf> {
        let dataset = self.load_dataset()?;
        let dose = Some(self.cfg.ablate.dose);
        let mut table = self.study_table(&[
            "variant", "seed", "views", "n_views", "sample_id", "psnr_db", "ssim", "rmse", "nmse",
        ]);
        for seed_idx in 0..self.cfg.seeds.len() {
            for subset in Self::subsets(&self.cfg.sampler.views) {
                let variant = Variant::Madm {
                    views: subset.clone(),
                    t_start: self.cfg.sampler.t_start,
                    context_radius: self.cfg.context_radius,
                    seed_idx,
                };
                self.sample_variant(&variant)?;
                let rows = self.evaluate_variant(&dataset, &variant.dir_name(), dose)?;
                let views_label =
                    subset.iter().map(|v| v.short_name()).collect::<Vec<_>>().join("+");
                for row in rows.rows {
                    let [sid, psnr, ssim, rmse, nmse] = Self::metric_fields(&row);
                    table.push(vec![
                        variant.dir_name(),
                        seed_idx.to_string(),
                        views_label.clone(),
                        subset.len().to_string(),
                        sid,
                        psnr,
                        ssim,
                        rmse,
                        nmse,
                    ]);
                }
            }
        }
        let dir = self.ablate_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("views.csv");
        table.write(&path)?;
        Ok(path)
    }

    /// Sequential-order study: each configured rotation order plus the
    /// averaging reference, first seed only.
    pub fn study_sequential(&self) -> Result<PathBuf> {
        let dataset = self.load_dataset()?;
        let dose = Some(self.cfg.ablate.dose);
        let mut table = self
            .study_table(&["variant", "mode", "order", "sample_id", "psnr_db", "ssim", "rmse", "nmse"]);
        let avg = Variant::Madm {
            views: self.cfg.sampler.views.clone(),
            t_start: self.cfg.sampler.t_start,
            context_radius: self.cfg.context_radius,
            seed_idx: 0,
        };
        self.sample_variant(&avg)?;
        for row in self.evaluate_variant(&dataset, &avg.dir_name(), dose)?.rows {
            let [sid, psnr, ssim, rmse, nmse] = Self::metric_fields(&row);
            table.push(vec![
                avg.dir_name(),
                "averaging".into(),
                "-".into(),
                sid,
                psnr,
                ssim,
                rmse,
                nmse,
            ]);
        }
        for order in &self.cfg.ablate.sequential_orders {
            let variant = Variant::Mvsd {
                order: order.clone(),
                t_start: self.cfg.sampler.t_start,
                context_radius: self.cfg.context_radius,
                seed_idx: 0,
            };
            self.sample_variant(&variant)?;
            let label = order.iter().map(|v| v.short_name()).collect::<Vec<_>>().join(">");
            for row in self.evaluate_variant(&dataset, &variant.dir_name(), dose)?.rows {
                let [sid, psnr, ssim, rmse, nmse] = Self::metric_fields(&row);
                table.push(vec![
                    variant.dir_name(),
                    "sequential".into(),
                    label.clone(),
                    sid,
                    psnr,
                    ssim,
                    rmse,
                    nmse,
                ]);
            }
        }
        let dir = self.ablate_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("sequential.csv");
        table.write(&path)?;
        Ok(path)
    }

    /// Context-radius study: full-view averaging at each configured `s`.
    pub fn study_context(&self) -> Result<PathBuf> {
        let dataset = self.load_dataset()?;
        let dose = Some(self.cfg.ablate.dose);
        let mut table =
            self.study_table(&["variant", "s", "sample_id", "psnr_db", "ssim", "rmse", "nmse"]);
        for &s in &self.cfg.ablate.context_radii {
            let variant = Variant::Madm {
                views: self.cfg.sampler.views.clone(),
                t_start: self.cfg.sampler.t_start,
                context_radius: s,
                seed_idx: 0,
            };
            self.sample_variant(&variant)?;
            for row in self.evaluate_variant(&dataset, &variant.dir_name(), dose)?.rows {
                let [sid, psnr, ssim, rmse, nmse] = Self::metric_fields(&row);
                table.push(vec![variant.dir_name(), s.to_string(), sid, psnr, ssim, rmse, nmse]);
            }
        }
        let dir = self.ablate_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("context.csv");
        table.write(&path)?;
        Ok(path)
    }

    /// Start-timestep sweep plus the pure-noise full chain; emits the CSV
    /// and an NMSE-vs-t_s plot.
    pub fn study_ts(&self) -> Result<PathBuf> {
        let dataset = self.load_dataset()?;
        let dose = Some(self.cfg.ablate.dose);
        let mut table = self.study_table(&[
            "variant",
            "t_start",
            "use_prior",
            "sample_id",
            "psnr_db",
            "ssim",
            "rmse",
            "nmse",
        ]);
        let mut with_prior_curve: Vec<(f64, f64)> = Vec::new();
        let mut no_prior_point: Option<(f64, f64)> = None;
        for &t in &self.cfg.ablate.ts_grid {
            let variant = Variant::Madm {
                views: self.cfg.sampler.views.clone(),
                t_start: t,
                context_radius: self.cfg.context_radius,
                seed_idx: 0,
            };
            self.sample_variant(&variant)?;
            let rows = self.evaluate_variant(&dataset, &variant.dir_name(), dose)?.rows;
            let nmse_median = median_of(&rows.iter().map(|r| r.nmse).collect::<Vec<_>>());
            with_prior_curve.push((t as f64, nmse_median));
            for row in rows {
                let [sid, psnr, ssim, rmse, nmse] = Self::metric_fields(&row);
                table.push(vec![
                    variant.dir_name(),
                    t.to_string(),
                    "true".into(),
                    sid,
                    psnr,
                    ssim,
                    rmse,
                    nmse,
                ]);
            }
        }
        if self.cfg.ablate.include_no_prior {
            let variant = Variant::NoPrior {
                views: self.cfg.sampler.views.clone(),
                context_radius: self.cfg.context_radius,
                seed_idx: 0,
            };
            self.sample_variant(&variant)?;
            let rows = self.evaluate_variant(&dataset, &variant.dir_name(), dose)?.rows;
            let nmse_median = median_of(&rows.iter().map(|r| r.nmse).collect::<Vec<_>>());
            no_prior_point = Some((self.cfg.schedule.steps as f64, nmse_median));
            for row in rows {
                let [sid, psnr, ssim, rmse, nmse] = Self::metric_fields(&row);
                table.push(vec![
                    variant.dir_name(),
                    self.cfg.schedule.steps.to_string(),
                    "false".into(),
                    sid,
                    psnr,
                    ssim,
                    rmse,
                    nmse,
                ]);
            }
        }
        let dir = self.ablate_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("ts_sweep.csv");
        table.write(&path)?;

        let mut series = vec![Series { label: "noised prior start".into(), points: with_prior_curve }];
        if let Some(p) = no_prior_point {
            series.push(Series { label: "pure-noise start (t=T)".into(), points: vec![p] });
        }
        line_plot_svg(
            &dir.join("ts_sweep.svg"),
            "median test NMSE vs start timestep",
            "start timestep t_s",
            "median NMSE",
            &series,
        )?;
        Ok(path)
    }

    pub fn ablate(&self, study: Study) -> Result<()> {
        match study {
            Study::Views => self.study_views().map(|_| ()),
            Study::Sequential => self.study_sequential().map(|_| ()),
            Study::Context => self.study_context().map(|_| ()),
            Study::Ts => self.study_ts().map(|_| ()),
            Study::All => {
                self.study_views()?;
                self.study_sequential()?;
                self.study_context()?;
                self.study_ts()?;
                Ok(())
            }
        }
    }
}
