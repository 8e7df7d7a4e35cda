//! Synthetic paired phantoms: a clean target volume with ellipsoidal
//! organs and hot lesions inside a smooth body envelope, and a degraded
//! input that adds depth-dependent attenuation bias plus count-limited
//! Poisson noise and a PSF blur.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{default_radius, smooth3};
use crate::seeding::derive_seed;
use crate::store::{self, Manifest};
use crate::volume::{Meta, Volume, META_DOSE_FRACTION, META_NORM_HI, META_NORM_LO, META_SEED, META_VOXEL_MM};

pub const MAX_DESK_DIM: usize = 128;
const NORM_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub n_organs: [usize; 2],
    pub n_lesions: [usize; 2],
    /// Activity ranges in arbitrary units.
    pub background_intensity: [f32; 2],
    pub organ_intensity: [f32; 2],
    pub lesion_intensity: [f32; 2],
    /// Gaussian blur sigma (voxels) applied to the raw shapes.
    pub shape_sigma: f64,
    pub voxel_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [48, 48, 48],
            n_organs: [3, 6],
            n_lesions: [1, 3],
            background_intensity: [0.3, 0.5],
            organ_intensity: [0.8, 2.0],
            lesion_intensity: [4.0, 8.0],
            shape_sigma: 1.0,
            voxel_mm: 4.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for d in self.size {
            if d == 0 || d > MAX_DESK_DIM {
                return Err(Error::Config(format!(
                    "phantom dim {d} outside 1..={MAX_DESK_DIM}"
                )));
            }
        }
        for (name, r) in [("n_organs", &self.n_organs), ("n_lesions", &self.n_lesions)] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name} range {r:?} is empty")));
            }
        }
        for (name, r) in [
            ("background_intensity", &self.background_intensity),
            ("organ_intensity", &self.organ_intensity),
            ("lesion_intensity", &self.lesion_intensity),
        ] {
            if !(r[0] <= r[1]) || r[0] < 0.0 {
                return Err(Error::Config(format!("{name} range {r:?} invalid")));
            }
        }
        Ok(())
    }
}

/// Degradation model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// Expected counts per unit intensity at dose_fraction = 1.
    pub gain: f64,
    /// Attenuation floor; the field lies in [attenuation_min, 1].
    pub attenuation_min: f64,
    /// Characteristic depth (voxels) of the attenuation falloff.
    pub attenuation_depth: f64,
    /// PSF full width at half maximum, in mm.
    pub psf_fwhm_mm: f64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec { gain: 50.0, attenuation_min: 0.3, attenuation_depth: 12.0, psf_fwhm_mm: 5.0 }
    }
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        self.r2(p) <= 1.0
    }

    fn r2(&self, p: [usize; 3]) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            let d = (p[i] as f64 - self.center[i]) / self.semi_axes[i];
            acc += d * d;
        }
        acc
    }

    fn max_radius(&self) -> f64 {
        self.semi_axes.iter().cloned().fold(0.0, f64::max)
    }
}

/// True if any voxel lies inside both slightly dilated ellipsoids.
fn ellipsoids_touch(a: &Ellipsoid, b: &Ellipsoid, size: [usize; 3]) -> bool {
    const DILATE: f64 = 1.3;
    let quick: f64 = (0..3).map(|i| (a.center[i] - b.center[i]).powi(2)).sum();
    if quick.sqrt() > a.max_radius() + b.max_radius() + 2.0 {
        return false;
    }
    let lo = |i: usize| (b.center[i] - b.semi_axes[i] - 1.0).floor().max(0.0) as usize;
    let hi = |i: usize| ((b.center[i] + b.semi_axes[i] + 1.0).ceil() as usize).min(size[i] - 1);
    for x in lo(0)..=hi(0) {
        for y in lo(1)..=hi(1) {
            for z in lo(2)..=hi(2) {
                let p = [x, y, z];
                if b.r2(p) <= DILATE && a.r2(p) <= DILATE {
                    return true;
                }
            }
        }
    }
    false
}

fn for_each_voxel(size: [usize; 3], mut f: impl FnMut([usize; 3])) {
    for a in 0..size[0] {
        for b in 0..size[1] {
            for c in 0..size[2] {
                f([a, b, c]);
            }
        }
    }
}

/// Generates the clean target and its lesion masks. Deterministic in
/// `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, Vec<Volume>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;

    let body = Ellipsoid {
        center: [
            size[0] as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            size[1] as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            size[2] as f64 / 2.0 + rng.gen_range(-2.0..2.0),
        ],
        semi_axes: [
            size[0] as f64 * rng.gen_range(0.33..0.42),
            size[1] as f64 * rng.gen_range(0.33..0.42),
            size[2] as f64 * rng.gen_range(0.33..0.42),
        ],
    };

    let sample_inside = |rng: &mut ChaCha8Rng, max_r: f64| -> [f64; 3] {
        // rejection sampling keeps shapes well inside the body
        loop {
            let p = [
                rng.gen_range(0.0..size[0] as f64),
                rng.gen_range(0.0..size[1] as f64),
                rng.gen_range(0.0..size[2] as f64),
            ];
            let mut r2 = 0.0;
            for i in 0..3 {
                let d = (p[i] - body.center[i]) / body.semi_axes[i];
                r2 += d * d;
            }
            if r2 <= max_r * max_r {
                return p;
            }
        }
    };

    let uniform = |rng: &mut ChaCha8Rng, r: [f32; 2]| -> f32 {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..r[1])
        }
    };
    let uniform_count = |rng: &mut ChaCha8Rng, r: [usize; 2]| -> usize {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..=r[1])
        }
    };

    let min_dim = size.iter().cloned().min().unwrap() as f64;
    let n_organs = uniform_count(&mut rng, spec.n_organs);
    let mut organs = Vec::with_capacity(n_organs);
    let organ_axis_lo = 2.0;
    let organ_axis_hi = (min_dim / 5.0).max(organ_axis_lo + 0.5);
    for _ in 0..n_organs {
        let center = sample_inside(&mut rng, 0.6);
        let semi_axes = [
            rng.gen_range(organ_axis_lo..organ_axis_hi),
            rng.gen_range(organ_axis_lo..organ_axis_hi),
            rng.gen_range(organ_axis_lo..organ_axis_hi),
        ];
        let intensity = uniform(&mut rng, spec.organ_intensity);
        organs.push((Ellipsoid { center, semi_axes }, intensity));
    }

    let n_lesions = uniform_count(&mut rng, spec.n_lesions);
    let mut lesions: Vec<(Ellipsoid, f32)> = Vec::with_capacity(n_lesions);
    let lesion_axis_lo = 1.6;
    let lesion_axis_hi = 3.0f64.min((min_dim / 6.0).max(lesion_axis_lo + 0.1));
    const MAX_TRIES: usize = 200;
    for k in 0..n_lesions {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let center = sample_inside(&mut rng, 0.65);
            let semi_axes = [
                rng.gen_range(lesion_axis_lo..lesion_axis_hi),
                rng.gen_range(lesion_axis_lo..lesion_axis_hi),
                rng.gen_range(lesion_axis_lo..lesion_axis_hi),
            ];
            let cand = Ellipsoid { center, semi_axes };
            // voxel-level disjointness with a small dilation margin
            let overlaps = lesions.iter().any(|(e, _)| ellipsoids_touch(e, &cand, size));
            if !overlaps {
                let intensity = uniform(&mut rng, spec.lesion_intensity);
                lesions.push((cand, intensity));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailed(format!(
                "could not place lesion {k} of {n_lesions} after {MAX_TRIES} tries (seed {seed})"
            )));
        }
    }

    let background = uniform(&mut rng, spec.background_intensity);
    let dims = (size[0], size[1], size[2]);
    let mut field = Array3::<f32>::zeros(dims);
    let mut body_mask = Array3::<f32>::zeros(dims);
    for_each_voxel(size, |p| {
        if body.contains(p) {
            body_mask[p] = 1.0;
            let mut v = background;
            for (e, intensity) in &organs {
                if e.contains(p) {
                    v = v.max(*intensity);
                }
            }
            for (e, intensity) in &lesions {
                if e.contains(p) {
                    v = v.max(*intensity);
                }
            }
            field[p] = v;
        }
    });

    let mut smoothed = smooth3(&field, spec.shape_sigma, default_radius(spec.shape_sigma));
    // hard body cut: background outside the body stays exactly zero
    smoothed.zip_mut_with(&body_mask, |v, &m| *v *= m);

    let mut meta = Meta::new();
    meta.insert(META_SEED.into(), serde_json::json!(seed));
    meta.insert(META_VOXEL_MM.into(), serde_json::json!(spec.voxel_mm));
    let target = Volume::from_parts(smoothed, meta)?;

    let masks = lesions
        .iter()
        .map(|(e, _)| {
            let mut m = Array3::<f32>::zeros(dims);
            for_each_voxel(size, |p| {
                if e.contains(p) {
                    m[p] = 1.0;
                }
            });
            Volume::new(m)
        })
        .collect::<Result<Vec<_>>>()?;
    for m in &masks {
        debug_assert!(m.data().iter().any(|&v| v > 0.0), "lesion mask must be non-empty");
    }
    Ok((target, masks))
}

/// Depth (in voxels, 6-connectivity) of each voxel from the body surface;
/// non-body voxels have depth 0 and the volume boundary counts as
/// outside.
fn depth_from_surface(body: &Array3<bool>) -> Array3<u32> {
    let (d1, d2, d3) = body.dim();
    let mut depth = Array3::<u32>::zeros((d1, d2, d3));
    let mut queue: VecDeque<(usize, usize, usize)> = VecDeque::new();
    let mut visited = Array3::<bool>::from_elem((d1, d2, d3), false);
    for a in 0..d1 {
        for b in 0..d2 {
            for c in 0..d3 {
                let on_edge = a == 0 || b == 0 || c == 0 || a == d1 - 1 || b == d2 - 1 || c == d3 - 1;
                if !body[[a, b, c]] {
                    depth[[a, b, c]] = 0;
                    visited[[a, b, c]] = true;
                    queue.push_back((a, b, c));
                } else if on_edge {
                    depth[[a, b, c]] = 1;
                    visited[[a, b, c]] = true;
                    queue.push_back((a, b, c));
                }
            }
        }
    }
    while let Some((a, b, c)) = queue.pop_front() {
        let d = depth[[a, b, c]];
        let mut push = |na: isize, nb: isize, nc: isize| {
            if na < 0 || nb < 0 || nc < 0 {
                return;
            }
            let (na, nb, nc) = (na as usize, nb as usize, nc as usize);
            if na >= d1 || nb >= d2 || nc >= d3 || visited[[na, nb, nc]] {
                return;
            }
            visited[[na, nb, nc]] = true;
            depth[[na, nb, nc]] = d + 1;
            queue.push_back((na, nb, nc));
        };
        let (ai, bi, ci) = (a as isize, b as isize, c as isize);
        push(ai - 1, bi, ci);
        push(ai + 1, bi, ci);
        push(ai, bi - 1, ci);
        push(ai, bi + 1, ci);
        push(ai, bi, ci - 1);
        push(ai, bi, ci + 1);
    }
    depth
}

/// Smooth multiplicative attenuation field in `[attenuation_min, 1]`,
/// decreasing with depth from the body surface.
pub fn attenuation_field(target: &Volume, spec: &DegradeSpec) -> Array3<f32> {
    let body = target.data().mapv(|v| v > 0.0);
    let depth = depth_from_surface(&body);
    let a_min = spec.attenuation_min;
    depth.mapv(|d| (a_min + (1.0 - a_min) * (-(d as f64) / spec.attenuation_depth).exp()) as f32)
}

/// Degrades a clean target into a noisy, attenuation-biased input:
/// `blur(rescale(poisson(dose * gain * attenuated)))`.
pub fn degrade(target: &Volume, dose_fraction: f64, seed: u64, spec: &DegradeSpec) -> Result<Volume> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(Error::Config(format!("dose_fraction {dose_fraction} outside (0, 1]")));
    }
    let atten = attenuation_field(target, spec);
    let scale = dose_fraction * spec.gain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Array3::<f32>::zeros(target.dims());
    for (out, (&t, &a)) in counts.iter_mut().zip(target.data().iter().zip(atten.iter())) {
        let lam = scale * (t as f64) * (a as f64);
        if lam > 0.0 {
            let n: f64 = rng.sample(rand_distr::Poisson::new(lam).expect("positive lambda"));
            *out = (n / scale) as f32;
        }
    }
    let voxel_mm = target.meta_f64(META_VOXEL_MM).unwrap_or(4.0);
    let sigma_vox = spec.psf_fwhm_mm / (8.0 * 2f64.ln()).sqrt() / voxel_mm;
    let blurred = smooth3(&counts, sigma_vox, default_radius(sigma_vox));
    let mut meta = target.meta().clone();
    meta.insert(META_DOSE_FRACTION.into(), serde_json::json!(dose_fraction));
    meta.insert(META_SEED.into(), serde_json::json!(seed));
    Volume::from_parts(blurred, meta)
}

// --- dataset -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    pub degrade: DegradeSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Assigned round-robin across samples.
    pub dose_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            phantom: PhantomSpec::default(),
            degrade: DegradeSpec::default(),
            n_train: 40,
            n_test: 10,
            dose_fractions: vec![0.05, 0.10],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("dataset needs at least one train and test sample".into()));
        }
        if self.dose_fractions.is_empty()
            || self.dose_fractions.iter().any(|&d| !(d > 0.0 && d <= 1.0))
        {
            return Err(Error::Config(format!(
                "dose_fractions {:?} must be non-empty, each in (0, 1]",
                self.dose_fractions
            )));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        store::sha256_hex_bytes(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

/// One paired sample: degraded input, clean target, lesion masks.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub input: Volume,
    pub target: Volume,
    pub lesion_masks: Vec<Volume>,
    pub dose_fraction: f64,
    pub seed: u64,
    pub norm_lo: f64,
    pub norm_hi: f64,
}

impl SamplePair {
    pub fn input_normalized(&self) -> Result<Volume> {
        self.input.normalize(self.norm_lo, self.norm_hi)
    }

    pub fn target_normalized(&self) -> Result<Volume> {
        self.target.normalize(self.norm_lo, self.norm_hi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: String,
    pub index: usize,
    pub seed: u64,
    pub dose_fraction: f64,
    pub norm_lo: f64,
    pub norm_hi: f64,
    pub input: String,
    pub target: String,
    pub lesions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetPayload {
    spec: DatasetSpec,
    samples: Vec<SampleRecord>,
}

pub const DATASET_KIND: &str = "dataset";

/// Builds the paired dataset under `out_dir`:
/// `train/NNN_{input,target}.madmvol` plus `train/NNN_lesion_K.madmvol`,
/// same under `test/`, and a verifying `manifest.json`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path, overwrite: bool) -> Result<Manifest> {
    spec.validate()?;
    let manifest_path = out_dir.join(store::MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::AlreadyExists(out_dir.display().to_string()));
    }
    for sub in ["train", "test"] {
        std::fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| Error::io(out_dir.join(sub).display().to_string(), e))?;
    }

    let mut manifest = Manifest::new(DATASET_KIND, spec.seed, &spec.config_hash());
    let mut records = Vec::new();
    for (split, count) in [("train", spec.n_train), ("test", spec.n_test)] {
        for i in 0..count {
            let sample_seed = derive_seed(spec.seed, split, i as u64);
            let (mut target, masks) = generate_phantom(&spec.phantom, sample_seed)?;
            let dose = spec.dose_fractions[i % spec.dose_fractions.len()];
            let mut input =
                degrade(&target, dose, derive_seed(sample_seed, "degrade", 0), &spec.degrade)?;

            // input and target share one affine normalization keyed to the
            // clean target's robust peak
            let norm_hi = target.percentile(NORM_PERCENTILE) as f64;
            if !(norm_hi > 0.0) {
                return Err(Error::GenerationFailed(format!(
                    "{split}/{i}: target has no positive intensity"
                )));
            }
            for v in [&mut target, &mut input] {
                v.set_meta_f64(META_NORM_LO, 0.0);
                v.set_meta_f64(META_NORM_HI, norm_hi);
            }

            let stem = format!("{split}/{i:03}");
            let input_rel = format!("{stem}_input.madmvol");
            let target_rel = format!("{stem}_target.madmvol");
            input.write(&out_dir.join(&input_rel))?;
            target.write(&out_dir.join(&target_rel))?;
            manifest.add_file(out_dir, &input_rel)?;
            manifest.add_file(out_dir, &target_rel)?;
            let mut lesion_rels = Vec::new();
            for (k, mask) in masks.iter().enumerate() {
                let rel = format!("{stem}_lesion_{k}.madmvol");
                mask.write(&out_dir.join(&rel))?;
                manifest.add_file(out_dir, &rel)?;
                lesion_rels.push(rel);
            }
            records.push(SampleRecord {
                id: stem,
                split: split.into(),
                index: i,
                seed: sample_seed,
                dose_fraction: dose,
                norm_lo: 0.0,
                norm_hi,
                input: input_rel,
                target: target_rel,
                lesions: lesion_rels,
            });
        }
    }
    manifest.payload =
        serde_json::to_value(DatasetPayload { spec: spec.clone(), samples: records })
            .expect("serializable payload");
    store::write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// A loaded dataset with verified artifacts.
pub struct Dataset {
    pub dir: PathBuf,
    pub spec: DatasetSpec,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    /// Hash of the manifest file; identifies the dataset for checkpoints.
    pub manifest_hash: String,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = store::load_manifest(dir)?;
        if manifest.kind != DATASET_KIND {
            return Err(Error::CorruptArtifact(format!(
                "{}: kind `{}` is not a dataset",
                dir.display(),
                manifest.kind
            )));
        }
        let payload: DatasetPayload = serde_json::from_value(manifest.payload.clone())
            .map_err(|e| Error::CorruptArtifact(format!("dataset payload: {e}")))?;
        let manifest_hash = store::sha256_hex_file(&dir.join(store::MANIFEST_FILE))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for rec in &payload.samples {
            let input = Volume::read(&dir.join(&rec.input))?;
            let target = Volume::read(&dir.join(&rec.target))?;
            let lesion_masks = rec
                .lesions
                .iter()
                .map(|rel| Volume::read(&dir.join(rel)))
                .collect::<Result<Vec<_>>>()?;
            let pair = SamplePair {
                id: rec.id.clone(),
                input,
                target,
                lesion_masks,
                dose_fraction: rec.dose_fraction,
                seed: rec.seed,
                norm_lo: rec.norm_lo,
                norm_hi: rec.norm_hi,
            };
            match rec.split.as_str() {
                "train" => train.push(pair),
                _ => test.push(pair),
            }
        }
        Ok(Dataset { dir: dir.to_path_buf(), spec: payload.spec, train, test, manifest_hash })
    }

    /// Test samples restricted to one dose fraction.
    pub fn test_at_dose(&self, dose: f64) -> Vec<&SamplePair> {
        self.test.iter().filter(|p| (p.dose_fraction - dose).abs() < 1e-12).collect()
    }
}

/// Per-sample record map keyed by id, for consumers that need metadata
/// without volumes.
pub fn dataset_records(manifest: &Manifest) -> Result<BTreeMap<String, SampleRecord>> {
    let payload: DatasetPayload = serde_json::from_value(manifest.payload.clone())
        .map_err(|e| Error::CorruptArtifact(format!("dataset payload: {e}")))?;
    Ok(payload.samples.into_iter().map(|r| (r.id.clone(), r)).collect())
}
