//! The 3D data model: volumes, view-axis slicing, 2.5D stack extraction,
//! normalization, and the `.madmvol` file format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Free-form volume metadata (voxel spacing, normalization parameters,
/// dose fraction, ...). A `BTreeMap` keeps serialization deterministic.
pub type Meta = BTreeMap<String, serde_json::Value>;

pub const META_NORM_LO: &str = "norm_lo";
pub const META_NORM_HI: &str = "norm_hi";
pub const META_VOXEL_MM: &str = "voxel_mm";
pub const META_DOSE_FRACTION: &str = "dose_fraction";
pub const META_SEED: &str = "seed";

const MAGIC: &[u8; 8] = b"MADMVOL1";
const MAX_META_BYTES: u32 = 16 << 20;

/// A 3D scalar field with dims `(d1, d2, d3)`, stored row-major
/// (d1 outermost). Voxels are finite f32 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    meta: Meta,
}

/// Slicing direction. Coronal slices along dim 1 (`v[i,:,:]`), sagittal
/// along dim 2 (`v[:,i,:]`), axial along dim 3 (`v[:,:,i]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    Coronal,
    Sagittal,
    Axial,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Coronal, ViewAxis::Sagittal, ViewAxis::Axial];

    pub fn axis_index(self) -> usize {
        match self {
            ViewAxis::Coronal => 0,
            ViewAxis::Sagittal => 1,
            ViewAxis::Axial => 2,
        }
    }

    /// Number of slices along this axis.
    pub fn extent(self, dims: (usize, usize, usize)) -> usize {
        match self {
            ViewAxis::Coronal => dims.0,
            ViewAxis::Sagittal => dims.1,
            ViewAxis::Axial => dims.2,
        }
    }

    /// Shape of a cross-section perpendicular to this axis.
    pub fn slice_shape(self, dims: (usize, usize, usize)) -> (usize, usize) {
        match self {
            ViewAxis::Coronal => (dims.1, dims.2),
            ViewAxis::Sagittal => (dims.0, dims.2),
            ViewAxis::Axial => (dims.0, dims.1),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ViewAxis::Coronal => "co",
            ViewAxis::Sagittal => "sa",
            ViewAxis::Axial => "ax",
        }
    }

    pub fn parse_short(s: &str) -> Result<ViewAxis> {
        match s {
            "co" | "coronal" => Ok(ViewAxis::Coronal),
            "sa" | "sagittal" => Ok(ViewAxis::Sagittal),
            "ax" | "axial" => Ok(ViewAxis::Axial),
            other => Err(Error::Config(format!("unknown view axis `{other}`"))),
        }
    }
}

impl std::fmt::Display for ViewAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ViewAxis::Coronal => "coronal",
            ViewAxis::Sagittal => "sagittal",
            ViewAxis::Axial => "axial",
        };
        f.write_str(s)
    }
}

/// `(2s+1)` adjacent cross-sections around a center index, channel-first
/// in offset order `-s..=+s`. Out-of-range offsets are clamped to the
/// boundary slice (replicate padding).
#[derive(Debug, Clone)]
pub struct SliceStack {
    pub axis: ViewAxis,
    pub center: usize,
    pub radius: usize,
    /// Shape `(2s+1, h, w)` where `(h, w)` is the cross-section shape.
    pub planes: Array3<f32>,
}

impl Volume {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        Self::from_parts(data, Meta::new())
    }

    pub fn from_parts(data: Array3<f32>, meta: Meta) -> Result<Self> {
        let (d1, d2, d3) = data.dim();
        if d1 == 0 || d2 == 0 || d3 == 0 {
            return Err(Error::InvalidVolume(format!(
                "zero-sized dimension in ({d1}, {d2}, {d3})"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel".into()));
        }
        // keep voxels contiguous row-major so file IO is a straight dump
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Volume { data, meta })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Volume { data: Array3::zeros(dims), meta: Meta::new() }
    }

    pub fn random_normal<R: Rng + ?Sized>(dims: (usize, usize, usize), rng: &mut R) -> Self {
        let n = dims.0 * dims.1 * dims.2;
        let v: Vec<f32> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        Volume { data: Array3::from_shape_vec(dims, v).unwrap(), meta: Meta::new() }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut Meta {
        &mut self.meta
    }

    pub fn with_meta(mut self, meta: Meta) -> Self {
        self.meta = meta;
        self
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.as_f64())
    }

    pub fn set_meta_f64(&mut self, key: &str, value: f64) {
        self.meta.insert(key.into(), serde_json::json!(value));
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Percentile in [0, 100] with linear interpolation between order
    /// statistics.
    pub fn percentile(&self, q: f64) -> f32 {
        let mut v: Vec<f32> = self.data.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = (pos - lo as f64) as f32;
        v[lo] + (v[hi] - v[lo]) * frac
    }

    fn check_index(&self, axis: ViewAxis, i: usize) -> Result<()> {
        let extent = axis.extent(self.dims());
        if i >= extent {
            Err(Error::IndexOutOfRange { index: i, extent })
        } else {
            Ok(())
        }
    }

    /// Returns the cross-section at index `i` along `axis`.
    pub fn extract_slice(&self, axis: ViewAxis, i: usize) -> Result<Array2<f32>> {
        self.check_index(axis, i)?;
        Ok(slice_of(&self.data, axis, i).to_owned())
    }

    /// Extracts the `(2s+1)`-plane 2.5D stack around `i`, replicate-padded
    /// at the boundaries.
    pub fn extract_stack(&self, axis: ViewAxis, i: usize, radius: usize) -> Result<SliceStack> {
        self.check_index(axis, i)?;
        let extent = axis.extent(self.dims());
        let (h, w) = axis.slice_shape(self.dims());
        let mut planes = Array3::zeros((2 * radius + 1, h, w));
        for (k, mut plane) in planes.axis_iter_mut(Axis(0)).enumerate() {
            let offset = k as isize - radius as isize;
            let j = (i as isize + offset).clamp(0, extent as isize - 1) as usize;
            plane.assign(&slice_of(&self.data, axis, j));
        }
        Ok(SliceStack { axis, center: i, radius, planes })
    }

    /// Returns a copy of `self` with the indexed cross-section replaced.
    pub fn write_slice(&self, axis: ViewAxis, i: usize, plane: &ArrayView2<f32>) -> Result<Volume> {
        self.check_index(axis, i)?;
        if plane.dim() != axis.slice_shape(self.dims()) {
            return Err(Error::ShapeMismatch(format!(
                "write_slice: plane {:?} vs cross-section {:?}",
                plane.dim(),
                axis.slice_shape(self.dims())
            )));
        }
        let mut data = self.data.clone();
        assign_slice(&mut data, axis, i, plane);
        Volume::from_parts(data, self.meta.clone())
    }

    /// Affine map of `[lo, hi]` onto `[-1, 1]`; parameters are recorded in
    /// the result's metadata so `denormalize` can invert it.
    pub fn normalize(&self, lo: f64, hi: f64) -> Result<Volume> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::BadRange { lo, hi });
        }
        let scale = (2.0 / (hi - lo)) as f32;
        let lo32 = lo as f32;
        let data = self.data.mapv(|v| (v - lo32) * scale - 1.0);
        let mut out = Volume::from_parts(data, self.meta.clone())?;
        out.set_meta_f64(META_NORM_LO, lo);
        out.set_meta_f64(META_NORM_HI, hi);
        Ok(out)
    }

    /// Inverts `normalize` using the parameters stored in metadata.
    pub fn denormalize(&self) -> Result<Volume> {
        let lo = self
            .meta_f64(META_NORM_LO)
            .ok_or_else(|| Error::InvalidVolume("missing norm_lo metadata".into()))?;
        let hi = self
            .meta_f64(META_NORM_HI)
            .ok_or_else(|| Error::InvalidVolume("missing norm_hi metadata".into()))?;
        if !(hi > lo) {
            return Err(Error::BadRange { lo, hi });
        }
        let half = ((hi - lo) / 2.0) as f32;
        let lo32 = lo as f32;
        let data = self.data.mapv(|v| (v + 1.0) * half + lo32);
        let mut meta = self.meta.clone();
        meta.remove(META_NORM_LO);
        meta.remove(META_NORM_HI);
        Volume::from_parts(data, meta)
    }

    /// Writes the bit-exact `.madmvol` format: magic `MADMVOL1`, three
    /// u32-LE dims, u32-LE metadata byte count, UTF-8 JSON metadata, then
    /// d1*d2*d3 f32-LE voxels in row-major order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&display, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(&display, e);
        w.write_all(MAGIC).map_err(io_err)?;
        let (d1, d2, d3) = self.dims();
        for d in [d1, d2, d3] {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        let meta_bytes = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Json { path: display.clone(), source: e })?;
        w.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&meta_bytes).map_err(io_err)?;
        let slice = self.data.as_slice().expect("volume is standard layout");
        let mut buf = Vec::with_capacity(slice.len() * 4);
        for v in slice {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    /// Reads a `.madmvol` file, validating magic, header/payload
    /// consistency, and voxel finiteness.
    pub fn read(path: &Path) -> Result<Volume> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &display, "magic")?;
        if &magic != MAGIC {
            return Err(Error::VolumeFormat {
                path: display,
                reason: format!("bad magic {magic:02x?}"),
            });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = read_u32(&mut r, &display, "dims")? as usize;
        }
        let n_meta = read_u32(&mut r, &display, "metadata length")?;
        if n_meta > MAX_META_BYTES {
            return Err(Error::VolumeFormat {
                path: display,
                reason: format!("metadata length {n_meta} exceeds limit"),
            });
        }
        let mut meta_bytes = vec![0u8; n_meta as usize];
        read_exact(&mut r, &mut meta_bytes, &display, "metadata")?;
        let meta: Meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::VolumeFormat { path: display.clone(), reason: format!("metadata: {e}") })?;

        let n_voxels = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::VolumeFormat {
                path: display.clone(),
                reason: "dimension overflow".into(),
            })?;
        let mut payload = vec![0u8; n_voxels * 4];
        read_exact(&mut r, &mut payload, &display, "voxel payload")?;
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::VolumeTruncated {
                    path: display,
                    reason: "payload longer than header dims imply".into(),
                })
            }
            Err(e) => return Err(Error::io(&display, e)),
        }
        let voxels: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), voxels)
            .map_err(|e| Error::VolumeFormat { path: display.clone(), reason: e.to_string() })?;
        Volume::from_parts(data, meta)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::VolumeTruncated { path: path.into(), reason: format!("short read in {what}") }
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, path: &str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Cross-section view of a raw array, matching `ViewAxis` semantics.
pub(crate) fn slice_of(data: &Array3<f32>, axis: ViewAxis, i: usize) -> ArrayView2<'_, f32> {
    data.index_axis(Axis(axis.axis_index()), i)
}

pub(crate) fn assign_slice(data: &mut Array3<f32>, axis: ViewAxis, i: usize, plane: &ArrayView2<f32>) {
    data.index_axis_mut(Axis(axis.axis_index()), i).assign(plane);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_d1(dims: (usize, usize, usize)) -> Volume {
        // v[a, b, c] = a
        let data = Array3::from_shape_fn(dims, |(a, _, _)| a as f32);
        Volume::new(data).unwrap()
    }

    #[test]
    fn extract_slice_follows_axis_convention() {
        let v = ramp_d1((5, 4, 3));
        let s = v.extract_slice(ViewAxis::Coronal, 3).unwrap();
        assert_eq!(s.dim(), (4, 3));
        assert!(s.iter().all(|&x| x == 3.0));

        let s = v.extract_slice(ViewAxis::Axial, 1).unwrap();
        assert_eq!(s.dim(), (5, 4));
        for (idx, &x) in s.indexed_iter() {
            assert_eq!(x, idx.0 as f32);
        }

        let s = v.extract_slice(ViewAxis::Sagittal, 2).unwrap();
        assert_eq!(s.dim(), (5, 3));
        for (idx, &x) in s.indexed_iter() {
            assert_eq!(x, idx.0 as f32);
        }
    }

    #[test]
    fn extract_slice_rejects_out_of_range() {
        let v = ramp_d1((5, 4, 3));
        assert!(matches!(
            v.extract_slice(ViewAxis::Axial, 3),
            Err(Error::IndexOutOfRange { index: 3, extent: 3 })
        ));
    }

    #[test]
    fn stack_boundary_replicates() {
        let v = ramp_d1((5, 4, 3));
        let st = v.extract_stack(ViewAxis::Coronal, 0, 2).unwrap();
        assert_eq!(st.planes.dim(), (5, 4, 3));
        let vals: Vec<f32> = st.planes.axis_iter(Axis(0)).map(|p| p[[0, 0]]).collect();
        assert_eq!(vals, vec![0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn stack_interior_no_clamp() {
        let v = ramp_d1((5, 4, 3));
        let st = v.extract_stack(ViewAxis::Coronal, 2, 1).unwrap();
        let vals: Vec<f32> = st.planes.axis_iter(Axis(0)).map(|p| p[[1, 1]]).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn stack_radius_zero_equals_slice() {
        let v = ramp_d1((5, 4, 3));
        let st = v.extract_stack(ViewAxis::Sagittal, 1, 0).unwrap();
        let s = v.extract_slice(ViewAxis::Sagittal, 1).unwrap();
        assert_eq!(st.planes.index_axis(Axis(0), 0).to_owned(), s);
    }

    #[test]
    fn write_slice_roundtrip_and_locality() {
        let v = Volume::new(Array3::from_elem((4, 4, 4), 1.0)).unwrap();
        let plane = Array2::zeros((4, 4));
        let w = v.write_slice(ViewAxis::Axial, 2, &plane.view()).unwrap();
        assert_eq!(w.extract_slice(ViewAxis::Axial, 2).unwrap(), plane);
        let changed = w.data().iter().zip(v.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 16);
    }

    #[test]
    fn full_reassembly_reproduces_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Volume::random_normal((4, 5, 6), &mut rng);
        for axis in ViewAxis::ALL {
            let mut acc = Volume::zeros(src.dims());
            for i in 0..axis.extent(src.dims()) {
                let plane = src.extract_slice(axis, i).unwrap();
                acc = acc.write_slice(axis, i, &plane.view()).unwrap();
            }
            assert_eq!(acc.data(), src.data());
        }
    }

    #[test]
    fn normalize_endpoints_and_roundtrip() {
        let v = Volume::new(Array3::from_elem((3, 3, 3), 2.0)).unwrap();
        let n = v.normalize(2.0, 6.0).unwrap();
        assert!(n.data().iter().all(|&x| x == -1.0));
        let mid = Volume::new(Array3::from_elem((3, 3, 3), 4.0)).unwrap();
        assert!(mid.normalize(2.0, 6.0).unwrap().data().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Volume::random_normal((4, 4, 4), &mut rng);
        let back = r.normalize(-3.0, 3.0).unwrap().denormalize().unwrap();
        for (a, b) in back.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(v.normalize(6.0, 2.0).is_err());
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = Volume::random_normal((3, 7, 5), &mut rng);
        v.set_meta_f64(META_VOXEL_MM, 4.0);
        let path = dir.path().join("x.madmvol");
        v.write(&path).unwrap();
        let r = Volume::read(&path).unwrap();
        assert_eq!(r.data(), v.data());
        assert_eq!(r.meta(), v.meta());
        // second write produces identical bytes
        let path2 = dir.path().join("y.madmvol");
        r.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.madmvol");
        let v = Volume::zeros((2, 2, 2));
        v.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Volume::read(&path), Err(Error::VolumeFormat { .. })));
    }

    #[test]
    fn short_payload_is_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.madmvol");
        let v = Volume::zeros((2, 2, 2));
        v.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(Volume::read(&path), Err(Error::VolumeTruncated { .. })));
        // extra trailing bytes are a mismatch too
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(Volume::read(&path), Err(Error::VolumeTruncated { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut data = Array3::zeros((2, 2, 2));
        data[[0, 0, 0]] = f32::NAN;
        assert!(matches!(Volume::new(data), Err(Error::InvalidVolume(_))));
    }

    #[test]
    fn percentile_linear_interpolation() {
        let data = Array3::from_shape_vec((1, 1, 5), vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Volume::new(data).unwrap();
        assert_eq!(v.percentile(0.0), 0.0);
        assert_eq!(v.percentile(100.0), 4.0);
        assert!((v.percentile(50.0) - 2.0).abs() < 1e-6);
        assert!((v.percentile(62.5) - 2.5).abs() < 1e-6);
    }
}
