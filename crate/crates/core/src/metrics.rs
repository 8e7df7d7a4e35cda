//! Image-quality and lesion-level evaluation. All metrics accumulate in
//! f64 and are computed in denormalized (physical intensity) space.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::smooth3;
use crate::store::CsvTable;
use crate::volume::Volume;

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn mse_f64(pred: &Volume, reference: &Volume) -> f64 {
    let mut acc = 0.0f64;
    for (p, r) in pred.data().iter().zip(reference.data()) {
        let d = (*p as f64) - (*r as f64);
        acc += d * d;
    }
    acc / pred.data().len() as f64
}

/// Root mean squared error in intensity units.
pub fn rmse(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_dims(pred, reference)?;
    Ok(mse_f64(pred, reference).sqrt())
}

/// Normalized mean squared error: `sum((pred-ref)^2) / sum(ref^2)`.
pub fn nmse(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_dims(pred, reference)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (p, r) in pred.data().iter().zip(reference.data()) {
        let d = (*p as f64) - (*r as f64);
        num += d * d;
        den += (*r as f64) * (*r as f64);
    }
    if den == 0.0 {
        return Err(Error::Numerical("nmse: reference volume is identically zero".into()));
    }
    Ok(num / den)
}

/// PSNR value; identical volumes yield the `Identical` sentinel rather
/// than an infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psnr {
    Db(f64),
    #[serde(rename = "identical")]
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }

    pub fn to_field(self) -> String {
        match self {
            Psnr::Db(v) => format!("{v:.4}"),
            Psnr::Identical => "identical".into(),
        }
    }

    pub fn from_field(s: &str) -> Result<Psnr> {
        if s == "identical" {
            Ok(Psnr::Identical)
        } else {
            s.parse::<f64>()
                .map(Psnr::Db)
                .map_err(|e| Error::CorruptArtifact(format!("bad psnr field `{s}`: {e}")))
        }
    }
}

/// `20 log10(peak) - 10 log10(mse)` with an explicit dynamic-range peak.
pub fn psnr(pred: &Volume, reference: &Volume, peak: f64) -> Result<Psnr> {
    check_dims(pred, reference)?;
    let mse = mse_f64(pred, reference);
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(20.0 * peak.log10() - 10.0 * mse.log10()))
}

/// PSNR with the per-volume convention `peak = max(reference)`.
pub fn psnr_auto(pred: &Volume, reference: &Volume) -> Result<Psnr> {
    psnr(pred, reference, reference.max_value() as f64)
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM with a 3D Gaussian window (sigma 1.5 voxels, 11^3
/// support truncated and renormalized at volume borders). The dynamic
/// range is the larger of the two volume peaks, which keeps
/// `ssim(a, b) == ssim(b, a)` exact.
pub fn ssim(pred: &Volume, reference: &Volume) -> Result<f64> {
    check_dims(pred, reference)?;
    let x: Array3<f64> = pred.data().mapv(|v| v as f64);
    let y: Array3<f64> = reference.data().mapv(|v| v as f64);
    let peak = (reference.max_value().max(pred.max_value()) as f64).max(f64::MIN_POSITIVE);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);

    let sm = |a: &Array3<f64>| smooth3(a, SSIM_SIGMA, SSIM_RADIUS);
    let mu_x = sm(&x);
    let mu_y = sm(&y);
    let e_x2 = sm(&(&x * &x));
    let e_y2 = sm(&(&y * &y));
    let e_xy = sm(&(&x * &y));

    let mut acc = 0.0f64;
    for ((((mx, my), ex2), ey2), exy) in
        mu_x.iter().zip(mu_y.iter()).zip(e_x2.iter()).zip(e_y2.iter()).zip(e_xy.iter())
    {
        let var_x = ex2 - mx * mx;
        let var_y = ey2 - my * my;
        let cov = exy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / x.len() as f64)
}

/// Per-lesion absolute difference of mean intensity inside each mask.
pub fn lesion_mean_error(pred: &Volume, reference: &Volume, masks: &[Volume]) -> Result<Vec<f64>> {
    check_dims(pred, reference)?;
    let mut out = Vec::with_capacity(masks.len());
    for (k, mask) in masks.iter().enumerate() {
        check_dims(mask, reference)?;
        let mut sum_p = 0.0f64;
        let mut sum_r = 0.0f64;
        let mut n = 0usize;
        for ((&m, &p), &r) in mask.data().iter().zip(pred.data()).zip(reference.data()) {
            if m > 0.5 {
                sum_p += p as f64;
                sum_r += r as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidVolume(format!("lesion mask {k} is empty")));
        }
        out.push((sum_p / n as f64 - sum_r / n as f64).abs());
    }
    Ok(out)
}

// --- report --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub dose_fraction: f64,
    pub method: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub rmse: f64,
    pub nmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionRow {
    pub sample_id: String,
    pub lesion_id: usize,
    pub method: String,
    pub abs_mean_error: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub lesion_rows: Vec<LesionRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

pub fn stats_of(values: &[f64]) -> Stats {
    let n = values.len();
    if n == 0 {
        return Stats { mean: f64::NAN, std: f64::NAN, median: f64::NAN, n: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Stats { mean, std: var.sqrt(), median: median_of(values), n }
}

pub fn median_of(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub psnr_db: Stats,
    /// Rows whose PSNR hit the `identical` sentinel (excluded from stats).
    pub psnr_identical: usize,
    pub ssim: Stats,
    pub rmse: Stats,
    pub nmse: Stats,
    pub lesion_abs_mean_error: Stats,
}

impl EvalReport {
    /// Computes all metrics of one prediction against a reference with
    /// lesion masks, in denormalized space.
    pub fn evaluate_into(
        &mut self,
        method: &str,
        sample_id: &str,
        dose_fraction: f64,
        pred: &Volume,
        reference: &Volume,
        masks: &[Volume],
    ) -> Result<()> {
        self.rows.push(EvalRow {
            sample_id: sample_id.into(),
            dose_fraction,
            method: method.into(),
            psnr: psnr_auto(pred, reference)?,
            ssim: ssim(pred, reference)?,
            rmse: rmse(pred, reference)?,
            nmse: nmse(pred, reference)?,
        });
        for (lesion_id, err) in lesion_mean_error(pred, reference, masks)?.into_iter().enumerate() {
            self.lesion_rows.push(LesionRow {
                sample_id: sample_id.into(),
                lesion_id,
                method: method.into(),
                abs_mean_error: err,
            });
        }
        Ok(())
    }

    /// Per-method aggregate statistics, recomputable from the rows.
    pub fn aggregate(&self) -> BTreeMap<String, MethodAggregate> {
        let mut methods: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        methods.sort();
        methods.dedup();
        let mut out = BTreeMap::new();
        for m in methods {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.method == m).collect();
            let psnr_vals: Vec<f64> = rows.iter().filter_map(|r| r.psnr.db()).collect();
            let psnr_identical = rows.len() - psnr_vals.len();
            let ssim_vals: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
            let rmse_vals: Vec<f64> = rows.iter().map(|r| r.rmse).collect();
            let nmse_vals: Vec<f64> = rows.iter().map(|r| r.nmse).collect();
            let lesion_vals: Vec<f64> = self
                .lesion_rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.abs_mean_error)
                .collect();
            out.insert(
                m,
                MethodAggregate {
                    psnr_db: stats_of(&psnr_vals),
                    psnr_identical,
                    ssim: stats_of(&ssim_vals),
                    rmse: stats_of(&rmse_vals),
                    nmse: stats_of(&nmse_vals),
                    lesion_abs_mean_error: stats_of(&lesion_vals),
                },
            );
        }
        out
    }

    pub fn to_tables(&self, comments: &[(&str, String)]) -> (CsvTable, CsvTable) {
        let mut metrics =
            CsvTable::new(&["sample_id", "dose_fraction", "method", "psnr_db", "ssim", "rmse", "nmse"]);
        let mut lesions = CsvTable::new(&["sample_id", "lesion_id", "method", "abs_mean_error"]);
        for (k, v) in comments {
            metrics.comment(k, v);
            lesions.comment(k, v);
        }
        for r in &self.rows {
            metrics.push(vec![
                r.sample_id.clone(),
                format!("{}", r.dose_fraction),
                r.method.clone(),
                r.psnr.to_field(),
                format!("{:.6}", r.ssim),
                format!("{:.6e}", r.rmse),
                format!("{:.6e}", r.nmse),
            ]);
        }
        for r in &self.lesion_rows {
            lesions.push(vec![
                r.sample_id.clone(),
                r.lesion_id.to_string(),
                r.method.clone(),
                format!("{:.6e}", r.abs_mean_error),
            ]);
        }
        (metrics, lesions)
    }

    pub fn from_tables(metrics: &CsvTable, lesions: Option<&CsvTable>) -> Result<EvalReport> {
        let col = |t: &CsvTable, name: &str| {
            t.column(name)
                .ok_or_else(|| Error::CorruptArtifact(format!("missing csv column `{name}`")))
        };
        let mut report = EvalReport::default();
        let (c_id, c_dose, c_m) =
            (col(metrics, "sample_id")?, col(metrics, "dose_fraction")?, col(metrics, "method")?);
        let (c_psnr, c_ssim, c_rmse, c_nmse) = (
            col(metrics, "psnr_db")?,
            col(metrics, "ssim")?,
            col(metrics, "rmse")?,
            col(metrics, "nmse")?,
        );
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::CorruptArtifact(format!("bad float `{s}`: {e}")))
        };
        for row in &metrics.rows {
            report.rows.push(EvalRow {
                sample_id: row[c_id].clone(),
                dose_fraction: parse(&row[c_dose])?,
                method: row[c_m].clone(),
                psnr: Psnr::from_field(&row[c_psnr])?,
                ssim: parse(&row[c_ssim])?,
                rmse: parse(&row[c_rmse])?,
                nmse: parse(&row[c_nmse])?,
            });
        }
        if let Some(lesions) = lesions {
            let (l_id, l_lid, l_m, l_err) = (
                col(lesions, "sample_id")?,
                col(lesions, "lesion_id")?,
                col(lesions, "method")?,
                col(lesions, "abs_mean_error")?,
            );
            for row in &lesions.rows {
                report.lesion_rows.push(LesionRow {
                    sample_id: row[l_id].clone(),
                    lesion_id: row[l_lid]
                        .parse()
                        .map_err(|e| Error::CorruptArtifact(format!("bad lesion id: {e}")))?,
                    method: row[l_m].clone(),
                    abs_mean_error: parse(&row[l_err])?,
                });
            }
        }
        Ok(report)
    }

    pub fn write(&self, dir: &Path, comments: &[(&str, String)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let (metrics, lesions) = self.to_tables(comments);
        metrics.write(&dir.join("metrics.csv"))?;
        lesions.write(&dir.join("lesions.csv"))?;
        let provenance: std::collections::BTreeMap<&str, &str> =
            comments.iter().map(|(k, v)| (*k, v.as_str())).collect();
        crate::store::write_json_pretty(
            &dir.join("aggregate.json"),
            &serde_json::json!({ "provenance": provenance, "methods": self.aggregate() }),
        )
    }
}
