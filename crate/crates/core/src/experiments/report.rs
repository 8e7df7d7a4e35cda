//! Human-readable summary assembled from the eval and ablation tables.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::metrics::{median_of, EvalReport, Psnr};
use crate::store::CsvTable;

use super::pipeline::Pipeline;

fn median_psnr(rows: &[(String, f64)], key: &str) -> Option<f64> {
    let vals: Vec<f64> =
        rows.iter().filter(|(k, _)| k == key).map(|(_, v)| *v).collect();
    if vals.is_empty() {
        None
    } else {
        Some(median_of(&vals))
    }
}

fn grouped_metric(table: &CsvTable, group_col: &str, metric_col: &str) -> Result<Vec<(String, f64)>> {
    let g = table
        .column(group_col)
        .ok_or_else(|| Error::CorruptArtifact(format!("missing column {group_col}")))?;
    let m = table
        .column(metric_col)
        .ok_or_else(|| Error::CorruptArtifact(format!("missing column {metric_col}")))?;
    let mut out = Vec::new();
    for row in &table.rows {
        if let Ok(Psnr::Db(v)) = Psnr::from_field(&row[m]) {
            out.push((row[g].clone(), v));
        } else if let Ok(v) = row[m].parse::<f64>() {
            out.push((row[g].clone(), v));
        }
    }
    Ok(out)
}

impl Pipeline {
    /// Writes `report.md` summarizing whatever eval/ablation artifacts
    /// exist. Requires at least the eval stage.
    pub fn report(&self) -> Result<PathBuf> {
        let eval_dir = self.eval_dir();
        let metrics_path = eval_dir.join("metrics.csv");
        if !metrics_path.exists() {
            return Err(Error::MissingDependency(format!(
                "evaluation table {} (run `madm eval` first)",
                metrics_path.display()
            )));
        }
        let metrics = CsvTable::read(&metrics_path)?;
        let lesions = CsvTable::read(&eval_dir.join("lesions.csv")).ok();
        let report = EvalReport::from_tables(&metrics, lesions.as_ref())?;
        let agg = report.aggregate();

        let mut md = String::new();
        md.push_str("# Run report\n\n");
        md.push_str(&format!(
            "- config hash: `{}`\n- master seed: {}\n- version: {}\n\n",
            self.hash,
            self.cfg.master_seed,
            env!("CARGO_PKG_VERSION")
        ));

        md.push_str("## Method comparison (all test volumes)\n\n");
        md.push_str("| method | PSNR dB (mean ± std) | SSIM | RMSE | NMSE | lesion |mean err| |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for (m, a) in &agg {
            md.push_str(&format!(
                "| {m} | {:.3} ± {:.3} | {:.4} ± {:.4} | {:.4e} | {:.4e} | {:.4e} |\n",
                a.psnr_db.mean,
                a.psnr_db.std,
                a.ssim.mean,
                a.ssim.std,
                a.rmse.mean,
                a.nmse.mean,
                a.lesion_abs_mean_error.mean
            ));
        }
        md.push('\n');

        let ablate = self.ablate_dir();
        if let Ok(views) = CsvTable::read(&ablate.join("views.csv")) {
            md.push_str("## View-subset study (median PSNR dB, pooled over seeds)\n\n");
            md.push_str("| views | median PSNR dB |\n|---|---|\n");
            let rows = grouped_metric(&views, "views", "psnr_db")?;
            let mut keys: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
            keys.sort();
            keys.dedup();
            keys.sort_by_key(|k| (k.matches('+').count(), k.clone()));
            for k in keys {
                if let Some(v) = median_psnr(&rows, &k) {
                    md.push_str(&format!("| {k} | {v:.3} |\n"));
                }
            }
            md.push('\n');
        }
        if let Ok(seq) = CsvTable::read(&ablate.join("sequential.csv")) {
            md.push_str("## Sequential vs averaging (median PSNR dB)\n\n");
            md.push_str("| variant | median PSNR dB |\n|---|---|\n");
            let rows = grouped_metric(&seq, "variant", "psnr_db")?;
            let mut keys: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                if let Some(v) = median_psnr(&rows, &k) {
                    md.push_str(&format!("| {k} | {v:.3} |\n"));
                }
            }
            md.push('\n');
        }
        if let Ok(ctx) = CsvTable::read(&ablate.join("context.csv")) {
            md.push_str("## Context radius study (median PSNR dB)\n\n");
            md.push_str("| s | median PSNR dB |\n|---|---|\n");
            let rows = grouped_metric(&ctx, "s", "psnr_db")?;
            let mut keys: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
            keys.sort_by_key(|k| k.parse::<usize>().unwrap_or(0));
            keys.dedup();
            for k in keys {
                if let Some(v) = median_psnr(&rows, &k) {
                    md.push_str(&format!("| {k} | {v:.3} |\n"));
                }
            }
            md.push('\n');
        }
        if let Ok(ts) = CsvTable::read(&ablate.join("ts_sweep.csv")) {
            md.push_str("## Start-timestep sweep (median NMSE)\n\n");
            md.push_str("| t_s | prior | median NMSE |\n|---|---|---|\n");
            let t_col = ts.column("t_start").unwrap_or(1);
            let p_col = ts.column("use_prior").unwrap_or(2);
            let n_col = ts.column("nmse").unwrap_or(7);
            let mut keys: Vec<(usize, String)> = ts
                .rows
                .iter()
                .map(|r| (r[t_col].parse::<usize>().unwrap_or(0), r[p_col].clone()))
                .collect();
            keys.sort();
            keys.dedup();
            for (t, prior) in keys {
                let vals: Vec<f64> = ts
                    .rows
                    .iter()
                    .filter(|r| r[t_col] == t.to_string() && r[p_col] == prior)
                    .filter_map(|r| r[n_col].parse().ok())
                    .collect();
                if !vals.is_empty() {
                    md.push_str(&format!("| {t} | {prior} | {:.4e} |\n", median_of(&vals)));
                }
            }
            md.push_str("\nPlot: `ablate/ts_sweep.svg`\n");
        }

        let path = self.cfg.out_dir.join("report.md");
        std::fs::write(&path, md).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}
