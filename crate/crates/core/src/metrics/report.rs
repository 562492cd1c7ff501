//! Directory-level evaluation: pair predictions with ground-truth masks by
//! basename, score every pair, aggregate, and emit CSV reports.
//!
//! Report CSV columns: `name, mae, max_f, mean_f, weighted_f, s_measure,
//! e_measure`; one row per image plus a final `mean` row. Curves CSV
//! columns: `threshold, precision, recall, f_beta`; 255 rows of pointwise
//! averages across images.

use super::{evaluate_pair, MetricReport, THRESHOLD_COUNT};
use crate::data::{load_mask, load_saliency};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct DirectoryReport {
    /// Per-image reports in sorted filename order.
    pub per_image: Vec<(String, MetricReport)>,
    /// Scalar means and pointwise-averaged curves.
    pub mean: MetricReport,
    /// Files that could not be paired or read: (name, reason).
    pub skipped: Vec<(String, String)>,
}

const IMAGE_EXTS: [&str; 2] = ["png", "pgm"];

fn stem_index(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Score every prediction in `pred_dir` against the same-named mask in
/// `gt_dir`. Predictions are resampled to the mask resolution before
/// scoring; missing or unreadable pairs are collected, not fatal.
pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path) -> Result<DirectoryReport> {
    let preds = stem_index(pred_dir)?;
    let gts = stem_index(gt_dir)?;
    if preds.is_empty() {
        return Err(Error::Metric(format!(
            "no predictions (png/pgm) found in {}",
            pred_dir.display()
        )));
    }
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else {
            skipped.push((stem.clone(), "no matching ground-truth file".into()));
            continue;
        };
        let scored = (|| -> Result<MetricReport> {
            let s = load_saliency(pred_path)?;
            let g = load_mask(gt_path)?;
            let s = s.resized(g.height, g.width);
            evaluate_pair(&s, &g)
        })();
        match scored {
            Ok(report) => per_image.push((stem.clone(), report)),
            Err(e) => skipped.push((stem.clone(), e.to_string())),
        }
    }
    if per_image.is_empty() {
        return Err(Error::Metric(
            "no prediction/ground-truth pair could be scored".into(),
        ));
    }
    let mean = mean_report(per_image.iter().map(|(_, r)| r));
    Ok(DirectoryReport {
        per_image,
        mean,
        skipped,
    })
}

fn mean_report<'a>(reports: impl Iterator<Item = &'a MetricReport>) -> MetricReport {
    let mut count = 0usize;
    let mut mae = 0.0;
    let mut max_f = 0.0;
    let mut mean_f = 0.0;
    let mut weighted_f = 0.0;
    let mut s_measure = 0.0;
    let mut e_measure = 0.0;
    let mut pr = vec![(0.0, 0.0); THRESHOLD_COUNT];
    let mut f = vec![0.0; THRESHOLD_COUNT];
    for r in reports {
        count += 1;
        mae += r.mae;
        max_f += r.max_f;
        mean_f += r.mean_f;
        weighted_f += r.weighted_f;
        s_measure += r.s_measure;
        e_measure += r.e_measure_mean;
        for (acc, &(p, rec)) in pr.iter_mut().zip(&r.pr_curve) {
            acc.0 += p;
            acc.1 += rec;
        }
        for (acc, &v) in f.iter_mut().zip(&r.f_beta_curve) {
            *acc += v;
        }
    }
    let n = count as f64;
    MetricReport {
        mae: mae / n,
        max_f: max_f / n,
        mean_f: mean_f / n,
        weighted_f: weighted_f / n,
        s_measure: s_measure / n,
        e_measure_mean: e_measure / n,
        pr_curve: pr.into_iter().map(|(p, r)| (p / n, r / n)).collect(),
        f_beta_curve: f.into_iter().map(|v| v / n).collect(),
    }
}

pub fn write_report_csv(report: &DirectoryReport, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "name,mae,max_f,mean_f,weighted_f,s_measure,e_measure")?;
    for (name, r) in &report.per_image {
        writeln!(
            f,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.mae, r.max_f, r.mean_f, r.weighted_f, r.s_measure, r.e_measure_mean
        )?;
    }
    let m = &report.mean;
    writeln!(
        f,
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.mae, m.max_f, m.mean_f, m.weighted_f, m.s_measure, m.e_measure_mean
    )?;
    Ok(())
}

pub fn write_curves_csv(report: &DirectoryReport, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "threshold,precision,recall,f_beta")?;
    for (k, (&(p, r), &fb)) in report
        .mean
        .pr_curve
        .iter()
        .zip(&report.mean.f_beta_curve)
        .enumerate()
    {
        writeln!(
            f,
            "{:.6},{p:.6},{r:.6},{fb:.6}",
            (k + 1) as f64 / 256.0
        )?;
    }
    Ok(())
}
