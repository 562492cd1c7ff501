//! Saliency evaluation metrics: MAE, precision/recall and F-measure curves
//! over 255 thresholds, the weighted F-measure, the structure measure, and
//! the mean enhanced-alignment measure.

mod report;
mod structure;
mod wfb;

pub use report::{evaluate_directory, write_curves_csv, write_report_csv, DirectoryReport};
pub use structure::s_measure;
pub use wfb::weighted_f;

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, SaliencyMap};

/// Binarization thresholds `k/256` for `k = 1..=255`.
pub const THRESHOLD_COUNT: usize = 255;

/// `beta^2` of the threshold F-measure.
pub const F_BETA_SQ: f64 = 0.3;

/// Epsilon of the enhanced-alignment formula.
pub const EM_EPS: f64 = 1e-8;

/// Full per-image evaluation result. Curves have exactly 255 entries, one
/// per threshold.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub mae: f64,
    pub pr_curve: Vec<(f64, f64)>,
    pub f_beta_curve: Vec<f64>,
    pub max_f: f64,
    pub mean_f: f64,
    pub weighted_f: f64,
    pub s_measure: f64,
    pub e_measure_mean: f64,
}

fn check_shapes(op: &str, s: &SaliencyMap, g: &BinaryMask) -> Result<()> {
    if s.height != g.height || s.width != g.width {
        return Err(Error::Metric(format!(
            "{op}: saliency {}x{} does not match mask {}x{}",
            s.height, s.width, g.height, g.width
        )));
    }
    Ok(())
}

/// Mean absolute error between the saliency map and the mask.
pub fn mae(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check_shapes("mae", s, g)?;
    let sum: f64 = s
        .data
        .iter()
        .zip(&g.data)
        .map(|(&sv, &gv)| (sv - if gv { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / s.len() as f64)
}

/// Precision/recall pairs and F-measure scores at the 255 thresholds
/// `t_k = k/256`, binarizing as `S >= t_k`. Precision is defined as 1 when
/// nothing is predicted positive; F is 0 when both precision and recall
/// vanish.
pub fn pr_and_f_curves(
    s: &SaliencyMap,
    g: &BinaryMask,
) -> Result<(Vec<(f64, f64)>, Vec<f64>)> {
    check_shapes("pr_curves", s, g)?;
    let fg = g.foreground_count();
    if fg == 0 {
        return Err(Error::Metric(
            "pr_curves: mask has no foreground pixels".into(),
        ));
    }
    // Histogram bucket b = floor(s * 256) (clamped to 256), so that
    // s >= k/256 is exactly b >= k.
    let mut fg_hist = [0u64; 257];
    let mut bg_hist = [0u64; 257];
    for (&sv, &gv) in s.data.iter().zip(&g.data) {
        let b = ((sv * 256.0).floor() as usize).min(256);
        if gv {
            fg_hist[b] += 1;
        } else {
            bg_hist[b] += 1;
        }
    }
    let mut tp = [0u64; 257];
    let mut fp = [0u64; 257];
    for k in (0..256).rev() {
        tp[k] = tp[k + 1] + fg_hist[k + 1];
        fp[k] = fp[k + 1] + bg_hist[k + 1];
    }
    let mut pr = Vec::with_capacity(THRESHOLD_COUNT);
    let mut f_curve = Vec::with_capacity(THRESHOLD_COUNT);
    for k in 1..=THRESHOLD_COUNT {
        // tp[k-1] counts pixels with b >= k.
        let tp_k = tp[k - 1] as f64;
        let fp_k = fp[k - 1] as f64;
        let precision = if tp_k + fp_k == 0.0 {
            1.0
        } else {
            tp_k / (tp_k + fp_k)
        };
        let recall = tp_k / fg as f64;
        pr.push((precision, recall));
        f_curve.push(f_beta(precision, recall));
    }
    Ok((pr, f_curve))
}

/// Threshold F-measure with `beta^2 = 0.3`.
pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let denom = F_BETA_SQ * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + F_BETA_SQ) * precision * recall / denom
    }
}

/// Enhanced-alignment measure of one binarized map.
pub(crate) fn e_measure_binary(s_bin: &[bool], g: &BinaryMask) -> f64 {
    let n = g.len() as f64;
    let fg = g.foreground_count();
    if fg == 0 {
        // Degenerate convention: every predicted-background pixel matches.
        let matches = s_bin.iter().filter(|&&v| !v).count();
        return matches as f64 / n;
    }
    if fg == g.len() {
        let matches = s_bin.iter().filter(|&&v| v).count();
        return matches as f64 / n;
    }
    let mu_g = fg as f64 / n;
    let mu_s = s_bin.iter().filter(|&&v| v).count() as f64 / n;
    let mut sum = 0.0;
    for (&sv, &gv) in s_bin.iter().zip(&g.data) {
        let dg = if gv { 1.0 - mu_g } else { -mu_g };
        let ds = if sv { 1.0 - mu_s } else { -mu_s };
        let align = 2.0 * dg * ds / (dg * dg + ds * ds + EM_EPS);
        let phi = (align + 1.0) * (align + 1.0) / 4.0;
        sum += phi;
    }
    sum / n
}

/// Mean enhanced-alignment measure: the alignment score averaged over the
/// 255 binarization thresholds.
pub fn e_measure_mean(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check_shapes("e_measure", s, g)?;
    let mut acc = 0.0;
    let mut s_bin = vec![false; s.len()];
    for k in 1..=THRESHOLD_COUNT {
        let t = k as f64 / 256.0;
        for (b, &sv) in s_bin.iter_mut().zip(&s.data) {
            *b = sv >= t;
        }
        acc += e_measure_binary(&s_bin, g);
    }
    Ok(acc / THRESHOLD_COUNT as f64)
}

/// All metrics for one prediction/ground-truth pair.
pub fn evaluate_pair(s: &SaliencyMap, g: &BinaryMask) -> Result<MetricReport> {
    let (pr_curve, f_beta_curve) = pr_and_f_curves(s, g)?;
    let max_f = f_beta_curve.iter().cloned().fold(0.0, f64::max);
    let mean_f = f_beta_curve.iter().sum::<f64>() / f_beta_curve.len() as f64;
    Ok(MetricReport {
        mae: mae(s, g)?,
        max_f,
        mean_f,
        weighted_f: weighted_f(s, g)?,
        s_measure: s_measure(s, g)?,
        e_measure_mean: e_measure_mean(s, g)?,
        pr_curve,
        f_beta_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: Vec<f64>) -> SaliencyMap {
        SaliencyMap::new(h, w, data).unwrap()
    }

    fn mask(h: usize, w: usize, data: Vec<u8>) -> BinaryMask {
        BinaryMask::new(h, w, data.into_iter().map(|v| v != 0).collect()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let g = mask(1, 2, vec![0, 1]);
        let perfect = map(1, 2, vec![0.0, 1.0]);
        assert_eq!(mae(&perfect, &g).unwrap(), 0.0);
        let half = map(1, 2, vec![0.5, 0.5]);
        let g0 = mask(1, 2, vec![0, 0]);
        assert_eq!(mae(&half, &g0).unwrap(), 0.5);
        let s = map(1, 2, vec![0.2, 0.9]);
        assert!((mae(&s, &g).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn f_beta_hand_value() {
        // precision 0.8, recall 0.6 -> 1.3 * 0.48 / 0.84
        let f = f_beta(0.8, 0.6);
        assert!((f - 0.742857).abs() < 1e-6, "{f}");
    }

    #[test]
    fn perfect_binary_prediction_saturates_curves() {
        let g = mask(2, 2, vec![1, 0, 0, 1]);
        let s = map(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let (pr, f) = pr_and_f_curves(&s, &g).unwrap();
        assert_eq!(pr.len(), 255);
        for (k, &(p, r)) in pr.iter().enumerate() {
            assert_eq!((p, r), (1.0, 1.0), "threshold {k}");
        }
        assert!(f.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_foreground_is_domain_error() {
        let g = mask(2, 2, vec![0, 0, 0, 0]);
        let s = map(2, 2, vec![0.5; 4]);
        assert!(pr_and_f_curves(&s, &g).is_err());
        assert!(weighted_f(&s, &g).is_err());
    }

    #[test]
    fn recall_is_non_increasing_in_threshold() {
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.917) % 1.0).collect();
        let s = map(8, 8, vals);
        let g = mask(
            8,
            8,
            (0..64).map(|i| u8::from(i % 3 == 0)).collect::<Vec<_>>(),
        );
        let (pr, _) = pr_and_f_curves(&s, &g).unwrap();
        for w in pr.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-15);
        }
    }

    #[test]
    fn e_measure_perfect_and_inverted() {
        let g = mask(4, 4, {
            let mut v = vec![0u8; 16];
            v[5] = 1;
            v[6] = 1;
            v[9] = 1;
            v
        });
        let s: SaliencyMap = map(
            4,
            4,
            g.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        );
        let e = e_measure_mean(&s, &g).unwrap();
        assert!((e - 1.0).abs() < 1e-3, "perfect alignment: {e}");
        let inv: SaliencyMap = map(4, 4, g.data.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect());
        let e = e_measure_mean(&inv, &g).unwrap();
        assert!(e < 0.5, "anti-correlated: {e}");
    }

    #[test]
    fn e_measure_matches_per_pixel_oracle_on_4x4() {
        // Direct per-pixel evaluation of the alignment formula for one
        // threshold pattern, independent of the histogram bookkeeping.
        let g = mask(4, 4, vec![0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0]);
        let s = map(
            4,
            4,
            vec![
                0.1, 0.9, 0.7, 0.2, 0.0, 0.8, 0.4, 0.1, 0.3, 0.2, 0.1, 0.0, 0.6, 0.2, 0.1, 0.9,
            ],
        );
        let want = {
            let mut acc = 0.0;
            for k in 1..=255 {
                let t = k as f64 / 256.0;
                let sb: Vec<bool> = s.data.iter().map(|&v| v >= t).collect();
                let n = 16.0;
                let mu_g = 5.0 / n;
                let mu_s = sb.iter().filter(|&&v| v).count() as f64 / n;
                let mut sum = 0.0;
                for i in 0..16 {
                    let dg = if g.data[i] { 1.0 - mu_g } else { -mu_g };
                    let ds = if sb[i] { 1.0 - mu_s } else { -mu_s };
                    let align = 2.0 * dg * ds / (dg * dg + ds * ds + 1e-8);
                    sum += (align + 1.0) * (align + 1.0) / 4.0;
                }
                acc += sum / n;
            }
            acc / 255.0
        };
        let got = e_measure_mean(&s, &g).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}
