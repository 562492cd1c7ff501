//! Structure measure: object-aware and region-aware structural similarity
//! between a saliency map and a binary mask, mixed with alpha = 0.5.
//!
//! Degenerate masks follow the usual convention: an all-background mask
//! scores `1 - mean(S)`, an all-foreground mask scores `mean(S)`.

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, SaliencyMap};

/// Mixing weight between the object-aware and region-aware terms.
pub const S_ALPHA: f64 = 0.5;

pub fn s_measure(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    if s.height != g.height || s.width != g.width {
        return Err(Error::Metric(format!(
            "s_measure: saliency {}x{} does not match mask {}x{}",
            s.height, s.width, g.height, g.width
        )));
    }
    let n = g.len() as f64;
    let fg = g.foreground_count();
    let mean_s = s.data.iter().sum::<f64>() / n;
    if fg == 0 {
        return Ok(1.0 - mean_s);
    }
    if fg == g.len() {
        return Ok(mean_s);
    }
    let so = object_score(s, g);
    let sr = region_score(s, g);
    Ok((S_ALPHA * so + (1.0 - S_ALPHA) * sr).clamp(0.0, 1.0))
}

/// Mean and sample standard deviation of `values`.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// `2x / (x^2 + 1 + sigma_x + eps)` on the region's saliency values.
fn object_sub_score(values: &[f64]) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn object_score(s: &SaliencyMap, g: &BinaryMask) -> f64 {
    let fg_vals: Vec<f64> = s
        .data
        .iter()
        .zip(&g.data)
        .filter(|(_, &gv)| gv)
        .map(|(&sv, _)| sv)
        .collect();
    let bg_vals: Vec<f64> = s
        .data
        .iter()
        .zip(&g.data)
        .filter(|(_, &gv)| !gv)
        .map(|(&sv, _)| 1.0 - sv)
        .collect();
    let mu = g.foreground_count() as f64 / g.len() as f64;
    mu * object_sub_score(&fg_vals) + (1.0 - mu) * object_sub_score(&bg_vals)
}

/// Foreground centroid in 1-based coordinates, rounded half away from zero.
fn centroid(g: &BinaryMask) -> (usize, usize) {
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    let mut count = 0.0;
    for y in 0..g.height {
        for x in 0..g.width {
            if g.at(y, x) {
                sum_x += (x + 1) as f64;
                sum_y += (y + 1) as f64;
                count += 1.0;
            }
        }
    }
    ((sum_y / count).round() as usize, (sum_x / count).round() as usize)
}

/// Structural-similarity score of one region between the prediction and the
/// {0,1} ground truth, with sample (N-1) normalization.
fn region_ssim(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let (x, _) = mean_std(pred);
    let (y, _) = mean_std(truth);
    let denom = if n > 1 { n as f64 - 1.0 } else { 1.0 };
    let mut sig_x = 0.0;
    let mut sig_y = 0.0;
    let mut sig_xy = 0.0;
    for i in 0..n {
        sig_x += (pred[i] - x).powi(2);
        sig_y += (truth[i] - y).powi(2);
        sig_xy += (pred[i] - x) * (truth[i] - y);
    }
    sig_x /= denom;
    sig_y /= denom;
    sig_xy /= denom;
    let alpha = 4.0 * x * y * sig_xy;
    let beta = (x * x + y * y) * (sig_x + sig_y);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(s: &SaliencyMap, g: &BinaryMask) -> f64 {
    let (cy, cx) = centroid(g);
    let (h, w) = (g.height, g.width);
    let area = (h * w) as f64;
    // Quadrants split at the centroid (1-based, inclusive on the top-left).
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut score = 0.0;
    let mut w_acc = 0.0;
    for (i, &(y0, y1, x0, x1)) in quads.iter().enumerate() {
        let count = (y1.saturating_sub(y0)) * (x1.saturating_sub(x0));
        if count == 0 {
            continue;
        }
        let weight = if i == 3 {
            1.0 - w_acc
        } else {
            let wgt = count as f64 / area;
            w_acc += wgt;
            wgt
        };
        let mut pred = Vec::with_capacity(count);
        let mut truth = Vec::with_capacity(count);
        for y in y0..y1 {
            for x in x0..x1 {
                pred.push(s.at(y, x));
                truth.push(if g.at(y, x) { 1.0 } else { 0.0 });
            }
        }
        score += weight * region_ssim(&pred, &truth);
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
        let mut data = vec![false; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = true;
            }
        }
        BinaryMask::new(h, w, data).unwrap()
    }

    fn to_map(g: &BinaryMask) -> SaliencyMap {
        SaliencyMap::new(
            g.height,
            g.width,
            g.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_binary_prediction_scores_one() {
        let g = mask_rect(10, 12, 2, 7, 3, 9);
        let v = s_measure(&to_map(&g), &g).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn inverted_prediction_scores_below_half() {
        let g = mask_rect(10, 12, 2, 7, 3, 9);
        let inv = SaliencyMap::new(
            10,
            12,
            g.data.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        let v = s_measure(&inv, &g).unwrap();
        assert!(v < 0.5, "{v}");
    }

    #[test]
    fn degenerate_masks_follow_convention() {
        let empty = BinaryMask::new(4, 4, vec![false; 16]).unwrap();
        let full = BinaryMask::new(4, 4, vec![true; 16]).unwrap();
        let s = SaliencyMap::new(4, 4, vec![0.25; 16]).unwrap();
        assert!((s_measure(&s, &empty).unwrap() - 0.75).abs() < 1e-12);
        assert!((s_measure(&s, &full).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let mut state = 1234u64;
        for _ in 0..50 {
            let mut sal = Vec::with_capacity(36);
            let mut m = Vec::with_capacity(36);
            for _ in 0..36 {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                sal.push(((state >> 11) as f64) / ((1u64 << 53) as f64));
                m.push(state & 0x10000 != 0);
            }
            let s = SaliencyMap::new(6, 6, sal).unwrap();
            let g = BinaryMask::new(6, 6, m).unwrap();
            let v = s_measure(&s, &g).unwrap();
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
}
