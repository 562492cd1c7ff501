//! Weighted F-measure: errors are weighted by their location relative to the
//! foreground. Background errors inherit the error at the nearest foreground
//! pixel (exact Euclidean distance transform), the error field is smoothed
//! with a 7x7 Gaussian (sigma 5), and background importance decays with the
//! distance to the foreground.

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, SaliencyMap};

/// `beta^2` of the weighted F-measure.
pub const WF_BETA_SQ: f64 = 1.0;
const GAUSS_SIZE: usize = 7;
const GAUSS_SIGMA: f64 = 5.0;
/// Background weight is `2 - exp(LOG_HALF_OVER_5 * d)`.
const LOG_HALF_OVER_5: f64 = -0.138_629_436_111_989_06; // ln(0.5) / 5

/// For every pixel: squared Euclidean distance to the nearest foreground
/// pixel and that pixel's linear index. Exact: a per-column scan followed by
/// a per-row combination over all columns.
pub(crate) fn nearest_foreground(g: &BinaryMask) -> Option<(Vec<f64>, Vec<usize>)> {
    let (h, w) = (g.height, g.width);
    if g.foreground_count() == 0 {
        return None;
    }
    // Column pass: vertical distance to the nearest foreground in the same
    // column, and its row.
    let inf = usize::MAX;
    let mut col_row = vec![inf; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if g.at(y, x) {
                last = Some(y);
            }
            if let Some(r) = last {
                col_row[y * w + x] = r;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if g.at(y, x) {
                last = Some(y);
            }
            if let Some(r) = last {
                let cur = col_row[y * w + x];
                if cur == inf || r.abs_diff(y) < cur.abs_diff(y) {
                    col_row[y * w + x] = r;
                }
            }
        }
    }
    // Row pass: minimize over source columns.
    let mut dist_sq = vec![f64::INFINITY; h * w];
    let mut index = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            let mut best_idx = 0usize;
            for xs in 0..w {
                let r = col_row[y * w + xs];
                if r == inf {
                    continue;
                }
                let dx = x.abs_diff(xs) as f64;
                let dy = r.abs_diff(y) as f64;
                let d = dx * dx + dy * dy;
                if d < best {
                    best = d;
                    best_idx = r * w + xs;
                }
            }
            dist_sq[y * w + x] = best;
            index[y * w + x] = best_idx;
        }
    }
    Some((dist_sq, index))
}

fn gaussian_kernel() -> [f64; GAUSS_SIZE * GAUSS_SIZE] {
    let mut k = [0.0; GAUSS_SIZE * GAUSS_SIZE];
    let c = (GAUSS_SIZE as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for y in 0..GAUSS_SIZE {
        for x in 0..GAUSS_SIZE {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
            k[y * GAUSS_SIZE + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Same-size convolution with zero padding.
fn smooth(field: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = GAUSS_SIZE as isize / 2;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let iy = y + ky;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let ix = x + kx;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += field[iy as usize * w + ix as usize]
                        * k[(ky + r) as usize * GAUSS_SIZE + (kx + r) as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure with `beta^2 = 1`.
pub fn weighted_f(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    if s.height != g.height || s.width != g.width {
        return Err(Error::Metric(format!(
            "weighted_f: saliency {}x{} does not match mask {}x{}",
            s.height, s.width, g.height, g.width
        )));
    }
    let (dist_sq, nearest) = nearest_foreground(g).ok_or_else(|| {
        Error::Metric("weighted_f: mask has no foreground pixels".into())
    })?;
    let n = g.len();
    let error: Vec<f64> = s
        .data
        .iter()
        .zip(&g.data)
        .map(|(&sv, &gv)| (sv - if gv { 1.0 } else { 0.0 }).abs())
        .collect();
    // Background pixels take the error observed at their nearest foreground
    // pixel, then the field is smoothed.
    let mut transferred = error.clone();
    for i in 0..n {
        if !g.data[i] {
            transferred[i] = error[nearest[i]];
        }
    }
    let smoothed = smooth(&transferred, g.height, g.width);
    // Foreground keeps the smaller of its own and its neighborhood error;
    // background errors are amplified near the object and forgiven far away.
    let mut weighted = vec![0.0; n];
    for i in 0..n {
        if g.data[i] {
            weighted[i] = error[i].min(smoothed[i]);
        } else {
            let b = 2.0 - (LOG_HALF_OVER_5 * dist_sq[i].sqrt()).exp();
            weighted[i] = error[i] * b;
        }
    }
    let fg = g.foreground_count() as f64;
    let fg_err: f64 = (0..n).filter(|&i| g.data[i]).map(|i| weighted[i]).sum();
    let bg_err: f64 = (0..n).filter(|&i| !g.data[i]).map(|i| weighted[i]).sum();
    let tp_w = (fg - fg_err).max(0.0);
    let recall_w = tp_w / fg;
    let precision_w = tp_w / (tp_w + bg_err + f64::EPSILON);
    let denom = WF_BETA_SQ * precision_w + recall_w;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(((1.0 + WF_BETA_SQ) * precision_w * recall_w / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, fg: &[(usize, usize)]) -> BinaryMask {
        let mut data = vec![false; h * w];
        for &(y, x) in fg {
            data[y * w + x] = true;
        }
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn nearest_foreground_is_exact_on_brute_force() {
        let g = mask_from(7, 9, &[(1, 2), (5, 7), (3, 3), (6, 0)]);
        let (dist_sq, idx) = nearest_foreground(&g).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                let mut best = f64::INFINITY;
                for &(fy, fx) in &[(1, 2), (5, 7), (3, 3), (6, 0)] {
                    let d = ((y as f64 - fy as f64).powi(2)) + ((x as f64 - fx as f64).powi(2));
                    best = best.min(d);
                }
                let i = y * 9 + x;
                assert_eq!(dist_sq[i], best, "distance at ({y},{x})");
                // The recorded index must achieve the minimum distance.
                let (ny, nx) = (idx[i] / 9, idx[i] % 9);
                let d = ((y as f64 - ny as f64).powi(2)) + ((x as f64 - nx as f64).powi(2));
                assert_eq!(d, best, "index at ({y},{x})");
                assert!(g.at(ny, nx));
            }
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = mask_from(8, 8, &[(3, 3), (3, 4), (4, 3), (4, 4)]);
        let s = SaliencyMap::new(
            8,
            8,
            g.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let v = weighted_f(&s, &g).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn all_background_prediction_scores_zero() {
        // Interior foreground: the smoothed neighborhood error is also 1
        // there, so the weighted true positives vanish exactly.
        let g = mask_from(9, 9, &[(4, 4), (4, 5), (5, 4)]);
        let s = SaliencyMap::new(9, 9, vec![0.0; 81]).unwrap();
        assert_eq!(weighted_f(&s, &g).unwrap(), 0.0);
    }
}
