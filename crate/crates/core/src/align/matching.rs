use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corners::Corner;
use crate::imgcore::filter::central_gradients;
use crate::imgcore::{to_gray, Image};
use crate::warp::{sample_plane, BorderPolicy};

/// Matches scoring below this ZNCC are discarded.
pub const MIN_SCORE: f64 = 0.5;
const LK_ITERATIONS: usize = 10;

/// A correspondence between the two views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    /// Zero-normalized cross-correlation of the two patches, in [-1,1].
    pub score: f64,
}

/// Gray plane with integral images for O(1) patch statistics.
struct Indexed {
    w: usize,
    h: usize,
    px: Vec<f64>,
    sum: Vec<f64>,
    sum2: Vec<f64>,
}

impl Indexed {
    fn new(gray: &Image) -> Self {
        let (w, h) = gray.dims();
        let px = gray.plane(0).to_vec();
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        let mut sum2 = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let (mut row, mut row2) = (0.0, 0.0);
            for x in 0..w {
                let v = px[y * w + x];
                row += v;
                row2 += v * v;
                sum[(y + 1) * (w + 1) + x + 1] = sum[y * (w + 1) + x + 1] + row;
                sum2[(y + 1) * (w + 1) + x + 1] = sum2[y * (w + 1) + x + 1] + row2;
            }
        }
        Indexed { w, h, px, sum, sum2 }
    }

    fn fits(&self, x: isize, y: isize, r: isize) -> bool {
        x - r >= 0 && y - r >= 0 && x + r < self.w as isize && y + r < self.h as isize
    }

    fn window_stats(&self, x: usize, y: usize, r: usize) -> (f64, f64) {
        let stride = self.w + 1;
        let (x0, y0, x1, y1) = (x - r, y - r, x + r + 1, y + r + 1);
        let rect = |t: &[f64]| t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0];
        (rect(&self.sum), rect(&self.sum2))
    }

    /// Zero-mean, unit-norm patch; `None` when flat.
    fn normalized_patch(&self, x: usize, y: usize, r: usize) -> Option<Vec<f64>> {
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let (s, _) = self.window_stats(x, y, r);
        let mean = s / n;
        let mut patch = Vec::with_capacity(n as usize);
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                patch.push(self.px[yy * self.w + xx] - mean);
            }
        }
        let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return None;
        }
        patch.iter_mut().for_each(|v| *v /= norm);
        Some(patch)
    }

    fn zncc(&self, patch: &[f64], x: usize, y: usize, r: usize) -> f64 {
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let (s, s2) = self.window_stats(x, y, r);
        let var = s2 - s * s / n;
        if var < 1e-12 {
            return 0.0;
        }
        let mut dot = 0.0;
        let mut k = 0;
        for yy in y - r..=y + r {
            let row = &self.px[yy * self.w + x - r..=yy * self.w + x + r];
            for v in row {
                dot += patch[k] * v;
                k += 1;
            }
        }
        dot / var.sqrt()
    }

    /// Best integer position for `patch` within `search` of `(cx, cy)`.
    fn best_match(&self, patch: &[f64], cx: isize, cy: isize, r: usize, search: isize) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for dy in -search..=search {
            for dx in -search..=search {
                let (x, y) = (cx + dx, cy + dy);
                if !self.fits(x, y, r as isize) {
                    continue;
                }
                let s = self.zncc(patch, x as usize, y as usize, r);
                if best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((x as usize, y as usize, s));
                }
            }
        }
        best
    }
}

/// ZNCC block matching with left-right consistency and Lucas-Kanade
/// subpixel refinement under an affine intensity model.
pub fn match_patches(img1: &Image, img2: &Image, corners: &[Corner], radius: usize, search: usize) -> Vec<Match> {
    let (g1, g2) = (to_gray(img1), to_gray(img2));
    let (a, b) = (Indexed::new(&g1), Indexed::new(&g2));
    let (gx2, gy2) = central_gradients(g2.plane(0), b.w, b.h);
    let r = radius.max(2);
    let s = search as isize;
    corners
        .par_iter()
        .filter_map(|c| {
            let (x, y) = (c.x.round() as isize, c.y.round() as isize);
            if !a.fits(x, y, r as isize) {
                return None;
            }
            let patch = a.normalized_patch(x as usize, y as usize, r)?;
            let (bx, by, score) = b.best_match(&patch, x, y, r, s)?;
            if score < MIN_SCORE {
                return None;
            }
            let back = b.normalized_patch(bx, by, r)?;
            let (rx, ry, _) = a.best_match(&back, bx as isize, by as isize, r, s)?;
            if (rx as isize - x).abs() > 1 || (ry as isize - y).abs() > 1 {
                return None;
            }
            let p2 = refine_subpixel(&a, &b, &gx2, &gy2, (x as usize, y as usize), (bx as f64, by as f64), r);
            Some(Match {
                p1: (x as f64, y as f64),
                p2,
                score,
            })
        })
        .collect()
}

/// Gauss-Newton on `I2(p + d) ~ gain * I1(p) + bias` over the patch. Falls
/// back to the integer position if the refinement wanders more than a pixel.
fn refine_subpixel(
    a: &Indexed,
    b: &Indexed,
    gx2: &[f64],
    gy2: &[f64],
    p1: (usize, usize),
    start: (f64, f64),
    r: usize,
) -> (f64, f64) {
    let (mut px, mut py) = start;
    for _ in 0..LK_ITERATIONS {
        let mut ata = Matrix4::<f64>::zeros();
        let mut atb = Vector4::<f64>::zeros();
        for dy in -(r as isize)..=r as isize {
            for dx in -(r as isize)..=r as isize {
                let i1 = a.px[(p1.1 as isize + dy) as usize * a.w + (p1.0 as isize + dx) as usize];
                let (sx, sy) = (px + dx as f64, py + dy as f64);
                let (i2, _) = sample_plane(&b.px, b.w, b.h, sx, sy, BorderPolicy::Clamp);
                let (ix, _) = sample_plane(gx2, b.w, b.h, sx, sy, BorderPolicy::Clamp);
                let (iy, _) = sample_plane(gy2, b.w, b.h, sx, sy, BorderPolicy::Clamp);
                // i2 + ix*ddx + iy*ddy - gain*i1 - bias = 0
                let row = Vector4::new(ix, iy, -i1, -1.0);
                ata += row * row.transpose();
                atb -= row * i2;
            }
        }
        let Some(sol) = ata.try_inverse().map(|inv| inv * atb) else {
            break;
        };
        if !sol.iter().all(|v| v.is_finite()) {
            break;
        }
        px += sol[0];
        py += sol[1];
        if (px - start.0).abs() > 1.0 || (py - start.1).abs() > 1.0 {
            return start;
        }
        if sol[0].hypot(sol[1]) < 1e-6 {
            break;
        }
    }
    (px, py)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::corners::detect_corners;

    pub(crate) fn texture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (0.31 * x + 0.17 * y).sin() * (0.23 * y - 0.05 * x).cos()
                + 0.15 * ((x * 0.71).sin() * (y * 0.53).cos())
                + 0.1 * (((x as i64 / 7 + y as i64 / 5) % 3) as f64 - 1.0)
        })
    }

    #[test]
    fn self_match_is_perfect() {
        let img = texture(80, 64);
        let corners = detect_corners(&img, 60, 5.0);
        let m = match_patches(&img, &img, &corners, 4, 6);
        assert!(!m.is_empty());
        assert_eq!(m.len(), corners.iter().filter(|c| c.x >= 4.0 && c.y >= 4.0 && c.x < 76.0 && c.y < 60.0).count());
        for mm in &m {
            assert!((mm.score - 1.0).abs() < 1e-9);
            assert!((mm.p1.0 - mm.p2.0).abs() < 1e-9 && (mm.p1.1 - mm.p2.1).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_shift_recovered_exactly() {
        let base = texture(100, 64);
        // img2(x) = img1(x - 4): content moves right by 4.
        let shifted = Image::from_fn(100, 64, 1, |x, y, _| base.get(x.saturating_sub(4), y, 0));
        let corners: Vec<Corner> = detect_corners(&base, 80, 5.0)
            .into_iter()
            .filter(|c| c.x >= 10.0 && c.x + 4.0 + 10.0 < 100.0)
            .collect();
        let m = match_patches(&base, &shifted, &corners, 4, 6);
        assert!(m.len() >= corners.len() * 9 / 10);
        for mm in &m {
            assert!((mm.p2.0 - mm.p1.0 - 4.0).abs() < 1e-9, "{mm:?}");
            assert!((mm.p2.1 - mm.p1.1).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_intensity_change_keeps_scores() {
        let img = texture(80, 64);
        let brighter = img.map(|v| 0.5 * v + 0.5);
        let corners = detect_corners(&img, 40, 5.0);
        let a = match_patches(&img, &img, &corners, 4, 5);
        let b = match_patches(&img, &brighter, &corners, 4, 5);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() < 1e-9);
            assert!((x.p2.0 - y.p2.0).abs() < 1e-9 && (x.p2.1 - y.p2.1).abs() < 1e-9);
        }
    }

    #[test]
    fn subpixel_shift_is_refined() {
        // Smooth texture sampled at x - 1.4 so the true shift is (1.4, -0.6).
        let f = |x: f64, y: f64| 0.5 + 0.25 * (0.3 * x + 0.2 * y).sin() * (0.25 * y - 0.1 * x).cos();
        let img1 = Image::from_fn(80, 64, 1, |x, y, _| f(x as f64, y as f64));
        let img2 = Image::from_fn(80, 64, 1, |x, y, _| f(x as f64 - 1.4, y as f64 + 0.6));
        let corners: Vec<Corner> = detect_corners(&img1, 30, 5.0)
            .into_iter()
            .filter(|c| c.x > 10.0 && c.x < 68.0 && c.y > 10.0 && c.y < 54.0)
            .collect();
        let m = match_patches(&img1, &img2, &corners, 5, 4);
        assert!(!m.is_empty());
        for mm in &m {
            assert!((mm.p2.0 - mm.p1.0 - 1.4).abs() < 0.05, "{mm:?}");
            assert!((mm.p2.1 - mm.p1.1 + 0.6).abs() < 0.05, "{mm:?}");
        }
    }
}
