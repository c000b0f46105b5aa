use serde::{Deserialize, Serialize};

use crate::imgcore::filter::{central_gradients, gaussian_blur_plane};
use crate::imgcore::{to_gray, Image};

/// Harris sensitivity constant.
pub const HARRIS_K: f64 = 0.04;
/// Integration scale of the structure tensor.
pub const HARRIS_SIGMA: f64 = 1.0;
/// Candidates weaker than this fraction of the strongest response are dropped.
const RELATIVE_THRESHOLD: f64 = 0.001;
const ABSOLUTE_THRESHOLD: f64 = 1e-12;
const BORDER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

/// Harris response `det(M) - k tr(M)^2` of the Gaussian-weighted structure tensor.
pub fn harris_response(gray: &Image) -> Vec<f64> {
    let (w, h) = gray.dims();
    let (gx, gy) = central_gradients(gray.plane(0), w, h);
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..w * h).map(f).collect();
        gaussian_blur_plane(&raw, w, h, HARRIS_SIGMA)
    };
    let sxx = prod(&|i| gx[i] * gx[i]);
    let syy = prod(&|i| gy[i] * gy[i]);
    let sxy = prod(&|i| gx[i] * gy[i]);
    (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - HARRIS_K * tr * tr
        })
        .collect()
}

/// Strongest Harris corners, at most `max_count`, no two closer than
/// `min_distance`, in descending response order.
pub fn detect_corners(img: &Image, max_count: usize, min_distance: f64) -> Vec<Corner> {
    let gray = to_gray(img);
    let (w, h) = gray.dims();
    if w <= 2 * BORDER || h <= 2 * BORDER || max_count == 0 {
        return Vec::new();
    }
    let resp = harris_response(&gray);
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    let floor = (RELATIVE_THRESHOLD * peak).max(ABSOLUTE_THRESHOLD);

    let mut candidates = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let r = resp[y * w + x];
            if r <= floor {
                continue;
            }
            let is_max = (y - 1..=y + 1)
                .flat_map(|yy| (x - 1..=x + 1).map(move |xx| (xx, yy)))
                .all(|(xx, yy)| resp[yy * w + xx] <= r);
            if is_max {
                candidates.push(Corner {
                    x: x as f64,
                    y: y as f64,
                    response: r,
                });
            }
        }
    }
    // Ties resolve in raster order so the result is deterministic.
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });

    let cell = min_distance.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<(f64, f64)>> = vec![Vec::new(); gw * gh];
    let min_d2 = min_distance * min_distance;
    let mut picked = Vec::new();
    for c in candidates {
        let (cx, cy) = ((c.x / cell) as usize, (c.y / cell) as usize);
        let crowded = (cy.saturating_sub(1)..=(cy + 1).min(gh - 1)).any(|gy| {
            (cx.saturating_sub(1)..=(cx + 1).min(gw - 1)).any(|gx| {
                grid[gy * gw + gx]
                    .iter()
                    .any(|&(px, py)| (px - c.x).powi(2) + (py - c.y).powi(2) < min_d2)
            })
        });
        if crowded {
            continue;
        }
        grid[cy * gw + cx].push((c.x, c.y));
        picked.push(c);
        if picked.len() == max_count {
            break;
        }
    }
    picked
}
