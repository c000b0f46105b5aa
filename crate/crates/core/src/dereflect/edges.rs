//! Static/moving edge separation between a view and its aligned partner.

use crate::error::Result;
use crate::imgcore::filter::{central_gradients, gaussian_blur_plane};
use crate::imgcore::{Image, Mask};

/// Per-pixel, per-channel agreement weights in [0,1] for horizontal and
/// vertical gradients. Weight 1 keeps a gradient of the reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLabel {
    pub wx: Image,
    pub wy: Image,
}

const MAGNITUDE_EPS: f64 = 1e-6;
const ENERGY_EPS: f64 = 1e-24;

fn direction_weights(g1: &[f64], g2: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let prod: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| a * b).collect();
    let e1: Vec<f64> = g1.iter().map(|a| a * a).collect();
    let e2: Vec<f64> = g2.iter().map(|b| b * b).collect();
    let prod = gaussian_blur_plane(&prod, w, h, sigma);
    let e1 = gaussian_blur_plane(&e1, w, h, sigma);
    let e2 = gaussian_blur_plane(&e2, w, h, sigma);
    (0..w * h)
        .map(|i| {
            let energy = e1[i] * e2[i];
            let corr = if energy > ENERGY_EPS { prod[i] / energy.sqrt() } else { 0.0 };
            let ratio = (g2[i].abs() / (g1[i].abs() + MAGNITUDE_EPS)).min(1.0);
            (corr.max(0.0) * ratio).clamp(0.0, 1.0)
        })
        .collect()
}

/// Gradients present in `i1` but missing or uncorrelated in the aligned
/// `i21` get weights near 0. Pixels outside `valid` keep weight 1.
pub fn classify_edges(i1: &Image, i21: &Image, valid: &Mask, sigma_agg: f64) -> Result<EdgeLabel> {
    i1.ensure_same_shape(i21)?;
    crate::error::ensure_same_dims(i1.dims(), valid.dims())?;
    let (w, h) = i1.dims();
    let mut wx = Vec::with_capacity(i1.channels());
    let mut wy = Vec::with_capacity(i1.channels());
    for c in 0..i1.channels() {
        let (p1, p2) = (i1.plane(c), i21.plane(c));
        let filled: Vec<f64> = (0..w * h).map(|i| if valid.is_set(i) { p2[i] } else { p1[i] }).collect();
        let (gx1, gy1) = central_gradients(p1, w, h);
        let (gx2, gy2) = central_gradients(&filled, w, h);
        let mut ax = direction_weights(&gx1, &gx2, w, h, sigma_agg);
        let mut ay = direction_weights(&gy1, &gy2, w, h, sigma_agg);
        for i in 0..w * h {
            if !valid.is_set(i) {
                ax[i] = 1.0;
                ay[i] = 1.0;
            }
        }
        wx.push(ax);
        wy.push(ay);
    }
    Ok(EdgeLabel {
        wx: Image::from_planes(w, h, &wx)?,
        wy: Image::from_planes(w, h, &wy)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(w: usize, h: usize, period: usize, phase: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| if ((x + y / 3 + phase) / period) % 2 == 0 { 0.8 } else { 0.2 })
    }

    fn edge_pixels(img: &Image) -> Vec<usize> {
        let (gx, _) = central_gradients(img.plane(0), img.width(), img.height());
        (0..gx.len()).filter(|&i| gx[i].abs() > 0.1).collect()
    }

    #[test]
    fn identical_views_keep_edges() {
        let img = stripes(40, 30, 5, 0);
        let all = Mask::ones(40, 30);
        let label = classify_edges(&img, &img, &all, 2.0).unwrap();
        for i in edge_pixels(&img) {
            assert!(label.wx.data()[i] > 0.99);
        }
    }

    #[test]
    fn flat_partner_drops_edges() {
        let img = stripes(40, 30, 5, 0);
        let flat = Image::filled(40, 30, 1, 0.5);
        let label = classify_edges(&img, &flat, &Mask::ones(40, 30), 2.0).unwrap();
        assert!(label.wx.data().iter().all(|&v| v < 1e-9));
        let none = classify_edges(&img, &flat, &Mask::zeros(40, 30), 2.0).unwrap();
        assert!(none.wx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weights_are_scale_invariant() {
        let a = stripes(40, 30, 5, 0);
        let b = stripes(40, 30, 7, 2).zip_map(&a, |x, y| 0.5 * (x + y)).unwrap();
        let valid = Mask::ones(40, 30);
        let base = classify_edges(&a, &b, &valid, 2.0).unwrap();
        let scaled = classify_edges(&a.map(|v| 3.0 * v), &b.map(|v| 3.0 * v), &valid, 2.0).unwrap();
        for i in edge_pixels(&a) {
            assert!((base.wx.data()[i] - scaled.wx.data()[i]).abs() < 1e-4);
        }
        assert!(base.wx.data().iter().chain(base.wy.data()).all(|v| (0.0..=1.0).contains(v)));
    }
}
