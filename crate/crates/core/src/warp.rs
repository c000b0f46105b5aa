//! Bilinear resampling and geometry-derived fields.
//!
//! Pixel centers sit at integer coordinates, so a raster of width `w` spans
//! `x` in `[0, w-1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::Homography;
use crate::error::{ensure_same_dims, Error, Result};
use crate::imgcore::{FlowField, Image, Mask};

/// What happens when a sample position leaves the raster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BorderPolicy {
    /// Taps are clamped to the nearest edge; every sample is valid.
    Clamp,
    /// Taps are still clamped for the returned value, but the sample is
    /// flagged invalid.
    #[default]
    MarkInvalid,
}

/// Default occlusion thresholds for [`occlusion_mask`].
pub const OCCLUSION_EPS_ABS: f64 = 0.5;
pub const OCCLUSION_EPS_REL: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    inside: bool,
}

#[inline]
fn taps(width: usize, height: usize, x: f64, y: f64) -> Taps {
    // Zero-weight taps do not count, so the closed square [0,w-1]x[0,h-1] is inside.
    let inside = x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64;
    let (xf, yf) = (x.floor(), y.floor());
    let (fx, fy) = (x - xf, y - yf);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    Taps {
        x0: clamp(xf, width),
        x1: clamp(xf + 1.0, width),
        y0: clamp(yf, height),
        y1: clamp(yf + 1.0, height),
        fx,
        fy,
        inside,
    }
}

#[inline]
fn interpolate(plane: &[f64], width: usize, t: &Taps) -> f64 {
    let a = plane[t.y0 * width + t.x0];
    let b = plane[t.y0 * width + t.x1];
    let c = plane[t.y1 * width + t.x0];
    let d = plane[t.y1 * width + t.x1];
    // Exact pixel values at integer positions.
    if t.fx == 0.0 && t.fy == 0.0 {
        return a;
    }
    (1.0 - t.fy) * ((1.0 - t.fx) * a + t.fx * b) + t.fy * ((1.0 - t.fx) * c + t.fx * d)
}

/// Samples one plane at a subpixel position. Returns the value and whether it
/// is valid under `policy`.
#[inline]
pub fn sample_plane(
    plane: &[f64],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
    policy: BorderPolicy,
) -> (f64, bool) {
    let t = taps(width, height, x, y);
    let valid = policy == BorderPolicy::Clamp || t.inside;
    (interpolate(plane, width, &t), valid)
}

/// Bilinear sample of every channel at `(x, y)`.
pub fn bilinear_sample(img: &Image, x: f64, y: f64, policy: BorderPolicy) -> (Vec<f64>, bool) {
    let t = taps(img.width(), img.height(), x, y);
    let color = img.planes().map(|p| interpolate(p, img.width(), &t)).collect();
    (color, policy == BorderPolicy::Clamp || t.inside)
}

/// `out[p] = img2(p + flow12[p])`, the second view resampled onto the first.
pub fn backward_warp(img2: &Image, flow12: &FlowField, policy: BorderPolicy) -> Result<(Image, Mask)> {
    ensure_same_dims(img2.dims(), flow12.dims())?;
    let (w, h) = img2.dims();
    let channels = img2.channels();
    let n = w * h;
    let mut rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; w * channels];
            let mut valid = vec![false; w];
            for x in 0..w {
                let (u, v) = flow12.get(x, y);
                let t = taps(w, h, x as f64 + u, y as f64 + v);
                valid[x] = policy == BorderPolicy::Clamp || t.inside;
                for c in 0..channels {
                    vals[c * w + x] = interpolate(img2.plane(c), w, &t);
                }
            }
            (vals, valid)
        })
        .collect();
    let mut out = Image::new(w, h, channels);
    let mut bits = Vec::with_capacity(n);
    for (y, (vals, valid)) in rows.iter_mut().enumerate() {
        for c in 0..channels {
            out.plane_mut(c)[y * w..(y + 1) * w].copy_from_slice(&vals[c * w..(c + 1) * w]);
        }
        bits.extend(valid.iter().copied());
    }
    Ok((out, Mask::from_bools(w, h, bits)))
}

/// Dense flow induced by `h`: `flow[p] = h(p) - p`.
pub fn homography_to_flow(h: &Homography, width: usize, height: usize) -> Result<FlowField> {
    let rows: Vec<Option<Vec<(f64, f64)>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let (px, py) = h.project(x as f64, y as f64)?;
                    Some((px - x as f64, py - y as f64))
                })
                .collect()
        })
        .collect();
    let mut u = Vec::with_capacity(width * height);
    let mut v = Vec::with_capacity(width * height);
    for row in rows {
        for (du, dv) in row.ok_or(Error::SingularHomography)? {
            u.push(du);
            v.push(dv);
        }
    }
    FlowField::from_vecs(width, height, u, v)
}

/// Forward-backward consistency check. A pixel is occluded (mask value 1)
/// when its forward flow leaves the raster or when
/// `|f12(p) + f21(p + f12(p))| > eps_abs + eps_rel * (|f12(p)| + |f21(..)|)`.
pub fn occlusion_mask(flow12: &FlowField, flow21: &FlowField, eps_abs: f64, eps_rel: f64) -> Result<Mask> {
    ensure_same_dims(flow12.dims(), flow21.dims())?;
    let (w, h) = flow12.dims();
    let bits: Vec<bool> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (u, v) = (flow12.u()[i], flow12.v()[i]);
            let (bu, ok_u) = sample_plane(flow21.u(), w, h, x + u, y + v, BorderPolicy::MarkInvalid);
            let (bv, _) = sample_plane(flow21.v(), w, h, x + u, y + v, BorderPolicy::MarkInvalid);
            if !ok_u {
                return true;
            }
            let mismatch = (u + bu).hypot(v + bv);
            mismatch > eps_abs + eps_rel * (u.hypot(v) + bu.hypot(bv))
        })
        .collect();
    Ok(Mask::from_bools(w, h, bits))
}

/// Resamples a flow field to a new raster size, rescaling the vectors.
pub fn resize_flow(flow: &FlowField, width: usize, height: usize) -> FlowField {
    let (w0, h0) = flow.dims();
    if (w0, h0) == (width, height) {
        return flow.clone();
    }
    let sx = w0 as f64 / width as f64;
    let sy = h0 as f64 / height as f64;
    FlowField::from_fn(width, height, |x, y| {
        let xs = (x as f64 + 0.5) * sx - 0.5;
        let ys = (y as f64 + 0.5) * sy - 0.5;
        let (u, _) = sample_plane(flow.u(), w0, h0, xs, ys, BorderPolicy::Clamp);
        let (v, _) = sample_plane(flow.v(), w0, h0, xs, ys, BorderPolicy::Clamp);
        (u / sx, v / sy)
    })
}
