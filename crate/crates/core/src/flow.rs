//! Dense flow: homography initialization followed by coarse-to-fine robust
//! Lucas-Kanade refinement.
//!
//! The refinement solves windowed normal equations at every pixel. Residuals
//! are reweighted with `w = 1 / (1 + (r / threshold)^2)` on every sweep so
//! that content moving with a second layer contributes little to the update.
//! Reweighting alone cannot stop a window that the second layer dominates,
//! since a uniform scale of the weights leaves the solution unchanged; a
//! quadratic prior toward the initialization handles those.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{estimate_dominant_homography, AlignDiagnostics, AlignParams, Homography};
use crate::error::{ensure_same_dims, Error, Result};
use crate::imgcore::filter::{box_sum, central_gradients, gaussian_blur_plane};
use crate::imgcore::{to_gray, FlowField, Image};
use crate::warp::{backward_warp, homography_to_flow, resize_flow, sample_plane, BorderPolicy};

/// Blur applied before every downsampling step.
pub const PYRAMID_SIGMA: f64 = 1.0;
/// Windows whose structure tensor has a smaller eigenvalue are not updated.
pub const MIN_EIGENVALUE: f64 = 1e-6;
const MIN_LEVEL_SIZE: usize = 8;
const UPDATE_SMOOTHING_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub scale_factor: f64,
    pub iterations_per_level: usize,
    pub window_radius: usize,
    /// Residual scale of the robust weight, in intensity units.
    pub robust_threshold: f64,
    /// Blend factor toward the Gaussian-smoothed update field.
    pub smoothness_weight: f64,
    /// Per-pixel weight of a quadratic penalty on the deviation from the
    /// initial flow, in squared intensity per squared px. Windows whose
    /// robust weights are all small stay near the initialization instead of
    /// following whatever motion dominates them.
    pub prior_weight: f64,
    /// Gauss-Newton steps of the dense homography polish; 0 disables it.
    /// Sharpens clean pairs but can be pulled toward a strong reflection.
    pub polish_iterations: usize,
    /// Residual scale of the polish's robust weight, in intensity units.
    pub polish_threshold: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            scale_factor: 0.5,
            iterations_per_level: 5,
            window_radius: 4,
            robust_threshold: 0.1,
            smoothness_weight: 1.0,
            prior_weight: 1e-2,
            polish_iterations: 0,
            polish_threshold: 0.02,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.pyramid_levels < 1 {
            errs.push("flow.pyramid_levels must be >= 1".into());
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            errs.push("flow.scale_factor must lie in (0,1)".into());
        }
        if self.window_radius < 1 {
            errs.push("flow.window_radius must be >= 1".into());
        }
        if !(self.robust_threshold > 0.0) {
            errs.push("flow.robust_threshold must be > 0".into());
        }
        if !(self.smoothness_weight >= 0.0) {
            errs.push("flow.smoothness_weight must be >= 0".into());
        }
        if !(self.polish_threshold > 0.0) {
            errs.push("flow.polish_threshold must be > 0".into());
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            errs.push("flow.prior_weight must be finite and >= 0".into());
        }
        errs
    }
}

/// Gaussian pyramid, finest level first.
pub fn build_pyramid(img: &Image, levels: usize, scale: f64) -> Result<Vec<Image>> {
    if levels == 0 || !(scale > 0.0 && scale < 1.0) {
        return Err(Error::InvalidArgument("pyramid needs levels >= 1 and scale in (0,1)".into()));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("nonempty");
        let (w0, h0) = prev.dims();
        let (w, h) = (
            (w0 as f64 * scale).floor() as usize,
            (h0 as f64 * scale).floor() as usize,
        );
        if w < MIN_LEVEL_SIZE || h < MIN_LEVEL_SIZE {
            return Err(Error::InvalidArgument(format!(
                "{levels} pyramid levels at scale {scale} shrink {}x{} below {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}",
                img.width(),
                img.height()
            )));
        }
        let (sx, sy) = (w0 as f64 / w as f64, h0 as f64 / h as f64);
        let planes: Vec<Vec<f64>> = prev
            .planes()
            .map(|p| {
                let blurred = gaussian_blur_plane(p, w0, h0, PYRAMID_SIGMA);
                let mut down = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        let xs = (x as f64 + 0.5) * sx - 0.5;
                        let ys = (y as f64 + 0.5) * sy - 0.5;
                        down[y * w + x] = sample_plane(&blurred, w0, h0, xs, ys, BorderPolicy::Clamp).0;
                    }
                }
                down
            })
            .collect();
        out.push(Image::from_planes(w, h, &planes)?);
    }
    Ok(out)
}

/// Geman-McClure style weight: 1 at zero residual, monotonically decreasing.
#[inline]
pub fn robust_weight(residual: f64, threshold: f64) -> f64 {
    if threshold.is_infinite() {
        return 1.0;
    }
    let t = residual / threshold;
    1.0 / (1.0 + t * t)
}

/// Solves the 2x2 system accumulated from `(a11, a12, a22, b1, b2)`; `None`
/// when the smaller eigenvalue is below [`MIN_EIGENVALUE`].
#[inline]
pub fn solve_normal_equations(a11: f64, a12: f64, a22: f64, b1: f64, b2: f64) -> Option<(f64, f64)> {
    let half_tr = 0.5 * (a11 + a22);
    let disc = (0.25 * (a11 - a22) * (a11 - a22) + a12 * a12).sqrt();
    if half_tr - disc <= MIN_EIGENVALUE {
        return None;
    }
    let det = a11 * a22 - a12 * a12;
    Some(((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

/// One robust Lucas-Kanade step for a single window given gradient and
/// residual samples: minimizes `sum w (ix du + iy dv + r)^2`.
pub fn window_update(ix: &[f64], iy: &[f64], residual: &[f64], threshold: f64) -> Option<(f64, f64)> {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..ix.len() {
        let w = robust_weight(residual[k], threshold);
        a11 += w * ix[k] * ix[k];
        a12 += w * ix[k] * iy[k];
        a22 += w * iy[k] * iy[k];
        b1 -= w * ix[k] * residual[k];
        b2 -= w * iy[k] * residual[k];
    }
    solve_normal_equations(a11, a12, a22, b1, b2)
}

fn refine_level(i1: &Image, i2: &Image, init: &FlowField, delta: &mut FlowField, params: &FlowParams) {
    let (w, h) = i1.dims();
    let n = w * h;
    let r = params.window_radius;
    let (g1x, g1y) = central_gradients(i1.plane(0), w, h);
    for _ in 0..params.iterations_per_level {
        let mut current = init.clone();
        {
            let (u, v) = current.components_mut();
            for i in 0..n {
                u[i] += delta.u()[i];
                v[i] += delta.v()[i];
            }
        }
        let (warped, valid) = backward_warp(i2, &current, BorderPolicy::MarkInvalid).expect("dims checked");
        let (g2x, g2y) = central_gradients(warped.plane(0), w, h);
        let mut terms = vec![vec![0.0; n]; 5];
        for i in 0..n {
            if !valid.is_set(i) {
                continue;
            }
            let res = warped.plane(0)[i] - i1.plane(0)[i];
            let wt = robust_weight(res, params.robust_threshold);
            let ix = 0.5 * (g1x[i] + g2x[i]);
            let iy = 0.5 * (g1y[i] + g2y[i]);
            terms[0][i] = wt * ix * ix;
            terms[1][i] = wt * ix * iy;
            terms[2][i] = wt * iy * iy;
            terms[3][i] = -wt * ix * res;
            terms[4][i] = -wt * iy * res;
        }
        let sums: Vec<Vec<f64>> = terms.iter().map(|t| box_sum(t, w, h, r)).collect();
        let mu = params.prior_weight * ((2 * r + 1) * (2 * r + 1)) as f64;
        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        for i in 0..n {
            if solve_normal_equations(sums[0][i], sums[1][i], sums[2][i], 0.0, 0.0).is_none() {
                continue;
            }
            let (d0, d1) = (delta.u()[i], delta.v()[i]);
            let b1 = sums[3][i] - mu * d0;
            let b2 = sums[4][i] - mu * d1;
            if let Some((a, b)) = solve_normal_equations(sums[0][i] + mu, sums[1][i], sums[2][i] + mu, b1, b2) {
                du[i] = a;
                dv[i] = b;
            }
        }
        if params.smoothness_weight > 0.0 {
            let lambda = params.smoothness_weight;
            let su = gaussian_blur_plane(&du, w, h, UPDATE_SMOOTHING_SIGMA);
            let sv = gaussian_blur_plane(&dv, w, h, UPDATE_SMOOTHING_SIGMA);
            for i in 0..n {
                du[i] = (du[i] + lambda * su[i]) / (1.0 + lambda);
                dv[i] = (dv[i] + lambda * sv[i]) / (1.0 + lambda);
            }
        }
        let (u, v) = delta.components_mut();
        for i in 0..n {
            u[i] += du[i];
            v[i] += dv[i];
        }
    }
}

/// Coarse-to-fine refinement of `init_flow`. Only the correction is
/// propagated across levels, so the initialization is kept at full precision.
pub fn refine_flow(img1: &Image, img2: &Image, init_flow: &FlowField, params: &FlowParams) -> Result<FlowField> {
    ensure_same_dims(img1.dims(), img2.dims())?;
    ensure_same_dims(img1.dims(), init_flow.dims())?;
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let p1 = build_pyramid(&to_gray(img1), params.pyramid_levels, params.scale_factor)?;
    let p2 = build_pyramid(&to_gray(img2), params.pyramid_levels, params.scale_factor)?;
    let coarsest = p1.last().expect("nonempty").dims();
    let mut delta = FlowField::zeros(coarsest.0, coarsest.1);
    for level in (0..p1.len()).rev() {
        let (w, h) = p1[level].dims();
        delta = resize_flow(&delta, w, h);
        let init = resize_flow(init_flow, w, h);
        refine_level(&p1[level], &p2[level], &init, &mut delta, params);
    }
    let mut out = init_flow.clone();
    let (u, v) = out.components_mut();
    for i in 0..u.len() {
        u[i] += delta.u()[i];
        v[i] += delta.v()[i];
    }
    Ok(out)
}

const POLISH_SIGMA: f64 = 1.0;
const POLISH_MIN_STEP: f64 = 1e-4;

/// Dense robust refinement of a homography between the gray versions of the
/// two views: Gauss-Newton on the eight free coefficients with Geman-McClure
/// reweighting, so pixels dominated by a second motion barely count.
/// Returns the input unchanged when the normal equations are singular.
pub fn polish_homography(img1: &Image, img2: &Image, h: &Homography, threshold: f64, iterations: usize) -> Result<Homography> {
    ensure_same_dims(img1.dims(), img2.dims())?;
    let (w, ht) = img1.dims();
    let g1 = gaussian_blur_plane(to_gray(img1).data(), w, ht, POLISH_SIGMA);
    let g2 = gaussian_blur_plane(to_gray(img2).data(), w, ht, POLISH_SIGMA);
    let (g1x, g1y) = central_gradients(&g1, w, ht);
    let (g2x, g2y) = central_gradients(&g2, w, ht);

    // Work in centered coordinates scaled to about [-1, 1] for conditioning.
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (ht as f64 - 1.0) / 2.0);
    let s = (w.max(ht) as f64) / 2.0;
    let norm = Homography::from_coeffs([1.0 / s, 0.0, -cx / s, 0.0, 1.0 / s, -cy / s, 0.0, 0.0, 1.0])?;
    let denorm = norm.inverse()?;
    let mut hn = norm.compose(h)?.compose(&denorm)?.coeffs();

    for _ in 0..iterations {
        let rows: Vec<([f64; 36], [f64; 8])> = (0..ht)
            .into_par_iter()
            .map(|y| {
                let mut a = [0.0; 36];
                let mut b = [0.0; 8];
                let yn = (y as f64 - cy) / s;
                for x in 0..w {
                    let xn = (x as f64 - cx) / s;
                    let wn = hn[6] * xn + hn[7] * yn + hn[8];
                    if wn.abs() < 1e-12 {
                        continue;
                    }
                    let qxn = (hn[0] * xn + hn[1] * yn + hn[2]) / wn;
                    let qyn = (hn[3] * xn + hn[4] * yn + hn[5]) / wn;
                    let (qx, qy) = (qxn * s + cx, qyn * s + cy);
                    let (v2, ok) = sample_plane(&g2, w, ht, qx, qy, BorderPolicy::MarkInvalid);
                    if !ok {
                        continue;
                    }
                    let i = y * w + x;
                    let gx2 = sample_plane(&g2x, w, ht, qx, qy, BorderPolicy::Clamp).0;
                    let gy2 = sample_plane(&g2y, w, ht, qx, qy, BorderPolicy::Clamp).0;
                    let gx = 0.5 * (g1x[i] + gx2) * s;
                    let gy = 0.5 * (g1y[i] + gy2) * s;
                    let r = v2 - g1[i];
                    let wt = robust_weight(r, threshold);
                    let k = -(gx * qxn + gy * qyn);
                    let j = [
                        gx * xn / wn,
                        gx * yn / wn,
                        gx / wn,
                        gy * xn / wn,
                        gy * yn / wn,
                        gy / wn,
                        k * xn / wn,
                        k * yn / wn,
                    ];
                    let mut idx = 0;
                    for p in 0..8 {
                        for q in p..8 {
                            a[idx] += wt * j[p] * j[q];
                            idx += 1;
                        }
                        b[p] -= wt * j[p] * r;
                    }
                }
                (a, b)
            })
            .collect();
        let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
        let mut b = nalgebra::SVector::<f64, 8>::zeros();
        for (ra, rb) in &rows {
            let mut idx = 0;
            for p in 0..8 {
                for q in p..8 {
                    a[(p, q)] += ra[idx];
                    idx += 1;
                }
                b[p] += rb[p];
            }
        }
        for p in 0..8 {
            for q in 0..p {
                a[(p, q)] = a[(q, p)];
            }
        }
        let Some(chol) = a.cholesky() else {
            return Ok(*h);
        };
        let step = chol.solve(&b);
        for k in 0..8 {
            hn[k] += step[k];
        }
        // Step size in px at the image corners.
        if step.iter().map(|v| v.abs()).fold(0.0, f64::max) * s < POLISH_MIN_STEP {
            break;
        }
    }
    let polished = Homography::from_coeffs(hn)?;
    denorm.compose(&polished)?.compose(&norm)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub align: AlignDiagnostics,
    pub homography: Homography,
    /// Mean norm of the refinement on top of the homography flow, in px.
    pub mean_refinement: f64,
    pub unreliable: bool,
}

#[derive(Clone, Debug)]
pub struct FlowEstimate {
    pub flow: FlowField,
    pub diagnostics: FlowDiagnostics,
}

/// Dominant homography, its dense flow, then robust refinement. An
/// unreliable alignment is reported in the diagnostics, never as an error.
pub fn estimate_flow<R: RngCore + ?Sized>(
    img1: &Image,
    img2: &Image,
    align: &AlignParams,
    params: &FlowParams,
    rng: &mut R,
) -> Result<FlowEstimate> {
    ensure_same_dims(img1.dims(), img2.dims())?;
    let aligned = estimate_dominant_homography(img1, img2, align, rng)?;
    let (w, h) = img1.dims();
    let homography = if params.polish_iterations > 0 && aligned.reliable() {
        polish_homography(img1, img2, &aligned.homography, params.polish_threshold, params.polish_iterations)?
    } else {
        aligned.homography
    };
    let init = homography_to_flow(&homography, w, h)?;
    let flow = refine_flow(img1, img2, &init, params)?;
    let mean_refinement = crate::numeric::mean(
        &flow
            .u()
            .iter()
            .zip(flow.v())
            .zip(init.u().iter().zip(init.v()))
            .map(|((a, b), (c, d))| (a - c).hypot(b - d))
            .collect::<Vec<_>>(),
    );
    Ok(FlowEstimate {
        flow,
        diagnostics: FlowDiagnostics {
            unreliable: !aligned.reliable(),
            align: aligned.diagnostics,
            homography,
            mean_refinement,
        },
    })
}
