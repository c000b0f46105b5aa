//! Screened Poisson integration of a target gradient field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::imgcore::Image;
use crate::numeric::{par_dot, pairwise_sum};

pub const CG_TOLERANCE: f64 = 1e-6;
pub const CG_MAX_ITERATIONS: usize = 2000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoissonStats {
    /// Worst channel.
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// `(D^T D + lambda) u` with forward-difference `D` and Neumann boundaries,
/// i.e. the negated 5-point Laplacian plus the screening term.
fn apply(u: &[f64], w: usize, h: usize, lambda: f64, out: &mut [f64]) {
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let c = u[i];
            let mut acc = lambda * c;
            if x > 0 {
                acc += c - u[i - 1];
            }
            if x + 1 < w {
                acc += c - u[i + 1];
            }
            if y > 0 {
                acc += c - u[i - w];
            }
            if y + 1 < h {
                acc += c - u[i + w];
            }
            *o = acc;
        }
    });
}

/// `D^T g`. Entries of `gx` in the last column and `gy` in the last row
/// have no edge and are ignored.
fn divergence(gx: &[f64], gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let mut acc = 0.0;
            if x + 1 < w {
                acc -= gx[i];
            }
            if x > 0 {
                acc += gx[i - 1];
            }
            if y + 1 < h {
                acc -= gy[i];
            }
            if y > 0 {
                acc += gy[i - w];
            }
            *o = acc;
        }
    });
    out
}

fn remove_mean(v: &mut [f64]) {
    let m = pairwise_sum(v) / v.len() as f64;
    v.par_iter_mut().for_each(|x| *x -= m);
}

/// Conjugate gradients on one channel. With `lambda = 0` the system is
/// singular; iterates are kept orthogonal to constants and the DC level is
/// set to the anchor mean afterwards.
fn solve_channel(gx: &[f64], gy: &[f64], anchor: &[f64], w: usize, h: usize, lambda: f64) -> (Vec<f64>, PoissonStats) {
    let n = w * h;
    let mut b = divergence(gx, gy, w, h);
    if lambda > 0.0 {
        b.par_iter_mut().zip(anchor).for_each(|(bi, a)| *bi += lambda * a);
    } else {
        remove_mean(&mut b);
    }
    let b_norm = par_dot(&b, &b).sqrt();
    let mut x = if lambda > 0.0 { anchor.to_vec() } else { vec![0.0; n] };
    let mut ax = vec![0.0; n];
    apply(&x, w, h, lambda, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if lambda == 0.0 {
        remove_mean(&mut r);
    }
    let mut p = r.clone();
    let mut rr = par_dot(&r, &r);
    let mut ap = vec![0.0; n];
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let mut iterations = 0;
    while rr.sqrt() / scale >= CG_TOLERANCE && iterations < CG_MAX_ITERATIONS {
        apply(&p, w, h, lambda, &mut ap);
        let pap = par_dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let step = rr / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += step * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= step * api);
        if lambda == 0.0 {
            remove_mean(&mut r);
        }
        let rr_next = par_dot(&r, &r);
        let beta = rr_next / rr;
        p.par_iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
        rr = rr_next;
        iterations += 1;
    }

    // Report the true residual, not the recursively updated one.
    apply(&x, w, h, lambda, &mut ax);
    let mut res: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if lambda == 0.0 {
        remove_mean(&mut res);
        remove_mean(&mut x);
        let mu = pairwise_sum(anchor) / n as f64;
        x.par_iter_mut().for_each(|v| *v += mu);
    }
    let relative_residual = par_dot(&res, &res).sqrt() / scale;
    let stats = PoissonStats {
        iterations,
        relative_residual,
        converged: relative_residual < CG_TOLERANCE,
    };
    (x, stats)
}

/// Minimizes `|grad u - (gx, gy)|^2 + lambda |u - anchor|^2` per channel.
/// Gradients use forward differences (see
/// [`forward_gradients`](crate::imgcore::filter::forward_gradients)).
/// Non-convergence is not an error; check [`PoissonStats::converged`].
pub fn poisson_reconstruct(gx: &Image, gy: &Image, anchor: &Image, lambda: f64) -> Result<(Image, PoissonStats)> {
    gx.ensure_same_shape(gy)?;
    gx.ensure_same_shape(anchor)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("anchor weight must be finite and >= 0, got {lambda}")));
    }
    let (w, h) = gx.dims();
    ensure_same_dims((w, h), anchor.dims())?;
    let mut planes = Vec::with_capacity(gx.channels());
    let mut stats = PoissonStats {
        converged: true,
        ..PoissonStats::default()
    };
    for c in 0..gx.channels() {
        let (u, s) = solve_channel(gx.plane(c), gy.plane(c), anchor.plane(c), w, h, lambda);
        stats.iterations = stats.iterations.max(s.iterations);
        stats.relative_residual = stats.relative_residual.max(s.relative_residual);
        stats.converged &= s.converged;
        planes.push(u);
    }
    Ok((Image::from_planes(w, h, &planes)?, stats))
}

/// Forward-difference gradients of every channel.
pub fn image_gradients(img: &Image) -> (Image, Image) {
    let (w, h) = img.dims();
    let (gx, gy): (Vec<_>, Vec<_>) = img
        .planes()
        .map(|p| crate::imgcore::filter::forward_gradients(p, w, h))
        .unzip();
    (
        Image::from_planes(w, h, &gx).expect("shape"),
        Image::from_planes(w, h, &gy).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Per-channel RMSE once each channel's mean is removed.
    fn rmse_after_mean(a: &Image, b: &Image) -> f64 {
        let mut s = 0.0;
        for c in 0..a.channels() {
            let da = crate::numeric::mean(a.plane(c));
            let db = crate::numeric::mean(b.plane(c));
            s += a.plane(c).iter().zip(b.plane(c)).map(|(x, y)| ((x - da) - (y - db)).powi(2)).sum::<f64>();
        }
        (s / a.data().len() as f64).sqrt()
    }

    fn textured(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.3 * (0.21 * x + c as f64).sin() * (0.13 * y).cos() + if (x - 20.0).abs() < 6.0 { 0.2 } else { 0.0 }
        })
    }

    #[test]
    fn integrates_exact_gradients() {
        let img = textured(48, 40);
        let (gx, gy) = image_gradients(&img);
        let anchor = Image::filled(48, 40, 3, 0.1);
        let (u, stats) = poisson_reconstruct(&gx, &gy, &anchor, 0.0).unwrap();
        assert!(stats.converged, "{stats:?}");
        assert!(rmse_after_mean(&u, &img) < 1e-3);
        let mean_u = crate::numeric::mean(u.plane(0));
        assert!((mean_u - 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_gradients_give_anchor_mean() {
        let zero = Image::new(20, 10, 1);
        let anchor = Image::from_fn(20, 10, 1, |x, _, _| x as f64 / 19.0);
        let (u, _) = poisson_reconstruct(&zero, &zero, &anchor, 0.0).unwrap();
        assert!(u.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn heavy_anchor_returns_anchor() {
        let img = textured(30, 30);
        let (gx, gy) = image_gradients(&img.map(|v| 1.0 - v));
        let (u, _) = poisson_reconstruct(&gx, &gy, &img, 1e6).unwrap();
        let worst = u.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn hand_solved_two_pixel_system() {
        // u0, u1 with target gradient g and anchors a0, a1:
        // (1 + l) u0 - u1 = -g + l a0, -u0 + (1 + l) u1 = g + l a1.
        let (g, l, a0, a1) = (0.3, 0.5, 0.2, 0.6);
        let gx = Image::from_vec(2, 1, 1, vec![g, 0.0]).unwrap();
        let gy = Image::new(2, 1, 1);
        let anchor = Image::from_vec(2, 1, 1, vec![a0, a1]).unwrap();
        let (u, _) = poisson_reconstruct(&gx, &gy, &anchor, l).unwrap();
        let det = (1.0 + l) * (1.0 + l) - 1.0;
        let (b0, b1) = (-g + l * a0, g + l * a1);
        let u0 = ((1.0 + l) * b0 + b1) / det;
        let u1 = (b0 + (1.0 + l) * b1) / det;
        assert!((u.data()[0] - u0).abs() < 1e-9 && (u.data()[1] - u1).abs() < 1e-9);
    }

    #[test]
    fn rejects_negative_weight() {
        let z = Image::new(4, 4, 1);
        assert!(poisson_reconstruct(&z, &z, &z, -1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn superposition(seed in 0u64..1000, k in 0.1f64..3.0) {
            use rand::{Rng as _, SeedableRng};
            let mut rng = crate::Rng::seed_from_u64(seed);
            let mut rand_img = || Image::from_vec(16, 12, 1, (0..192).map(|_| rng.random::<f64>()).collect()).unwrap();
            let (gx1, gy1, a1) = (rand_img(), rand_img(), rand_img());
            let (gx2, gy2, a2) = (rand_img(), rand_img(), rand_img());
            let lin = |p: &Image, q: &Image| p.zip_map(q, |x, y| x + k * y).unwrap();
            let lambda = 0.3;
            let (u1, _) = poisson_reconstruct(&gx1, &gy1, &a1, lambda).unwrap();
            let (u2, _) = poisson_reconstruct(&gx2, &gy2, &a2, lambda).unwrap();
            let (u, _) = poisson_reconstruct(&lin(&gx1, &gx2), &lin(&gy1, &gy2), &lin(&a1, &a2), lambda).unwrap();
            let expect = lin(&u1, &u2);
            for (a, b) in u.data().iter().zip(expect.data()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
