//! Dominant-motion estimation between two views.
//!
//! Corners are detected in the first view, matched into the second by ZNCC,
//! and a homography is fitted by RANSAC. When the transmission is the
//! stronger layer its motion wins the consensus and reflection matches end
//! up as outliers.

mod corners;
mod homography;
mod matching;

pub use corners::{detect_corners, harris_response, Corner, HARRIS_K};
pub use homography::Homography;
pub use matching::{match_patches, Match, MIN_SCORE};

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng as _, RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::imgcore::{to_gray, Image};
use crate::numeric::quantile;
use crate::synthgen::split_seed;
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignParams {
    pub max_corners: usize,
    pub min_distance: f64,
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Reprojection error below which a match supports a hypothesis, in px.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_matches: usize,
    /// Consensus fraction below which the result is flagged unreliable.
    pub min_consensus: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        AlignParams {
            max_corners: 600,
            min_distance: 8.0,
            patch_radius: 5,
            search_radius: 24,
            inlier_threshold: 1.5,
            confidence: 0.999,
            max_iterations: 2000,
            min_matches: 8,
            min_consensus: 0.5,
        }
    }
}

impl AlignParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.max_corners < 4 {
            errs.push("align.max_corners must be >= 4".into());
        }
        if self.patch_radius < 2 {
            errs.push("align.patch_radius must be >= 2".into());
        }
        if !(self.inlier_threshold > 0.0) {
            errs.push("align.inlier_threshold must be > 0".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            errs.push("align.confidence must lie in (0,1)".into());
        }
        if self.max_iterations == 0 {
            errs.push("align.max_iterations must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.min_consensus) {
            errs.push("align.min_consensus must lie in [0,1]".into());
        }
        errs
    }
}

/// Structured record of one alignment run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignDiagnostics {
    pub corners: usize,
    pub matches: usize,
    pub inliers: usize,
    pub inlier_ratio: f64,
    pub iterations: usize,
    pub residual_p50: f64,
    pub residual_p90: f64,
    pub residual_max: f64,
    pub reliable: bool,
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    pub homography: Homography,
    pub matches: Vec<Match>,
    /// One flag per match.
    pub inliers: Vec<bool>,
    pub diagnostics: AlignDiagnostics,
}

impl AlignResult {
    pub fn reliable(&self) -> bool {
        self.diagnostics.reliable
    }
}

fn reprojection_error(h: &Homography, m: &Match) -> f64 {
    match h.project(m.p1.0, m.p1.1) {
        Some((x, y)) => (x - m.p2.0).hypot(y - m.p2.1),
        None => f64::INFINITY,
    }
}

/// Similarity that moves the centroid to the origin and the mean distance to sqrt(2).
fn normalizing_transform(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = pts.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform with Hartley normalization.
pub fn fit_homography_dlt(matches: &[Match]) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(Error::Degenerate(format!(
            "need at least 4 matches, got {}",
            matches.len()
        )));
    }
    let src: Vec<(f64, f64)> = matches.iter().map(|m| m.p1).collect();
    let dst: Vec<(f64, f64)> = matches.iter().map(|m| m.p2).collect();
    let t1 = normalizing_transform(&src);
    let t2 = normalizing_transform(&dst);
    let apply = |t: &Matrix3<f64>, p: (f64, f64)| (t[(0, 0)] * p.0 + t[(0, 2)], t[(1, 1)] * p.1 + t[(1, 2)]);

    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&p, &q)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = apply(&t1, p);
        let (u, v) = apply(&t2, q);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    if !(largest > 0.0) || second / largest < 1e-8 {
        return Err(Error::Degenerate("rank-deficient point configuration".into()));
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::from_row_slice(&h.iter().copied().collect::<Vec<_>>());
    let t2_inv = t2.try_inverse().ok_or(Error::SingularHomography)?;
    Homography::from_matrix(t2_inv * hn * t1)
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs() < 1.0
}

fn minimal_sample_ok(ms: &[Match; 4]) -> bool {
    let combos = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)];
    combos.iter().all(|&(i, j, k)| {
        !collinear(ms[i].p1, ms[j].p1, ms[k].p1) && !collinear(ms[i].p2, ms[j].p2, ms[k].p2)
    })
}

#[derive(Clone, Copy, Debug)]
struct Hypothesis {
    index: usize,
    h: Homography,
    inliers: usize,
    cost: f64,
}

impl Hypothesis {
    fn better_than(&self, other: &Hypothesis) -> bool {
        (self.inliers, -self.cost, std::cmp::Reverse(self.index))
            > (other.inliers, -other.cost, std::cmp::Reverse(other.index))
    }
}

fn score(h: &Homography, matches: &[Match], threshold: f64) -> (usize, f64) {
    let t2 = threshold * threshold;
    matches.iter().fold((0, 0.0), |(n, cost), m| {
        let e = reprojection_error(h, m);
        if e < threshold {
            (n + 1, cost + e * e)
        } else {
            (n, cost + t2)
        }
    })
}

fn hypothesis(index: usize, seed: u64, matches: &[Match], threshold: f64) -> Option<Hypothesis> {
    let mut rng = Rng::seed_from_u64(split_seed(seed, index as u64));
    let n = matches.len();
    let mut idx = [0usize; 4];
    for k in 0..4 {
        loop {
            let c = rng.random_range(0..n);
            if !idx[..k].contains(&c) {
                idx[k] = c;
                break;
            }
        }
    }
    let sample = idx.map(|i| matches[i]);
    if !minimal_sample_ok(&sample) {
        return None;
    }
    let h = fit_homography_dlt(&sample).ok()?;
    let (inliers, cost) = score(&h, matches, threshold);
    Some(Hypothesis {
        index,
        h,
        inliers,
        cost,
    })
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let good = inlier_ratio.powi(4);
    if good >= 1.0 {
        return 1.0;
    }
    if good <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil()
}

const BATCH: usize = 64;

/// RANSAC over 4-match samples. Hypotheses are evaluated in fixed-size
/// batches, each drawn from its own seed, so the result does not depend on
/// how rayon schedules them.
pub fn ransac_homography(matches: &[Match], params: &AlignParams, seed: u64) -> (Option<Homography>, Vec<bool>, usize) {
    if matches.len() < 4 {
        return (None, vec![false; matches.len()], 0);
    }
    let mut best: Option<Hypothesis> = None;
    let mut done = 0;
    let mut needed = params.max_iterations as f64;
    while (done as f64) < needed.min(params.max_iterations as f64) {
        let batch_end = (done + BATCH).min(params.max_iterations);
        let batch: Vec<Hypothesis> = (done..batch_end)
            .into_par_iter()
            .filter_map(|i| hypothesis(i, seed, matches, params.inlier_threshold))
            .collect();
        for hyp in batch {
            if best.is_none_or(|b| hyp.better_than(&b)) {
                best = Some(hyp);
            }
        }
        done = batch_end;
        if let Some(b) = best {
            needed = required_iterations(b.inliers as f64 / matches.len() as f64, params.confidence);
        }
    }
    let Some(best) = best else {
        return (None, vec![false; matches.len()], done);
    };

    // Refit on the consensus set until it stops changing.
    let mut h = best.h;
    let mut mask: Vec<bool> = matches
        .iter()
        .map(|m| reprojection_error(&h, m) < params.inlier_threshold)
        .collect();
    for _ in 0..5 {
        let inl: Vec<Match> = matches.iter().zip(&mask).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
        let Ok(refit) = fit_homography_dlt(&inl) else { break };
        let next: Vec<bool> = matches
            .iter()
            .map(|m| reprojection_error(&refit, m) < params.inlier_threshold)
            .collect();
        if next.iter().filter(|&&k| k).count() < inl.len() / 2 {
            break;
        }
        h = refit;
        if next == mask {
            break;
        }
        mask = next;
    }
    (Some(h), mask, done)
}

/// Estimates the homography of the dominant (transmission) layer from view 1
/// to view 2. Never fails on difficult content: an unreliable estimate is
/// flagged in the diagnostics and carries the best hypothesis found.
pub fn estimate_dominant_homography<R: RngCore + ?Sized>(
    img1: &Image,
    img2: &Image,
    params: &AlignParams,
    rng: &mut R,
) -> Result<AlignResult> {
    ensure_same_dims(img1.dims(), img2.dims())?;
    let seed = rng.next_u64();
    let g1 = to_gray(img1);
    let g2 = to_gray(img2);
    let corners = detect_corners(&g1, params.max_corners, params.min_distance);
    let matches = match_patches(&g1, &g2, &corners, params.patch_radius, params.search_radius);

    let mut diag = AlignDiagnostics {
        corners: corners.len(),
        matches: matches.len(),
        ..Default::default()
    };
    if matches.len() < params.min_matches {
        diag.warning = Some(format!(
            "alignment unreliable: {} matches (< {})",
            matches.len(),
            params.min_matches
        ));
        let inliers = vec![false; matches.len()];
        return Ok(AlignResult {
            homography: Homography::identity(),
            matches,
            inliers,
            diagnostics: diag,
        });
    }

    let (h, inliers, iterations) = ransac_homography(&matches, params, seed);
    let h = h.unwrap_or_default();
    let residuals: Vec<f64> = matches
        .iter()
        .zip(&inliers)
        .filter(|(_, &k)| k)
        .map(|(m, _)| reprojection_error(&h, m))
        .collect();
    diag.inliers = residuals.len();
    diag.inlier_ratio = residuals.len() as f64 / matches.len() as f64;
    diag.iterations = iterations;
    if !residuals.is_empty() {
        diag.residual_p50 = quantile(&residuals, 0.5);
        diag.residual_p90 = quantile(&residuals, 0.9);
        diag.residual_max = quantile(&residuals, 1.0);
    }
    diag.reliable = diag.inlier_ratio >= params.min_consensus;
    if !diag.reliable {
        diag.warning = Some(format!(
            "alignment unreliable: consensus {:.2} below {:.2}",
            diag.inlier_ratio, params.min_consensus
        ));
    }
    Ok(AlignResult {
        homography: h,
        matches,
        inliers,
        diagnostics: diag,
    })
}
