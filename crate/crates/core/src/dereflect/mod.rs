//! Transmission synthesis from a view and its partner aligned along the
//! transmission motion.
//!
//! After alignment the transmission is static between the two images while
//! the reflection is displaced. Reflections are additive and nonnegative, so
//! a pixelwise minimum removes every reflection that does not overlap
//! itself after alignment. The gradient-domain method keeps only the edges
//! both images agree on and integrates them back, anchored to that minimum.

mod edges;
mod poisson;

pub use edges::{classify_edges, EdgeLabel};
pub use poisson::{image_gradients, poisson_reconstruct, PoissonStats, CG_MAX_ITERATIONS, CG_TOLERANCE};

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::align::AlignParams;
use crate::error::{ensure_same_dims, Error, Result};
use crate::flow::{estimate_flow, FlowDiagnostics, FlowParams};
use crate::imgcore::{FlowField, Image, Mask};
use crate::warp::{backward_warp, BorderPolicy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DereflectMethod {
    #[default]
    MinComposite,
    SoftMin {
        tau: f64,
    },
    GradientDomain {
        /// Anchor weight of the screened Poisson solve.
        lambda: f64,
        /// Window of the edge agreement statistic, px.
        sigma_agg: f64,
    },
}


impl DereflectMethod {
    pub fn gradient_domain() -> Self {
        DereflectMethod::GradientDomain {
            lambda: 0.05,
            sigma_agg: 2.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DereflectMethod::MinComposite => "min-composite",
            DereflectMethod::SoftMin { .. } => "soft-min",
            DereflectMethod::GradientDomain { .. } => "gradient-domain",
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match *self {
            DereflectMethod::MinComposite => {}
            DereflectMethod::SoftMin { tau } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    errs.push(format!("dereflect.tau must be > 0, got {tau}"));
                }
            }
            DereflectMethod::GradientDomain { lambda, sigma_agg } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    errs.push(format!("dereflect.lambda must be >= 0, got {lambda}"));
                }
                if !(sigma_agg > 0.0 && sigma_agg.is_finite()) {
                    errs.push(format!("dereflect.sigma_agg must be > 0, got {sigma_agg}"));
                }
            }
        }
        errs
    }
}

fn check_inputs(i1: &Image, i21: &Image, valid: &Mask) -> Result<()> {
    i1.ensure_same_shape(i21)?;
    ensure_same_dims(i1.dims(), valid.dims())
}

/// Pixelwise minimum where `valid`, `i1` elsewhere.
pub fn min_composite(i1: &Image, i21: &Image, valid: &Mask) -> Result<Image> {
    check_inputs(i1, i21, valid)?;
    let n = i1.pixel_count();
    let mut out = i1.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        if valid.is_set(k % n) {
            *v = v.min(i21.data()[k]);
        }
    }
    Ok(out)
}

/// `-tau log(exp(-a/tau) + exp(-b/tau)) + tau log 2`, evaluated without
/// overflow. Equal inputs return the input exactly.
pub fn soft_min_scalar(a: f64, b: f64, tau: f64) -> f64 {
    let lo = a.min(b);
    let e = (-(a - b).abs() / tau).exp();
    lo + tau * (2.0f64.ln() - (1.0 + e).ln())
}

/// Smooth minimum. Unlike [`min_composite`] this converges to the minimum
/// only as `tau -> 0`: the offset from it is at most `tau log 2`.
pub fn soft_min(i1: &Image, i21: &Image, tau: f64, valid: &Mask) -> Result<Image> {
    check_inputs(i1, i21, valid)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let n = i1.pixel_count();
    let mut out = i1.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        if valid.is_set(k % n) {
            *v = soft_min_scalar(*v, i21.data()[k], tau);
        }
    }
    Ok(out)
}

/// Gradients of `i1` weighted by edge agreement, integrated with the
/// min-composite as anchor.
pub fn gradient_domain(i1: &Image, i21: &Image, valid: &Mask, lambda: f64, sigma_agg: f64) -> Result<(Image, PoissonStats)> {
    let anchor = min_composite(i1, i21, valid)?;
    let label = classify_edges(i1, i21, valid, sigma_agg)?;
    let (mut gx, mut gy) = image_gradients(i1);
    let (w, h) = i1.dims();
    for c in 0..i1.channels() {
        let (wx, wy) = (label.wx.plane(c), label.wy.plane(c));
        for (i, g) in gx.plane_mut(c).iter_mut().enumerate() {
            let next = if (i % w) + 1 < w { wx[i + 1] } else { wx[i] };
            *g *= 0.5 * (wx[i] + next);
        }
        for (i, g) in gy.plane_mut(c).iter_mut().enumerate() {
            let next = if i + w < w * h { wy[i + w] } else { wy[i] };
            *g *= 0.5 * (wy[i] + next);
        }
    }
    poisson_reconstruct(&gx, &gy, &anchor, lambda)
}

/// Synthesis from `i1` and the aligned partner `i21`.
pub fn synthesize(i1: &Image, i21: &Image, valid: &Mask, method: &DereflectMethod) -> Result<(Image, Option<PoissonStats>)> {
    let errs = method.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    match *method {
        DereflectMethod::MinComposite => Ok((min_composite(i1, i21, valid)?, None)),
        DereflectMethod::SoftMin { tau } => Ok((soft_min(i1, i21, tau, valid)?, None)),
        DereflectMethod::GradientDomain { lambda, sigma_agg } => {
            let (img, stats) = gradient_domain(i1, i21, valid, lambda, sigma_agg)?;
            Ok((img, Some(stats)))
        }
    }
}

/// Warps `i2` into view 1 with `flow12` and synthesizes.
pub fn dereflect_with_flow(
    i1: &Image,
    i2: &Image,
    flow12: &FlowField,
    method: &DereflectMethod,
) -> Result<(Image, Option<PoissonStats>)> {
    i1.ensure_same_shape(i2)?;
    let (i21, valid) = backward_warp(i2, flow12, BorderPolicy::MarkInvalid)?;
    synthesize(i1, &i21, &valid, method)
}

/// What a dereflection run did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: DereflectMethod,
    pub flow: FlowDiagnostics,
    pub poisson: Option<PoissonStats>,
    /// Alignment could not be trusted; the output may keep reflections.
    pub unreliable: bool,
    pub flow_seconds: f64,
    pub synth_seconds: f64,
}

/// Full pipeline: flow, warp, synthesis.
pub fn dereflect_pair<R: RngCore + ?Sized>(
    i1: &Image,
    i2: &Image,
    method: &DereflectMethod,
    align: &AlignParams,
    flow_params: &FlowParams,
    rng: &mut R,
) -> Result<(Image, FlowField, RunRecord)> {
    i1.ensure_same_shape(i2)?;
    let t0 = Instant::now();
    let est = estimate_flow(i1, i2, align, flow_params, rng)?;
    let flow_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (out, poisson) = dereflect_with_flow(i1, i2, &est.flow, method)?;
    let record = RunRecord {
        method: *method,
        unreliable: est.diagnostics.unreliable,
        flow: est.diagnostics,
        poisson,
        flow_seconds,
        synth_seconds: t1.elapsed().as_secs_f64(),
    };
    Ok((out, est.flow, record))
}
