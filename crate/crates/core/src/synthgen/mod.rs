//! Seeded generator of dual-view pairs with ground truth.
//!
//! Each view blends a transmission and a reflection layer,
//! `I = clamp(a T + (1 - a) R + (1 - a) g S)`, where both layers move under
//! independent homographies and `S` is a blurred mask of saturated spots
//! carried by the reflection. Ground-truth transmission flow, occlusion masks
//! and every sampled parameter are stored with the pair.

mod compose;
mod dataset;
mod noise;
mod seed;
mod sources;

pub use compose::{
    bright_spot_mask, compose_views, render_pair, sample_layer_homographies, sample_motion, SampleParams,
    SamplePair, SpotSample,
};
pub use dataset::{
    gen_dataset, generate_sample, load_manifest, load_sample, manifest_root, pick_source_kind, ManifestRecord, SamplePaths, MANIFEST_FILE,
};
pub use noise::{fractal_amplitude_bound, perlin2, perlin_fractal, PERLIN_MAX};
pub use seed::split_seed;
pub use sources::{procedural_pool, procedural_source, SourcePool};

use serde::{Deserialize, Serialize};

/// Which slot of the training mixture a sample fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Drawn from the "rendered" pool (any user-supplied stand-in).
    Rendered,
    /// Drawn from the photo pool.
    Warped,
    /// Rendered pool under the same homography formation.
    WarpedRendered,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Rendered, SourceKind::Warped, SourceKind::WarpedRendered];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomographyMagnitude {
    /// Per-axis translation bound, px.
    pub max_translation: f64,
    /// Rotation bound about the raster center, degrees.
    pub max_rotation: f64,
    /// Bound on the perspective terms h31, h32 (centered coordinates, 1/px).
    pub max_perspective: f64,
}

impl Default for HomographyMagnitude {
    fn default() -> Self {
        HomographyMagnitude {
            max_translation: 8.0,
            max_rotation: 1.0,
            max_perspective: 3e-5,
        }
    }
}

impl HomographyMagnitude {
    pub fn zero() -> Self {
        HomographyMagnitude {
            max_translation: 0.0,
            max_rotation: 0.0,
            max_perspective: 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        HomographyMagnitude {
            max_translation: self.max_translation * s,
            max_rotation: self.max_rotation * s,
            max_perspective: self.max_perspective * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: usize,
    pub out_size: usize,
    pub alpha_range: [f64; 2],
    /// Reflection defocus, px.
    pub refl_blur_sigma_range: [f64; 2],
    pub spot_blur_sigma_range: [f64; 2],
    pub persistence_range: [f64; 2],
    pub octaves: usize,
    /// Binarization level of the fractal noise, in noise units.
    pub spot_threshold: f64,
    pub spot_gain: f64,
    /// Inter-view motion of each layer.
    pub homography: HomographyMagnitude,
    /// View 1 gets a jitter of this fraction of the inter-view magnitudes.
    pub jitter_scale: f64,
    /// Weights of [`SourceKind::ALL`], in order.
    pub source_mixture: [f64; 3],
    pub master_seed: u64,
    /// Minimum fraction of view pixels that must map inside the sources.
    pub min_coverage: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 50,
            out_size: 512,
            alpha_range: [0.6, 0.9],
            refl_blur_sigma_range: [0.0, 3.0],
            spot_blur_sigma_range: [1.0, 5.0],
            persistence_range: [0.3, 1.0],
            octaves: 4,
            spot_threshold: 1.0,
            spot_gain: 2.0,
            homography: HomographyMagnitude::default(),
            jitter_scale: 0.25,
            source_mixture: [0.6, 0.3, 0.1],
            master_seed: 0,
            min_coverage: 0.7,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64, errs: &mut Vec<String>) {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        errs.push(format!("gen.{name} must be an ordered finite interval, got {r:?}"));
    } else if r[0] < lo || r[1] > hi {
        errs.push(format!("gen.{name} must lie within [{lo}, {hi}], got {r:?}"));
    }
}

impl GenConfig {
    /// Source margin around the output crop, px.
    pub fn margin(&self) -> usize {
        (self.out_size / 8).max(16)
    }

    /// Side of the square source images the generator expects.
    pub fn source_size(&self) -> usize {
        self.out_size + 2 * self.margin()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.out_size < 64 {
            errs.push(format!("gen.out_size must be >= 64, got {}", self.out_size));
        }
        check_range("alpha_range", self.alpha_range, 0.0, 1.0, &mut errs);
        check_range("refl_blur_sigma_range", self.refl_blur_sigma_range, 0.0, f64::INFINITY, &mut errs);
        check_range("spot_blur_sigma_range", self.spot_blur_sigma_range, 0.0, f64::INFINITY, &mut errs);
        check_range("persistence_range", self.persistence_range, 0.0, 1.0, &mut errs);
        if self.persistence_range[0] <= 0.0 {
            errs.push("gen.persistence_range must be > 0".into());
        }
        if self.octaves < 1 {
            errs.push("gen.octaves must be >= 1".into());
        }
        if self.spot_threshold.is_nan() {
            errs.push("gen.spot_threshold must not be NaN".into());
        }
        if !(self.spot_gain >= 0.0) {
            errs.push("gen.spot_gain must be >= 0".into());
        }
        let h = &self.homography;
        if !(h.max_translation >= 0.0 && h.max_rotation >= 0.0 && h.max_perspective >= 0.0) {
            errs.push("gen.homography magnitudes must be >= 0".into());
        }
        if !(self.jitter_scale >= 0.0) {
            errs.push("gen.jitter_scale must be >= 0".into());
        }
        let total: f64 = self.source_mixture.iter().sum();
        if self.source_mixture.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            errs.push(format!(
                "gen.source_mixture must be nonnegative and sum to 1, got {:?}",
                self.source_mixture
            ));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            errs.push("gen.min_coverage must lie in [0,1]".into());
        }
        errs
    }
}

/// The fixed evaluation set: procedural sources plus a generator config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskBenchmark {
    pub gen: GenConfig,
    pub pool_seed: u64,
    pub pool_size: usize,
}

impl Default for DeskBenchmark {
    fn default() -> Self {
        DeskBenchmark {
            gen: GenConfig {
                master_seed: 20_210_611,
                ..GenConfig::default()
            },
            pool_seed: 7,
            pool_size: 16,
        }
    }
}

impl DeskBenchmark {
    pub fn pool(&self) -> SourcePool {
        procedural_pool(self.pool_seed, self.pool_size, self.gen.source_size())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(GenConfig::default().validate().is_empty());
    }

    #[test]
    fn all_errors_reported_together() {
        let cfg = GenConfig {
            out_size: 32,
            alpha_range: [0.9, 0.6],
            source_mixture: [0.5, 0.5, 0.5],
            ..GenConfig::default()
        };
        assert_eq!(cfg.validate().len(), 3);
    }
}
