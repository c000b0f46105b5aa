use rand::{Rng as _, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::noise::perlin_fractal;
use super::{GenConfig, HomographyMagnitude, SourceKind};
use crate::align::Homography;
use crate::error::{Error, Result};
use crate::imgcore::filter::gaussian_blur;
use crate::imgcore::{FlowField, Image, Mask};
use crate::warp::{homography_to_flow, occlusion_mask, sample_plane, BorderPolicy, OCCLUSION_EPS_ABS, OCCLUSION_EPS_REL};
use crate::Rng;

const MAX_RESAMPLE: usize = 32;
const MAX_SINGULAR_RETRIES: usize = 16;

/// Every random quantity behind one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub seed: u64,
    pub kind: SourceKind,
    pub source_t: usize,
    pub source_r: usize,
    pub alpha: f64,
    pub sigma_refl: f64,
    pub persistence: f64,
    pub sigma_spot: f64,
    pub spot_seed: u64,
    pub spot_gain: f64,
    /// Transmission motion from view 1 to view 2.
    pub h_t: Homography,
    /// Reflection motion from view 1 to view 2.
    pub h_r: Homography,
    /// Placement of the transmission plane in view 1; view 2 uses `h_t ∘ h_t1`.
    pub h_t1: Homography,
    pub h_r1: Homography,
}

impl SampleParams {
    pub fn h_t2(&self) -> Result<Homography> {
        self.h_t.compose(&self.h_t1)
    }

    pub fn h_r2(&self) -> Result<Homography> {
        self.h_r.compose(&self.h_r1)
    }
}

/// One generated benchmark item.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub i1: Image,
    pub i2: Image,
    pub t1: Image,
    pub t2: Image,
    pub r1: Image,
    pub r2: Image,
    /// Spot masks per view, already warped with the reflection.
    pub s1: Image,
    pub s2: Image,
    pub f12: FlowField,
    pub f21: FlowField,
    /// 1 where a view-1 pixel has no counterpart in view 2.
    pub occl12: Mask,
    pub occl21: Mask,
    pub params: SampleParams,
}

impl SamplePair {
    /// Ground truth the dereflection output is scored against: the
    /// transmission as it appears blended into view 1, `alpha * T1`.
    pub fn target(&self) -> Image {
        let a = self.params.alpha;
        self.t1.map(|v| a * v)
    }

    /// Largest deviation from `I = a T + (1-a) R + (1-a) g S` over pixels
    /// where the blend was not clamped.
    pub fn formation_residual(&self, view: usize) -> f64 {
        let (i, t, r, s) = match view {
            1 => (&self.i1, &self.t1, &self.r1, &self.s1),
            _ => (&self.i2, &self.t2, &self.r2, &self.s2),
        };
        let a = self.params.alpha;
        let g = self.params.spot_gain;
        let n = i.pixel_count();
        let mut worst: f64 = 0.0;
        for (k, &iv) in i.data().iter().enumerate() {
            let model = a * t.data()[k] + (1.0 - a) * r.data()[k] + (1.0 - a) * g * s.data()[k % n];
            if (0.0..=1.0).contains(&model) {
                worst = worst.max((iv - model).abs());
            }
        }
        worst
    }
}

fn uniform<R: RngCore + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

fn symmetric<R: RngCore + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    uniform(rng, [-bound, bound])
}

/// Translation, rotation and perspective perturbation about `(cx, cy)`.
pub fn sample_motion<R: RngCore + ?Sized>(rng: &mut R, mag: &HomographyMagnitude, cx: f64, cy: f64) -> Homography {
    for _ in 0..MAX_SINGULAR_RETRIES {
        let tx = symmetric(rng, mag.max_translation);
        let ty = symmetric(rng, mag.max_translation);
        let theta = symmetric(rng, mag.max_rotation).to_radians();
        let p1 = symmetric(rng, mag.max_perspective);
        let p2 = symmetric(rng, mag.max_perspective);
        let (s, c) = theta.sin_cos();
        let centered = Homography::from_coeffs([c, -s, tx, s, c, ty, p1, p2, 1.0]);
        if let Ok(h) = centered.and_then(|h| h.about_point(cx, cy)) {
            return h;
        }
    }
    Homography::identity()
}

/// Independent inter-view motions for the transmission and reflection planes.
pub fn sample_layer_homographies<R: RngCore + ?Sized>(rng: &mut R, cfg: &GenConfig) -> (Homography, Homography) {
    let c = (cfg.out_size as f64 - 1.0) / 2.0;
    let h_t = sample_motion(rng, &cfg.homography, c, c);
    let h_r = sample_motion(rng, &cfg.homography, c, c);
    (h_t, h_r)
}

#[derive(Clone, Debug)]
pub struct SpotSample {
    /// Soft mask in [0,1].
    pub mask: Image,
    pub persistence: f64,
    pub sigma: f64,
}

fn spot_mask<R: RngCore + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    octaves: usize,
    persistence: f64,
    threshold: f64,
    sigma: f64,
) -> Image {
    let noise = perlin_fractal(rng, width, height, octaves, persistence);
    let binary = noise.map(|v| if v > threshold { 1.0 } else { 0.0 });
    gaussian_blur(&binary, sigma).clamp01()
}

/// Binarized fractal noise, blurred: saturated highlights of the reflection.
pub fn bright_spot_mask<R: RngCore + ?Sized>(rng: &mut R, width: usize, height: usize, cfg: &GenConfig) -> SpotSample {
    let persistence = uniform(rng, cfg.persistence_range);
    let sigma = uniform(rng, cfg.spot_blur_sigma_range);
    let mask = spot_mask(rng, width, height, cfg.octaves, persistence, cfg.spot_threshold, sigma);
    SpotSample {
        mask,
        persistence,
        sigma,
    }
}

/// Resamples `src` into a view of side `out` where the layer plane appears
/// through `h_view` (plane -> view). The plane is the centered `out x out`
/// crop of the source. Returns the view and the in-source mask.
fn view_of(src: &Image, h_view: &Homography, out: usize) -> Result<(Image, Mask)> {
    let inv = h_view.inverse()?;
    let (sw, sh) = src.dims();
    let ox = (sw - out) as f64 / 2.0;
    let oy = (sh - out) as f64 / 2.0;
    let mut img = Image::new(out, out, src.channels());
    let mut valid = Vec::with_capacity(out * out);
    for y in 0..out {
        for x in 0..out {
            let (px, py) = inv.project(x as f64, y as f64).ok_or(Error::SingularHomography)?;
            let (sx, sy) = (px + ox, py + oy);
            let mut inside = true;
            for c in 0..src.channels() {
                let (v, ok) = sample_plane(src.plane(c), sw, sh, sx, sy, BorderPolicy::MarkInvalid);
                img.set(x, y, c, v);
                inside &= ok;
            }
            valid.push(inside);
        }
    }
    Ok((img, Mask::from_bools(out, out, valid)))
}

/// Renders a pair from fully specified parameters.
pub fn render_pair(t_src: &Image, r_src: &Image, params: &SampleParams, cfg: &GenConfig) -> Result<SamplePair> {
    let out = cfg.out_size;
    for src in [t_src, r_src] {
        if src.width() < out || src.height() < out {
            return Err(Error::InvalidArgument(format!(
                "source {}x{} smaller than output {out}",
                src.width(),
                src.height()
            )));
        }
    }
    if t_src.channels() != r_src.channels() {
        return Err(Error::InvalidArgument("sources differ in channel count".into()));
    }
    let (h_t1, h_t2) = (params.h_t1, params.h_t2()?);
    let (h_r1, h_r2) = (params.h_r1, params.h_r2()?);

    let (t1, c1) = view_of(t_src, &h_t1, out)?;
    let (t2, c2) = view_of(t_src, &h_t2, out)?;
    let (r1, c3) = view_of(r_src, &h_r1, out)?;
    let (r2, c4) = view_of(r_src, &h_r2, out)?;
    let coverage = [c1, c2, c3, c4].iter().map(Mask::fraction).fold(1.0, f64::min);
    if coverage < cfg.min_coverage {
        return Err(Error::Degenerate(format!("warp coverage {coverage:.3} below {}", cfg.min_coverage)));
    }

    let mut spot_rng = Rng::seed_from_u64(params.spot_seed);
    let spot_src = spot_mask(
        &mut spot_rng,
        r_src.width(),
        r_src.height(),
        cfg.octaves,
        params.persistence,
        cfg.spot_threshold,
        params.sigma_spot,
    );
    let (s1, _) = view_of(&spot_src, &h_r1, out)?;
    let (s2, _) = view_of(&spot_src, &h_r2, out)?;

    let t1 = t1.round_to_f32();
    let t2 = t2.round_to_f32();
    let r1 = gaussian_blur(&r1, params.sigma_refl).round_to_f32();
    let r2 = gaussian_blur(&r2, params.sigma_refl).round_to_f32();
    let s1 = s1.round_to_f32();
    let s2 = s2.round_to_f32();

    let a = params.alpha;
    let g = params.spot_gain;
    let blend = |t: &Image, r: &Image, s: &Image| -> Image {
        let n = t.pixel_count();
        let mut img = t.clone();
        for (k, v) in img.data_mut().iter_mut().enumerate() {
            let model = a * t.data()[k] + (1.0 - a) * r.data()[k] + (1.0 - a) * g * s.data()[k % n];
            *v = model.clamp(0.0, 1.0);
        }
        img.round_to_f32()
    };
    let i1 = blend(&t1, &r1, &s1);
    let i2 = blend(&t2, &r2, &s2);

    let f12 = homography_to_flow(&params.h_t, out, out)?.round_to_f32();
    let f21 = homography_to_flow(&params.h_t.inverse()?, out, out)?.round_to_f32();
    let occl12 = occlusion_mask(&f12, &f21, OCCLUSION_EPS_ABS, OCCLUSION_EPS_REL)?;
    let occl21 = occlusion_mask(&f21, &f12, OCCLUSION_EPS_ABS, OCCLUSION_EPS_REL)?;

    Ok(SamplePair {
        id: String::new(),
        i1,
        i2,
        t1,
        t2,
        r1,
        r2,
        s1,
        s2,
        f12,
        f21,
        occl12,
        occl21,
        params: params.clone(),
    })
}

/// Samples blending, blur, spot and motion parameters, then renders. Motions
/// are redrawn while the warped views leave too much of the sources.
pub fn compose_views<R: RngCore + ?Sized>(t_src: &Image, r_src: &Image, rng: &mut R, cfg: &GenConfig) -> Result<SamplePair> {
    let alpha = uniform(rng, cfg.alpha_range);
    let sigma_refl = uniform(rng, cfg.refl_blur_sigma_range);
    let persistence = uniform(rng, cfg.persistence_range);
    let sigma_spot = uniform(rng, cfg.spot_blur_sigma_range);
    let spot_seed = rng.next_u64();
    let c = (cfg.out_size as f64 - 1.0) / 2.0;
    let jitter = cfg.homography.scaled(cfg.jitter_scale);
    let mut last_err = None;
    for _ in 0..MAX_RESAMPLE {
        let (h_t, h_r) = sample_layer_homographies(rng, cfg);
        let h_t1 = sample_motion(rng, &jitter, c, c);
        let h_r1 = sample_motion(rng, &jitter, c, c);
        let params = SampleParams {
            seed: 0,
            kind: SourceKind::Rendered,
            source_t: 0,
            source_r: 0,
            alpha,
            sigma_refl,
            persistence,
            sigma_spot,
            spot_seed,
            spot_gain: cfg.spot_gain,
            h_t,
            h_r,
            h_t1,
            h_r1,
        };
        match render_pair(t_src, r_src, &params, cfg) {
            Ok(pair) => return Ok(pair),
            Err(e @ Error::Degenerate(_)) | Err(e @ Error::SingularHomography) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Degenerate("could not place views".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::backward_warp;

    fn src(size: usize, seed: u64) -> Image {
        super::super::procedural_source(seed, size)
    }

    fn small_cfg() -> GenConfig {
        GenConfig {
            out_size: 96,
            ..GenConfig::default()
        }
    }

    fn fixed_params(alpha: f64, h_t: Homography) -> SampleParams {
        SampleParams {
            seed: 0,
            kind: SourceKind::Rendered,
            source_t: 0,
            source_r: 1,
            alpha,
            sigma_refl: 0.0,
            persistence: 0.5,
            sigma_spot: 1.0,
            spot_seed: 3,
            spot_gain: 0.0,
            h_t,
            h_r: Homography::translation(-2.0, 1.0),
            h_t1: Homography::identity(),
            h_r1: Homography::identity(),
        }
    }

    #[test]
    fn zero_magnitudes_give_identity() {
        let cfg = GenConfig {
            homography: HomographyMagnitude::zero(),
            ..small_cfg()
        };
        let mut rng = Rng::seed_from_u64(1);
        let (a, b) = sample_layer_homographies(&mut rng, &cfg);
        assert_eq!(a, Homography::identity());
        assert_eq!(b, Homography::identity());
    }

    #[test]
    fn translation_only_draws() {
        let cfg = GenConfig {
            homography: HomographyMagnitude {
                max_translation: 10.0,
                ..HomographyMagnitude::zero()
            },
            ..small_cfg()
        };
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (h, _) = sample_layer_homographies(&mut rng, &cfg);
            let c = h.coeffs();
            assert_eq!([c[0], c[1], c[3], c[4], c[6], c[7]], [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
            assert!(c[2].abs() <= 10.0 && c[5].abs() <= 10.0);
        }
    }

    #[test]
    fn alpha_one_without_spots_is_transmission() {
        let cfg = small_cfg();
        let s = cfg.source_size();
        let p = fixed_params(1.0, Homography::translation(3.0, 0.0));
        let pair = render_pair(&src(s, 1), &src(s, 2), &p, &cfg).unwrap();
        assert_eq!(pair.i1, pair.t1);
        assert_eq!(pair.i2, pair.t2);
    }

    #[test]
    fn constant_reflection_offsets_transmission() {
        let cfg = small_cfg();
        let s = cfg.source_size();
        let p = fixed_params(0.7, Homography::translation(1.5, -0.5));
        let pair = render_pair(&src(s, 1), &Image::filled(s, s, 3, 0.5), &p, &cfg).unwrap();
        for (i, t) in pair.i1.data().iter().zip(pair.t1.data()) {
            let expect = 0.7 * t + 0.15;
            assert!((i - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn composed_pair_is_self_consistent() {
        let cfg = small_cfg();
        let s = cfg.source_size();
        let mut rng = Rng::seed_from_u64(11);
        let pair = compose_views(&src(s, 4), &src(s, 5), &mut rng, &cfg).unwrap();
        assert!(pair.formation_residual(1) < 1e-6);
        assert!(pair.formation_residual(2) < 1e-6);
        let p = &pair.params;
        assert!((0.6..=0.9).contains(&p.alpha));
        assert!((0.0..=3.0).contains(&p.sigma_refl));
        assert!((1.0..=5.0).contains(&p.sigma_spot));
        assert!((0.3..=1.0).contains(&p.persistence));

        // Flow is the one induced by H_T2 ∘ H_T1^-1.
        let composed = p.h_t2().unwrap().compose(&p.h_t1.inverse().unwrap()).unwrap();
        let expect = homography_to_flow(&composed, cfg.out_size, cfg.out_size).unwrap();
        for (a, b) in pair.f12.u().iter().zip(expect.u()).chain(pair.f12.v().iter().zip(expect.v())) {
            assert!((a - b).abs() < 1e-4);
        }

        // Oracle warp reproduces view 1 on unoccluded pixels.
        let (warped, valid) = backward_warp(&pair.t2, &pair.f12, BorderPolicy::MarkInvalid).unwrap();
        let (mut err, mut n) = (0.0, 0usize);
        for i in 0..pair.t1.pixel_count() {
            if pair.occl12.is_set(i) || !valid.is_set(i) {
                continue;
            }
            for c in 0..3 {
                err += (warped.plane(c)[i] - pair.t1.plane(c)[i]).abs();
                n += 1;
            }
        }
        assert!(err / (n as f64) < 0.02, "{}", err / n as f64);
    }

    #[test]
    fn spot_threshold_extremes() {
        let mut rng = Rng::seed_from_u64(3);
        let high = GenConfig {
            spot_threshold: 10.0,
            ..small_cfg()
        };
        assert!(bright_spot_mask(&mut rng, 64, 64, &high).mask.data().iter().all(|&v| v == 0.0));
        let low = GenConfig {
            spot_threshold: f64::NEG_INFINITY,
            ..small_cfg()
        };
        assert!(bright_spot_mask(&mut rng, 64, 64, &low)
            .mask
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn default_spots_are_sparse() {
        let cfg = GenConfig::default();
        let fractions: Vec<f64> = (0..100)
            .map(|seed| {
                let mut rng = Rng::seed_from_u64(seed);
                let spot = bright_spot_mask(&mut rng, 128, 128, &cfg);
                spot.mask.data().iter().filter(|&&v| v > 0.0).count() as f64 / (128.0 * 128.0)
            })
            .collect();
        let mean = crate::numeric::mean(&fractions);
        assert!(mean > 0.0 && mean < 0.5, "{mean}");
    }
}
