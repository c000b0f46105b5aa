//! Flow accuracy and transmission quality.
//!
//! Flow is scored by end-point error against the ground-truth field and by
//! the photometric error left after warping the reflection-free ground
//! truth with the estimate. Transmission estimates are first fitted to the
//! target with a gain and bias, then scored with PSNR and SSIM. Every report
//! also carries baseline rows (zero flow, ground-truth flow, the raw input)
//! so numbers can be read relative to them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::imgcore::filter::{convolve_separable, gaussian_kernel};
use crate::imgcore::{FlowField, Image, Mask, UNKNOWN_FLOW};
use crate::numeric::{lower_median, mean, pairwise_sum};
use crate::synthgen::SamplePair;
use crate::warp::{backward_warp, BorderPolicy};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Below this prediction variance the gain is not identifiable.
pub const MIN_CALIBRATION_VARIANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        Stat {
            mean: mean(values),
            median: lower_median(values),
        }
    }
}

/// End-point error over `mask` (1 = evaluate). Pixels with unknown ground
/// truth are skipped.
pub fn epe(flow_est: &FlowField, flow_gt: &FlowField, mask: &Mask) -> Result<Stat> {
    ensure_same_dims(flow_gt.dims(), flow_est.dims())?;
    ensure_same_dims(flow_gt.dims(), mask.dims())?;
    let errs: Vec<f64> = (0..mask.data().len())
        .filter(|&i| mask.is_set(i) && flow_gt.u()[i].abs() < UNKNOWN_FLOW && flow_gt.v()[i].abs() < UNKNOWN_FLOW)
        .map(|i| (flow_est.u()[i] - flow_gt.u()[i]).hypot(flow_est.v()[i] - flow_gt.v()[i]))
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(Stat::of(&errs))
}

/// Per-pixel, per-channel `|T1 - warp(T2, flow)|` on the 0..255 scale, over
/// pixels that are unoccluded and land inside view 2. Returns the stat and
/// the number of pixels used.
pub fn abs_warp_error(t1: &Image, t2: &Image, flow_est: &FlowField, occl: &Mask) -> Result<(Stat, usize)> {
    t1.ensure_same_shape(t2)?;
    ensure_same_dims(t1.dims(), occl.dims())?;
    let (warped, valid) = backward_warp(t2, flow_est, BorderPolicy::MarkInvalid)?;
    let n = t1.pixel_count();
    let used: Vec<usize> = (0..n).filter(|&i| !occl.is_set(i) && valid.is_set(i)).collect();
    if used.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut errs = Vec::with_capacity(used.len() * t1.channels());
    for c in 0..t1.channels() {
        let (a, b) = (t1.plane(c), warped.plane(c));
        errs.extend(used.iter().map(|&i| 255.0 * (a[i] - b[i]).abs()));
    }
    Ok((Stat::of(&errs), used.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub gain: f64,
    pub bias: f64,
    /// Prediction was (nearly) constant; gain fixed to 1.
    pub degenerate: bool,
}

impl Calibration {
    pub fn apply(&self, img: &Image) -> Image {
        img.map(|v| self.gain * v + self.bias)
    }
}

/// Least-squares `gain, bias` minimizing `|gain * pred + bias - gt|` over
/// `mask`, jointly over all channels.
pub fn calibrate_gain_bias(pred: &Image, gt: &Image, mask: &Mask) -> Result<Calibration> {
    pred.ensure_same_shape(gt)?;
    ensure_same_dims(pred.dims(), mask.dims())?;
    let n = pred.pixel_count();
    let idx: Vec<usize> = (0..pred.data().len()).filter(|&k| mask.is_set(k % n)).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (p, g) = (pred.data(), gt.data());
    let m = idx.len() as f64;
    let mp = pairwise_sum(&idx.iter().map(|&k| p[k]).collect::<Vec<_>>()) / m;
    let mg = pairwise_sum(&idx.iter().map(|&k| g[k]).collect::<Vec<_>>()) / m;
    let var = pairwise_sum(&idx.iter().map(|&k| (p[k] - mp).powi(2)).collect::<Vec<_>>()) / m;
    if var <= MIN_CALIBRATION_VARIANCE {
        return Ok(Calibration {
            gain: 1.0,
            bias: mg - mp,
            degenerate: true,
        });
    }
    let cov = pairwise_sum(&idx.iter().map(|&k| (p[k] - mp) * (g[k] - mg)).collect::<Vec<_>>()) / m;
    let gain = cov / var;
    Ok(Calibration {
        gain,
        bias: mg - gain * mp,
        degenerate: false,
    })
}

/// PSNR over all channels stacked, capped at `cap`.
pub fn psnr(a: &Image, b: &Image, peak: f64, cap: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).collect();
    let mse = mean(&sq);
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let kernel = gaussian_kernel(SSIM_WINDOW_SIGMA);
    let r = kernel.len() / 2;
    let blur = |v: Vec<f64>| convolve_separable(&v, w, h, &kernel);
    let mu_a = blur(a.to_vec());
    let mu_b = blur(b.to_vec());
    let aa = blur(a.iter().map(|x| x * x).collect());
    let bb = blur(b.iter().map(|x| x * x).collect());
    let ab = blur(a.iter().zip(b).map(|(x, y)| x * y).collect());
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let rows: Vec<f64> = (r..h - r)
        .into_par_iter()
        .map(|y| {
            let vals: Vec<f64> = (r..w - r)
                .map(|x| {
                    let i = y * w + x;
                    let (ma, mb) = (mu_a[i], mu_b[i]);
                    let va = aa[i] - ma * ma;
                    let vb = bb[i] - mb * mb;
                    let cov = ab[i] - ma * mb;
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                })
                .collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&rows) / ((w - 2 * r) * (h - 2 * r)) as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), peak 1,
/// averaged over window positions fully inside the raster and then over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let size = gaussian_kernel(SSIM_WINDOW_SIGMA).len();
    let (w, h) = a.dims();
    if w < size || h < size {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {size}x{size}, got {w}x{h}")));
    }
    let per: Vec<f64> = (0..a.channels()).map(|c| ssim_plane(a.plane(c), b.plane(c), w, h)).collect();
    Ok(pairwise_sum(&per) / per.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowScores {
    pub epe: Stat,
    /// Photometric warp error, 0..255 scale.
    pub abs: Stat,
    pub pixels_used: usize,
    pub pixels_masked: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
    pub calibration: Calibration,
}

/// Scores of one sample plus its baseline rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub flow: Option<FlowScores>,
    pub zeros_flow: FlowScores,
    pub oracle_flow: FlowScores,
    pub output: ImageScores,
    /// The unprocessed view scored the same way.
    pub input: ImageScores,
}

pub fn flow_scores(pair: &SamplePair, flow_est: &FlowField) -> Result<FlowScores> {
    let keep = pair.occl12.invert();
    let epe = epe(flow_est, &pair.f12, &keep)?;
    let (abs, pixels_used) = abs_warp_error(&pair.t1, &pair.t2, flow_est, &pair.occl12)?;
    Ok(FlowScores {
        epe,
        abs,
        pixels_used,
        pixels_masked: pair.occl12.count(),
    })
}

/// Calibrates `estimate` against `target` over the whole raster, then scores.
pub fn image_scores(estimate: &Image, target: &Image) -> Result<ImageScores> {
    let (w, h) = target.dims();
    let calibration = calibrate_gain_bias(estimate, target, &Mask::ones(w, h))?;
    let fitted = calibration.apply(estimate);
    Ok(ImageScores {
        psnr: psnr(&fitted, target, 1.0, PSNR_CAP)?,
        ssim: ssim(&fitted, target)?,
        calibration,
    })
}

/// Scores a flow estimate (if any) and a transmission estimate of view 1
/// against the pair's ground truth.
pub fn evaluate_sample(pair: &SamplePair, flow_est: Option<&FlowField>, t1_est: &Image) -> Result<MetricsReport> {
    let target = pair.target();
    let (w, h) = pair.f12.dims();
    Ok(MetricsReport {
        id: pair.id.clone(),
        flow: flow_est.map(|f| flow_scores(pair, f)).transpose()?,
        zeros_flow: flow_scores(pair, &FlowField::zeros(w, h))?,
        oracle_flow: flow_scores(pair, &pair.f12)?,
        output: image_scores(t1_est, &target)?,
        input: image_scores(&pair.i1, &target)?,
    })
}

impl MetricsReport {
    /// `(row, metric, value)` triples in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, &'static str, f64)> {
        let mut out = Vec::new();
        let mut flow = |row: &'static str, s: &FlowScores| {
            out.push((row, "epe", s.epe.mean));
            out.push((row, "abs", s.abs.mean));
        };
        if let Some(f) = &self.flow {
            flow("estimate", f);
        }
        flow("zeros", &self.zeros_flow);
        flow("oracle", &self.oracle_flow);
        for (row, s) in [("estimate", &self.output), ("input", &self.input)] {
            out.push((row, "psnr", s.psnr));
            out.push((row, "ssim", s.ssim));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub row: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

/// Mean and median of every `(row, metric)` across reports.
pub fn aggregate(reports: &[MetricsReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut keys: Vec<(&str, &str)> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for r in reports {
        for (row, metric, v) in r.values() {
            match keys.iter().position(|k| *k == (row, metric)) {
                Some(i) => columns[i].push(v),
                None => {
                    keys.push((row, metric));
                    columns.push(vec![v]);
                }
            }
        }
    }
    let rows = keys
        .into_iter()
        .zip(columns)
        .map(|((row, metric), vals)| {
            let s = Stat::of(&vals);
            SummaryRow {
                row: row.into(),
                metric: metric.into(),
                count: vals.len(),
                mean: s.mean,
                median: s.median,
            }
        })
        .collect();
    Ok(Summary { rows })
}

impl Summary {
    pub fn get(&self, row: &str, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.row == row && r.metric == metric)
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("summary row serializes") + "\n")
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:<6} {:>6} {:>12} {:>12}\n", "row", "metric", "n", "mean", "median");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<6} {:>6} {:>12.4} {:>12.4}",
                r.row, r.metric, r.count, r.mean, r.median
            );
        }
        s
    }
}

/// Optional pass/fail bounds on a summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub max_epe_mean: Option<f64>,
    pub max_abs_mean: Option<f64>,
    pub min_psnr_median: Option<f64>,
    pub min_ssim_median: Option<f64>,
    /// Required median PSNR gain of the estimate over the input, dB.
    pub min_psnr_gain: Option<f64>,
}

impl Thresholds {
    /// Human-readable list of violated bounds; empty when all hold.
    pub fn check(&self, summary: &Summary) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |row: &str, metric: &str, pick: fn(&SummaryRow) -> f64, bound: Option<f64>, upper: bool| {
            let Some(b) = bound else { return };
            match summary.get(row, metric) {
                None => out.push(format!("{row}/{metric} missing from summary")),
                Some(r) => {
                    let v = pick(r);
                    if (upper && !(v <= b)) || (!upper && !(v >= b)) {
                        let op = if upper { "<=" } else { ">=" };
                        out.push(format!("{row}/{metric} = {v:.4}, required {op} {b}"));
                    }
                }
            }
        };
        need("estimate", "epe", |r| r.mean, self.max_epe_mean, true);
        need("estimate", "abs", |r| r.mean, self.max_abs_mean, true);
        need("estimate", "psnr", |r| r.median, self.min_psnr_median, false);
        need("estimate", "ssim", |r| r.median, self.min_ssim_median, false);
        if let Some(gain) = self.min_psnr_gain {
            match (summary.get("estimate", "psnr"), summary.get("input", "psnr")) {
                (Some(e), Some(i)) if e.median - i.median >= gain => {}
                (Some(e), Some(i)) => out.push(format!(
                    "psnr gain over input = {:.4} dB, required >= {gain}",
                    e.median - i.median
                )),
                _ => out.push("psnr rows missing from summary".into()),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = crate::Rng::seed_from_u64(seed);
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn epe_examples() {
        let gt = FlowField::from_fn(6, 5, |x, y| (x as f64 * 0.3, -(y as f64)));
        let all = Mask::ones(6, 5);
        assert_eq!(epe(&gt, &gt, &all).unwrap(), Stat { mean: 0.0, median: 0.0 });
        let shifted = FlowField::from_fn(6, 5, |x, y| (x as f64 * 0.3 + 3.0, -(y as f64) + 4.0));
        let s = epe(&shifted, &gt, &all).unwrap();
        assert!((s.mean - 5.0).abs() < 1e-12 && (s.median - 5.0).abs() < 1e-12);
        assert!(matches!(epe(&gt, &gt, &Mask::zeros(6, 5)), Err(Error::EmptyMask)));
    }

    #[test]
    fn abs_error_on_ramp() {
        // Unit-slope ramp in 0..255 units; constant flow (5, 0) scored with zero flow.
        let t1 = Image::from_fn(40, 8, 1, |x, _, _| x as f64 / 255.0);
        let t2 = Image::from_fn(40, 8, 1, |x, _, _| (x as f64 - 5.0) / 255.0);
        let none = Mask::zeros(40, 8);
        let (s, used) = abs_warp_error(&t1, &t2, &FlowField::zeros(40, 8), &none).unwrap();
        assert!((s.mean - 5.0).abs() < 1e-9 && used == 320);
        let (s, _) = abs_warp_error(&t1, &t2, &FlowField::constant(40, 8, 5.0, 0.0), &none).unwrap();
        assert!(s.mean < 1e-9);
    }

    #[test]
    fn calibration_recovers_affine_map() {
        let gt = noise(16, 16, 3, 1);
        let all = Mask::ones(16, 16);
        let c = calibrate_gain_bias(&gt, &gt, &all).unwrap();
        assert!((c.gain - 1.0).abs() < 1e-12 && c.bias.abs() < 1e-12);
        let pred = gt.map(|v| (v - 0.1) / 0.8);
        let c = calibrate_gain_bias(&pred, &gt, &all).unwrap();
        assert!((c.gain - 0.8).abs() < 1e-9 && (c.bias - 0.1).abs() < 1e-9);
        let flat = Image::filled(16, 16, 3, 0.3);
        let c = calibrate_gain_bias(&flat, &gt, &all).unwrap();
        assert!(c.degenerate && c.gain == 1.0);
    }

    #[test]
    fn calibration_residual_is_orthogonal() {
        let pred = noise(20, 20, 3, 2);
        let gt = noise(20, 20, 3, 3);
        let c = calibrate_gain_bias(&pred, &gt, &Mask::ones(20, 20)).unwrap();
        let res: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| g - c.gain * p - c.bias).collect();
        let mp = mean(pred.data());
        let mr = mean(&res);
        let cov = mean(&res.iter().zip(pred.data()).map(|(r, p)| (r - mr) * (p - mp)).collect::<Vec<_>>());
        assert!(cov.abs() < 1e-9);
    }

    #[test]
    fn psnr_examples() {
        let a = noise(8, 8, 1, 4);
        assert_eq!(psnr(&a, &a, 1.0, PSNR_CAP).unwrap(), 99.0);
        let z = Image::filled(8, 8, 1, 0.5);
        assert!((psnr(&z, &z.map(|v| v + 0.1), 1.0, PSNR_CAP).unwrap() - 20.0).abs() < 1e-9);
        let p = psnr(&z, &z.map(|v| v - 0.05), 1.0, PSNR_CAP).unwrap();
        assert!((p - 10.0 * (1.0f64 / 0.0025).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let a = noise(24, 20, 3, 5);
        let b = noise(24, 20, 3, 6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&b, &a).unwrap().to_bits());
        let (c1, x, y) = (1e-4, 0.5, 0.6);
        let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let got = ssim(&Image::filled(16, 16, 1, x), &Image::filled(16, 16, 1, y)).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!(ssim(&Image::new(10, 30, 1), &Image::new(10, 30, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_bounded(seed in 0u64..10_000) {
            let a = noise(16, 16, 1, seed);
            let b = noise(16, 16, 1, seed + 1).zip_map(&a, |x, y| 0.3 * x - y).unwrap();
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn epe_is_symmetric_and_nonnegative(seed in 0u64..10_000) {
            let mut rng = crate::Rng::seed_from_u64(seed);
            let mut comp = || (0..20).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
            let mut field = || FlowField::from_vecs(5, 4, comp(), comp()).unwrap();
            let (a, b) = (field(), field());
            let all = Mask::ones(5, 4);
            let ab = epe(&a, &b, &all).unwrap();
            prop_assert_eq!(ab, epe(&b, &a, &all).unwrap());
            prop_assert!(ab.mean > 0.0);
        }
    }

    #[test]
    fn aggregate_examples() {
        let img = ImageScores {
            psnr: 10.0,
            ssim: 0.5,
            calibration: Calibration {
                gain: 1.0,
                bias: 0.0,
                degenerate: false,
            },
        };
        let flow = FlowScores {
            epe: Stat { mean: 1.0, median: 1.0 },
            abs: Stat { mean: 2.0, median: 2.0 },
            pixels_used: 1,
            pixels_masked: 0,
        };
        let report = |p: f64| MetricsReport {
            id: String::new(),
            flow: None,
            zeros_flow: flow,
            oracle_flow: flow,
            output: ImageScores { psnr: p, ..img },
            input: img,
        };
        let single = aggregate(&[report(20.0)]).unwrap();
        assert_eq!(single.get("estimate", "psnr").unwrap().mean, 20.0);
        let two = aggregate(&[report(20.0), report(30.0)]).unwrap();
        let r = two.get("estimate", "psnr").unwrap();
        assert_eq!((r.mean, r.median), (25.0, 20.0));
        let three = aggregate(&[report(10.0), report(20.0), report(90.0)]).unwrap();
        assert_eq!(three.get("estimate", "psnr").unwrap().median, 20.0);
        assert!(two.get("estimate", "epe").is_none());

        let th = Thresholds {
            min_psnr_gain: Some(1.0),
            max_epe_mean: Some(1.0),
            ..Thresholds::default()
        };
        assert_eq!(th.check(&two).len(), 1);
        assert!(aggregate(&[]).is_err());
    }
}
