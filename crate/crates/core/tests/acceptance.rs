//! End-to-end acceptance suite on the 50-pair desk benchmark.
//!
//! Runs every criterion at its stated tolerance, prints one PASS/FAIL line
//! each, and exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;

use dvr_core::align::AlignParams;
use dvr_core::dereflect::{dereflect_with_flow, image_gradients, poisson_reconstruct, DereflectMethod};
use dvr_core::flow::{estimate_flow, FlowParams};
use dvr_core::imgcore::filter::central_gradients;
use dvr_core::imgcore::io::{read_flo, read_pfm, write_flo, write_pfm};
use dvr_core::imgcore::to_gray;
use dvr_core::metrics::{aggregate, calibrate_gain_bias, epe, evaluate_sample, image_scores, psnr, ssim, PSNR_CAP};
use dvr_core::synthgen::{gen_dataset, generate_sample, procedural_source, render_pair, DeskBenchmark, SamplePair};
use dvr_core::warp::{backward_warp, BorderPolicy};
use dvr_core::{FlowField, Homography, Image, Mask, Rng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[(s.len() - 1) / 2]
}

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    mean(&a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
}

struct Bench {
    cfg: DeskBenchmark,
    pool: dvr_core::synthgen::SourcePool,
    pairs: Vec<SamplePair>,
}

fn a1_formation(bench: &Bench) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for pair in &bench.pairs {
        let t = Instant::now();
        // Independent recomputation of the blend from the stored layers.
        let a = pair.params.alpha;
        let g = pair.params.spot_gain;
        for (i, t_, r, s) in [(&pair.i1, &pair.t1, &pair.r1, &pair.s1), (&pair.i2, &pair.t2, &pair.r2, &pair.s2)] {
            let n = i.pixel_count();
            for k in 0..i.data().len() {
                let model = a * t_.data()[k] + (1.0 - a) * r.data()[k] + (1.0 - a) * g * s.data()[k % n];
                if (0.0..=1.0).contains(&model) {
                    worst = worst.max((i.data()[k] - model).abs());
                }
            }
        }
        slowest = slowest.max(t.elapsed().as_secs_f64());
    }
    outcome(
        worst < 1e-6 && slowest < 1.0,
        format!("max off-clamp residual {worst:.2e}, slowest check {slowest:.3}s"),
    )
}

fn oracle_warp_mae(pair: &SamplePair) -> f64 {
    let (warped, valid) = backward_warp(&pair.t2, &pair.f12, BorderPolicy::MarkInvalid).unwrap();
    let n = pair.t1.pixel_count();
    let keep: Vec<usize> = (0..n).filter(|&i| !pair.occl12.is_set(i) && valid.is_set(i)).collect();
    let mut errs = Vec::new();
    for c in 0..pair.t1.channels() {
        errs.extend(keep.iter().map(|&i| (pair.t1.plane(c)[i] - warped.plane(c)[i]).abs()));
    }
    mean(&errs)
}

fn translation_pair(bench: &Bench, t: (f64, f64), r: (f64, f64), alpha: f64, seed: u64) -> SamplePair {
    let mut rng = Rng::seed_from_u64(seed);
    let base = generate_sample(&bench.cfg.gen, &bench.pool, seed as usize).unwrap();
    let mut p = base.params.clone();
    p.alpha = alpha;
    p.h_t = Homography::translation(t.0, t.1);
    p.h_r = Homography::translation(r.0, r.1);
    p.h_t1 = Homography::identity();
    p.h_r1 = Homography::identity();
    p.spot_seed = rng.random();
    let size = bench.cfg.gen.source_size();
    let t_src = procedural_source(split(seed, 1), size);
    let r_src = procedural_source(split(seed, 2), size);
    render_pair(&t_src, &r_src, &p, &bench.cfg.gen).unwrap()
}

fn split(seed: u64, i: u64) -> u64 {
    dvr_core::synthgen::split_seed(seed, i)
}

fn a2_oracle_warp(bench: &Bench) -> Outcome {
    let maes: Vec<f64> = bench.pairs.par_iter().map(oracle_warp_mae).collect();
    let worst = maes.iter().cloned().fold(0.0, f64::max);
    let integer = translation_pair(bench, (3.0, -2.0), (0.0, 0.0), 0.8, 99);
    let exact = oracle_warp_mae(&integer);
    outcome(
        worst < 0.02 && exact == 0.0,
        format!("worst benchmark MAE {worst:.4}, integer-translation MAE {exact:e}"),
    )
}

fn unoccluded_epe(pair: &SamplePair, flow: &FlowField) -> f64 {
    epe(flow, &pair.f12, &pair.occl12.invert()).unwrap().mean
}

struct FlowRun {
    epe: f64,
    twin_epe: f64,
    seconds: f64,
    flow: FlowField,
}

fn twin(bench: &Bench, pair: &SamplePair) -> SamplePair {
    let mut p = pair.params.clone();
    p.alpha = 1.0;
    let n_rendered = bench.pool.rendered.len();
    let src = |i: usize| if i < n_rendered { &bench.pool.rendered[i] } else { &bench.pool.photos[i - n_rendered] };
    render_pair(src(p.source_t), src(p.source_r), &p, &bench.cfg.gen).unwrap()
}

fn run_flows(bench: &Bench) -> Vec<FlowRun> {
    let align = AlignParams::default();
    let params = FlowParams::default();
    bench
        .pairs
        .iter()
        .map(|pair| {
            let mut rng = Rng::seed_from_u64(pair.params.seed);
            let t = Instant::now();
            let est = estimate_flow(&pair.i1, &pair.i2, &align, &params, &mut rng).unwrap();
            let seconds = t.elapsed().as_secs_f64();
            let free = twin(bench, pair);
            let mut rng = Rng::seed_from_u64(pair.params.seed);
            let est_free = estimate_flow(&free.i1, &free.i2, &align, &params, &mut rng).unwrap();
            FlowRun {
                epe: unoccluded_epe(pair, &est.flow),
                twin_epe: unoccluded_epe(&free, &est_free.flow),
                seconds,
                flow: est.flow,
            }
        })
        .collect()
}

fn a3_alignment(runs: &[FlowRun]) -> Outcome {
    let good = runs.iter().filter(|r| r.epe < 0.5).count();
    let frac = good as f64 / runs.len() as f64;
    let contaminated = mean(&runs.iter().map(|r| r.epe).collect::<Vec<_>>());
    let clean = mean(&runs.iter().map(|r| r.twin_epe).collect::<Vec<_>>());
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    outcome(
        frac >= 0.9 && contaminated <= 2.0 * clean && slowest < 5.0,
        format!(
            "EPE<0.5 on {good}/{} pairs, mean EPE {contaminated:.3} vs reflection-free {clean:.3}, slowest {slowest:.2}s",
            runs.len()
        ),
    )
}

fn a3b_two_motions(bench: &Bench) -> Outcome {
    let align = AlignParams::default();
    let params = FlowParams::default();
    let mut epes = Vec::new();
    for seed in 0..5u64 {
        let pair = translation_pair(bench, (3.0, 0.0), (-3.0, 0.0), 0.7, 1000 + seed);
        let mut rng = Rng::seed_from_u64(seed);
        let est = estimate_flow(&pair.i1, &pair.i2, &align, &params, &mut rng).unwrap();
        // Textured: transmission gradient magnitude above its median.
        let g = to_gray(&pair.t1);
        let (w, h) = g.dims();
        let (gx, gy) = central_gradients(g.data(), w, h);
        let mags: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
        let cut = median(&mags);
        let textured = Mask::from_bools(w, h, (0..w * h).map(|i| mags[i] > cut && !pair.occl12.is_set(i)));
        let truth = FlowField::constant(w, h, 3.0, 0.0);
        epes.push(epe(&est.flow, &truth, &textured).unwrap().mean);
    }
    let worst = epes.iter().cloned().fold(0.0, f64::max);
    outcome(worst < 1.0, format!("worst fixture EPE {worst:.3} px over {} fixtures", epes.len()))
}

fn a4_metric_protocol(bench: &Bench) -> Outcome {
    let pair = &bench.pairs[0];
    let report = evaluate_sample(pair, None, &pair.i1).unwrap();
    let keep: Vec<usize> = (0..pair.f12.u().len()).filter(|&i| !pair.occl12.is_set(i)).collect();
    let analytic = mean(&keep.iter().map(|&i| pair.f12.u()[i].hypot(pair.f12.v()[i])).collect::<Vec<_>>());
    let zeros_err = (report.zeros_flow.epe.mean - analytic).abs();

    let target = pair.target();
    let (w, h) = target.dims();
    let (s, b) = (0.8, 0.1);
    let planted = target.map(|v| (v - b) / s);
    let cal = calibrate_gain_bias(&planted, &target, &Mask::ones(w, h)).unwrap();
    let cal_err = (cal.gain - s).abs().max((cal.bias - b).abs());

    let base = image_scores(&pair.i1, &target).unwrap();
    let mapped = image_scores(&pair.i1.map(|v| 1.7 * v - 0.3), &target).unwrap();
    let psnr_err = (base.psnr - mapped.psnr).abs();
    let ssim_self = (ssim(&target, &target).unwrap() - 1.0).abs();
    let cap_ok = psnr(&target, &target, 1.0, PSNR_CAP).unwrap() == PSNR_CAP;
    outcome(
        zeros_err < 1e-6 && cal_err < 1e-9 && psnr_err < 1e-6 && ssim_self < 1e-9 && cap_ok,
        format!(
            "zeros-row error {zeros_err:.1e}, calibration error {cal_err:.1e}, affine PSNR drift {psnr_err:.1e} dB, 1-SSIM(x,x) {ssim_self:.1e}"
        ),
    )
}

fn a5_dereflection(bench: &Bench, runs: &[FlowRun]) -> Outcome {
    let method = DereflectMethod::MinComposite;
    let rows: Vec<(f64, f64, bool, f64)> = bench
        .pairs
        .par_iter()
        .zip(runs)
        .map(|(pair, run)| {
            let (out, _) = dereflect_with_flow(&pair.i1, &pair.i2, &run.flow, &method).unwrap();
            let report = evaluate_sample(pair, Some(&run.flow), &out).unwrap();
            let target = pair.target();
            let better = mean_abs_diff(&out, &target) <= mean_abs_diff(&pair.i1, &target);
            let (grad, _) = dereflect_with_flow(&pair.i1, &pair.i2, &run.flow, &DereflectMethod::gradient_domain()).unwrap();
            let grad_psnr = image_scores(&grad, &target).unwrap().psnr;
            (report.output.psnr, report.input.psnr, better, grad_psnr)
        })
        .collect();
    let out_med = median(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let in_med = median(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let grad_med = median(&rows.iter().map(|r| r.3).collect::<Vec<_>>());
    let better = rows.iter().filter(|r| r.2).count();
    outcome(
        out_med - in_med >= 1.0 && better as f64 >= 0.9 * rows.len() as f64,
        format!(
            "median PSNR {out_med:.2} dB vs input {in_med:.2} dB (gradient-domain {grad_med:.2} dB), closer to target on {better}/{} pairs",
            rows.len()
        ),
    )
}

fn a6_poisson(bench: &Bench) -> Outcome {
    let img = &bench.pairs[0].t1;
    let (gx, gy) = image_gradients(img);
    let (u, stats) = poisson_reconstruct(&gx, &gy, img, 0.0).unwrap();
    let mut sq = 0.0;
    for c in 0..img.channels() {
        let (mu, mi) = (mean(u.plane(c)), mean(img.plane(c)));
        sq += u.plane(c).iter().zip(img.plane(c)).map(|(a, b)| ((a - mu) - (b - mi)).powi(2)).sum::<f64>();
    }
    let rmse = (sq / img.data().len() as f64).sqrt();
    outcome(
        rmse < 1e-3 && stats.converged && stats.relative_residual < 1e-6 && stats.iterations <= 2000,
        format!(
            "{}x{} RMSE {rmse:.2e}, residual {:.2e} after {} iterations",
            img.width(),
            img.height(),
            stats.relative_residual,
            stats.iterations
        ),
    )
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn a7_determinism(bench: &Bench) -> Outcome {
    let mut cfg = bench.cfg.gen.clone();
    cfg.count = 4;
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let summary = pool.install(|| {
            let records = gen_dataset(&cfg, &bench.pool, dir.path()).unwrap();
            let reports: Vec<_> = records
                .par_iter()
                .map(|rec| {
                    let pair = dvr_core::synthgen::load_sample(dir.path(), rec).unwrap();
                    let mut rng = Rng::seed_from_u64(pair.params.seed);
                    let est =
                        estimate_flow(&pair.i1, &pair.i2, &AlignParams::default(), &FlowParams::default(), &mut rng)
                            .unwrap();
                    let (out, _) = dereflect_with_flow(&pair.i1, &pair.i2, &est.flow, &DereflectMethod::gradient_domain())
                        .unwrap();
                    evaluate_sample(&pair, Some(&est.flow), &out).unwrap()
                })
                .collect();
            aggregate(&reports).unwrap().to_jsonl()
        });
        (tree(dir.path()), summary)
    };
    let (tree1, sum1) = run(1);
    let (tree4, sum4) = run(4);
    let same = tree1 == tree4 && sum1 == sum4;

    let dir = tempfile::tempdir().unwrap();
    let pair = &bench.pairs[1];
    write_pfm(&pair.i1, dir.path().join("x.pfm")).unwrap();
    write_flo(&pair.f12, dir.path().join("x.flo")).unwrap();
    let pfm_ok = read_pfm(dir.path().join("x.pfm")).unwrap() == pair.i1;
    let flo_ok = read_flo(dir.path().join("x.flo")).unwrap() == pair.f12;
    outcome(
        same && pfm_ok && flo_ok,
        format!(
            "1 vs 4 workers identical: {same} ({} files); PFM bit-exact: {pfm_ok}; FLO bit-exact: {flo_ok}",
            tree1.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let cfg = DeskBenchmark::default();
    let pool = cfg.pool();
    let pairs: Vec<SamplePair> = (0..cfg.gen.count)
        .into_par_iter()
        .map(|i| generate_sample(&cfg.gen, &pool, i).unwrap())
        .collect();
    let bench = Bench { cfg, pool, pairs };
    println!(
        "desk benchmark: {} pairs at {}x{} generated in {:.1}s",
        bench.pairs.len(),
        bench.cfg.gen.out_size,
        bench.cfg.gen.out_size,
        start.elapsed().as_secs_f64()
    );

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("A1 formation identity", a1_formation(&bench)));
    results.push(("A2 oracle warp consistency", a2_oracle_warp(&bench)));
    let runs = run_flows(&bench);
    results.push(("A3 reflection-robust alignment", a3_alignment(&runs)));
    results.push(("A3b two-motion separation", a3b_two_motions(&bench)));
    results.push(("A4 metric protocol fidelity", a4_metric_protocol(&bench)));
    results.push(("A5 dereflection improvement", a5_dereflection(&bench, &runs)));
    results.push(("A6 Poisson solver", a6_poisson(&bench)));
    results.push(("A7 determinism and formats", a7_determinism(&bench)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} passed in {:.1}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
