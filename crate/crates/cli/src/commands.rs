use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use dvr_core::dereflect::{dereflect_pair, DereflectMethod, PoissonStats};
use dvr_core::flow::{estimate_flow, FlowDiagnostics};
use dvr_core::imgcore::io::{read_flo, read_image, read_pfm, write_flo, write_image, write_pfm};
use dvr_core::metrics::{aggregate, epe, evaluate_sample, MetricsReport, Stat, Summary};
use dvr_core::synthgen::{
    gen_dataset, generate_sample, load_manifest, load_sample, manifest_root, split_seed, ManifestRecord, SamplePair,
    SourcePool, MANIFEST_FILE,
};
use dvr_core::{Image, Rng};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{require_exists, RunConfig};

pub const FLOWS_DIR: &str = "flows";
pub const TRANSMISSION_DIR: &str = "transmission";

/// Why a command stopped, mapped one-to-one onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Runtime(anyhow::Error),
    Config(Vec<String>),
    Thresholds(Vec<String>),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Thresholds(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<dvr_core::Error>() {
            Ok(dvr_core::Error::InvalidConfig(errs)) => Failure::Config(errs),
            Ok(other) => Failure::Runtime(other.into()),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<dvr_core::Error> for Failure {
    fn from(e: dvr_core::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// What `align` and `dereflect` operate on.
#[derive(Clone, Debug)]
pub enum Inputs {
    Manifest(PathBuf),
    Pair(PathBuf, PathBuf),
}

struct Item {
    id: String,
    index: usize,
    i1: Image,
    i2: Image,
    truth: Option<SamplePair>,
}

fn check(errs: Vec<String>) -> Outcome<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Failure::Config(errs))
    }
}

fn out_dir(cfg: &RunConfig, errs: &mut Vec<String>) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| {
        errs.push("output directory is required (--out or paths.out)".into());
        PathBuf::new()
    })
}

/// RNG for the pipeline run on item `index`, independent of the streams
/// the generator drew the sample from.
pub fn pipeline_rng(master_seed: u64, index: usize) -> Rng {
    Rng::seed_from_u64(split_seed(split_seed(master_seed, index as u64), 2))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_lines<T: Serialize>(values: &[T], path: &Path) -> anyhow::Result<()> {
    let mut text = String::new();
    for v in values {
        text += &serde_json::to_string(v)?;
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn image_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pfm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn read_all(paths: &[PathBuf]) -> anyhow::Result<Vec<Image>> {
    paths
        .par_iter()
        .map(|p| read_image(p).with_context(|| format!("reading source {}", p.display())))
        .collect()
}

/// A source directory either holds `rendered/` and `photos/` subdirectories
/// feeding the two mixture pools, or loose images shared by both.
pub fn load_source_dir(dir: &Path) -> anyhow::Result<SourcePool> {
    let (rendered, photos) = (dir.join("rendered"), dir.join("photos"));
    if rendered.is_dir() || photos.is_dir() {
        let load = |d: &Path| if d.is_dir() { read_all(&image_files(d)?) } else { Ok(Vec::new()) };
        return Ok(SourcePool {
            rendered: load(&rendered)?,
            photos: load(&photos)?,
        });
    }
    let images = read_all(&image_files(dir)?)?;
    Ok(SourcePool {
        rendered: images.clone(),
        photos: images,
    })
}

pub fn cmd_gen(cfg: &RunConfig) -> Outcome<PathBuf> {
    let mut errs = cfg.validate();
    let out = out_dir(cfg, &mut errs);
    if let Some(src) = &cfg.paths.sources {
        if !src.is_dir() {
            errs.push(format!("source directory {} does not exist", src.display()));
        }
    }
    check(errs)?;
    let pool = match &cfg.paths.sources {
        Some(dir) => load_source_dir(dir)?,
        None => cfg.desk().pool(),
    };
    let t0 = Instant::now();
    let records = gen_dataset(&cfg.gen, &pool, &out)?;
    let manifest = out.join(MANIFEST_FILE);
    let n = records.len().max(1) as f64;
    let alpha = records.iter().map(|r| r.params.alpha).sum::<f64>() / n;
    let spot = records.iter().map(|r| r.params.sigma_spot).sum::<f64>() / n;
    println!("{}", manifest.display());
    println!(
        "{} samples at {size}x{size} in {:.1}s, mean alpha {alpha:.3}, mean spot sigma {spot:.2} px",
        records.len(),
        t0.elapsed().as_secs_f64(),
        size = cfg.gen.out_size
    );
    Ok(manifest)
}

fn load_items(inputs: &Inputs) -> anyhow::Result<Vec<Item>> {
    match inputs {
        Inputs::Pair(a, b) => {
            let i1 = read_image(a).with_context(|| format!("reading {}", a.display()))?;
            let i2 = read_image(b).with_context(|| format!("reading {}", b.display()))?;
            Ok(vec![Item {
                id: "pair".into(),
                index: 0,
                i1,
                i2,
                truth: None,
            }])
        }
        Inputs::Manifest(m) => {
            let root = manifest_root(m);
            let records = load_manifest(m)?;
            records
                .par_iter()
                .enumerate()
                .map(|(index, rec)| {
                    let pair = load_sample(&root, rec).with_context(|| format!("loading sample {}", rec.id))?;
                    Ok(Item {
                        id: rec.id.clone(),
                        index,
                        i1: pair.i1.clone(),
                        i2: pair.i2.clone(),
                        truth: Some(pair),
                    })
                })
                .collect()
        }
    }
}

fn check_inputs(inputs: &Inputs, errs: &mut Vec<String>) {
    match inputs {
        Inputs::Manifest(m) => require_exists(errs, "manifest", Some(m)),
        Inputs::Pair(a, b) => {
            require_exists(errs, "first view", Some(a));
            require_exists(errs, "second view", Some(b));
        }
    }
}

#[derive(Serialize)]
struct AlignRecord<'a> {
    id: &'a str,
    diagnostics: &'a FlowDiagnostics,
    /// Against the ground-truth transmission flow on unoccluded pixels.
    epe: Option<Stat>,
}

/// Writes `flows/{id}.flo` and `flows/{id}.json` for every input pair.
pub fn cmd_align(cfg: &RunConfig, inputs: &Inputs) -> Outcome<Vec<PathBuf>> {
    let mut errs = cfg.validate();
    let out = out_dir(cfg, &mut errs);
    check_inputs(inputs, &mut errs);
    check(errs)?;
    let items = load_items(inputs)?;
    let dir = out.join(FLOWS_DIR);
    create_dir(&dir)?;
    let written: Vec<(PathBuf, String)> = items
        .par_iter()
        .map(|item| -> anyhow::Result<(PathBuf, String)> {
            let mut rng = pipeline_rng(cfg.master_seed, item.index);
            let est = estimate_flow(&item.i1, &item.i2, &cfg.align, &cfg.flow, &mut rng)?;
            let err = match &item.truth {
                Some(pair) => Some(epe(&est.flow, &pair.f12, &pair.occl12.invert())?),
                None => None,
            };
            let path = dir.join(format!("{}.flo", item.id));
            write_flo(&est.flow, &path)?;
            let record = AlignRecord {
                id: &item.id,
                diagnostics: &est.diagnostics,
                epe: err,
            };
            write_json(&record, &dir.join(format!("{}.json", item.id)))?;
            let mut line = format!(
                "{}: {} inliers of {} matches, mean refinement {:.3} px",
                item.id, est.diagnostics.align.inliers, est.diagnostics.align.matches, est.diagnostics.mean_refinement
            );
            if let Some(e) = err {
                line += &format!(", EPE {:.3} px", e.mean);
            }
            if est.diagnostics.unreliable {
                line += " (warning: unreliable alignment)";
            }
            Ok((path, line))
        })
        .collect::<anyhow::Result<_>>()?;
    for (_, line) in &written {
        println!("{line}");
    }
    Ok(written.into_iter().map(|(p, _)| p).collect())
}

#[derive(Serialize)]
struct DereflectRecord<'a> {
    id: &'a str,
    method: &'a DereflectMethod,
    flow: &'a FlowDiagnostics,
    poisson: Option<PoissonStats>,
    unreliable: bool,
}

/// Writes `transmission/{id}.{pfm,png,json}` and the flow that produced it.
pub fn cmd_dereflect(cfg: &RunConfig, inputs: &Inputs) -> Outcome<Vec<PathBuf>> {
    let mut errs = cfg.validate();
    let out = out_dir(cfg, &mut errs);
    check_inputs(inputs, &mut errs);
    check(errs)?;
    let items = load_items(inputs)?;
    let (tdir, fdir) = (out.join(TRANSMISSION_DIR), out.join(FLOWS_DIR));
    create_dir(&tdir)?;
    create_dir(&fdir)?;
    let t0 = Instant::now();
    let written: Vec<(PathBuf, String)> = items
        .par_iter()
        .map(|item| -> anyhow::Result<(PathBuf, String)> {
            let mut rng = pipeline_rng(cfg.master_seed, item.index);
            let (est, flow, run) = dereflect_pair(&item.i1, &item.i2, &cfg.dereflect, &cfg.align, &cfg.flow, &mut rng)?;
            let path = tdir.join(format!("{}.pfm", item.id));
            write_pfm(&est, &path)?;
            write_image(&est, tdir.join(format!("{}.png", item.id)))?;
            write_flo(&flow, fdir.join(format!("{}.flo", item.id)))?;
            let record = DereflectRecord {
                id: &item.id,
                method: &run.method,
                flow: &run.flow,
                poisson: run.poisson,
                unreliable: run.unreliable,
            };
            write_json(&record, &tdir.join(format!("{}.json", item.id)))?;
            let mut line = format!(
                "{}: {} in {:.2}s flow + {:.2}s synthesis",
                item.id,
                run.method.name(),
                run.flow_seconds,
                run.synth_seconds
            );
            if run.unreliable {
                line += " (warning: unreliable alignment)";
            }
            Ok((path, line))
        })
        .collect::<anyhow::Result<_>>()?;
    for (_, line) in &written {
        println!("{line}");
    }
    println!("{} pairs in {:.1}s", written.len(), t0.elapsed().as_secs_f64());
    Ok(written.into_iter().map(|(p, _)| p).collect())
}

fn write_summary(out: &Path, reports: &[MetricsReport], summary: &Summary) -> anyhow::Result<()> {
    create_dir(out)?;
    write_lines(reports, &out.join("reports.jsonl"))?;
    fs::write(out.join("summary.jsonl"), summary.to_jsonl())?;
    fs::write(out.join("summary.txt"), summary.to_text())?;
    Ok(())
}

fn finish(cfg: &RunConfig, summary: Summary) -> Outcome<Summary> {
    print!("{}", summary.to_text());
    std::io::stdout().flush().ok();
    let violated = cfg.thresholds.check(&summary);
    if violated.is_empty() {
        Ok(summary)
    } else {
        Err(Failure::Thresholds(violated))
    }
}

/// Scores the estimates of an earlier run against a manifest's ground
/// truth. Every missing estimate is listed before anything is computed.
pub fn cmd_eval(cfg: &RunConfig) -> Outcome<Summary> {
    let mut errs = cfg.validate();
    let manifest = cfg.paths.manifest.as_deref();
    let estimates = cfg.paths.estimates.as_deref();
    require_exists(&mut errs, "manifest", manifest);
    require_exists(&mut errs, "estimates directory", estimates);
    check(errs)?;
    let (manifest, estimates) = (manifest.expect("checked"), estimates.expect("checked"));
    let records = load_manifest(manifest)?;
    let (tdir, fdir) = (estimates.join(TRANSMISSION_DIR), estimates.join(FLOWS_DIR));
    let with_flow = fdir.is_dir();
    let mut missing = Vec::new();
    for rec in &records {
        let t = tdir.join(format!("{}.pfm", rec.id));
        if !t.is_file() {
            missing.push(format!("missing estimate {}", t.display()));
        }
        let f = fdir.join(format!("{}.flo", rec.id));
        if with_flow && !f.is_file() {
            missing.push(format!("missing flow {}", f.display()));
        }
    }
    check(missing)?;
    let root = manifest_root(manifest);
    let reports: Vec<MetricsReport> = records
        .par_iter()
        .map(|rec: &ManifestRecord| -> anyhow::Result<MetricsReport> {
            let pair = load_sample(&root, rec)?;
            let t1 = read_pfm(tdir.join(format!("{}.pfm", rec.id)))?;
            let flow = if with_flow {
                Some(read_flo(fdir.join(format!("{}.flo", rec.id)))?)
            } else {
                None
            };
            evaluate_sample(&pair, flow.as_ref(), &t1).with_context(|| format!("scoring {}", rec.id))
        })
        .collect::<anyhow::Result<_>>()?;
    let summary = aggregate(&reports)?;
    if let Some(out) = &cfg.paths.out {
        write_summary(out, &reports, &summary)?;
    }
    finish(cfg, summary)
}

/// Generates the configured benchmark in memory, runs the full pipeline on
/// every pair and scores it.
pub fn cmd_bench(cfg: &RunConfig) -> Outcome<Summary> {
    check(cfg.validate())?;
    let desk = cfg.desk();
    let pool = desk.pool();
    let t0 = Instant::now();
    let reports: Vec<MetricsReport> = (0..cfg.gen.count)
        .into_par_iter()
        .map(|index| -> anyhow::Result<MetricsReport> {
            let pair = generate_sample(&cfg.gen, &pool, index)?;
            let mut rng = pipeline_rng(cfg.master_seed, index);
            let (est, flow, _) = dereflect_pair(&pair.i1, &pair.i2, &cfg.dereflect, &cfg.align, &cfg.flow, &mut rng)?;
            Ok(evaluate_sample(&pair, Some(&flow), &est)?)
        })
        .collect::<anyhow::Result<_>>()?;
    if reports.is_empty() {
        return Err(Failure::Runtime(anyhow!("benchmark has no samples")));
    }
    let summary = aggregate(&reports)?;
    if let Some(out) = &cfg.paths.out {
        write_summary(out, &reports, &summary)?;
    }
    println!(
        "{} pairs, method {}, {:.1}s",
        reports.len(),
        cfg.dereflect.name(),
        t0.elapsed().as_secs_f64()
    );
    finish(cfg, summary)
}
