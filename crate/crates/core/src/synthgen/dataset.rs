use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compose::{compose_views, SampleParams, SamplePair};
use super::sources::SourcePool;
use super::{split_seed, GenConfig, SourceKind};
use crate::error::{Error, Result};
use crate::imgcore::io::{read_flo, read_pfm, write_flo, write_image, write_pfm};
use crate::imgcore::Mask;
use crate::Rng;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const KIND_STREAM: u64 = 0;
const COMPOSE_STREAM: u64 = 1;

/// File locations of one sample, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub i1: String,
    pub i2: String,
    pub t1: String,
    pub t2: String,
    pub r1: String,
    pub r2: String,
    pub s1: String,
    pub s2: String,
    pub f12: String,
    pub f21: String,
    pub occl12: String,
    pub occl21: String,
    pub preview1: String,
    pub preview2: String,
    pub params: String,
}

impl SamplePaths {
    fn for_id(id: &str) -> Self {
        let p = |name: &str| format!("samples/{id}/{name}");
        SamplePaths {
            i1: p("i1.pfm"),
            i2: p("i2.pfm"),
            t1: p("t1.pfm"),
            t2: p("t2.pfm"),
            r1: p("r1.pfm"),
            r2: p("r2.pfm"),
            s1: p("s1.pfm"),
            s2: p("s2.pfm"),
            f12: p("f12.flo"),
            f21: p("f21.flo"),
            occl12: p("occl12.pfm"),
            occl21: p("occl21.pfm"),
            preview1: p("i1.png"),
            preview2: p("i2.png"),
            params: p("params.json"),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(flatten)]
    pub params: SampleParams,
    pub paths: SamplePaths,
}

/// Mixture slot for the sample with the given per-sample seed.
pub fn pick_source_kind(sample_seed: u64, mixture: &[f64; 3]) -> SourceKind {
    let mut rng = Rng::seed_from_u64(split_seed(sample_seed, KIND_STREAM));
    let u: f64 = rng.random::<f64>() * mixture.iter().sum::<f64>();
    let mut acc = 0.0;
    for (kind, w) in SourceKind::ALL.iter().zip(mixture) {
        acc += w;
        if u < acc {
            return *kind;
        }
    }
    // u landed on the upper edge; take the last slot with nonzero weight.
    SourceKind::ALL
        .iter()
        .zip(mixture)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|(k, _)| *k)
        .unwrap_or(SourceKind::Rendered)
}

fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Builds sample `index` in memory.
pub fn generate_sample(cfg: &GenConfig, pool: &SourcePool, index: usize) -> Result<SamplePair> {
    let seed = split_seed(cfg.master_seed, index as u64);
    let kind = pick_source_kind(seed, &cfg.source_mixture);
    let n_rendered = pool.rendered.len();
    let (lo, hi) = match kind {
        SourceKind::Warped if !pool.photos.is_empty() => (n_rendered, pool.len()),
        SourceKind::Rendered | SourceKind::WarpedRendered if n_rendered > 0 => (0, n_rendered),
        _ => (0, pool.len()),
    };
    let mut rng = Rng::seed_from_u64(split_seed(seed, KIND_STREAM));
    let _: f64 = rng.random();
    let source_t = rng.random_range(lo..hi);
    let mut source_r = rng.random_range(0..pool.len() - 1);
    if source_r >= source_t {
        source_r += 1;
    }
    let image = |i: usize| {
        if i < n_rendered {
            &pool.rendered[i]
        } else {
            &pool.photos[i - n_rendered]
        }
    };
    let mut rng = Rng::seed_from_u64(split_seed(seed, COMPOSE_STREAM));
    let mut pair = compose_views(image(source_t), image(source_r), &mut rng, cfg)?;
    pair.id = sample_id(index);
    pair.params.seed = seed;
    pair.params.kind = kind;
    pair.params.source_t = source_t;
    pair.params.source_r = source_r;
    Ok(pair)
}

fn check_inputs(cfg: &GenConfig, pool: &SourcePool) -> Result<()> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 source images, got {}", pool.len())));
    }
    if pool.min_side() < cfg.out_size {
        return Err(Error::InvalidArgument(format!(
            "source images must be at least {0}x{0}, smallest side is {1}",
            cfg.out_size,
            pool.min_side()
        )));
    }
    let channels = pool.rendered.iter().chain(&pool.photos).map(|i| i.channels());
    if channels.clone().min() != channels.max() {
        return Err(Error::InvalidArgument("source images mix gray and color".into()));
    }
    Ok(())
}

fn write_sample(root: &Path, pair: &SamplePair) -> Result<ManifestRecord> {
    let paths = SamplePaths::for_id(&pair.id);
    let dir = root.join("samples").join(&pair.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let at = |rel: &str| root.join(rel);
    write_pfm(&pair.i1, at(&paths.i1))?;
    write_pfm(&pair.i2, at(&paths.i2))?;
    write_pfm(&pair.t1, at(&paths.t1))?;
    write_pfm(&pair.t2, at(&paths.t2))?;
    write_pfm(&pair.r1, at(&paths.r1))?;
    write_pfm(&pair.r2, at(&paths.r2))?;
    write_pfm(&pair.s1, at(&paths.s1))?;
    write_pfm(&pair.s2, at(&paths.s2))?;
    write_flo(&pair.f12, at(&paths.f12))?;
    write_flo(&pair.f21, at(&paths.f21))?;
    write_pfm(&pair.occl12.to_image(), at(&paths.occl12))?;
    write_pfm(&pair.occl21.to_image(), at(&paths.occl21))?;
    write_image(&pair.i1, at(&paths.preview1))?;
    write_image(&pair.i2, at(&paths.preview2))?;
    let json = serde_json::to_string_pretty(&pair.params).expect("params serialize");
    let p = at(&paths.params);
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(ManifestRecord {
        id: pair.id.clone(),
        params: pair.params.clone(),
        paths,
    })
}

/// Generates `cfg.count` samples under `out_dir` and writes the manifest.
/// Output depends only on `cfg` and `pool`, not on the rayon pool size.
pub fn gen_dataset(cfg: &GenConfig, pool: &SourcePool, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    check_inputs(cfg, pool)?;
    let root = out_dir.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let records: Vec<ManifestRecord> = (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_sample(cfg, pool, i).and_then(|pair| write_sample(root, &pair)))
        .collect::<Result<_>>()?;
    let path = root.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r).expect("record serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Directory holding the manifest, against which record paths resolve.
pub fn manifest_root(manifest: impl AsRef<Path>) -> PathBuf {
    manifest.as_ref().parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_sample(root: impl AsRef<Path>, rec: &ManifestRecord) -> Result<SamplePair> {
    let root = root.as_ref();
    let at = |rel: &str| root.join(rel);
    let mask = |rel: &str| read_pfm(at(rel)).and_then(|img| Mask::from_image(&img));
    let p = &rec.paths;
    Ok(SamplePair {
        id: rec.id.clone(),
        i1: read_pfm(at(&p.i1))?,
        i2: read_pfm(at(&p.i2))?,
        t1: read_pfm(at(&p.t1))?,
        t2: read_pfm(at(&p.t2))?,
        r1: read_pfm(at(&p.r1))?,
        r2: read_pfm(at(&p.r2))?,
        s1: read_pfm(at(&p.s1))?,
        s2: read_pfm(at(&p.s2))?,
        f12: read_flo(at(&p.f12))?,
        f21: read_flo(at(&p.f21))?,
        occl12: mask(&p.occl12)?,
        occl21: mask(&p.occl21)?,
        params: rec.params.clone(),
    })
}
