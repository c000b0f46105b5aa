use std::fs;
use std::path::{Path, PathBuf};

use dvr_core::align::AlignParams;
use dvr_core::dereflect::DereflectMethod;
use dvr_core::flow::FlowParams;
use dvr_core::metrics::Thresholds;
use dvr_core::synthgen::{DeskBenchmark, GenConfig};
use serde::{Deserialize, Serialize};

/// Procedural source pool used when no source directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub seed: u64,
    pub size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        let desk = DeskBenchmark::default();
        PoolConfig {
            seed: desk.pool_seed,
            size: desk.pool_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of source images for `gen`; procedural sources when unset.
    pub sources: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Output directory of an earlier `align` or `dereflect` run, for `eval`.
    pub estimates: Option<PathBuf>,
}

/// Everything a run depends on. Flags may override the seed, the worker
/// count and paths; all other parameters live here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream. Replaces `gen.master_seed`.
    pub master_seed: u64,
    /// Rayon threads; 0 uses one per core.
    pub workers: usize,
    pub paths: Paths,
    pub gen: GenConfig,
    pub pool: PoolConfig,
    pub align: AlignParams,
    pub flow: FlowParams,
    pub dereflect: DereflectMethod,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = DeskBenchmark::default();
        RunConfig {
            master_seed: desk.gen.master_seed,
            workers: 0,
            paths: Paths::default(),
            gen: desk.gen,
            pool: PoolConfig::default(),
            align: AlignParams::default(),
            flow: FlowParams::default(),
            dereflect: DereflectMethod::MinComposite,
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.gen.master_seed = cfg.master_seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.master_seed = seed;
        self.gen.master_seed = seed;
    }

    pub fn desk(&self) -> DeskBenchmark {
        DeskBenchmark {
            gen: self.gen.clone(),
            pool_seed: self.pool.seed,
            pool_size: self.pool.size,
        }
    }

    /// Every range violation at once, prefixed by its block.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.gen.validate();
        errs.extend(self.align.validate());
        errs.extend(self.flow.validate());
        errs.extend(self.dereflect.validate());
        if self.paths.sources.is_none() && self.pool.size < 2 {
            errs.push(format!("pool.size must be >= 2, got {}", self.pool.size));
        }
        errs
    }
}

/// Appends an error for each path that does not exist.
pub fn require_exists(errs: &mut Vec<String>, what: &str, path: Option<&Path>) {
    match path {
        None => errs.push(format!("{what} is required")),
        Some(p) if !p.exists() => errs.push(format!("{what} {} does not exist", p.display())),
        Some(_) => {}
    }
}
