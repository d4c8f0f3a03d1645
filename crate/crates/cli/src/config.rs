//! JSON configuration documents, one per command. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mrf_core::dictionary::{build_grid, DEFAULT_T1_RANGE, DEFAULT_T2_RANGE};
use mrf_core::epg::{self, read_schedule};
use mrf_core::recon::PhantomSpec;
use mrf_core::spline::{Region, DEFAULT_SEGMENTS, WM_REGION};
use mrf_core::{ParamGrid, RangeSpec, SequenceParams, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads and parses a config file. Parse failures carry serde's line and
/// column.
pub fn load<T: DeserializeOwned>(path: &Path) -> anyhow::Result<(T, Vec<u8>)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value = serde_json::from_slice(&bytes)
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok((value, bytes))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub length: usize,
    pub tr_ms: f64,
    pub te_ms: f64,
    pub ti_ms: f64,
    pub rf_phase_deg: f64,
    pub epg_max_order: usize,
    /// One flip angle in degrees per line; replaces the default lobes.
    pub flip_angles_file: Option<PathBuf>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            length: epg::DEFAULT_LENGTH,
            tr_ms: epg::DEFAULT_TR_MS,
            te_ms: epg::DEFAULT_TE_MS,
            ti_ms: epg::DEFAULT_TI_MS,
            rf_phase_deg: epg::DEFAULT_RF_PHASE_DEG,
            epg_max_order: epg::DEFAULT_MAX_ORDER,
            flip_angles_file: None,
        }
    }
}

impl SequenceConfig {
    pub fn build(&self, base: &Path) -> anyhow::Result<SequenceParams> {
        let flips = match &self.flip_angles_file {
            Some(p) => read_schedule(resolve(base, p), Some(self.length))
                .context("sequence.flip_angles_file")?,
            None => epg::default_flip_schedule(self.length),
        };
        SequenceParams::new(
            flips,
            vec![self.tr_ms; self.length],
            self.te_ms,
            self.ti_ms,
            self.rf_phase_deg,
            self.epg_max_order,
        )
        .context("sequence")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeConfig {
    pub start: f64,
    pub step: f64,
    pub stop: f64,
}

impl From<RangeSpec> for RangeConfig {
    fn from(r: RangeSpec) -> Self {
        Self {
            start: r.start,
            step: r.step,
            stop: r.stop,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub t1: RangeConfig,
    pub t2: RangeConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t1: DEFAULT_T1_RANGE.into(),
            t2: DEFAULT_T2_RANGE.into(),
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> anyhow::Result<ParamGrid> {
        let r = |c: RangeConfig| RangeSpec::new(c.start, c.step, c.stop);
        build_grid(r(self.t1), r(self.t2)).context("grid")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimDictConfig {
    pub sequence: SequenceConfig,
    pub grid: GridConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub dictionary: PathBuf,
    pub seed: u64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Widths after the input, starting with the rank.
    #[serde(default = "default_hidden")]
    pub layout: Vec<usize>,
    /// `rng_seed` is taken from `seed`.
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_rank() -> usize {
    mrf_core::subspace::DEFAULT_RANK
}

fn default_hidden() -> Vec<usize> {
    mrf_core::mrfnet::DEFAULT_LAYOUT[1..].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    Dm,
    Net,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub seed: u64,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub sequence: SequenceConfig,
    /// Grid the phantom is checked against and the network's scale map
    /// rounds to. Taken from the dictionary when one is given.
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_engine")]
    pub engine: EngineChoice,
    /// k-space samples per frame; defaults to a sixteenth of the image.
    pub m: Option<usize>,
    pub dictionary: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Standard deviation of complex k-space noise per component.
    pub noise_sigma: Option<f64>,
    #[serde(default = "default_degenerate")]
    pub degenerate_rel: f64,
}

fn default_engine() -> EngineChoice {
    EngineChoice::Both
}

fn default_degenerate() -> f64 {
    mrf_core::matcher::DEFAULT_DEGENERATE_REL
}

impl ReconstructConfig {
    pub fn check(&self) -> anyhow::Result<()> {
        let dm = matches!(self.engine, EngineChoice::Dm | EngineChoice::Both);
        let net = matches!(self.engine, EngineChoice::Net | EngineChoice::Both);
        if dm && self.dictionary.is_none() {
            bail!("dictionary: required by the DM engine");
        }
        if net && self.checkpoint.is_none() {
            bail!("checkpoint: required by the NET engine");
        }
        if let Some(s) = self.noise_sigma {
            if !(s.is_finite() && s >= 0.0) {
                bail!("noise_sigma: must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub t1_ms: (f64, f64),
    pub t2_ms: (f64, f64),
}

impl From<RegionConfig> for Region {
    fn from(r: RegionConfig) -> Self {
        (r.t1_ms, r.t2_ms)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub checkpoint: PathBuf,
    pub dictionary: PathBuf,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_region")]
    pub region: RegionConfig,
}

fn default_k() -> usize {
    DEFAULT_SEGMENTS
}

fn default_max_iter() -> usize {
    mrf_core::kmeans::DEFAULT_MAX_ITER
}

fn default_region() -> RegionConfig {
    RegionConfig {
        t1_ms: WM_REGION.0,
        t2_ms: WM_REGION.1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    /// Widths after the projection, starting with the rank.
    #[serde(default = "default_hidden")]
    pub layout: Vec<usize>,
    #[serde(default = "default_voxels")]
    pub voxels: usize,
}

fn default_frames() -> usize {
    epg::DEFAULT_LENGTH
}

fn default_atoms() -> usize {
    ParamGrid::fisp_default().len()
}

fn default_voxels() -> usize {
    10_000
}
