//! Numerical phantom, single-coil Cartesian acquisition, back-projection
//! and scoring of reconstructed maps.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dictionary::{normalize_atom, ParamGrid};
use crate::epg::{simulate_fingerprint, SequenceParams};
use crate::error::{Error, Result};
use crate::linalg::dotc;
use crate::maps::{Engine, QMaps, SignalImage};
use crate::matcher::{degenerate_mask, match_image, CompressedDictionary};
use crate::mrfnet::MlpModel;
use crate::subspace::Subspace;

/// Ellipse in normalized image coordinates: both axes span `[-1, 1]`,
/// `x` to the right and `y` downwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseRegion {
    #[serde(default)]
    pub name: String,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    #[serde(default)]
    pub angle_deg: f64,
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub scale: f64,
}

impl EllipseRegion {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<EllipseRegion>,
}

fn region(
    name: &str,
    (cx, cy): (f64, f64),
    (rx, ry): (f64, f64),
    (t1_ms, t2_ms): (f64, f64),
    scale: f64,
) -> EllipseRegion {
    EllipseRegion {
        name: name.into(),
        cx,
        cy,
        rx,
        ry,
        angle_deg: 0.0,
        t1_ms,
        t2_ms,
        scale,
    }
}

impl Default for PhantomSpec {
    /// 64 x 64 with four separated compartments on a zero background.
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            regions: vec![
                region("wm", (-0.47, -0.47), (0.4, 0.4), (784.0, 77.0), 0.7),
                region("gm", (0.47, -0.47), (0.4, 0.4), (1216.0, 95.0), 0.8),
                region("csf", (-0.47, 0.47), (0.4, 0.4), (4000.0, 600.0), 1.0),
                region("fat", (0.47, 0.47), (0.4, 0.4), (300.0, 50.0), 0.9),
            ],
        }
    }
}

impl PhantomSpec {
    /// Moves every region's (T1, T2) to its nearest grid point.
    pub fn snapped_to(&self, grid: &ParamGrid) -> Self {
        let mut out = self.clone();
        for r in &mut out.regions {
            let (t1, t2) = grid.params_of(grid.nearest_index(r.t1_ms, r.t2_ms));
            r.t1_ms = t1;
            r.t2_ms = t2;
        }
        out
    }
}

/// Rasterized phantom. Label `i + 1` marks voxels of region `i`, 0 the
/// background.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub height: usize,
    pub width: usize,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub scale: Vec<f64>,
    pub labels: Vec<u32>,
    pub names: Vec<String>,
}

impl Phantom {
    pub fn n_voxels(&self) -> usize {
        self.height * self.width
    }
}

/// Rasterizes the regions in order, later ones overwriting earlier ones.
/// Region parameters must lie inside the grid ranges.
pub fn make_phantom(spec: &PhantomSpec, grid: &ParamGrid) -> Result<Phantom> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidArgument(format!(
            "phantom must be non-empty, got {} x {}",
            spec.height, spec.width
        )));
    }
    for (i, r) in spec.regions.iter().enumerate() {
        if !grid.contains(r.t1_ms, r.t2_ms) {
            return Err(Error::InvalidArgument(format!(
                "region {i} ({}): (t1, t2) = ({}, {}) lies outside the grid [{}, {}] x [{}, {}]",
                r.name,
                r.t1_ms,
                r.t2_ms,
                grid.t1.start,
                grid.t1.last(),
                grid.t2.start,
                grid.t2.last()
            )));
        }
        if !(r.scale.is_finite() && r.scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "region {i}: scale must be finite and non-negative"
            )));
        }
        if !(r.rx > 0.0 && r.ry > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "region {i}: radii must be positive"
            )));
        }
    }
    let n = spec.height * spec.width;
    let mut p = Phantom {
        height: spec.height,
        width: spec.width,
        t1: vec![0.0; n],
        t2: vec![0.0; n],
        scale: vec![0.0; n],
        labels: vec![0; n],
        names: spec.regions.iter().map(|r| r.name.clone()).collect(),
    };
    for v in 0..n {
        let x = ((v % spec.width) as f64 + 0.5) / spec.width as f64 * 2.0 - 1.0;
        let y = ((v / spec.width) as f64 + 0.5) / spec.height as f64 * 2.0 - 1.0;
        for (i, r) in spec.regions.iter().enumerate() {
            if r.contains(x, y) {
                p.t1[v] = r.t1_ms;
                p.t2[v] = r.t2_ms;
                p.scale[v] = r.scale;
                p.labels[v] = i as u32 + 1;
            }
        }
    }
    Ok(p)
}

/// Every voxel with nonzero scale holds `scale * fingerprint(t1, t2)`.
pub fn synthesize_image(phantom: &Phantom, seq: &SequenceParams) -> Result<SignalImage> {
    let mut cache: HashMap<(u64, u64), Vec<Complex64>> = HashMap::new();
    for v in 0..phantom.n_voxels() {
        if phantom.scale[v] != 0.0 {
            let key = (phantom.t1[v].to_bits(), phantom.t2[v].to_bits());
            if let Entry::Vacant(e) = cache.entry(key) {
                e.insert(simulate_fingerprint(phantom.t1[v], phantom.t2[v], seq)?.samples);
            }
        }
    }
    let frames = seq.len();
    let mut image = SignalImage::zeros(phantom.height, phantom.width, frames);
    for v in 0..phantom.n_voxels() {
        let s = phantom.scale[v];
        if s != 0.0 {
            let fp = &cache[&(phantom.t1[v].to_bits(), phantom.t2[v].to_bits())];
            image
                .voxel_mut(v)
                .iter_mut()
                .zip(fp)
                .for_each(|(o, f)| *o = f * s);
        }
    }
    Ok(image)
}

/// Per-frame sampled k-space locations and values. Locations index the
/// `height x width` Fourier grid row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<usize>>,
    pub samples: Vec<Vec<Complex64>>,
}

impl KSpaceData {
    pub fn frames(&self) -> usize {
        self.masks.len()
    }

    pub fn dot(&self, other: &KSpaceData) -> Complex64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| dotc(a, b))
            .sum()
    }
}

fn signed_freq(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Per frame `m` distinct sorted indices: the `ceil(m / 4)` lowest
/// frequencies (ties by index) plus a uniform draw from the rest.
pub fn sampling_masks(
    height: usize,
    width: usize,
    frames: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = height * width;
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "m = {m} exceeds the {n}-point grid"
        )));
    }
    let mut by_freq: Vec<usize> = (0..n).collect();
    by_freq.sort_by_key(|&i| {
        let (fy, fx) = (
            signed_freq(i / width, height),
            signed_freq(i % width, width),
        );
        (fy * fy + fx * fx, i)
    });
    let centre = m.div_ceil(4);
    let (fixed, rest) = by_freq.split_at(centre);
    Ok((0..frames)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut mask: Vec<usize> = fixed.to_vec();
            mask.extend(
                rand::seq::index::sample(&mut rng, rest.len(), m - centre)
                    .iter()
                    .map(|j| rest[j]),
            );
            mask.sort_unstable();
            mask
        })
        .collect())
}

/// Unitary 2-D DFT on row-major `height x width` frames.
struct Fft2 {
    height: usize,
    width: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(height: usize, width: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let (rows, cols) = if inverse {
            (
                planner.plan_fft_inverse(width),
                planner.plan_fft_inverse(height),
            )
        } else {
            (
                planner.plan_fft_forward(width),
                planner.plan_fft_forward(height),
            )
        };
        Self {
            height,
            width,
            rows,
            cols,
        }
    }

    fn apply(&self, frame: &mut [Complex64]) {
        let (h, w) = (self.height, self.width);
        self.rows.process(frame);
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            (0..h).for_each(|r| col[r] = frame[r * w + c]);
            self.cols.process(&mut col);
            (0..h).for_each(|r| frame[r * w + c] = col[r]);
        }
        let k = 1.0 / ((h * w) as f64).sqrt();
        frame.iter_mut().for_each(|z| *z *= k);
    }
}

fn check_masks(height: usize, width: usize, masks: &[Vec<usize>]) -> Result<()> {
    let n = height * width;
    for (t, mask) in masks.iter().enumerate() {
        let mut seen = vec![false; n];
        for &i in mask {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "frame {t}: mask index {i} is out of range or repeated"
                )));
            }
        }
    }
    Ok(())
}

/// Per frame: unitary 2-D DFT of the frame image, sampled on its mask.
pub fn forward_acquire(image: &SignalImage, masks: &[Vec<usize>]) -> Result<KSpaceData> {
    if masks.len() != image.frames {
        return Err(Error::DimensionMismatch {
            context: "sampling masks",
            expected: image.frames,
            found: masks.len(),
        });
    }
    check_masks(image.height, image.width, masks)?;
    let fft = Fft2::new(image.height, image.width, false);
    let n = image.n_voxels();
    let samples = masks
        .par_iter()
        .enumerate()
        .map(|(t, mask)| {
            let mut frame: Vec<Complex64> = (0..n).map(|v| image.voxel(v)[t]).collect();
            fft.apply(&mut frame);
            mask.iter().map(|&i| frame[i]).collect()
        })
        .collect();
    Ok(KSpaceData {
        height: image.height,
        width: image.width,
        masks: masks.to_vec(),
        samples,
    })
}

/// Adjoint of [`forward_acquire`]: zero-fill and inverse unitary DFT.
pub fn back_project(kspace: &KSpaceData) -> Result<SignalImage> {
    check_masks(kspace.height, kspace.width, &kspace.masks)?;
    for (t, (mask, s)) in kspace.masks.iter().zip(&kspace.samples).enumerate() {
        if mask.len() != s.len() {
            return Err(Error::InvalidArgument(format!(
                "frame {t}: {} samples for {} locations",
                s.len(),
                mask.len()
            )));
        }
    }
    let (h, w, frames) = (kspace.height, kspace.width, kspace.frames());
    let fft = Fft2::new(h, w, true);
    let by_frame: Vec<Vec<Complex64>> = (0..frames)
        .into_par_iter()
        .map(|t| {
            let mut frame = vec![Complex64::new(0.0, 0.0); h * w];
            kspace.masks[t]
                .iter()
                .zip(&kspace.samples[t])
                .for_each(|(&i, &s)| frame[i] = s);
            fft.apply(&mut frame);
            frame
        })
        .collect();
    let mut image = SignalImage::zeros(h, w, frames);
    for (t, frame) in by_frame.iter().enumerate() {
        for (v, &z) in frame.iter().enumerate() {
            image.voxel_mut(v)[t] = z;
        }
    }
    Ok(image)
}

/// Adds i.i.d. complex Gaussian noise with per-component deviation `sigma`.
pub fn add_kspace_noise(kspace: &mut KSpaceData, sigma: f64, seed: u64) {
    for (t, s) in kspace.samples.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        for z in s {
            let (a, b): (f64, f64) = (
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            *z += Complex64::new(a, b) * sigma;
        }
    }
}

/// What `reconstruct_maps` estimates with.
pub enum Estimator<'a> {
    Dm {
        dict: &'a CompressedDictionary,
        subspace: &'a Subspace,
    },
    /// `grid` and `seq` only serve the scale map.
    Net {
        model: &'a MlpModel,
        grid: &'a ParamGrid,
        seq: &'a SequenceParams,
    },
}

impl Estimator<'_> {
    pub fn engine(&self) -> Engine {
        match self {
            Estimator::Dm { .. } => Engine::Dm,
            Estimator::Net { .. } => Engine::Net,
        }
    }
}

/// Per-voxel maps from a back-projected image. Voxels below
/// `degenerate_rel` of the largest voxel norm are flagged.
pub fn reconstruct_maps(
    image: &SignalImage,
    estimator: &Estimator<'_>,
    degenerate_rel: f64,
) -> Result<QMaps> {
    let (model, grid, seq) = match *estimator {
        Estimator::Dm { dict, subspace } => {
            return match_image(dict, subspace, image, degenerate_rel)
        }
        Estimator::Net { model, grid, seq } => (model, grid, seq),
    };
    if image.frames != model.frames() || seq.len() != model.frames() {
        return Err(Error::DimensionMismatch {
            context: "image frames",
            expected: model.frames(),
            found: image.frames,
        });
    }
    let skip = degenerate_mask(image, degenerate_rel);
    let predictions: Vec<Option<Vec<f64>>> = (0..image.n_voxels())
        .into_par_iter()
        .map(|v| {
            if skip[v] {
                None
            } else {
                model.predict(image.voxel(v)).ok()
            }
        })
        .collect();

    let mut nearest: Vec<usize> = predictions
        .iter()
        .flatten()
        .map(|p| grid.nearest_index(p[0], p[1]))
        .collect();
    nearest.sort_unstable();
    nearest.dedup();
    let atoms: HashMap<usize, Vec<Complex64>> = nearest
        .par_iter()
        .map(|&j| {
            let (t1, t2) = grid.params_of(j);
            Ok((
                j,
                normalize_atom(&simulate_fingerprint(t1, t2, seq)?.samples)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut maps = QMaps::flagged(image.height, image.width, Engine::Net);
    for (v, p) in predictions.into_iter().enumerate() {
        if let Some(p) = p {
            let atom = &atoms[&grid.nearest_index(p[0], p[1])];
            maps.t1[v] = p[0];
            maps.t2[v] = p[1];
            maps.scale[v] = dotc(atom, image.voxel(v)).norm();
            maps.flags[v] = false;
        }
    }
    Ok(maps)
}

/// Relative-error statistics over the unflagged voxels of one region.
/// Statistics are `None` when every voxel of the region is flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionError {
    pub label: u32,
    pub name: String,
    pub voxels: usize,
    pub flagged: usize,
    pub t1_true_ms: f64,
    pub t2_true_ms: f64,
    pub t1_median_ms: Option<f64>,
    pub t2_median_ms: Option<f64>,
    pub t1_median_rel_error: Option<f64>,
    pub t2_median_rel_error: Option<f64>,
    pub t1_mae_rel: Option<f64>,
    pub t2_mae_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapError {
    pub engine: Engine,
    pub regions: Vec<RegionError>,
    pub flagged_fraction: f64,
}

impl MapError {
    pub fn region(&self, name: &str) -> Option<&RegionError> {
        self.regions.iter().find(|r| r.name == name)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `maps` against the phantom, one entry per labelled region that
/// has at least one voxel.
pub fn map_error(maps: &QMaps, phantom: &Phantom) -> Result<MapError> {
    if (maps.height, maps.width) != (phantom.height, phantom.width) {
        return Err(Error::InvalidArgument(format!(
            "maps are {} x {}, phantom is {} x {}",
            maps.height, maps.width, phantom.height, phantom.width
        )));
    }
    let mut regions = Vec::new();
    for label in 1..=phantom.names.len() as u32 {
        let members: Vec<usize> = (0..phantom.n_voxels())
            .filter(|&v| phantom.labels[v] == label)
            .collect();
        let Some(&first) = members.first() else {
            continue;
        };
        let ok: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&v| !maps.flags[v])
            .collect();
        let rel = |est: &[f64], truth: &[f64]| -> Vec<f64> {
            ok.iter()
                .map(|&v| (est[v] - truth[v]).abs() / truth[v])
                .collect()
        };
        let (e1, e2) = (rel(&maps.t1, &phantom.t1), rel(&maps.t2, &phantom.t2));
        regions.push(RegionError {
            label,
            name: phantom.names[label as usize - 1].clone(),
            voxels: members.len(),
            flagged: members.len() - ok.len(),
            t1_true_ms: phantom.t1[first],
            t2_true_ms: phantom.t2[first],
            t1_median_ms: median(ok.iter().map(|&v| maps.t1[v]).collect()),
            t2_median_ms: median(ok.iter().map(|&v| maps.t2[v]).collect()),
            t1_median_rel_error: median(e1.clone()),
            t2_median_rel_error: median(e2.clone()),
            t1_mae_rel: mean(&e1),
            t2_mae_rel: mean(&e2),
        });
    }
    Ok(MapError {
        engine: maps.engine,
        regions,
        flagged_fraction: maps.flagged_fraction(),
    })
}
