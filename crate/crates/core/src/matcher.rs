//! Brute-force dictionary matching in the compressed domain, and the
//! operation/memory accounting that compares it with the network.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{phase_align, Dictionary, ParamGrid};
use crate::error::{Error, Result};
use crate::linalg::{dotc, norm};
use crate::maps::{Engine, QMaps, SignalImage};
use crate::subspace::Subspace;

/// Compressed atoms `V^H D_j` (`d x s`) together with their unit-norm
/// versions used for scoring.
#[derive(Debug, Clone)]
pub struct CompressedDictionary {
    dim: usize,
    raw: Vec<Complex64>,
    /// Interleaved `(re, im)` of the unit-norm atoms, `2s` values per atom.
    unit: Vec<f64>,
    grid: ParamGrid,
}

impl CompressedDictionary {
    pub fn new(dict: &Dictionary, sub: &Subspace) -> Result<Self> {
        Self::from_compressed(sub.project_atoms(dict)?, sub.dim(), *dict.grid())
    }

    /// `raw` is row-major `d x s`, one row per grid entry.
    pub fn from_compressed(raw: Vec<Complex64>, dim: usize, grid: ParamGrid) -> Result<Self> {
        if dim == 0 || raw.len() != dim * grid.len() {
            return Err(Error::DimensionMismatch {
                context: "compressed dictionary",
                expected: dim * grid.len(),
                found: raw.len(),
            });
        }
        let mut unit = Vec::with_capacity(2 * raw.len());
        for row in raw.chunks(dim) {
            let n = norm(row);
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            for c in row {
                unit.push(c.re * inv);
                unit.push(c.im * inv);
            }
        }
        Ok(Self {
            dim,
            raw,
            unit,
            grid,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_atoms(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &ParamGrid {
        &self.grid
    }

    pub fn atom(&self, j: usize) -> &[Complex64] {
        &self.raw[j * self.dim..(j + 1) * self.dim]
    }

    pub fn unit_atom(&self, j: usize) -> Vec<Complex64> {
        self.unit[2 * j * self.dim..2 * (j + 1) * self.dim]
            .chunks(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub atom_index: usize,
    pub t1_ms: f64,
    pub t2_ms: f64,
    /// `Re <atom, voxel>` between the unit-normalized vectors.
    pub correlation: f64,
    /// Inner product of the un-normalized voxel with the matched atom.
    pub scale: Complex64,
}

/// Index maximizing `Re <unit atom, voxel / |voxel|>`, lowest index on ties.
pub fn nns_match(cd: &CompressedDictionary, voxel: &[Complex64]) -> Result<MatchResult> {
    if voxel.len() != cd.dim {
        return Err(Error::DimensionMismatch {
            context: "compressed voxel",
            expected: cd.dim,
            found: voxel.len(),
        });
    }
    let n = norm(voxel);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(
            "voxel has no energy in the subspace".into(),
        ));
    }
    let q: Vec<f64> = voxel.iter().flat_map(|c| [c.re / n, c.im / n]).collect();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, atom) in cd.unit.chunks_exact(q.len()).enumerate() {
        let score: f64 = atom.iter().zip(&q).map(|(a, b)| a * b).sum();
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    let (t1_ms, t2_ms) = cd.grid.params_of(best);
    Ok(MatchResult {
        atom_index: best,
        t1_ms,
        t2_ms,
        correlation: best_score,
        scale: dotc(cd.atom(best), voxel),
    })
}

/// Phase-aligns a full-length signal, compresses it and matches it.
pub fn match_signal(
    cd: &CompressedDictionary,
    sub: &Subspace,
    x: &[Complex64],
) -> Result<MatchResult> {
    let aligned = phase_align(x)?;
    nns_match(cd, &sub.project(&aligned)?)
}

/// Relative energy below which a voxel is treated as background.
pub const DEFAULT_DEGENERATE_REL: f64 = 1e-9;

/// Indices of voxels whose norm is below `rel * max voxel norm`.
pub fn degenerate_mask(image: &SignalImage, rel: f64) -> Vec<bool> {
    let norms: Vec<f64> = (0..image.n_voxels())
        .map(|v| norm(image.voxel(v)))
        .collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    norms.iter().map(|&n| !(n > 0.0) || n < rel * max).collect()
}

/// Matches every voxel of `image`. Degenerate voxels are zeroed and flagged.
pub fn match_image(
    cd: &CompressedDictionary,
    sub: &Subspace,
    image: &SignalImage,
    degenerate_rel: f64,
) -> Result<QMaps> {
    if image.frames != sub.frames() {
        return Err(Error::DimensionMismatch {
            context: "image frames",
            expected: sub.frames(),
            found: image.frames,
        });
    }
    let skip = degenerate_mask(image, degenerate_rel);
    let results: Vec<Option<MatchResult>> = (0..image.n_voxels())
        .into_par_iter()
        .map(|v| {
            if skip[v] {
                return None;
            }
            match_signal(cd, sub, image.voxel(v)).ok()
        })
        .collect();

    let mut maps = QMaps::flagged(image.height, image.width, Engine::Dm);
    for (v, r) in results.into_iter().enumerate() {
        if let Some(r) = r {
            maps.t1[v] = r.t1_ms;
            maps.t2[v] = r.t2_ms;
            maps.scale[v] = r.scale.norm();
            maps.flags[v] = false;
        }
    }
    Ok(maps)
}

/// Per-voxel operation and storage counts for matching versus the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dm_flops_per_voxel: u64,
    pub net_flops_per_voxel: u64,
    pub dm_bytes: u64,
    pub net_bytes: u64,
    pub ratio_flops: f64,
    pub ratio_bytes: f64,
}

const COMPLEX_BYTES: u64 = 8;
const REAL_BYTES: u64 = 4;

/// Multiply-accumulate counts per voxel and parameter storage.
///
/// `net_layout` lists the widths after the fixed projection, starting
/// with `s` (for example `[10, 200, 30, 2]`). Both methods pay `s * L`
/// for the projection; matching adds `s * d` correlations, the network
/// adds one matrix-vector product per trained layer. Complex values are
/// counted as two 32-bit floats, network weights and biases as one.
pub fn cost_report(l: usize, s: usize, d: usize, net_layout: &[usize]) -> Result<CostReport> {
    if l == 0 || s == 0 || d == 0 || net_layout.len() < 2 || net_layout.contains(&0) {
        return Err(Error::InvalidArgument(
            "cost report sizes must be positive".into(),
        ));
    }
    if net_layout[0] != s {
        return Err(Error::DimensionMismatch {
            context: "network input width",
            expected: s,
            found: net_layout[0],
        });
    }
    let (l, s, d) = (l as u64, s as u64, d as u64);
    let weights: u64 = net_layout.windows(2).map(|w| (w[0] * w[1]) as u64).sum();
    let biases: u64 = net_layout[1..].iter().map(|&n| n as u64).sum();
    let dm_flops = s * l + s * d;
    let net_flops = s * l + weights;
    let dm_bytes = COMPLEX_BYTES * (s * d + s * l);
    let net_bytes = COMPLEX_BYTES * s * l + REAL_BYTES * (weights + biases);
    Ok(CostReport {
        dm_flops_per_voxel: dm_flops,
        net_flops_per_voxel: net_flops,
        dm_bytes,
        net_bytes,
        ratio_flops: dm_flops as f64 / net_flops as f64,
        ratio_bytes: dm_bytes as f64 / net_bytes as f64,
    })
}
