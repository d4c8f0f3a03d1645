//! Local affine structure of the network: input gradients, matched
//! filters, activation patterns and slope clustering over the dictionary.
//!
//! Inputs here are real signals of length `L` (phase-aligned atoms are
//! real for a quadrature-phase sequence). Outputs are the last-layer
//! pre-activations in physical units.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dictionary::{Dictionary, ParamGrid};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeans};
use crate::mrfnet::{MlpModel, Trace};

/// Gradient of output `p` with respect to the first-layer features.
pub fn feature_gradient(model: &MlpModel, trace: &Trace, p: usize) -> Vec<f64> {
    let layers = model.layers();
    let last = layers.last().unwrap();
    let scale = 1.0 / model.target_scale()[p];
    let mut y: Vec<f64> = last.row(p).iter().map(|w| w * scale).collect();
    for i in (0..layers.len() - 1).rev() {
        let layer = &layers[i];
        let gated: Vec<f64> = y
            .iter()
            .zip(&trace.pre[i])
            .map(|(v, &z)| v * layer.activation.derivative(z))
            .collect();
        y = (0..layer.inputs)
            .map(|c| {
                gated
                    .iter()
                    .enumerate()
                    .map(|(r, g)| g * layer.weights[r * layer.inputs + c])
                    .sum()
            })
            .collect();
    }
    y
}

fn check_output(model: &MlpModel, p: usize) -> Result<()> {
    if p >= model.n_outputs() {
        return Err(Error::InvalidArgument(format!(
            "output index {p} out of range for {} outputs",
            model.n_outputs()
        )));
    }
    Ok(())
}

/// Expands a feature-space gradient through the fixed first layer.
fn lift_gradient(model: &MlpModel, g: &[f64]) -> Vec<f64> {
    let sub = model.subspace();
    let mut out = vec![0.0; sub.frames()];
    for (k, &gk) in g.iter().enumerate() {
        out.iter_mut()
            .zip(sub.column(k))
            .for_each(|(o, v)| *o += gk * v.re);
    }
    out
}

/// Gradient of the `p`-th weighted output with respect to the real input.
pub fn input_gradient(model: &MlpModel, x: &[f64], p: usize) -> Result<Vec<f64>> {
    check_output(model, p)?;
    let trace = model.trace(&model.features_real(x)?);
    Ok(lift_gradient(model, &feature_gradient(model, &trace, p)))
}

/// Local affine form `z(x') = slopes x' + offsets`, exact on the
/// activation region containing `at_input`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedFilterSet {
    /// `P` rows of length `L`.
    pub slopes: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub at_input: Vec<f64>,
}

impl MatchedFilterSet {
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.slopes
            .iter()
            .zip(&self.offsets)
            .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

pub fn matched_filters(model: &MlpModel, x: &[f64]) -> Result<MatchedFilterSet> {
    let trace = model.trace(&model.features_real(x)?);
    let z = model.weighted_output_from_features(&trace.features);
    let slopes: Vec<Vec<f64>> = (0..model.n_outputs())
        .map(|p| lift_gradient(model, &feature_gradient(model, &trace, p)))
        .collect();
    let offsets = slopes
        .iter()
        .zip(&z)
        .map(|(row, zp)| zp - row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    Ok(MatchedFilterSet {
        slopes,
        offsets,
        at_input: x.to_vec(),
    })
}

/// One bit per ReLU unit of the trainable layers, layer by layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub bits: Vec<bool>,
}

pub fn pattern_of_trace(model: &MlpModel, trace: &Trace) -> ActivationPattern {
    let bits = model
        .layers()
        .iter()
        .zip(&trace.pre)
        .filter(|(l, _)| l.activation == crate::mrfnet::Activation::Relu)
        .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0))
        .collect();
    ActivationPattern { bits }
}

pub fn activation_pattern(model: &MlpModel, x: &[f64]) -> Result<ActivationPattern> {
    Ok(pattern_of_trace(
        model,
        &model.trace(&model.features_real(x)?),
    ))
}

/// Smallest `|pre-activation|` over all ReLU units; probes closer than a
/// tolerance to a kink are unsuitable for finite differences.
pub fn kink_distance(model: &MlpModel, x: &[f64]) -> Result<f64> {
    let trace = model.trace(&model.features_real(x)?);
    Ok(model
        .layers()
        .iter()
        .zip(&trace.pre)
        .filter(|(l, _)| l.activation == crate::mrfnet::Activation::Relu)
        .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

pub const DEFAULT_SEGMENTS: usize = 12;

/// Slope clusters over a set of probes.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub labels: Vec<usize>,
    /// Row-major `k x feature_dim`.
    pub centroids: Vec<f64>,
    pub feature_dim: usize,
    pub probe_grid: Vec<(f64, f64)>,
    pub inertia: f64,
}

impl SegmentMap {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.feature_dim
    }
}

/// Clusters slope vectors (row-major, `dim` per probe).
pub fn cluster_segments(
    slopes: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeans> {
    kmeans(slopes, dim, k, seed, max_iter)
}

/// Per-probe slope features: both rows of the affine slope with respect
/// to the `s` first-layer features, concatenated.
pub fn slope_features(model: &MlpModel, features: &[f64]) -> Vec<f64> {
    let trace = model.trace(features);
    (0..model.n_outputs())
        .flat_map(|p| feature_gradient(model, &trace, p))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    pub map: SegmentMap,
    /// First three subspace coordinates of each probe atom.
    pub coords: Vec<[f64; 3]>,
    pub distinct_patterns: usize,
}

/// Clusters the slopes the network applies at every dictionary atom.
pub fn segment_report(
    model: &MlpModel,
    dict: &Dictionary,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<SegmentReport> {
    if dict.frames() != model.frames() {
        return Err(Error::DimensionMismatch {
            context: "dictionary frames",
            expected: model.frames(),
            found: dict.frames(),
        });
    }
    let dim = model.n_outputs() * model.subspace().dim();
    let probes: Vec<(Vec<f64>, Vec<f64>, ActivationPattern)> = (0..dict.n_atoms())
        .into_par_iter()
        .map(|j| {
            let x: Vec<f64> = dict.atom(j).iter().map(|c| c.re as f64).collect();
            let f = model.features_real(&x).expect("dictionary frames checked");
            let pattern = pattern_of_trace(model, &model.trace(&f));
            (slope_features(model, &f), f, pattern)
        })
        .collect();
    let slopes: Vec<f64> = probes.iter().flat_map(|p| p.0.iter().copied()).collect();
    let coords = probes
        .iter()
        .map(|p| std::array::from_fn(|i| p.1.get(i).copied().unwrap_or(0.0)))
        .collect();
    let distinct_patterns = probes
        .iter()
        .map(|p| &p.2)
        .collect::<std::collections::HashSet<_>>()
        .len();
    let km = cluster_segments(&slopes, dim, k, seed, max_iter)?;
    Ok(SegmentReport {
        map: SegmentMap {
            labels: km.labels,
            centroids: km.centroids,
            feature_dim: dim,
            probe_grid: dict.grid().entries(),
            inertia: km.inertia,
        },
        coords,
        distinct_patterns,
    })
}

impl SegmentReport {
    /// Columns `t1_ms,t2_ms,label,pc1,pc2,pc3`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "t1_ms,t2_ms,label,pc1,pc2,pc3")?;
        for ((&(t1, t2), label), c) in self
            .map
            .probe_grid
            .iter()
            .zip(&self.map.labels)
            .zip(&self.coords)
        {
            writeln!(w, "{t1},{t2},{label},{},{},{}", c[0], c[1], c[2])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of grid points with at least one 4-neighbour carrying the same
/// label.
pub fn label_contiguity(grid: &ParamGrid, labels: &[usize]) -> f64 {
    let (n1, n2) = (grid.t1.count, grid.t2.count);
    let mut ok = 0;
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            let l = labels[grid.index_from_coords(i1, i2)];
            let neighbours = [
                (i1.wrapping_sub(1), i2),
                (i1 + 1, i2),
                (i1, i2.wrapping_sub(1)),
                (i1, i2 + 1),
            ];
            ok += neighbours
                .iter()
                .any(|&(a, b)| a < n1 && b < n2 && labels[grid.index_from_coords(a, b)] == l)
                as usize;
        }
    }
    ok as f64 / (n1 * n2) as f64
}

/// Inclusive `(t1_lo, t1_hi)`, `(t2_lo, t2_hi)` window in ms.
pub type Region = ((f64, f64), (f64, f64));

/// White-matter-like window.
pub const WM_REGION: Region = ((700.0, 900.0), (60.0, 90.0));

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    /// Grid entries inside the region.
    pub members: Vec<usize>,
    pub center: usize,
    pub center_params: (f64, f64),
    pub center_fingerprint: Vec<f64>,
    pub filters: MatchedFilterSet,
}

/// Matched filters at the atom nearest the centre of `region`, plus the
/// region's member atoms.
pub fn filter_report(model: &MlpModel, dict: &Dictionary, region: Region) -> Result<FilterReport> {
    let ((a1, b1), (a2, b2)) = region;
    let grid = dict.grid();
    let members: Vec<usize> = (0..grid.len())
        .filter(|&j| {
            let (t1, t2) = grid.params_of(j);
            t1 >= a1 && t1 <= b1 && t2 >= a2 && t2 <= b2
        })
        .collect();
    if members.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "region T1 {a1}..{b1} ms, T2 {a2}..{b2} ms contains no grid point"
        )));
    }
    let (c1, c2) = ((a1 + b1) / 2.0, (a2 + b2) / 2.0);
    let center = *members
        .iter()
        .min_by(|&&i, &&j| {
            let d = |k: usize| {
                let (t1, t2) = grid.params_of(k);
                ((t1 - c1) / grid.t1.step).powi(2) + ((t2 - c2) / grid.t2.step).powi(2)
            };
            d(i).total_cmp(&d(j)).then(i.cmp(&j))
        })
        .unwrap();
    let center_fingerprint: Vec<f64> = dict.atom(center).iter().map(|c| c.re as f64).collect();
    let filters = matched_filters(model, &center_fingerprint)?;
    Ok(FilterReport {
        members,
        center,
        center_params: grid.params_of(center),
        center_fingerprint,
        filters,
    })
}

impl FilterReport {
    /// Share of filter row `p`'s squared L2 mass in the first `frames` samples.
    pub fn early_energy_fraction(&self, p: usize, frames: usize) -> f64 {
        let row = &self.filters.slopes[p];
        let total: f64 = row.iter().map(|v| v * v).sum();
        let early: f64 = row.iter().take(frames).map(|v| v * v).sum();
        if total > 0.0 {
            early / total
        } else {
            0.0
        }
    }

    /// Columns `frame,fingerprint_re,filter_t1,filter_t2` for the centre atom.
    pub fn filter_csv(&self) -> String {
        let mut out = String::from("frame,fingerprint_re,filter_t1,filter_t2\n");
        for (t, x) in self.center_fingerprint.iter().enumerate() {
            out.push_str(&format!(
                "{t},{x},{},{}\n",
                self.filters.slopes[0][t], self.filters.slopes[1][t]
            ));
        }
        out
    }

    /// One row per member atom: `t1_ms,t2_ms` then its real samples.
    pub fn fingerprints_csv(&self, dict: &Dictionary) -> String {
        let mut out = String::from("t1_ms,t2_ms");
        for t in 0..dict.frames() {
            out.push_str(&format!(",f{t}"));
        }
        out.push('\n');
        for &j in &self.members {
            let (t1, t2) = dict.grid().params_of(j);
            out.push_str(&format!("{t1},{t2}"));
            for c in dict.atom(j) {
                out.push_str(&format!(",{}", c.re));
            }
            out.push('\n');
        }
        out
    }
}

/// Parsed `frame,fingerprint_re,filter_t1,filter_t2` table.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTable {
    pub fingerprint: Vec<f64>,
    pub filter_t1: Vec<f64>,
    pub filter_t2: Vec<f64>,
}

pub fn parse_filter_csv(text: &str) -> Result<FilterTable> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "frame,fingerprint_re,filter_t1,filter_t2")) => {}
        other => {
            return Err(Error::Corrupt(format!(
                "unexpected filter CSV header {:?}",
                other.map(|o| o.1)
            )))
        }
    }
    let mut table = FilterTable {
        fingerprint: Vec::new(),
        filter_t1: Vec::new(),
        filter_t2: Vec::new(),
    };
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Corrupt(format!("line {}: bad number {s:?}", n + 1)))
        };
        if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(table.fingerprint.len()) {
            return Err(Error::Corrupt(format!("line {}: malformed row", n + 1)));
        }
        table.fingerprint.push(parse(fields[1])?);
        table.filter_t1.push(parse(fields[2])?);
        table.filter_t2.push(parse(fields[3])?);
    }
    Ok(table)
}
