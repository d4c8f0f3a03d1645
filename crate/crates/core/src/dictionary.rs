//! Parameter grids and simulated fingerprint dictionaries.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::epg::{simulate_fingerprint, SequenceParams};
use crate::error::{Error, Result};
use crate::format::{self, ByteWriter};

/// Inclusive arithmetic range `start:step:stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub start: f64,
    pub step: f64,
    pub stop: f64,
}

impl RangeSpec {
    pub const fn new(start: f64, step: f64, stop: f64) -> Self {
        Self { start, step, stop }
    }
}

pub const DEFAULT_T1_RANGE: RangeSpec = RangeSpec::new(100.0, 10.0, 4000.0);
pub const DEFAULT_T2_RANGE: RangeSpec = RangeSpec::new(20.0, 2.0, 600.0);

/// One axis of the grid. Values are `start + i * step`, never accumulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    fn from_range(name: &str, r: RangeSpec) -> Result<Self> {
        if !(r.start.is_finite() && r.step.is_finite() && r.stop.is_finite()) {
            return Err(Error::InvalidGrid(format!("{name}: non-finite bound")));
        }
        if !(r.step > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "{name}: step must be positive, got {}",
                r.step
            )));
        }
        if r.start > r.stop {
            return Err(Error::InvalidGrid(format!(
                "{name}: start {} exceeds stop {}",
                r.start, r.stop
            )));
        }
        let count = ((r.stop - r.start) / r.step + 1e-9).floor() as usize + 1;
        Ok(Self {
            start: r.start,
            step: r.step,
            count,
        })
    }

    pub fn value(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }

    pub fn last(&self) -> f64 {
        self.value(self.count - 1)
    }

    /// Index of the grid value closest to `v`, clamped to the axis.
    pub fn nearest(&self, v: f64) -> usize {
        let i = ((v - self.start) / self.step).round();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(self.count - 1)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.start && v <= self.last()
    }
}

/// Cartesian (T1, T2) grid enumerated T1-major: entry `i1 * t2.count + i2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGrid {
    pub t1: Axis,
    pub t2: Axis,
}

/// Enumerates the product of two inclusive arithmetic ranges.
pub fn build_grid(t1: RangeSpec, t2: RangeSpec) -> Result<ParamGrid> {
    Ok(ParamGrid {
        t1: Axis::from_range("t1", t1)?,
        t2: Axis::from_range("t2", t2)?,
    })
}

impl ParamGrid {
    /// T1 = 100:10:4000 ms, T2 = 20:2:600 ms.
    pub fn fisp_default() -> Self {
        build_grid(DEFAULT_T1_RANGE, DEFAULT_T2_RANGE).expect("default grid is valid")
    }

    pub fn len(&self) -> usize {
        self.t1.count * self.t2.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t1_values(&self) -> Vec<f64> {
        self.t1.values()
    }

    pub fn t2_values(&self) -> Vec<f64> {
        self.t2.values()
    }

    /// Grid coordinates `(i1, i2)` of an entry.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.t2.count, index % self.t2.count)
    }

    pub fn index_from_coords(&self, i1: usize, i2: usize) -> usize {
        i1 * self.t2.count + i2
    }

    pub fn params_of(&self, index: usize) -> (f64, f64) {
        let (i1, i2) = self.coords(index);
        (self.t1.value(i1), self.t2.value(i2))
    }

    /// Exact inverse of [`params_of`](Self::params_of).
    pub fn index_of(&self, t1: f64, t2: f64) -> Option<usize> {
        let (i1, i2) = (self.t1.nearest(t1), self.t2.nearest(t2));
        (self.t1.value(i1) == t1 && self.t2.value(i2) == t2).then(|| self.index_from_coords(i1, i2))
    }

    pub fn nearest_index(&self, t1: f64, t2: f64) -> usize {
        self.index_from_coords(self.t1.nearest(t1), self.t2.nearest(t2))
    }

    pub fn entries(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.params_of(i)).collect()
    }

    pub fn contains(&self, t1: f64, t2: f64) -> bool {
        self.t1.contains(t1) && self.t2.contains(t2)
    }
}

/// Multiplies `signal` by the unit scalar that makes its temporal sum real
/// and non-negative.
pub fn phase_align(signal: &[Complex64]) -> Result<Vec<Complex64>> {
    let sum: Complex64 = signal.iter().sum();
    let scale: f64 = signal.iter().map(|c| c.norm()).sum();
    if !(sum.norm() > 1e-12 * scale) {
        return Err(Error::Degenerate(
            "temporal sum vanishes, phase alignment is undefined".into(),
        ));
    }
    if sum.im == 0.0 && sum.re > 0.0 {
        return Ok(signal.to_vec());
    }
    let rot = sum.conj() / sum.norm();
    Ok(signal.iter().map(|c| c * rot).collect())
}

pub fn l2_norm(signal: &[Complex64]) -> f64 {
    signal.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Phase-aligns and scales to unit L2 norm.
pub fn normalize_atom(signal: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = phase_align(signal)?;
    let n = l2_norm(&out);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Degenerate("zero-energy fingerprint".into()));
    }
    out.iter_mut().for_each(|c| *c /= n);
    Ok(out)
}

/// `d` unit-norm, phase-aligned fingerprints stored row-major as 32-bit
/// complex samples, together with the grid that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Vec<Complex32>,
    frames: usize,
    grid: ParamGrid,
    seq_digest: [u8; 32],
}

impl Dictionary {
    pub fn from_parts(
        atoms: Vec<Complex32>,
        frames: usize,
        grid: ParamGrid,
        seq_digest: [u8; 32],
    ) -> Result<Self> {
        if frames == 0 || atoms.len() != frames * grid.len() {
            return Err(Error::DimensionMismatch {
                context: "dictionary atoms",
                expected: frames * grid.len(),
                found: atoms.len(),
            });
        }
        Ok(Self {
            atoms,
            frames,
            grid,
            seq_digest,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.grid.len()
    }

    /// Fingerprint length `L`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn grid(&self) -> &ParamGrid {
        &self.grid
    }

    pub fn seq_digest(&self) -> &[u8; 32] {
        &self.seq_digest
    }

    pub fn atom(&self, j: usize) -> &[Complex32] {
        &self.atoms[j * self.frames..(j + 1) * self.frames]
    }

    pub fn atom_f64(&self, j: usize) -> Vec<Complex64> {
        self.atom(j)
            .iter()
            .map(|c| Complex64::new(c.re as f64, c.im as f64))
            .collect()
    }

    pub fn atoms(&self) -> &[Complex32] {
        &self.atoms
    }

    pub fn is_real(&self) -> bool {
        self.atoms.iter().all(|c| c.im == 0.0)
    }

    /// SHA-256 of the serialized file contents.
    pub fn content_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.header_bytes());
        for c in &self.atoms {
            h.update(c.re.to_le_bytes());
            h.update(c.im.to_le_bytes());
        }
        h.finalize().into()
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(HEADER_LEN);
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.frames as u32);
        w.u32(self.n_atoms() as u32);
        w.u32(self.grid.t1.count as u32);
        w.u32(self.grid.t2.count as u32);
        w.f64(self.grid.t1.start);
        w.f64(self.grid.t1.step);
        w.f64(self.grid.t2.start);
        w.f64(self.grid.t2.step);
        w.bytes(&self.seq_digest);
        w.buf
    }
}

/// Simulates, phase-aligns and normalizes one atom per grid entry. Rows
/// are produced independently, so the result does not depend on the
/// number of worker threads.
pub fn simulate_dictionary(grid: &ParamGrid, seq: &SequenceParams) -> Result<Dictionary> {
    seq.validate()?;
    let frames = seq.len();
    let mut atoms = vec![Complex32::new(0.0, 0.0); frames * grid.len()];
    atoms
        .par_chunks_mut(frames)
        .enumerate()
        .try_for_each(|(j, row)| -> Result<()> {
            let (t1, t2) = grid.params_of(j);
            let fp = simulate_fingerprint(t1, t2, seq)?;
            let atom = normalize_atom(&fp.samples).map_err(|_| {
                Error::Degenerate(format!(
                    "fingerprint at (T1, T2) = ({t1}, {t2}) ms cannot be normalized"
                ))
            })?;
            for (dst, c) in row.iter_mut().zip(atom) {
                *dst = Complex32::new(c.re as f32, c.im as f32);
            }
            Ok(())
        })?;
    Dictionary::from_parts(atoms, frames, *grid, seq.digest())
}

const MAGIC: &[u8; 4] = b"MRFD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 8 * 4 + 32;

/// Writes the `MRFD` file: header, interleaved f32 samples, FNV-1a checksum.
pub fn save_dictionary(dict: &Dictionary, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut hasher = fnv::FnvHasher::default();
    let mut emit = |bytes: &[u8]| -> Result<()> {
        std::hash::Hasher::write(&mut hasher, bytes);
        out.write_all(bytes)?;
        Ok(())
    };
    emit(&dict.header_bytes())?;
    let mut chunk = Vec::with_capacity(8 * 4096);
    for block in dict.atoms.chunks(4096) {
        chunk.clear();
        for c in block {
            chunk.extend_from_slice(&c.re.to_le_bytes());
            chunk.extend_from_slice(&c.im.to_le_bytes());
        }
        emit(&chunk)?;
    }
    let sum = std::hash::Hasher::finish(&hasher);
    out.write_all(&sum.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<Dictionary> {
    decode_dictionary(&fs::read(path)?)
}

pub fn decode_dictionary(bytes: &[u8]) -> Result<Dictionary> {
    let mut r = format::open_checksummed(bytes, MAGIC, VERSION)?;
    let frames = r.u32()? as usize;
    let d = r.u32()? as usize;
    let t1_count = r.u32()? as usize;
    let t2_count = r.u32()? as usize;
    let (t1_start, t1_step, t2_start, t2_step) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let seq_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    if t1_count == 0 || t2_count == 0 || d != t1_count * t2_count {
        return Err(Error::Corrupt(format!(
            "atom count {d} does not match grid {t1_count} x {t2_count}"
        )));
    }
    let expected = d.checked_mul(frames).and_then(|n| n.checked_mul(8));
    if expected != Some(r.remaining()) {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes, header implies {d} x {frames} samples",
            r.remaining()
        )));
    }
    let payload = r.take(r.remaining())?;
    let atoms = payload
        .chunks_exact(8)
        .map(|b| {
            Complex32::new(
                f32::from_le_bytes(b[..4].try_into().unwrap()),
                f32::from_le_bytes(b[4..].try_into().unwrap()),
            )
        })
        .collect();
    let grid = ParamGrid {
        t1: Axis {
            start: t1_start,
            step: t1_step,
            count: t1_count,
        },
        t2: Axis {
            start: t2_start,
            step: t2_step,
            count: t2_count,
        },
    };
    Dictionary::from_parts(atoms, frames, grid, seq_digest)
}
