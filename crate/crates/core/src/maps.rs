//! Image-shaped containers: multi-frame signal images and parameter maps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, ByteWriter};

/// `n = height * width` voxels, each a length-`frames` signal. Voxel `v`
/// is row `v / width`, column `v % width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalImage {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    data: Vec<Complex64>,
}

impl SignalImage {
    pub fn zeros(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            data: vec![Complex64::new(0.0, 0.0); height * width * frames],
        }
    }

    pub fn from_voxels(
        height: usize,
        width: usize,
        frames: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if data.len() != height * width * frames {
            return Err(Error::DimensionMismatch {
                context: "signal image",
                expected: height * width * frames,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            frames,
            data,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.height * self.width
    }

    pub fn voxel(&self, v: usize) -> &[Complex64] {
        &self.data[v * self.frames..(v + 1) * self.frames]
    }

    pub fn voxel_mut(&mut self, v: usize) -> &mut [Complex64] {
        &mut self.data[v * self.frames..(v + 1) * self.frames]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "NET")]
    Net,
}

impl Engine {
    pub fn tag(&self) -> &'static str {
        match self {
            Engine::Dm => "DM",
            Engine::Net => "NET",
        }
    }
}

/// Per-voxel T1/T2 (ms) and scale estimates. Flagged voxels hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct QMaps {
    pub height: usize,
    pub width: usize,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub scale: Vec<f64>,
    pub flags: Vec<bool>,
    pub engine: Engine,
}

impl QMaps {
    pub fn flagged(height: usize, width: usize, engine: Engine) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            t1: vec![0.0; n],
            t2: vec![0.0; n],
            scale: vec![0.0; n],
            flags: vec![true; n],
            engine,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.height * self.width
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 0.0;
        }
        self.flags.iter().filter(|&&f| f).count() as f64 / self.flags.len() as f64
    }

    fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_voxels();
        let mut w = ByteWriter::with_capacity(16 + 13 * n);
        w.bytes(QMAP_MAGIC);
        w.u32(QMAP_VERSION);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        for map in [&self.t1, &self.t2] {
            map.iter().for_each(|&v| w.f32(v as f32));
        }
        self.scale.iter().for_each(|&v| w.f32(v.abs() as f32));
        self.flags.iter().for_each(|&f| w.u8(f as u8));
        w.buf
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "x,y,t1,t2,scale,flag")?;
        for v in 0..self.n_voxels() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                v % self.width,
                v / self.width,
                self.t1[v],
                self.t2[v],
                self.scale[v],
                self.flags[v] as u8
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

const QMAP_MAGIC: &[u8; 4] = b"MRFQ";
const QMAP_VERSION: u32 = 1;

/// Writes the `MRFQ` map file. Values are stored as f32.
pub fn save_qmaps(maps: &QMaps, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, maps.to_bytes())?;
    Ok(())
}

/// The file does not carry the engine tag, so the caller supplies it.
pub fn load_qmaps(path: impl AsRef<Path>, engine: Engine) -> Result<QMaps> {
    decode_qmaps(&fs::read(path)?, engine)
}

pub fn decode_qmaps(bytes: &[u8], engine: Engine) -> Result<QMaps> {
    let mut r = format::open_header(bytes, QMAP_MAGIC, QMAP_VERSION)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = height * width;
    if r.remaining() != 13 * n {
        return Err(Error::Corrupt(format!(
            "map payload holds {} bytes, expected {} for {height} x {width}",
            r.remaining(),
            13 * n
        )));
    }
    let mut read_map = || -> Result<Vec<f64>> { (0..n).map(|_| Ok(r.f32()? as f64)).collect() };
    let t1 = read_map()?;
    let t2 = read_map()?;
    let scale = read_map()?;
    let flags = (0..n).map(|_| Ok(r.u8()? != 0)).collect::<Result<_>>()?;
    r.expect_end()?;
    Ok(QMaps {
        height,
        width,
        t1,
        t2,
        scale,
        flags,
        engine,
    })
}
