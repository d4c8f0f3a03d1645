use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::model::{Activation, DenseLayer, MlpModel};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::format::{self, ByteWriter};
use crate::subspace::Subspace;

const MAGIC: &[u8; 4] = b"MRFN";
const VERSION: u32 = 1;

/// JSON trailer of the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_config: Option<TrainConfig>,
    pub target_scale: Vec<f64>,
    pub activations: Vec<Activation>,
    pub subspace_digest: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Corrupt(format!("invalid digest {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Serializes the model as an `MRFN` checkpoint.
pub fn encode_model(model: &MlpModel, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let sub = model.subspace();
    let layout = model.layout();
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(layout.len() as u32);
    layout.iter().for_each(|&n| w.u32(n as u32));
    w.u8(1);
    let (l, s) = (sub.frames(), sub.dim());
    w.u32(l as u32);
    w.u32(s as u32);
    sub.eigenvalues().iter().for_each(|&v| w.f64(v));
    // Row-major L x s.
    for t in 0..l {
        for k in 0..s {
            let c = sub.column(k)[t];
            w.f64(c.re);
            w.f64(c.im);
        }
    }
    for layer in model.layers() {
        w.u32(layer.outputs as u32);
        w.u32(layer.inputs as u32);
        layer.weights.iter().for_each(|&v| w.f64(v));
        layer.biases.iter().for_each(|&v| w.f64(v));
    }
    let meta = CheckpointMeta {
        train_config: train_config.cloned(),
        target_scale: model.target_scale().to_vec(),
        activations: model.layers().iter().map(|l| l.activation).collect(),
        subspace_digest: hex(sub.source_digest()),
    };
    let json = serde_json::to_vec(&meta)?;
    w.u32(json.len() as u32);
    w.bytes(&json);
    Ok(w.finish_checksummed())
}

pub fn save_model(
    model: &MlpModel,
    train_config: Option<&TrainConfig>,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, encode_model(model, train_config)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MlpModel, CheckpointMeta)> {
    decode_model(&fs::read(path)?)
}

pub fn decode_model(bytes: &[u8]) -> Result<(MlpModel, CheckpointMeta)> {
    let mut r = format::open_checksummed(bytes, MAGIC, VERSION)?;
    let count = r.u32()? as usize;
    if !(3..=64).contains(&count) {
        return Err(Error::Corrupt(format!("implausible layout length {count}")));
    }
    let layout: Vec<usize> = (0..count)
        .map(|_| Ok(r.u32()? as usize))
        .collect::<Result<_>>()?;
    if r.u8()? != 1 {
        return Err(Error::Corrupt("first layer is not marked as fixed".into()));
    }
    let (l, s) = (r.u32()? as usize, r.u32()? as usize);
    if [l, s] != layout[..2] {
        return Err(Error::Corrupt(format!(
            "subspace block is {l} x {s} but the layout starts with {:?}",
            &layout[..2]
        )));
    }
    let need = |n: usize, r: &format::ByteReader| -> Result<()> {
        if n > r.remaining() {
            return Err(Error::Corrupt(
                "checkpoint shorter than its header implies".into(),
            ));
        }
        Ok(())
    };
    need(8 * s + 16 * l * s, &r)?;
    let eigenvalues: Vec<f64> = (0..s).map(|_| r.f64()).collect::<Result<_>>()?;
    let mut basis = vec![Complex64::new(0.0, 0.0); l * s];
    for t in 0..l {
        for k in 0..s {
            basis[k * l + t] = Complex64::new(r.f64()?, r.f64()?);
        }
    }
    let mut shapes = Vec::new();
    let mut params = Vec::new();
    for w in layout[1..].windows(2) {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != (w[1], w[0]) {
            return Err(Error::Corrupt(format!(
                "layer stored as {rows} x {cols}, layout implies {} x {}",
                w[1], w[0]
            )));
        }
        need(8 * (rows * cols + rows), &r)?;
        let weights: Vec<f64> = (0..rows * cols).map(|_| r.f64()).collect::<Result<_>>()?;
        let biases: Vec<f64> = (0..rows).map(|_| r.f64()).collect::<Result<_>>()?;
        shapes.push((rows, cols));
        params.push((weights, biases));
    }
    let json_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
    r.expect_end()?;
    if meta.activations.len() != shapes.len() {
        return Err(Error::Corrupt(
            "activation list does not match the layer count".into(),
        ));
    }

    let subspace = Subspace::from_parts(l, basis, eigenvalues, unhex(&meta.subspace_digest)?)?;
    let layers = shapes
        .into_iter()
        .zip(params)
        .zip(&meta.activations)
        .map(
            |(((outputs, inputs), (weights, biases)), &activation)| DenseLayer {
                inputs,
                outputs,
                weights,
                biases,
                activation,
            },
        )
        .collect();
    let model = MlpModel::from_parts(subspace, layers, meta.target_scale.clone())?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrfnet::model::tests::toy_subspace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = MlpModel::init(toy_subspace(30, 4, 1), &[30, 4, 16, 8, 2], 2).unwrap();
        model.layers_mut()[0].biases[3] = 0.125;
        let cfg = TrainConfig::default();
        let bytes = encode_model(&model, Some(&cfg)).unwrap();
        let (back, meta) = decode_model(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta.train_config, Some(cfg.clone()));
        assert_eq!(encode_model(&back, Some(&cfg)).unwrap(), bytes);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x: Vec<Complex64> = (0..30)
                .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
                .collect();
            assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
        }
    }

    #[test]
    fn reports_other_layouts() {
        let model = MlpModel::init(toy_subspace(12, 3, 1), &[12, 3, 5, 2], 2).unwrap();
        let (back, _) = decode_model(&encode_model(&model, None).unwrap()).unwrap();
        assert_eq!(back.layout(), vec![12, 3, 5, 2]);
    }

    #[test]
    fn corruption_is_detected() {
        let model = MlpModel::init(toy_subspace(12, 3, 1), &[12, 3, 5, 2], 2).unwrap();
        let bytes = encode_model(&model, None).unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            decode_model(&flipped),
            Err(Error::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            decode_model(&bytes[..bytes.len() / 2]),
            Err(Error::ChecksumMismatch { .. })
        ));
        let mut dict_magic = bytes.clone();
        dict_magic[..4].copy_from_slice(b"MRFD");
        match decode_model(&dict_magic) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!((expected.as_str(), found.as_str()), ("MRFN", "MRFD"))
            }
            other => panic!("{other:?}"),
        }
    }
}
