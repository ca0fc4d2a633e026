//! Weight container: an 8-byte magic, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter block's values as
//! little-endian floats in header order. The byte layout is spelled out in the repository README.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{block_shapes, DenoiserModel, ModelConfig, Parameterization, BLOCK_NAMES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"GLABWTS\x01";
const FORMAT_NAME: &str = "guidance-lab-weights";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    parameterization: Parameterization,
    seed: u64,
    config: ModelConfig,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_weights<T: Scalar, W: Write>(model: &DenoiserModel<T>, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        dtype: T::NAME.to_string(),
        parameterization: model.config.parameterization,
        seed: model.seed,
        config: model.config.clone(),
        blocks: model
            .blocks()
            .iter()
            .map(|(name, t)| BlockEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(WEIGHTS_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut payload = Vec::with_capacity(model.parameter_count() * T::BYTES);
    for (_, block) in model.blocks() {
        for &v in block.data() {
            v.write_le(&mut payload);
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

fn decode_values<S: Scalar, T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::of(S::read_le(c).to_f64_lossy()))
        .collect()
}

/// Reads a container written with either `f32` or `f64` values, converting
/// to `T`.
pub fn read_weights<T: Scalar, R: Read>(mut input: R) -> Result<DenoiserModel<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut config = header.config;
    config.parameterization = header.parameterization;
    let expected = block_shapes(&config);
    if header.blocks.len() != BLOCK_NAMES.len() {
        return Err(Error::Format(format!("expected {} blocks", BLOCK_NAMES.len())));
    }
    for ((entry, name), shape) in header.blocks.iter().zip(BLOCK_NAMES).zip(&expected) {
        if entry.name != name || &entry.shape != shape {
            return Err(Error::Format(format!(
                "block {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let count: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != count * width {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * width
        )));
    }
    let values: Vec<T> = if width == 4 {
        decode_values::<f32, T>(&payload)
    } else {
        decode_values::<f64, T>(&payload)
    };
    let mut model = DenoiserModel::zeros(config)?;
    model.seed = header.seed;
    let mut offset = 0;
    for (_, block) in model.blocks_mut() {
        let n = block.len();
        block.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(model)
}

pub fn save_weights<T: Scalar>(model: &DenoiserModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<DenoiserModel<T>> {
    read_weights(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_bit() {
        let m = DenoiserModel::<f64>::init(ModelConfig::default(), 17).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], WEIGHTS_MAGIC);
        let back: DenoiserModel<f64> = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f32_files_load_into_f64_models() {
        let m = DenoiserModel::<f32>::init(ModelConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        let back: DenoiserModel<f64> = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back.enc_w.data()[3], m.enc_w.data()[3] as f64);
        assert_eq!(back.seed, 5);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = DenoiserModel::<f64>::init(ModelConfig::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_weights::<f64, _>(bad.as_slice()),
            Err(Error::Format(_))
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_weights::<f64, _>(truncated).is_err());
    }
}
