//! Binary model checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` header length, a JSON
//! header, then every parameter block as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Stamp;
use crate::error::{Error, Result};
use crate::train::{AeConfig, Autoencoder};
use crate::wave::COEFF_LAYOUT_VERSION;

pub const MAGIC: &[u8; 8] = b"FMMHCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub checkpoint_version: u32,
    pub layout_version: u32,
    pub config: AeConfig,
    pub seed: u64,
    pub blocks: Vec<Block>,
    #[serde(flatten)]
    pub stamp: Stamp,
}

pub fn save(path: &Path, model: &Autoencoder, stamp: &Stamp) -> Result<()> {
    let header = CheckpointHeader {
        checkpoint_version: CHECKPOINT_VERSION,
        layout_version: COEFF_LAYOUT_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        blocks: model
            .param_names()
            .into_iter()
            .zip(model.param_shapes())
            .map(|(name, shape)| Block { name, shape })
            .collect(),
        stamp: stamp.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * model.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for block in model.param_slices() {
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Autoencoder, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::structural(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.checkpoint_version != CHECKPOINT_VERSION {
        return Err(bad(&format!("checkpoint version {} is not supported", header.checkpoint_version)));
    }
    if header.layout_version != COEFF_LAYOUT_VERSION {
        return Err(bad(&format!(
            "coefficient layout version {} does not match {COEFF_LAYOUT_VERSION}",
            header.layout_version
        )));
    }
    let mut model = Autoencoder::new(header.config.clone(), header.seed)?;
    let expected: Vec<Block> = model
        .param_names()
        .into_iter()
        .zip(model.param_shapes())
        .map(|(name, shape)| Block { name, shape })
        .collect();
    if expected != header.blocks {
        return Err(bad("parameter blocks do not match the architecture"));
    }
    let mut data = &bytes[12 + len..];
    if data.len() != 8 * model.n_params() {
        return Err(bad("parameter data has the wrong length"));
    }
    for block in model.param_slices_mut() {
        for v in block.iter_mut() {
            let (head, rest) = data.split_at(8);
            *v = f64::from_le_bytes(head.try_into().expect("8 bytes"));
            data = rest;
        }
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Architecture;

    fn model(arch: Architecture) -> Autoencoder {
        let cfg = AeConfig {
            encoder_hidden: vec![12],
            latent: 4,
            decoder_hidden: vec![12],
            ..AeConfig::new(arch, 20)
        };
        Autoencoder::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Architecture::DenseAe, Architecture::FmmAe] {
            let mut m = model(arch);
            for (k, s) in m.param_slices_mut().into_iter().enumerate() {
                s[0] = 1.0 / (k as f64 + 3.0);
            }
            let p = dir.path().join("m.ckpt");
            save(&p, &m, &Stamp::new("abc")).unwrap();
            let (back, header) = load(&p).unwrap();
            assert_eq!(back.param_slices(), m.param_slices());
            assert_eq!(header.stamp.config_hash, "abc");
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model(Architecture::FmmAe), &Stamp::new("x")).unwrap();
        let bytes = fs::read(&p).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        header["layout_version"] = serde_json::json!(COEFF_LAYOUT_VERSION + 1);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + len..]);
        fs::write(&p, out).unwrap();
        let err = load(&p).unwrap_err();
        assert!(err.to_string().contains("layout version"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model(Architecture::DenseAe), &Stamp::new("x")).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&p), Err(Error::Structural(_))));
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load(&p), Err(Error::Structural(_))));
    }
}
