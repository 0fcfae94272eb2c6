//! Binary checkpoint format, little-endian:
//!
//! ```text
//! magic        8 bytes  "DTENCKPT"
//! version      u32
//! vocab_size   u32
//! d_model      u32
//! n_layers     u32
//! n_heads      u32
//! max_seq_len  u32
//! seed         u64
//! tensors      f64 × N, in Weights::tensors() order
//! ```

use std::path::Path;

use super::{EncoderConfig, EncoderParams, Weights};
use crate::error::{Error, Result};
use crate::io;

const MAGIC: &[u8; 8] = b"DTENCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 6 + 8;

pub fn write_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.weights.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    for (_, t) in params.weights.tensors() {
        for x in t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = EncoderConfig {
        vocab_size: u32_at(12) as usize,
        d_model: u32_at(16) as usize,
        n_layers: u32_at(20) as usize,
        n_heads: u32_at(24) as usize,
        max_seq_len: u32_at(28) as usize,
        seed: u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes")),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    let mut weights = Weights::zeros(&config);
    let expected = HEADER_LEN + 8 * weights.num_params();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for this config, found {}",
            bytes.len()
        )));
    }
    let mut off = HEADER_LEN;
    for (_, t) in weights.tensors_mut() {
        for x in t.iter_mut() {
            *x = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    }
    Ok(EncoderParams { config, weights })
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    io::write_atomic(path, &write_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;

    fn params() -> EncoderParams {
        init_params(&EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            seed: 9,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.config, p.config);
        for ((_, a), (_, b)) in p.weights.tensors().into_iter().zip(q.weights.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_and_versioned() {
        let bytes = write_checkpoint(&params());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_checkpoint(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(read_checkpoint(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
    }
}
