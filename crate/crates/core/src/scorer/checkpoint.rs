//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes   "CMILCKPT"
//! format       u32 LE    1
//! header_len   u32 LE
//! header       JSON      {"config": ScorerConfig, "version": str, "param_count": n}
//! params       n * f64 LE
//! checksum     32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScorerConfig, ScorerError, ScorerModel, TileScorer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMILCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ScorerConfig,
    version: String,
    param_count: usize,
}

pub fn encode_model(model: &ScorerModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        version: model.version().to_string(),
        param_count: model.num_params(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model.num_params() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ScorerModel, ScorerError> {
    let corrupt = |m: &str| ScorerError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(8) != FORMAT_VERSION {
        return Err(corrupt("unsupported format version"));
    }
    let header_len = u32_at(12) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| ScorerError::CorruptCheckpoint(format!("header: {e}")))?;
    let raw = &body[header_end..];
    if raw.len() != header.param_count * 8 {
        return Err(corrupt("parameter block length mismatch"));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = ScorerModel::from_params(header.config, params)
        .map_err(|e| ScorerError::CorruptCheckpoint(e.to_string()))?;
    if model.version() != header.version {
        return Err(corrupt("version hash does not match parameters"));
    }
    Ok(model)
}

pub fn save_model(model: &ScorerModel, path: &Path) -> Result<(), ScorerError> {
    let io = |e| ScorerError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    // Write-then-rename so readers never see a partial file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_model(model)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_model(path: &Path) -> Result<ScorerModel, ScorerError> {
    let bytes = fs::read(path).map_err(|e| ScorerError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_scores_and_version() {
        let tmp = tempfile::tempdir().unwrap();
        let m = ScorerModel::new(ScorerConfig::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let p = tmp.path().join("ck/model.ckpt");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.version(), m.version());
        let t = RgbImage::from_fn(64, 64, |x, y| Rgb([x as u8 * 3, y as u8 * 2, 77]));
        assert_eq!(back.score(&t).unwrap(), m.score(&t).unwrap());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = ScorerModel::new(ScorerConfig::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bytes = encode_model(&m);
        for cut in [0, 10, 47, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_model(&bytes[..cut]),
                Err(ScorerError::CorruptCheckpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(
            decode_model(&flipped),
            Err(ScorerError::CorruptCheckpoint(_))
        ));
    }
}
