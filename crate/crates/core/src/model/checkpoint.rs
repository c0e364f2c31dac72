//! Checkpoint file: magic `BRKDNLAB`, u32 LE format version, u32 LE header
//! length, the JSON `ModelConfig`, then every tensor as little-endian f32 in
//! the order given by [`super::tensor_layout`].

use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BRKDNLAB";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&params.config)?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelParams<f32>> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_owned(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| fail("truncated config header".into()))?;
    let config: ModelConfig =
        serde_json::from_slice(header).map_err(|e| fail(format!("bad config header: {e}")))?;
    config.validate().map_err(|e| fail(e.to_string()))?;

    let mut params = ModelParams::<f32>::init(&config)?;
    let mut data = &bytes[16 + header_len..];
    let expected = 4 * params.num_params();
    if data.len() != expected {
        return Err(fail(format!(
            "{} tensor bytes, expected {expected}{}",
            data.len(),
            if data.len() < expected { " (truncated)" } else { "" }
        )));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(data[..4].try_into().expect("4 bytes"));
            data = &data[4..];
        }
    }
    if !params.all_finite() {
        return Err(fail("non-finite parameter values".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Load and require shapes identical to `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(path)?;
    ensure_compatible(&params.config, expected)?;
    Ok(params)
}

pub fn ensure_compatible(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if found.same_shapes(expected) {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(format!(
            "checkpoint has vocab {} hidden {} layers {} heads {} ffn {} max_len {} tied {}, \
             expected vocab {} hidden {} layers {} heads {} ffn {} max_len {} tied {}",
            found.vocab_size,
            found.hidden_dim,
            found.num_layers,
            found.num_heads,
            found.ffn_dim,
            found.max_len,
            found.tie_mlm_head,
            expected.vocab_size,
            expected.hidden_dim,
            expected.num_layers,
            expected.num_heads,
            expected.ffn_dim,
            expected.max_len,
            expected.tie_mlm_head,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            max_len: 10,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 12,
            dropout_rate: 0.1,
            num_labels: 3,
            tie_mlm_head: true,
            seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(to_bytes(&p).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_error() {
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        let bytes = to_bytes(&p).unwrap();
        let path = Path::new("x.ckpt");
        for cut in [0, 5, 12, 20, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut], path).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "{cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, path).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes(&bad, path).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long, path).is_err());
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ModelParams::<f32>::init(&cfg()).unwrap(), &path).unwrap();
        let other = ModelConfig { vocab_size: 31, ..cfg() };
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::CheckpointMismatch(_))));
        let same_shape = ModelConfig { seed: 99, dropout_rate: 0.0, ..cfg() };
        assert!(load_checkpoint_for(&path, &same_shape).is_ok());
    }
}
