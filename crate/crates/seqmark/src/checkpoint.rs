//! Checkpoint persistence. A checkpoint is a magic string, a length-prefixed
//! JSON manifest (format version, model config, parameter names/shapes/byte
//! offsets, vocabulary), and a flat little-endian f64 value buffer whose
//! regions the manifest offsets partition exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"SEQMARK1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this parameter's first value in the buffer.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    vocab: Vec<String>,
}

/// Serializes the model and vocabulary to checkpoint bytes.
pub fn checkpoint_to_bytes(model: &Model, vocab: &Vocab) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut offset = 0u64;
    for (_, name, tensor) in model.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += (tensor.numel() * 8) as u64;
    }
    let manifest = Manifest {
        version: VERSION,
        config: model.config.clone(),
        params,
        vocab: vocab.tokens().to_vec(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::CheckpointManifest(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + 4 + manifest_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (_, _, tensor) in model.store.iter() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(len).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let slice = &bytes[*at..end];
            *at = end;
            Ok(slice)
        }
        None => Err(Error::CheckpointTruncated(format!(
            "{what}: need {len} bytes at offset {at}, file has {}",
            bytes.len()
        ))),
    }
}

/// Reconstructs a model and vocabulary from checkpoint bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, Vocab)> {
    let mut at = 0usize;
    let magic = take(bytes, &mut at, MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let len_bytes = take(bytes, &mut at, 4, "manifest length")?;
    let manifest_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let manifest_bytes = take(bytes, &mut at, manifest_len, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::CheckpointManifest(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::CheckpointVersion(manifest.version));
    }

    let buffer = &bytes[at..];
    let mut expected_offset = 0u64;
    for entry in &manifest.params {
        if entry.offset != expected_offset {
            return Err(Error::CheckpointManifest(format!(
                "parameter {:?} at offset {} leaves a gap or overlap (expected {})",
                entry.name, entry.offset, expected_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        expected_offset += (numel * 8) as u64;
    }
    if expected_offset != buffer.len() as u64 {
        return Err(Error::CheckpointTruncated(format!(
            "value buffer holds {} bytes but the manifest needs {}",
            buffer.len(),
            expected_offset
        )));
    }

    let mut model = Model::assemble(manifest.config.clone())?;
    let assembled = model.param_manifest();
    if assembled.len() != manifest.params.len() {
        return Err(Error::CheckpointManifest(format!(
            "manifest lists {} parameters but the config assembles {}",
            manifest.params.len(),
            assembled.len()
        )));
    }
    for (entry, (name, shape)) in manifest.params.iter().zip(&assembled) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::CheckpointManifest(format!(
                "parameter mismatch: checkpoint has {:?} {:?}, config assembles {:?} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }

    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for (entry, id) in manifest.params.iter().zip(ids) {
        let tensor = model.store.get_mut(id);
        let start = entry.offset as usize;
        let values = tensor.data_mut();
        for (k, v) in values.iter_mut().enumerate() {
            let b = &buffer[start + 8 * k..start + 8 * (k + 1)];
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
    }

    let vocab = Vocab::from_tokens(manifest.vocab)?;
    Ok((model, vocab))
}

/// Writes a checkpoint file.
pub fn save_checkpoint(model: &Model, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, vocab)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Vocab)> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> (Model, Vocab) {
        let mut model = Model::assemble(ModelConfig::gradcheck_desk()).unwrap();
        // Scribble over the initialization so the buffer is not just the
        // seeded values a loader could accidentally regenerate.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let vocab = Vocab::from_tokens(
            ["<unk>", "alpha", "beta", "gamma"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        (model, vocab)
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let (loaded, loaded_vocab) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded_vocab.tokens(), vocab.tokens());
        for ((_, na, ta), (_, nb, tb)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn save_after_load_is_byte_identical() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let (loaded, loaded_vocab) = checkpoint_from_bytes(&bytes).unwrap();
        let again = checkpoint_to_bytes(&loaded, &loaded_vocab).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn loaded_model_decodes_identically() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let (loaded, _) = checkpoint_from_bytes(&bytes).unwrap();
        for ids in [vec![0usize, 1, 2, 3], vec![5, 5, 5], vec![7]] {
            assert_eq!(model.decode(&ids).unwrap(), loaded.decode(&ids).unwrap());
        }
    }

    #[test]
    fn wrong_magic_is_its_own_error() {
        let (model, vocab) = small_model();
        let mut bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::CheckpointMagic)
        ));
    }

    #[test]
    fn future_version_is_rejected_by_number() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let patched = patch_manifest(&bytes, |m| {
            m["version"] = serde_json::json!(7);
        });
        assert!(matches!(
            checkpoint_from_bytes(&patched),
            Err(Error::CheckpointVersion(7))
        ));
    }

    #[test]
    fn truncated_buffer_is_reported_with_sizes() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        match err {
            Error::CheckpointTruncated(msg) => {
                assert!(msg.contains("buffer"), "{msg}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_reported() {
        assert!(matches!(
            checkpoint_from_bytes(b"SEQ"),
            Err(Error::CheckpointTruncated(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes(b"SEQMARK1\x10\x00"),
            Err(Error::CheckpointTruncated(_))
        ));
    }

    #[test]
    fn corrupt_manifest_json_is_a_manifest_error() {
        let (model, vocab) = small_model();
        let mut bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        // First manifest byte sits right after magic + length prefix.
        bytes[12] = b'!';
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::CheckpointManifest(_))
        ));
    }

    #[test]
    fn gapped_offsets_are_a_manifest_error() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let patched = patch_manifest(&bytes, |m| {
            m["params"][1]["offset"] = serde_json::json!(4);
        });
        match checkpoint_from_bytes(&patched).unwrap_err() {
            Error::CheckpointManifest(msg) => assert!(msg.contains("gap"), "{msg}"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn renamed_parameter_is_a_manifest_error() {
        let (model, vocab) = small_model();
        let bytes = checkpoint_to_bytes(&model, &vocab).unwrap();
        let patched = patch_manifest(&bytes, |m| {
            m["params"][0]["name"] = serde_json::json!("imposter");
        });
        match checkpoint_from_bytes(&patched).unwrap_err() {
            Error::CheckpointManifest(msg) => assert!(msg.contains("imposter"), "{msg}"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_matches_memory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (model, vocab) = small_model();
        save_checkpoint(&model, &vocab, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let direct = checkpoint_to_bytes(&model, &vocab).unwrap();
        let via_file = checkpoint_to_bytes(&loaded, &vocab).unwrap();
        assert_eq!(direct, via_file);
    }

    /// Decodes the manifest JSON, lets the closure rewrite it, and splices
    /// the result back in front of the untouched value buffer.
    fn patch_manifest(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        f(&mut manifest);
        let new_manifest = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(new_manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_manifest);
        out.extend_from_slice(&bytes[12 + len..]);
        out
    }
}
