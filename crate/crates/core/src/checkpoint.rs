//! Versioned checkpoint container for codec models.
//!
//! Byte layout (all integers little-endian), documented in
//! `docs/checkpoint-format.md`:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "OVMK"
//! 4       4     format version (u32)
//! 8       4     header length N (u32)
//! 12      N     header: JSON (model id, config snapshot, training step,
//!               rng state digest, parameter manifest with shapes)
//! 12+N    ...   parameter data: f64 values in manifest order, row-major
//! end-32  32    SHA-256 over every preceding byte
//! ```
//!
//! Loading verifies magic, version and digest before reconstructing the
//! model; a failed check never returns a partial model.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecModel};
use crate::error::{Error, Result};
use crate::nn::ParamBlock;

pub const MAGIC: &[u8; 4] = b"OVMK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    component: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_id: String,
    config: CodecConfig,
    signature_seed: u64,
    training_step: usize,
    rng_state_digest: String,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint: the model plus its persisted trainer-stream digest.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: CodecModel,
    pub rng_state_digest: String,
}

fn components(model: &CodecModel) -> Vec<(String, &dyn ParamBlock)> {
    let mut list: Vec<(String, &dyn ParamBlock)> =
        vec![("encoder".to_string(), &model.encoder as &dyn ParamBlock)];
    for (i, h) in model.heads.iter().enumerate() {
        list.push((format!("decoder_head_{}", i + 1), h as &dyn ParamBlock));
    }
    if let Some(aux) = &model.aux_head {
        list.push(("aux_zero_head".to_string(), aux as &dyn ParamBlock));
    }
    list.push((
        "discriminator".to_string(),
        &model.discriminator as &dyn ParamBlock,
    ));
    list
}

/// Serialize `model` to `path`. `rng_state_digest` records the state of the
/// training stream that produced these weights ("none" for fresh models).
pub fn save(model: &CodecModel, rng_state_digest: &str, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::<u8>::new();
    for (component, block) in components(model) {
        block.visit(&mut |name, t| {
            entries.push(ParamEntry {
                component: component.clone(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for v in t.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
    }
    let header = Header {
        model_id: model.model_id.clone(),
        config: model.config.clone(),
        signature_seed: model.signature_seed,
        training_step: model.training_step,
        rng_state_digest: rng_state_digest.to_string(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(12 + header_json.len() + data.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&data);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Load and verify a checkpoint.
pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 + 32 {
        return Err(Error::CheckpointIntegrity(format!(
            "file too short ({} bytes) to be a checkpoint",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::CheckpointIntegrity(
            "bad magic; not a checkpoint file".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let computed = Sha256::digest(body);
    if digest != computed.as_slice() {
        return Err(Error::CheckpointIntegrity(
            "digest mismatch; file is corrupt or truncated".into(),
        ));
    }

    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > body.len() {
        return Err(Error::CheckpointIntegrity(
            "header length exceeds file size".into(),
        ));
    }
    let header: Header = serde_json::from_slice(&body[12..12 + header_len])?;
    header.config.validate()?;

    // Rebuild the structural skeleton (signatures regenerate from their
    // persisted seed), then overwrite every tensor.
    let mut model = CodecModel::init(header.config.clone(), header.signature_seed)?;
    model.model_id = header.model_id;
    model.training_step = header.training_step;

    let mut offset = 12 + header_len;
    let mut entry_idx = 0usize;
    let mut failure: Option<Error> = None;
    {
        let total = body.len();
        let mut fill = |component: &str, name: &str, t: &mut crate::autodiff::Tensor| {
            if failure.is_some() {
                return;
            }
            let Some(entry) = header.params.get(entry_idx) else {
                failure = Some(Error::CheckpointIntegrity(
                    "parameter manifest shorter than model structure".into(),
                ));
                return;
            };
            if entry.component != component || entry.name != name || entry.shape != t.shape() {
                failure = Some(Error::CheckpointIntegrity(format!(
                    "manifest entry {entry_idx} ({}/{} {:?}) does not match model structure ({component}/{name} {:?})",
                    entry.component, entry.name, entry.shape, t.shape()
                )));
                return;
            }
            let n = t.len();
            if offset + n * 8 > total {
                failure = Some(Error::CheckpointIntegrity(
                    "parameter data truncated".into(),
                ));
                return;
            }
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(body[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
            entry_idx += 1;
        };

        let mut comps: Vec<(String, &mut dyn ParamBlock)> = Vec::new();
        comps.push(("encoder".into(), &mut model.encoder));
        for (i, h) in model.heads.iter_mut().enumerate() {
            comps.push((format!("decoder_head_{}", i + 1), h));
        }
        if let Some(aux) = model.aux_head.as_mut() {
            comps.push(("aux_zero_head".into(), aux));
        }
        comps.push(("discriminator".into(), &mut model.discriminator));
        for (cname, block) in comps {
            block.visit_mut(&mut |name, t| fill(&cname, name, t));
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if entry_idx != header.params.len() {
        return Err(Error::CheckpointIntegrity(
            "parameter manifest longer than model structure".into(),
        ));
    }

    Ok(LoadedCheckpoint {
        model,
        rng_state_digest: header.rng_state_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Architecture, Image, Message};
    use crate::rng::stream;
    use rand::Rng;

    fn probe_model(seed: u64) -> CodecModel {
        CodecModel::init(CodecConfig::probe(Architecture::MultiHeadAux), seed).unwrap()
    }

    fn probe_image(seed: u64) -> Image {
        let mut r = stream(seed);
        Image::from_fn(8, 8, |_, _, _| r.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_on_probe_batch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ovmk");
        let mut model = probe_model(3);
        model.training_step = 17;
        save(&model, "digest-test", &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.rng_state_digest, "digest-test");
        assert_eq!(loaded.model.training_step, 17);
        assert_eq!(loaded.model.model_id, model.model_id);

        let mut r = stream(5);
        for i in 0..3 {
            let img = probe_image(10 + i);
            let msg = Message::random(8, &mut r);
            let a = model.embed(&img, &msg).unwrap();
            let b = loaded.model.embed(&img, &msg).unwrap();
            let max_diff = (a.data() - b.data())
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert_eq!(max_diff, 0.0, "embed outputs must be bit-identical");
            for head in [0usize, 1, 2] {
                assert_eq!(
                    model.decode(&a, head).unwrap(),
                    loaded.model.decode(&a, head).unwrap()
                );
            }
        }
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ovmk");
        save(&probe_model(4), "none", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(
            load(&cut),
            Err(Error::CheckpointIntegrity(_))
        ));
    }

    #[test]
    fn corrupted_byte_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ovmk");
        save(&probe_model(4), "none", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x5a;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(Error::CheckpointIntegrity(_))
        ));
    }

    #[test]
    fn future_version_is_a_migration_error_naming_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ovmk");
        save(&probe_model(4), "none", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(Error::CheckpointVersion { found, supported }) => {
                assert_eq!(found, FORMAT_VERSION + 1);
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
