//! Versioned checkpoint blobs.
//!
//! Layout: the 8-byte magic `RESCKPT\0`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header (system, tokenizer,
//! encoder layout, head, parameter shapes), then every parameter's entries as
//! little-endian `f64` in store order. A JSON manifest written next to the
//! blob (`<file>.manifest.json`) records the prefix length, width and the
//! vocabulary hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Encoder, Head, Model, System, Tokenizer};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Matrix, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RESCKPT\0";

#[derive(Serialize, Deserialize)]
struct Header {
    system: System,
    tokenizer: Tokenizer,
    encoder: Encoder,
    head: Head,
    params: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub system: System,
    pub prefix_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub vocab_sha256: String,
    pub num_parameters: usize,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<Manifest> {
    let header = Header {
        system: model.system,
        tokenizer: model.tokenizer.clone(),
        encoder: model.encoder.clone(),
        head: model.head.clone(),
        params: model
            .store
            .ids()
            .map(|id| {
                let m = model.store.get(id);
                (model.store.name(id).to_string(), m.rows(), m.cols())
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(24 + header_json.len() + model.store.num_scalars() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for id in model.store.ids() {
        for v in model.store.get(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    io::write_atomic(path, &bytes)?;
    let cfg = model.config();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        system: model.system,
        prefix_len: cfg.prefix_len,
        hidden: cfg.hidden,
        layers: cfg.layers,
        vocab_size: model.tokenizer.vocab_size(),
        vocab_sha256: model.tokenizer.vocab_hash(),
        num_parameters: model.store.num_scalars(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io::write_atomic(&manifest_path(path), text.as_bytes())?;
    Ok(manifest)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rest: &[u8] = &data;
    if take(&mut rest, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
    let mut header: Header = serde_json::from_slice(take(&mut rest, header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.tokenizer.rebuild_index()?;
    let mut store = ParamStore::new();
    for (name, rows, cols) in &header.params {
        let raw = take(&mut rest, rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name.clone(), Matrix::from_vec(*rows, *cols, values));
    }
    if !rest.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let model = Model {
        system: header.system,
        tokenizer: header.tokenizer,
        encoder: header.encoder,
        head: header.head,
        store,
    };
    model.encoder.config().validate()?;
    let manifest_file = manifest_path(path);
    if manifest_file.exists() {
        let manifest: Manifest = serde_json::from_str(&io::read_to_string(&manifest_file)?)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.vocab_sha256 != model.tokenizer.vocab_hash()
            || manifest.prefix_len != model.config().prefix_len
            || manifest.hidden != model.config().hidden
        {
            return Err(Error::Checkpoint(
                "manifest does not match checkpoint contents".into(),
            ));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> Model {
        let tok = Tokenizer::train(["alpha beta gamma", "beta delta"], 40, 2);
        let mut cfg = EncoderConfig::desk(0);
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.ffn = 16;
        cfg.layers = 1;
        cfg.prefix_len = 2;
        cfg.segment_len = 8;
        cfg.max_positions = 32;
        Model::init(System::Res, tok, cfg, 3).unwrap()
    }

    #[test]
    fn save_load_roundtrip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        let manifest = save_checkpoint(&path, &m).unwrap();
        assert_eq!(manifest.prefix_len, 2);
        assert_eq!(manifest.hidden, 8);
        assert_eq!(manifest.vocab_sha256, m.tokenizer.vocab_hash());
        assert!(manifest_path(&path).exists());
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"garbage!garbage!garbage!").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
