//! Versioned on-disk container shared by checkpoints, prototype snapshots
//! and weather vectors.
//!
//! Layout:
//!
//! ```text
//! seqweather-container v1\n
//! {"kind": ..., "meta": {...}, "blocks": [{"name": ..., "shape": [...]}, ...],
//!  "payload_bytes": N, "sha256": "..."}\n
//! <N bytes: little-endian f32 blocks in declaration order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::nn::ArchDescriptor;

pub const MAGIC: &str = "seqweather-container";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
    payload_bytes: usize,
    sha256: String,
}

impl Container {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Corrupt(format!("container has no block {name:?}")))
    }
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for b in &c.blocks {
        if b.shape.iter().product::<usize>() != b.data.len() {
            return Err(Error::shape(format!(
                "block {} has shape {:?} but {} values",
                b.name,
                b.shape,
                b.data.len()
            )));
        }
        for v in &b.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        kind: c.kind.clone(),
        meta: c.meta.clone(),
        blocks: c
            .blocks
            .iter()
            .map(|b| BlockHeader {
                name: b.name.clone(),
                shape: b.shape.clone(),
            })
            .collect(),
        payload_bytes: payload.len(),
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let mut out = format!("{MAGIC} v{VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&header)?);
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let (first, rest) = split_line(bytes).ok_or_else(|| Error::Corrupt("missing magic line".into()))?;
    let first = std::str::from_utf8(first).map_err(|_| Error::Corrupt("magic line is not text".into()))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|s| s.trim().strip_prefix('v'))
        .ok_or_else(|| Error::Corrupt(format!("bad magic line {first:?}")))?
        .parse::<u32>()
        .map_err(|_| Error::Corrupt(format!("bad version in {first:?}")))?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let (head, payload) = split_line(rest).ok_or_else(|| Error::Corrupt("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(head).map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    if payload.len() != header.payload_bytes {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(Error::Corrupt("payload checksum mismatch".into()));
    }
    let mut offset = 0usize;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for bh in header.blocks {
        let n: usize = bh.shape.iter().product();
        let end = offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Corrupt(format!("block {} runs past payload", bh.name)));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset = end;
        blocks.push(Block {
            name: bh.name,
            shape: bh.shape,
            data,
        });
    }
    if offset != payload.len() {
        return Err(Error::Corrupt("trailing bytes after last block".into()));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        blocks,
    })
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written file under the final name.
pub fn write(path: &Path, c: &Container) -> Result<()> {
    let bytes = encode(c)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

pub fn model_to_container(model: &SegmentationModel) -> Result<Container> {
    let mut blocks = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        blocks.push(Block {
            name: format!("layer{i}.weight"),
            shape: layer.weight.shape().to_vec(),
            data: layer.weight.iter().copied().collect(),
        });
        blocks.push(Block {
            name: format!("layer{i}.bias"),
            shape: layer.bias.shape().to_vec(),
            data: layer.bias.to_vec(),
        });
    }
    Ok(Container {
        kind: "model".into(),
        meta: serde_json::json!({ "arch": model.arch() }),
        blocks,
    })
}

pub fn model_from_container(c: &Container, expected: Option<&ArchDescriptor>) -> Result<SegmentationModel> {
    if c.kind != "model" {
        return Err(Error::Corrupt(format!("expected a model container, found {:?}", c.kind)));
    }
    let arch: ArchDescriptor = serde_json::from_value(c.meta["arch"].clone())
        .map_err(|e| Error::Corrupt(format!("bad architecture descriptor: {e}")))?;
    if let Some(exp) = expected {
        if exp != &arch {
            return Err(Error::DescriptorMismatch {
                expected: format!("{exp:?}"),
                found: format!("{arch:?}"),
            });
        }
    }
    let mut model = SegmentationModel::zeros(arch).map_err(|e| Error::Corrupt(e.to_string()))?;
    if c.blocks.len() != 2 * model.layers.len() {
        return Err(Error::Corrupt("block count does not match architecture".into()));
    }
    for (slot, block) in model.param_slices_mut().into_iter().zip(&c.blocks) {
        if slot.len() != block.data.len() {
            return Err(Error::Corrupt(format!("block {} has the wrong size", block.name)));
        }
        slot.copy_from_slice(&block.data);
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &SegmentationModel) -> Result<()> {
    write(path, &model_to_container(model)?)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ArchDescriptor>) -> Result<SegmentationModel> {
    model_from_container(&read(path)?, expected)
}
