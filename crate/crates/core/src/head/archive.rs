//! Named-tensor checkpoint archive.
//!
//! ```text
//! magic     4 bytes "S2CA"
//! version   u16     currently 1
//! manifest  u64 length + UTF-8 JSON (head config, optional backbone
//!           config, entry names and shapes)
//! count     u32
//! entries   count × (u16 name length, name bytes, S2CT tensor container)
//! ```
//!
//! Entries are written in name order, so an archive is a pure function of
//! the configuration and parameter values.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ChangeHead, HeadConfig};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"S2CA";
pub const ARCHIVE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub head: HeadConfig,
    pub backbone: Option<BackboneConfig>,
    pub entries: Vec<EntryInfo>,
}

pub struct Checkpoint {
    pub head: ChangeHead,
    pub backbone: Option<BackboneConfig>,
}

pub fn to_bytes(head: &ChangeHead, backbone: Option<&BackboneConfig>) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor)> = head.params.learnable().collect();
    let manifest = Manifest {
        head: head.config.clone(),
        backbone: backbone.cloned(),
        entries: entries
            .iter()
            .map(|(n, t)| EntryInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf).expect("writing to a Vec cannot fail");
    }
    Ok(buf)
}

fn read_exact<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated archive: {e}")))?;
    Ok(b)
}

/// Parses an archive and checks every expected parameter is present with
/// the shape the manifest's head configuration implies.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = bytes;
    if &read_exact::<4>(&mut r)? != ARCHIVE_MAGIC {
        return Err(Error::Format("not a checkpoint archive".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    if len > r.len() {
        return Err(Error::Format("manifest length exceeds archive".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;

    let mut params = init_params(&manifest.head)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .learnable()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "archive holds {count} tensors, configuration needs {}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let info = manifest.entries.iter().find(|e| &e.name == name);
        if info.map(|i| &i.shape) != Some(shape) {
            return Err(Error::Format(format!("manifest entry for `{name}` is missing or misshapen")));
        }
    }
    for _ in 0..count {
        let n = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        if n > r.len() {
            return Err(Error::Format("truncated entry name".into()));
        }
        let name = std::str::from_utf8(&r[..n])
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        r = &r[n..];
        let t = Tensor::read_from(&mut r)?;
        let slot = params
            .get_mut(&name)
            .map_err(|_| Error::Format(format!("unexpected entry `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "entry `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.len())));
    }
    Ok(Checkpoint {
        head: ChangeHead {
            config: manifest.head,
            params,
        },
        backbone: manifest.backbone,
    })
}

pub fn save(path: impl AsRef<Path>, head: &ChangeHead, backbone: Option<&BackboneConfig>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(head, backbone)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
