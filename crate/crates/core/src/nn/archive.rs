//! Self-describing parameter archive.
//!
//! Layout: the 8-byte magic `PADARCH1`, a little-endian `u64` header length,
//! a JSON header (free-form metadata plus a tensor index), then every
//! parameter group's values as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, ParamSlot};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PADARCH1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    groups: Vec<GroupIndex>,
}

#[derive(Serialize, Deserialize)]
struct GroupIndex {
    name: String,
    /// Offset of the group's first value, in `f64` units from the data start.
    offset: usize,
    len: usize,
    slots: Vec<ParamSlot>,
}

/// One named parameter set read back from an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveGroup {
    pub name: String,
    pub params: ParamSet,
}

pub fn write_archive(path: &Path, meta: &serde_json::Value, groups: &[(&str, &ParamSet)]) -> Result<()> {
    let mut offset = 0;
    let index: Vec<GroupIndex> = groups
        .iter()
        .map(|(name, set)| {
            let g = GroupIndex {
                name: name.to_string(),
                offset,
                len: set.len(),
                slots: set.slots.clone(),
            };
            offset += set.len();
            g
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        groups: index,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, set) in groups {
        for v in &set.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<ArchiveGroup>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing archive magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| bad("header length out of range"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut groups = Vec::with_capacity(header.groups.len());
    for g in header.groups {
        let end = g.offset + g.len;
        if end > values.len() {
            return Err(bad(&format!("group `{}` runs past the data section", g.name)));
        }
        if g.slots.iter().any(|s| s.offset + s.len() > g.len) {
            return Err(bad(&format!("group `{}` has a slot outside its range", g.name)));
        }
        groups.push(ArchiveGroup {
            name: g.name,
            params: ParamSet {
                slots: g.slots,
                values: values[g.offset..end].to_vec(),
            },
        });
    }
    Ok((header.meta, groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let set = ParamSet {
            slots: vec![ParamSlot {
                name: "w".into(),
                shape: vec![3],
                offset: 0,
                trainable: true,
            }],
            values: vec![0.1, -2.5e-300, f64::MAX],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let meta = serde_json::json!({"epoch": 3});
        write_archive(&p, &meta, &[("net", &set), ("other", &set)]).unwrap();
        let (m, groups) = read_archive(&p).unwrap();
        assert_eq!(m, meta);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].params, set);

        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(read_archive(&p), Err(Error::Checkpoint(_))));
    }
}
