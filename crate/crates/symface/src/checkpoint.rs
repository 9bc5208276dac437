//! Single-file checkpoint format: magic + version, a JSON header describing
//! metadata and array layout, then raw 32-bit little-endian values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYMFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: IndexMap<String, ArrayD<f32>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write atomically (temp file + rename).
pub fn write_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &IndexMap<String, ArrayD<f32>>,
) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        meta: meta.clone(),
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialize: {e}")))?;

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(tmp.clone(), e))?;
    let mut write = |bytes: &[u8]| -> Result<()> {
        f.write_all(bytes).map_err(|e| Error::io(tmp.clone(), e))
    };
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(header_json.len() as u64).to_le_bytes())?;
    write(&header_json)?;
    for arr in arrays.values() {
        let mut buf = Vec::with_capacity(arr.len() * 4);
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&buf)?;
    }
    f.sync_all().map_err(|e| Error::io(tmp.clone(), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format_version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format_version {}",
            header.format_version
        )));
    }
    let mut arrays = IndexMap::new();
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)
            .map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut values = Vec::with_capacity(n);
        for chunk in buf.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", entry.name)))?;
        arrays.insert(entry.name, arr);
    }
    Ok(Checkpoint {
        meta: header.meta,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut arrays = IndexMap::new();
        arrays.insert(
            "b.second".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0f32, -2.5, 3.25, 0.0]).unwrap(),
        );
        arrays.insert(
            "a.first".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![9.0f32, 8.0, 7.0]).unwrap(),
        );
        let meta = serde_json::json!({"kind": "test", "step": 17});
        write_checkpoint(&path, &meta, &arrays).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.meta["step"], 17);
        let names: Vec<_> = back.arrays.keys().cloned().collect();
        assert_eq!(names, vec!["b.second".to_string(), "a.first".to_string()]);
        assert_eq!(back.arrays["a.first"], arrays["a.first"]);
        assert_eq!(back.arrays["b.second"], arrays["b.second"]);
    }

    #[test]
    fn rejects_unknown_version_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
