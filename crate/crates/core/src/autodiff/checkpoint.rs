//! Binary container for named arrays.
//!
//! Layout:
//!
//! ```text
//! b"VPCKPT01"
//! u64 LE            header length in bytes
//! header            JSON: {"seed": u64, "config": <any>, "arrays": [{"name", "shape", "offset"}]}
//! data              f64 LE values; `offset` is in bytes from the start of this section
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{Array, ParamStore};

pub const MAGIC: &[u8; 8] = b"VPCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks array `{0}`")]
    Missing(String),
    #[error("checkpoint has unexpected array `{0}`")]
    Unexpected(String),
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize, Debug)]
struct Header {
    seed: u64,
    config: Value,
    arrays: Vec<Entry>,
}

/// Contents of a container file.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub seed: u64,
    pub config: Value,
    pub arrays: Vec<(String, Array)>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

pub fn write_bundle<W: Write>(
    mut w: W,
    seed: u64,
    config: &Value,
    arrays: &[(&str, &Array)],
) -> Result<(), CheckpointError> {
    let mut offset = 0u64;
    let entries = arrays
        .iter()
        .map(|(name, a)| {
            let e = Entry {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                offset,
            };
            offset += 8 * a.len() as u64;
            e
        })
        .collect();
    let header = Header {
        seed,
        config: config.clone(),
        arrays: entries,
    };
    let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, a) in arrays {
        let mut buf = Vec::with_capacity(8 * a.len());
        for v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle<R: Read>(mut r: R) -> Result<Bundle, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(CheckpointError::Header(format!(
                "array `{}` runs past the end of the file",
                e.name
            )));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let array = Array::from_vec(&e.shape, values)
            .map_err(|err| CheckpointError::Header(err.to_string()))?;
        arrays.push((e.name, array));
    }
    Ok(Bundle {
        seed: header.seed,
        config: header.config,
        arrays,
    })
}

pub fn save_bundle(
    path: impl AsRef<Path>,
    seed: u64,
    config: &Value,
    arrays: &[(&str, &Array)],
) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    write_bundle(std::io::BufWriter::new(file), seed, config, arrays)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle, CheckpointError> {
    let file = std::fs::File::open(path)?;
    read_bundle(std::io::BufReader::new(file))
}

impl ParamStore {
    /// Writes every parameter value (not the optimizer state) in name order.
    pub fn save(&self, path: impl AsRef<Path>, config: &Value) -> Result<(), CheckpointError> {
        let arrays = self.iter().map(|(n, p)| (n, &p.value)).collect::<Vec<_>>();
        save_bundle(path, self.seed(), config, &arrays)
    }

    /// Overwrites this store's values from a checkpoint. The checkpoint must
    /// hold exactly the same names with the same shapes.
    pub fn load_values(&mut self, bundle: &Bundle) -> Result<(), CheckpointError> {
        for (name, _) in &bundle.arrays {
            if !self.contains(name) {
                return Err(CheckpointError::Unexpected(name.clone()));
            }
        }
        let names = self.names().map(str::to_string).collect::<Vec<_>>();
        for name in names {
            let src = bundle
                .get(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let dst = self.value_mut(&name).expect("name comes from the store");
            if dst.shape() != src.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip() {
        let a = Array::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap();
        let b = Array::scalar(7.0);
        let cfg = serde_json::json!({"dim": 4});
        let mut buf = Vec::new();
        write_bundle(&mut buf, 42, &cfg, &[("a", &a), ("b", &b)]).unwrap();
        let back = read_bundle(buf.as_slice()).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.config, cfg);
        assert_eq!(back.get("a").unwrap(), &a);
        assert_eq!(back.get("b").unwrap(), &b);
    }

    #[test]
    fn rejects_bad_magic_and_shapes() {
        assert!(matches!(
            read_bundle(&b"NOTACKPTxxxxxxxx"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut store = ParamStore::new(1);
        store.insert("w", Array::zeros(&[2, 2])).unwrap();
        let bundle = Bundle {
            seed: 1,
            config: Value::Null,
            arrays: vec![("w".to_string(), Array::zeros(&[3]))],
        };
        assert!(matches!(
            store.load_values(&bundle),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
