//! Flat binary checkpoints.
//!
//! Layout: one line of compact JSON (the header), `\n`, then every tensor's
//! values as little-endian f64 in header order (row-major).

use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

pub const MAGIC: &str = "CTXDIFF-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub magic: String,
    pub tensors: Vec<TensorEntry>,
    pub config_hash: String,
    pub step: u64,
    /// Free-form metadata (resolved config, rng position, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(params: ParamSet, config_hash: impl Into<String>, step: u64, meta: serde_json::Value) -> Self {
        let tensors = params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: [t.value.nrows(), t.value.ncols()],
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                magic: MAGIC.to_string(),
                tensors,
                config_hash: config_hash.into(),
                step,
                meta,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for t in self.params.tensors() {
            for v in t.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut reader = std::io::BufReader::new(reader);
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::Checkpoint(format!("reading header: {e}")))?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Checkpoint("missing header terminator".into()));
        }
        line.pop();
        let header: CheckpointHeader = serde_json::from_slice(&line)?;
        if header.magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", header.magic)));
        }
        let mut params = ParamSet::new();
        let mut buf = [0u8; 8];
        for entry in &header.tensors {
            let [rows, cols] = entry.shape;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                reader
                    .read_exact(&mut buf)
                    .map_err(|e| Error::Checkpoint(format!("truncated tensor {}: {e}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.push(entry.name.clone(), value)?;
        }
        let mut rest = Vec::new();
        reader
            .read_to_end(&mut rest)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::fan_in_uniform;
    use crate::noise::seeded;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, step in any::<u64>()) {
            let mut p = ParamSet::new();
            p.push("a", fan_in_uniform(&mut seeded(seed), rows, cols)).unwrap();
            p.push("b", Array2::from_elem((1, cols), f64::MIN_POSITIVE)).unwrap();
            let ck = Checkpoint::new(p, "h", step, serde_json::json!({"k": [1, 2]}));
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_reader(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.params.flat(), ck.params.flat());
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut p = ParamSet::new();
        p.push("a", Array2::zeros((2, 2))).unwrap();
        let bytes = Checkpoint::new(p, "h", 0, serde_json::Value::Null).to_bytes().unwrap();
        assert!(Checkpoint::from_reader(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_reader(extra.as_slice()).is_err());
        let bad = String::from_utf8_lossy(&bytes).replace(MAGIC, "CTXDIFF-CKPT-9");
        assert!(Checkpoint::from_reader(bad.as_bytes()).is_err());
    }
}
