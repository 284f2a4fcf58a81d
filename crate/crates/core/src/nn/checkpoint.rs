//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `CIECKPT1`, a little-endian `u64` header length,
//! a JSON header (`kind`, free-form `meta`, and the tensor table with names
//! and shapes), then every tensor as row-major little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CIECKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .entries()
                .map(|(name, v)| TensorEntry {
                    name: name.to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for (_, v) in self.params.entries() {
            for x in v.iter() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut params = ParamSet::new();
        let mut buf = [0u8; 8];
        for t in header.tensors {
            let mut data = Vec::with_capacity(t.rows * t.cols);
            for _ in 0..t.rows * t.cols {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(f64::from_le_bytes(buf));
            }
            let arr = Array2::from_shape_vec((t.rows, t.cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.add(t.name, arr);
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            params,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

impl ParamSet {
    /// Overwrites every parameter with the same-named tensor from `source`.
    pub fn copy_from(&mut self, source: &ParamSet) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = source
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            let value = source.get(src);
            if value.dim() != self.get(id).dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    self.get(id).dim()
                )));
            }
            self.get_mut(id).assign(value);
        }
        Ok(())
    }

    /// Copies tensors whose names start with `prefix` (renamed via `rename`),
    /// skipping those absent in `source`. Returns how many were copied.
    pub fn copy_prefix_from(
        &mut self,
        source: &ParamSet,
        prefix: &str,
        source_prefix: &str,
    ) -> usize {
        let mut n = 0;
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let Some(rest) = name.strip_prefix(prefix) else {
                continue;
            };
            let Some(src) = source.find(&format!("{source_prefix}{rest}")) else {
                continue;
            };
            if source.get(src).dim() == self.get(id).dim() {
                self.get_mut(id).assign(source.get(src));
                n += 1;
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        params.add_normal("a", (3, 2), 1.0, &mut rng);
        params.add_normal("b.c", (1, 5), 1.0, &mut rng);
        let ck = Checkpoint {
            kind: "test".into(),
            meta: serde_json::json!({"dim": 2, "vocab": ["x", "y"]}),
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta::<usize>("dim").unwrap(), 2);
        assert!(back.expect_kind("other").is_err());
        assert!(matches!(
            back.meta::<usize>("nope"),
            Err(Error::MissingKey(_))
        ));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
