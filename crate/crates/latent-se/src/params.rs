//! Named parameter storage and the shared binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   "LSE1"
//! version u32
//! config  u32 length + UTF-8 JSON block
//! count   u32
//! tensor* name(u32 len + bytes) dtype(u8: 0=f32, 1=f64) rows(u32) cols(u32) raw data
//! ```
//!
//! Model and codec parameter files store tensors as f32. Training-resume
//! state uses the same container with f64 tensors so an interrupted run can
//! continue bit-exactly.

use crate::error::{Error, Result};
use crate::mat::Mat;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub type ParamId = usize;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Ordered, named collection of trainable matrices. Creation order defines
/// the [`ParamId`] space, which the optimizer state is indexed by.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id] = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for t in self.trainable.iter_mut() {
            *t = trainable;
        }
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .enumerate()
            .map(move |(i, n)| (i, n.as_str(), &self.values[i]))
    }

    pub fn tensors(&self) -> Vec<(String, Mat)> {
        self.iter()
            .map(|(_, n, m)| (n.to_string(), m.clone()))
            .collect()
    }

    /// Build a store from (name, value) pairs in order.
    pub fn from_tensors(tensors: Vec<(String, Mat)>) -> Self {
        let mut store = Self::new();
        for (name, value) in tensors {
            store.add(name, value);
        }
        store
    }

    /// Overwrite values by name from a tensor list; every store entry must
    /// be present in the list.
    pub fn load_values(&mut self, tensors: &[(String, Mat)]) -> Result<()> {
        let map: HashMap<&str, &Mat> = tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        for i in 0..self.values.len() {
            let name = self.names[i].clone();
            match map.get(name.as_str()) {
                Some(m) => {
                    if m.shape() != self.values[i].shape() {
                        return Err(Error::MalformedCheckpoint(format!(
                            "tensor {name}: shape {:?} does not match expected {:?}",
                            m.shape(),
                            self.values[i].shape()
                        )));
                    }
                    self.values[i] = (*m).clone();
                }
                None => {
                    return Err(Error::MalformedCheckpoint(format!(
                        "missing tensor {name}"
                    )))
                }
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config_json: &str,
    tensors: &[(String, Mat)],
    dtype: DType,
) -> Result<()> {
    let path = path.as_ref();
    let file =
        File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(format!("write {}", path.display()), e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    let cfg = config_json.as_bytes();
    w.write_u32::<LittleEndian>(cfg.len() as u32).map_err(io)?;
    w.write_all(cfg).map_err(io)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for (name, mat) in tensors {
        let nb = name.as_bytes();
        w.write_u32::<LittleEndian>(nb.len() as u32).map_err(io)?;
        w.write_all(nb).map_err(io)?;
        w.write_u8(match dtype {
            DType::F32 => 0,
            DType::F64 => 1,
        })
        .map_err(io)?;
        w.write_u32::<LittleEndian>(mat.rows as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(mat.cols as u32).map_err(io)?;
        for &v in &mat.data {
            match dtype {
                DType::F32 => w.write_f32::<LittleEndian>(v as f32).map_err(io)?,
                DType::F64 => w.write_f64::<LittleEndian>(v).map_err(io)?,
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, Vec<(String, Mat)>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::MalformedCheckpoint(msg.to_string());

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("wrong magic, not an LSE1 checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::MalformedCheckpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated config length"))? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(|_| bad("truncated config block"))?;
    let config_json =
        String::from_utf8(cfg).map_err(|_| bad("config block is not valid UTF-8"))?;

    let count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated tensor count"))? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated name length"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not valid UTF-8"))?;
        let dtype = match r.read_u8().map_err(|_| bad("truncated dtype"))? {
            0 => DType::F32,
            1 => DType::F64,
            other => {
                return Err(Error::MalformedCheckpoint(format!(
                    "unknown dtype tag {other}"
                )))
            }
        };
        let rows = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated rows"))? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated cols"))? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = match dtype {
                DType::F32 => r
                    .read_f32::<LittleEndian>()
                    .map_err(|_| bad("truncated tensor data"))? as f64,
                DType::F64 => r
                    .read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated tensor data"))?,
            };
            data.push(v);
        }
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok((config_json, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_f64_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.lse");
        let tensors = vec![
            ("a.w".to_string(), Mat::from_vec(2, 3, vec![0.1, -0.2, 0.3, 1.5e-7, 9.0, -4.25])),
            ("b".to_string(), Mat::from_vec(1, 1, vec![std::f64::consts::PI])),
        ];
        save_checkpoint(&path, r#"{"kind":"test"}"#, &tensors, DType::F64).unwrap();
        let (cfg, back) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, r#"{"kind":"test"}"#);
        assert_eq!(back, tensors);
    }

    #[test]
    fn checkpoint_f32_quantizes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.lse");
        let tensors = vec![("w".to_string(), Mat::from_vec(1, 2, vec![0.1, 1.0 / 3.0]))];
        save_checkpoint(&path, "{}", &tensors, DType::F32).unwrap();
        let (_, back) = load_checkpoint(&path).unwrap();
        assert_eq!(back[0].1.data[0], 0.1f32 as f64);
        assert_eq!(back[0].1.data[1], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.lse");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::MalformedCheckpoint(_))
        ));
    }

    #[test]
    fn store_load_values_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("w", Mat::zeros(2, 2));
        let wrong = vec![("w".to_string(), Mat::zeros(3, 2))];
        assert!(store.load_values(&wrong).is_err());
        let right = vec![("w".to_string(), Mat::from_vec(2, 2, vec![1.0; 4]))];
        store.load_values(&right).unwrap();
        assert_eq!(store.by_name("w").unwrap().data, vec![1.0; 4]);
    }
}
