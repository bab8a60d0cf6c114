//! Named parameter storage, seeded initialization and the checkpoint
//! container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "EMPK"
//! version  u32       1
//! hlen     u64       byte length of the JSON header
//! header   hlen      {"meta": <any JSON>, "tensors": [{"name", "shape": [rows, cols], "trainable"}]}
//! data     f64 LE    every tensor's values, row-major, in header order
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"EMPK";
const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Mat,
    trainable: bool,
}

/// Named 2-D tensors with a per-tensor trainable flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Entry>,
}

/// Stable 64-bit FNV-1a, used to derive per-tensor seeds from names.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    /// Scaled uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.init_uniform_bound(name, rows, cols, bound);
    }

    pub fn init_uniform_bound(&mut self, name: &str, rows: usize, cols: usize, bound: f64) {
        let mut rng = self.rng_for(name);
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound));
        self.insert(name, value);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Mat::zeros((rows, cols)));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Mat::ones((rows, cols)));
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "set {name}: {:?} vs {:?}",
                slot.dim(),
                value.dim()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Set the trainable flag on every tensor whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        e.trainable = trainable;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Write the container to any sink.
    pub fn write_to<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> Result<()> {
        let header = Header {
            meta: meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|(name, e)| TensorHeader {
                    name: name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                    trainable: e.trainable,
                })
                .collect(),
        };
        let mut meta_json = serde_json::to_value(&header)?;
        meta_json["seed"] = serde_json::json!(self.seed);
        let header_bytes = serde_json::to_vec(&meta_json)?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        let mut buf = Vec::with_capacity(self.n_scalars() * 8);
        for e in self.entries.values() {
            for v in e.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, serde_json::Value)> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(io)?;
        let version = u32::from_le_bytes(u32b);
        if version != CONTAINER_VERSION {
            return Err(Error::SchemaVersion {
                expected: CONTAINER_VERSION,
                found: version,
            });
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(io)?;
        let hlen = u64::from_le_bytes(u64b) as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes).map_err(io)?;
        let raw: serde_json::Value = serde_json::from_slice(&hbytes)?;
        let seed = raw["seed"]
            .as_u64()
            .ok_or_else(|| Error::Container("missing seed".into()))?;
        let header: Header = serde_json::from_value(raw)?;
        let mut store = ParamStore::new(seed);
        let mut f64b = [0u8; 8];
        for t in &header.tensors {
            let [rows, cols] = t.shape;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut f64b)
                    .map_err(|_| Error::Container(format!("truncated data in '{}'", t.name)))?;
                data.push(f64::from_le_bytes(f64b));
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Container(e.to_string()))?;
            store.entries.insert(
                t.name.clone(),
                Entry {
                    value,
                    trainable: t.trainable,
                },
            );
        }
        Ok((store, header.meta))
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f), meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: [usize; 2],
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}
