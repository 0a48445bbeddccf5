//! Named, shape-checked parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "MCTC" | version u32 | config_len u32 | config JSON (UTF-8)
//! | count u32 | count × (name_len u32 | name | ndim u32 | ndim × u32 | f64 data)
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a tensor inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Glorot,
    /// Glorot-uniform with the limit multiplied by the gain.
    ScaledGlorot(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    /// Allocates and initialises every spec in order.
    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = ParameterStore::default();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Glorot | Init::ScaledGlorot(_) => {
                    let gain = if let Init::ScaledGlorot(g) = spec.init { g } else { 1.0 };
                    let (fan_in, fan_out) = match spec.shape.as_slice() {
                        [r, c] => (*r, *c),
                        [n] => (*n, *n),
                        _ => (numel, numel),
                    };
                    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel).map(|_| rng.random_range(-limit..limit)).collect()
                }
            };
            let t = Tensor::new(&spec.shape, data).expect("spec shape");
            store.push(spec.name.clone(), t);
        }
        store
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id_of(name).map(|id| &mut self.tensors[id.0])
    }

    /// Total number of scalars allocated.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn assign(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .id_of(&name)
                .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::shape("assign", self.tensors[id.0].shape(), t.shape()));
            }
            self.tensors[id.0] = t;
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, path: &Path, config_json: &str) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_json.as_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // write-then-rename so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Raw checkpoint contents: the config JSON and the named tensors in file order.
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let clen = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let config = String::from_utf8(cur.take(clen).ok_or_else(|| bad("truncated config"))?.to_vec())
        .map_err(|_| bad("config is not UTF-8"))?;
    let count = cur.u32().ok_or_else(|| bad("truncated tensor count"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = cur.u32().ok_or_else(|| bad("truncated tensor"))? as usize;
        let name = String::from_utf8(cur.take(nlen).ok_or_else(|| bad("truncated name"))?.to_vec())
            .map_err(|_| bad("name is not UTF-8"))?;
        let ndim = cur.u32().ok_or_else(|| bad("truncated shape"))? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape"))?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8).ok_or_else(|| bad("truncated data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((config, out))
}
