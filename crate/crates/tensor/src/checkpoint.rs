//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "AFWCKPT\0"
//! version    u32      currently 1
//! config     u32 length + UTF-8 bytes (JSON echo of the producing config)
//! count      u32
//! entry*     u32 name length, name bytes,
//!            u8 dtype (0 = f32, 1 = f64), u8 requires_grad,
//!            u32 rank, u64 × rank extents,
//!            raw little-endian values
//! ```
//!
//! Values round-trip bit-exactly. Loading into a different element type
//! than the one stored is rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"AFWCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    raw: Vec<u8>,
}

impl Entry {
    fn from_tensor<T: Real>(name: String, t: &Tensor<T>) -> Self {
        let mut raw = Vec::with_capacity(t.numel() * T::DTYPE.size_in_bytes());
        for &v in t.data() {
            v.write_le(&mut raw);
        }
        Entry { name, dtype: T::DTYPE, shape: t.shape().to_vec(), requires_grad: t.requires_grad(), raw }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(TensorError::Format(format!(
                "entry {:?} stored as {} but requested {}",
                self.name,
                self.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let data = self.raw.chunks_exact(T::DTYPE.size_in_bytes()).map(T::read_le).collect();
        Ok(Tensor::new(&self.shape, data)?.with_requires_grad(self.requires_grad))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint { version: VERSION, config: config.into(), entries: Vec::new() }
    }

    /// Appends every tensor of `store`, prefixing names with `prefix`.
    pub fn append<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for (name, t) in store.iter() {
            let full = format!("{prefix}{name}");
            if self.entries.iter().any(|e| e.name == full) {
                return Err(TensorError::Format(format!("duplicate entry {full:?}")));
            }
            self.entries.push(Entry::from_tensor(full, t));
        }
        Ok(())
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, config: impl Into<String>) -> Result<Self> {
        let mut ck = Self::new(config);
        ck.append("", store)?;
        Ok(ck)
    }

    /// Rebuilds a store from the entries under `prefix` (stripped).
    pub fn store_with_prefix<T: Real>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let Some(rest) = e.name.strip_prefix(prefix) {
                store.add(rest, e.to_tensor()?)?;
            }
        }
        Ok(store)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        write_bytes(&mut w, self.config.as_bytes())?;
        w.write_all(&u32_len(self.entries.len())?.to_le_bytes())?;
        for e in &self.entries {
            write_bytes(&mut w, e.name.as_bytes())?;
            w.write_all(&[e.dtype.tag(), e.requires_grad as u8])?;
            w.write_all(&u32_len(e.shape.len())?.to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&e.raw)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let config = String::from_utf8(read_bytes(&mut r)?).map_err(|_| TensorError::Format("config is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?).map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?;
            let mut tags = [0u8; 2];
            r.read_exact(&mut tags)?;
            let dtype = DType::from_tag(tags[0]).ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", tags[0])))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            if rank == 0 || shape.contains(&0) {
                return Err(TensorError::Format(format!("entry {name:?} has invalid shape {shape:?}")));
            }
            let mut raw = vec![0u8; numel(&shape) * dtype.size_in_bytes()];
            r.read_exact(&mut raw)?;
            entries.push(Entry { name, dtype, shape, requires_grad: tags[1] != 0, raw });
        }
        Ok(Checkpoint { version, config, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Format("length exceeds u32".into()))
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&u32_len(b.len())?.to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}
