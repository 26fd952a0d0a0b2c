//! Single-file checkpoint container for trained parameters.
//!
//! Everything a later process needs to reproduce inference travels in
//! one versioned binary file: the run configuration (embedded as
//! TOML), the completed-epoch counter, every learnable tensor, and the
//! optimizer's squared-gradient accumulators. Writes are
//! byte-deterministic — tensors serialize in name order and the TOML
//! comes from the same serializer every time — so identical state
//! yields identical files.
//!
//! # Binary layout (version 1)
//!
//! Integers are little-endian; tensor data is IEEE-754 binary64.
//!
//! ```text
//! magic             8 bytes  "PMVSCKPT"
//! version           u32      currently 1
//! epoch             u32      completed training epochs
//! config length     u64      bytes of TOML that follow
//! config            ...      UTF-8 TOML, the full run configuration
//! parameter count   u64      learnable tensor records, name-sorted
//! tensor record     × count
//! optimizer count   u64      accumulator records, name-sorted
//! tensor record     × count
//! ```
//!
//! Each tensor record is:
//!
//! ```text
//! name length       u64
//! name              ...      UTF-8
//! rank              u64
//! dims              u64 × rank
//! data              f64 × product(dims), row-major
//! ```
//!
//! A reader must consume the file exactly: unknown magic, an
//! unsupported version, truncation, duplicate tensor names, or
//! trailing bytes all reject the file.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::ParamStore;

const MAGIC: &[u8; 8] = b"PMVSCKPT";
const VERSION: u32 = 1;

/// Caps on record fields so corrupt length prefixes fail fast instead
/// of driving huge allocations.
const MAX_NAME_BYTES: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

/// Trained state frozen to disk: parameters, optimizer accumulators,
/// progress, and the exact configuration that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Configuration the run was trained under; inference refuses to
    /// mix a checkpoint with a differently-shaped model.
    pub config: Config,
    /// Completed training epochs across both phases.
    pub epoch: usize,
    /// All learnable tensors.
    pub params: ParamStore,
    /// Squared-gradient accumulators keyed like the parameters.
    pub rms_acc: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Whether `other` describes the same configuration this
    /// checkpoint was trained under (compared by digest).
    pub fn matches_config(&self, other: &Config) -> bool {
        self.config.digest() == other.digest()
    }

    /// Serialize to the documented byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let toml = self.config.to_toml_string();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        buf.extend_from_slice(&(toml.len() as u64).to_le_bytes());
        buf.extend_from_slice(toml.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            write_tensor(&mut buf, name, tensor);
        }
        buf.extend_from_slice(&(self.rms_acc.len() as u64).to_le_bytes());
        for (name, tensor) in &self.rms_acc {
            write_tensor(&mut buf, name, tensor);
        }
        buf
    }

    /// Parse the documented byte layout, rejecting malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        std::io::Read::read_exact(&mut cur, &mut magic)
            .map_err(|_| Error::data("checkpoint shorter than its magic header"))?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let epoch = read_u32(&mut cur)? as usize;
        let toml_len = read_len(&mut cur, bytes.len() as u64, "config")?;
        let mut toml = vec![0u8; toml_len as usize];
        std::io::Read::read_exact(&mut cur, &mut toml)
            .map_err(|_| Error::data("checkpoint truncated inside its config"))?;
        let toml = String::from_utf8(toml)
            .map_err(|_| Error::data("checkpoint config is not UTF-8"))?;
        let config = Config::from_toml_str(&toml)?;

        let mut params = ParamStore::new();
        let param_count = read_u64(&mut cur)?;
        for _ in 0..param_count {
            let (name, tensor) = read_tensor(&mut cur)?;
            if params.get(&name).is_ok() {
                return Err(Error::data(format!("duplicate parameter tensor {name:?}")));
            }
            params.insert(&name, tensor);
        }

        let mut rms_acc = BTreeMap::new();
        let acc_count = read_u64(&mut cur)?;
        for _ in 0..acc_count {
            let (name, tensor) = read_tensor(&mut cur)?;
            if rms_acc.insert(name.clone(), tensor).is_some() {
                return Err(Error::data(format!("duplicate optimizer tensor {name:?}")));
            }
        }

        if cur.position() != bytes.len() as u64 {
            return Err(Error::data(format!(
                "{} trailing bytes after the checkpoint payload",
                bytes.len() as u64 - cur.position()
            )));
        }
        Ok(Self {
            config,
            epoch,
            params,
            rms_acc,
        })
    }

    /// Write the checkpoint to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Read a checkpoint back from `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, tensor: &ArrayD<f64>) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.ndim() as u64).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(cur: &mut Cursor<&[u8]>) -> Result<(String, ArrayD<f64>)> {
    let name_len = read_u64(cur)?;
    if name_len > MAX_NAME_BYTES {
        return Err(Error::data(format!(
            "tensor name length {name_len} exceeds the {MAX_NAME_BYTES}-byte cap"
        )));
    }
    let mut name = vec![0u8; name_len as usize];
    std::io::Read::read_exact(cur, &mut name)
        .map_err(|_| Error::data("checkpoint truncated inside a tensor name"))?;
    let name =
        String::from_utf8(name).map_err(|_| Error::data("tensor name is not UTF-8"))?;

    let rank = read_u64(cur)?;
    if rank > MAX_RANK {
        return Err(Error::data(format!(
            "tensor {name:?} claims rank {rank}, cap is {MAX_RANK}"
        )));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut elements: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(cur)?;
        elements = elements
            .checked_mul(d)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| {
                Error::data(format!("tensor {name:?} claims an implausible element count"))
            })?;
        dims.push(d as usize);
    }
    let mut data = Vec::with_capacity(elements as usize);
    for _ in 0..elements {
        data.push(read_f64(cur).map_err(|_| {
            Error::data(format!("checkpoint truncated inside tensor {name:?}"))
        })?);
    }
    let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::data(format!("tensor {name:?} shape error: {e}")))?;
    Ok((name, tensor))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    cur.read_u32::<LittleEndian>()
        .map_err(|_| Error::data("checkpoint truncated reading a u32 field"))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    cur.read_u64::<LittleEndian>()
        .map_err(|_| Error::data("checkpoint truncated reading a u64 field"))
}

fn read_f64(cur: &mut Cursor<&[u8]>) -> std::io::Result<f64> {
    cur.read_f64::<LittleEndian>()
}

/// Read a u64 length prefix that must fit inside the file.
fn read_len(cur: &mut Cursor<&[u8]>, file_len: u64, what: &str) -> Result<u64> {
    let n = read_u64(cur)?;
    if n > file_len {
        return Err(Error::data(format!(
            "checkpoint {what} length {n} exceeds the {file_len}-byte file"
        )));
    }
    Ok(n)
}
