//! Versioned container of named little-endian tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"DFCK"
//! u32    version
//! u64    training step
//! u32    metadata entries, each: u32 len + key bytes, u32 len + value bytes
//! u32    tensors, each:
//!          u32 len + name bytes (UTF-8)
//!          u8  dtype (0 = f32, 1 = f64)
//!          u8  rank, then rank x u32 dims
//!          raw element data
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{FusionConfig, FusionNets, Params, Scalar};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DFCK";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_slice<T: Scalar>(name: String, data: &[T], shape: Vec<usize>) -> Self {
        let mut bytes = Vec::with_capacity(data.len() * T::BYTES);
        data.iter().for_each(|v| v.to_le(&mut bytes));
        Self {
            name,
            dtype: T::DTYPE,
            shape,
            bytes,
        }
    }

    pub fn to_vec<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has dtype {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self.bytes.chunks_exact(T::BYTES).map(T::from_le).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub step: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn write_tensors(c: &Container, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(c.step)?;
    w.write_u32::<LittleEndian>(c.meta.len() as u32)?;
    for (k, v) in &c.meta {
        put_str(&mut w, k)?;
        put_str(&mut w, v)?;
    }
    w.write_u32::<LittleEndian>(c.tensors.len() as u32)?;
    for t in &c.tensors {
        put_str(&mut w, &t.name)?;
        w.write_u8(t.dtype)?;
        w.write_u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_all(&t.bytes)?;
    }
    w.flush()
}

pub fn read_tensors(mut r: impl Read) -> Result<Container> {
    let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or corrupt file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let step = r.read_u64::<LittleEndian>().map_err(bad)?;
    let n_meta = r.read_u32::<LittleEndian>().map_err(bad)?;
    let mut meta = Vec::new();
    for _ in 0..n_meta {
        meta.push((get_str(&mut r).map_err(bad)?, get_str(&mut r).map_err(bad)?));
    }
    let n = r.read_u32::<LittleEndian>().map_err(bad)?;
    let mut tensors = Vec::new();
    for _ in 0..n {
        let name = get_str(&mut r).map_err(bad)?;
        let dtype = r.read_u8().map_err(bad)?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {d}"))),
        };
        let rank = r.read_u8().map_err(bad)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(bad)? as usize);
        }
        let mut bytes = vec![0u8; shape.iter().product::<usize>() * width];
        r.read_exact(&mut bytes).map_err(bad)?;
        tensors.push(NamedTensor {
            name,
            dtype,
            shape,
            bytes,
        });
    }
    Ok(Container { step, meta, tensors })
}

pub fn read_container(path: &Path) -> Result<Container> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(f)).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Writes next to `path` and renames into place.
pub fn write_container(c: &Container, path: &Path) -> Result<()> {
    write_atomic(path, |w| write_tensors(c, w))
}

/// Copies tensors from `c` into `target`, in `target`'s visiting order.
pub fn assign_from_container<T: Scalar, P: Params<T> + ?Sized>(target: &mut P, c: &Container) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> = c.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut err = None;
    let mut used = 0;
    target.visit_mut("", &mut |name, data, shape| {
        if err.is_some() {
            return;
        }
        let Some(t) = by_name.get(name.as_str()) else {
            err = Some(Error::Checkpoint(format!("tensor `{name}` missing from file")));
            return;
        };
        if t.shape != shape {
            err = Some(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, architecture expects {:?}",
                t.shape, shape
            )));
            return;
        }
        match t.to_vec::<T>() {
            Ok(v) => {
                data.copy_from_slice(&v);
                used += 1;
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != c.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {} tensors, architecture has {used}",
            c.tensors.len()
        )));
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(nets: &FusionNets<T>, step: u64, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    nets.visit("", &mut |name, data, shape| tensors.push(NamedTensor::from_slice(name, data, shape)));
    let cfg = nets.config;
    let meta = vec![
        ("channels".to_string(), cfg.channels.to_string()),
        ("width".to_string(), cfg.width.to_string()),
        ("use_masks".to_string(), cfg.use_masks.to_string()),
    ];
    write_container(&Container { step, meta, tensors }, path)
}

/// Loads parameters into existing networks, checking every tensor against
/// their architecture. Returns the stored training step.
pub fn load_checkpoint_into<T: Scalar>(nets: &mut FusionNets<T>, path: &Path) -> Result<u64> {
    let c = read_container(path)?;
    assign_from_container(nets, &c).map_err(|e| with_path(e, path))?;
    Ok(c.step)
}

/// Builds networks from the architecture recorded in the file and loads them.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(FusionNets<T>, u64)> {
    let c = read_container(path)?;
    let field = |key: &str| -> Result<&str> {
        c.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("{}: metadata `{key}` missing", path.display())))
    };
    let parse_err = |key: &str| Error::Checkpoint(format!("{}: metadata `{key}` is malformed", path.display()));
    let config = FusionConfig {
        channels: field("channels")?.parse().map_err(|_| parse_err("channels"))?,
        width: field("width")?.parse().map_err(|_| parse_err("width"))?,
        use_masks: field("use_masks")?.parse().map_err(|_| parse_err("use_masks"))?,
    };
    let mut nets = FusionNets::new(config, 0);
    assign_from_container(&mut nets, &c).map_err(|e| with_path(e, path))?;
    Ok((nets, c.step))
}
