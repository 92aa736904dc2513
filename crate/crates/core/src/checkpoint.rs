//! Versioned binary checkpoint container.
//!
//! Layout: magic "CMSACKPT", format version (u32 LE), entry count (u32),
//! then per entry: name length (u32), UTF-8 name, rank (u32), extents
//! (u32 each), dtype tag (u8), raw little-endian scalars. Model
//! parameters, Adam moments and u64 metadata (iteration, optimizer step,
//! config hash) are all entries; save/load round-trips are bitwise
//! identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamState, ParamStore};
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 8] = b"CMSACKPT";
pub const VERSION: u32 = 1;

const TAG_U64: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Completed optimizer iterations.
    pub iteration: u64,
    /// Adam step counter (equals iteration unless resumed differently).
    pub adam_step: u64,
    /// Hash of the config the run was started with.
    pub config_hash: u64,
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes()); // count patched later
        Writer { buf, count: 0 }
    }

    fn entry_header(&mut self, name: &str, extents: &[usize], tag: u8) {
        self.buf
            .extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf
            .extend_from_slice(&(extents.len() as u32).to_le_bytes());
        for &e in extents {
            self.buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        self.buf.push(tag);
        self.count += 1;
    }

    fn scalar_entry<T: Scalar>(&mut self, name: &str, extents: &[usize], data: &[T]) {
        self.entry_header(name, extents, T::DTYPE.tag());
        for &v in data {
            v.write_le(&mut self.buf);
        }
    }

    fn u64_entry(&mut self, name: &str, value: u64) {
        self.entry_header(name, &[], TAG_U64);
        self.buf.extend_from_slice(&value.to_le_bytes());
    }

    fn finish(mut self) -> Vec<u8> {
        let count = self.count.to_le_bytes();
        self.buf[12..16].copy_from_slice(&count);
        self.buf
    }
}

/// Serialize parameters, optimizer state and metadata.
pub fn to_bytes<T: Scalar>(
    store: &ParamStore<T>,
    adam: &AdamState<T>,
    meta: &CheckpointMeta,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64_entry("meta.iteration", meta.iteration);
    w.u64_entry("meta.adam_step", meta.adam_step);
    w.u64_entry("meta.config_hash", meta.config_hash);
    for id in store.ids() {
        let t = store.get(id);
        let name = store.name(id);
        w.scalar_entry(name, t.shape(), t.data());
        let (m, v) = adam.moments(id);
        w.scalar_entry(&format!("{name}.adam_m"), t.shape(), m);
        w.scalar_entry(&format!("{name}.adam_v"), t.shape(), v);
    }
    w.finish()
}

pub fn save<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    adam: &AdamState<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    std::fs::write(path, to_bytes(store, adam, meta))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

enum Payload<T> {
    Scalars(Vec<usize>, Vec<T>),
    U64(u64),
}

fn read_entries<T: Scalar>(data: &[u8]) -> Result<Vec<(String, Payload<T>)>> {
    if data.len() < 16 || &data[..8] != MAGIC {
        return Err(Error::Checkpoint("missing CMSACKPT magic".into()));
    }
    let mut r = Reader { data, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 entry name".into()))?;
        let rank = r.u32()? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u32()? as usize);
        }
        let tag = r.take(1)?[0];
        let numel: usize = extents.iter().product();
        let payload = if tag == TAG_U64 {
            if rank != 0 {
                return Err(Error::Checkpoint(format!(
                    "entry '{name}': u64 entries must be rank 0"
                )));
            }
            Payload::U64(r.u64()?)
        } else {
            let dtype = Dtype::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("entry '{name}': bad dtype tag {tag}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "entry '{name}': dtype {dtype:?} does not match the model scalar type"
                )));
            }
            let bytes = r.take(numel * dtype.size_bytes())?;
            let vals = bytes
                .chunks_exact(dtype.size_bytes())
                .map(T::read_le)
                .collect();
            Payload::Scalars(extents, vals)
        };
        out.push((name, payload));
    }
    if r.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after entries".into()));
    }
    Ok(out)
}

/// Load a checkpoint into an already-initialized parameter store and Adam
/// state (shapes and names must match exactly).
pub fn load<T: Scalar>(
    path: &Path,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
) -> Result<CheckpointMeta> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&data, store, adam)
}

pub fn from_bytes<T: Scalar>(
    data: &[u8],
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
) -> Result<CheckpointMeta> {
    let entries = read_entries::<T>(data)?;
    let mut meta = CheckpointMeta {
        iteration: 0,
        adam_step: 0,
        config_hash: 0,
    };
    let mut seen_params = 0usize;
    let mut moments: Vec<(crate::optim::ParamId, Option<Vec<T>>, Option<Vec<T>>)> = store
        .ids()
        .map(|id| (id, None, None))
        .collect();
    for (name, payload) in entries {
        match (name.as_str(), payload) {
            ("meta.iteration", Payload::U64(v)) => meta.iteration = v,
            ("meta.adam_step", Payload::U64(v)) => meta.adam_step = v,
            ("meta.config_hash", Payload::U64(v)) => meta.config_hash = v,
            (_, Payload::U64(_)) => {
                return Err(Error::Checkpoint(format!("unexpected u64 entry '{name}'")))
            }
            (_, Payload::Scalars(extents, vals)) => {
                let (base, kind) = if let Some(b) = name.strip_suffix(".adam_m") {
                    (b, 1)
                } else if let Some(b) = name.strip_suffix(".adam_v") {
                    (b, 2)
                } else {
                    (name.as_str(), 0)
                };
                let id = store.id_by_name(base).ok_or_else(|| {
                    Error::Checkpoint(format!("entry '{name}' has no matching parameter"))
                })?;
                if store.get(id).shape() != extents.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "entry '{name}': shape {:?} != expected {:?}",
                        extents,
                        store.get(id).shape()
                    )));
                }
                match kind {
                    0 => {
                        *store.get_mut(id) =
                            crate::tensor::Tensor::new(extents, vals).map_err(|e| {
                                Error::Checkpoint(format!("entry '{name}': {e}"))
                            })?;
                        seen_params += 1;
                    }
                    1 => moments[id.index()].1 = Some(vals),
                    _ => moments[id.index()].2 = Some(vals),
                }
            }
        }
    }
    if seen_params != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen_params} parameters, model expects {}",
            store.len()
        )));
    }
    for (id, m, v) in moments {
        let m = m.ok_or_else(|| {
            Error::Checkpoint(format!("missing adam_m for '{}'", store.name(id)))
        })?;
        let v = v.ok_or_else(|| {
            Error::Checkpoint(format!("missing adam_v for '{}'", store.name(id)))
        })?;
        adam.set_moments(id, m, v)?;
    }
    adam.set_step(meta.adam_step);
    Ok(meta)
}
