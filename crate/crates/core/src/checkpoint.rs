//! Binary parameter container: magic, named typed tensors, trailing CRC32.
//!
//! Layout, all integers little-endian:
//! `"AVRN1"`, then per entry `u32 name_len, name, u8 dtype, u32 rank, u64 dims[rank], data`,
//! then `u32 crc` over every preceding byte.

use std::path::Path;

use vrnet_tensor::{ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 5] = b"AVRN1";
pub const CONFIG_ENTRY: &str = "meta.config";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            _ => Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    fn dtype(&self) -> DType {
        match self.data {
            EntryData::F64(_) => DType::F64,
            EntryData::F32(_) => DType::F32,
            EntryData::U8(_) => DType::U8,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            EntryData::F64(v) => v.clone(),
            EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            EntryData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Every parameter in registration order, plus the config text when given.
    pub fn from_store(store: &ParamStore, config: Option<&str>) -> Self {
        let mut entries: Vec<Entry> = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                dims: p.value.dims().to_vec(),
                data: EntryData::F64(p.value.data().to_vec()),
            })
            .collect();
        if let Some(text) = config {
            entries.push(Entry {
                name: CONFIG_ENTRY.to_string(),
                dims: vec![text.len()],
                data: EntryData::U8(text.as_bytes().to_vec()),
            });
        }
        Self { entries }
    }

    pub fn config_text(&self) -> Option<Result<String>> {
        self.entries.iter().find(|e| e.name == CONFIG_ENTRY).map(|e| match &e.data {
            EntryData::U8(b) => String::from_utf8(b.clone()).map_err(|e| Error::Checkpoint(format!("config entry: {e}"))),
            _ => Err(Error::Checkpoint("config entry is not bytes".into())),
        })
    }

    /// Overwrites `store` values; any name or shape mismatch aborts with the full list.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        let params: Vec<&Entry> = self.entries.iter().filter(|e| e.name != CONFIG_ENTRY).collect();
        for e in &params {
            match store.id(&e.name) {
                None => problems.push(format!("unexpected parameter `{}`", e.name)),
                Some(id) if store.get(id).dims() != e.dims.as_slice() => problems.push(format!(
                    "`{}`: checkpoint {:?} vs model {:?}",
                    e.name,
                    e.dims,
                    store.get(id).dims()
                )),
                Some(_) => {}
            }
        }
        for (_, p) in store.iter() {
            if !params.iter().any(|e| e.name == p.name) {
                problems.push(format!("missing parameter `{}`", p.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("parameter mismatch: {}", problems.join("; "))));
        }
        for e in params {
            let id = store.id(&e.name).expect("checked above");
            store.get_mut(id).data_mut().copy_from_slice(&e.to_f64());
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype() as u8);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch (corrupt or truncated file)".into()));
        }
        if &body[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let mut entries = Vec::new();
        while r.pos < body.len() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?;
            let dtype = DType::from_code(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: dims overflow")))?;
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = match dtype {
                DType::F64 => EntryData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                DType::F32 => EntryData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::U8 => EntryData::U8(raw.to_vec()),
            };
            entries.push(Entry { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }

    /// Parameter tensors by name, excluding the config entry.
    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .filter(|e| e.name != CONFIG_ENTRY)
            .map(|e| Ok((e.name.clone(), Tensor::new(e.dims.clone(), e.to_f64())?)))
            .collect()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated entry at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
