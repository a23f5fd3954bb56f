//! Checkpoint container: a little-endian file holding named f32 arrays.
//!
//! Layout: 8-byte magic `PASSRCKP`, format version (u32), entry count
//! (u64), then per entry — name length (u32), UTF-8 name bytes, rank
//! (u32), extents (u64 each), raw f32 payload. Round-trips are bit-exact;
//! entry order is preserved.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::DataError;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PASSRCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    /// Scalar convenience for counters and metrics riding along with the
    /// arrays. Exact for integers below 2^24.
    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, Tensor::scalar(value as f32));
    }

    pub fn get_scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|t| t.data().first().map(|&v| v as f64))
    }

    /// Copies every parameter of a store under a name prefix.
    pub fn insert_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, tensor) in store.iter() {
            self.insert(&format!("{prefix}{name}"), tensor.cast::<f32>());
        }
    }

    /// Writes prefixed entries back into a store; every store parameter
    /// must be present with a matching shape.
    pub fn restore_store<T: Scalar>(
        &self,
        prefix: &str,
        store: &mut ParamStore<T>,
    ) -> Result<(), DataError> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let entry = self
                .get(&key)
                .ok_or_else(|| DataError::Invalid(format!("checkpoint missing entry {key}")))?;
            store
                .set(&name, entry.cast::<T>())
                .map_err(|e| DataError::Invalid(format!("checkpoint entry {key}: {e}")))?;
        }
        Ok(())
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.entries.len() as u64).to_le_bytes());
    for (name, tensor) in &ckpt.entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&buf).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, DataError> {
    let fail = |msg: &str| DataError::Format { path: path.display().to_string(), msg: msg.into() };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        if pos + n > bytes.len() {
            return Err(fail("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };

    if take(8)? != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut ckpt = Checkpoint::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| fail("entry name is not UTF-8"))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| fail(&e.to_string()))?;
        if ckpt.entries.insert(name.clone(), tensor).is_some() {
            return Err(fail(&format!("duplicate entry {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok(ckpt)
}
