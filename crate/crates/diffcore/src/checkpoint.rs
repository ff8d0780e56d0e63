//! Binary checkpoint format.
//!
//! ```text
//! "FDDP" | version: u8 | manifest_len: u32 LE | manifest (UTF-8 JSON)
//! then for every parameter in manifest order:
//!     value, m1, m2 as little-endian f32
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::optim::Adam;
use crate::params::{ParamEntry, ParameterStore, Role};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDDP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub trainable: bool,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub optimizer: Adam,
    pub step: u64,
    pub params: Vec<ParamMeta>,
    /// Caller-defined payload, e.g. the model configuration.
    pub extra: serde_json::Value,
}

fn write_f32s<W: Write, T: Scalar>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s<R: Read, T: Scalar>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data =
        buf.chunks_exact(4).map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    Tensor::new(shape, data)
}

pub fn write_checkpoint<W: Write, T: Scalar>(
    w: &mut W,
    store: &ParameterStore<T>,
    optimizer: &Adam,
    extra: serde_json::Value,
) -> Result<()> {
    let params: Vec<ParamMeta> = store
        .iter()
        .map(|(name, e)| ParamMeta {
            name: name.to_string(),
            shape: e.value.shape().to_vec(),
            role: e.role,
            trainable: e.trainable,
            step: e.step,
        })
        .collect();
    let manifest = Manifest {
        dtype: "f32".to_string(),
        optimizer: *optimizer,
        step: params.iter().map(|p| p.step).max().unwrap_or(0),
        params,
        extra,
    };
    let text = serde_json::to_vec(&manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(&text)?;
    for (_, e) in store.iter() {
        write_f32s(w, &e.value)?;
        write_f32s(w, &e.m1)?;
        write_f32s(w, &e.m2)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, T: Scalar>(r: &mut R) -> Result<(ParameterStore<T>, Manifest)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DiffError::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(DiffError::Format(format!("unsupported version {}", version[0])));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut text)?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let mut store = ParameterStore::new();
    for meta in &manifest.params {
        let value = read_f32s(r, &meta.shape)?;
        let m1 = read_f32s(r, &meta.shape)?;
        let m2 = read_f32s(r, &meta.shape)?;
        store.insert_entry(
            &meta.name,
            ParamEntry {
                grad: Tensor::zeros(&meta.shape),
                value,
                m1,
                m2,
                step: meta.step,
                role: meta.role,
                trainable: meta.trainable,
            },
        )?;
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_manifest() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a.kernel", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), Role::Weight).unwrap();
        store.insert("a.bn.moving_var", Tensor::full(&[3], 1.0), Role::Buffer).unwrap();
        store.get_mut("a.kernel").unwrap().m1 = Tensor::full(&[2, 2], 0.5);
        store.get_mut("a.kernel").unwrap().step = 7;
        let mut buf = Vec::new();
        let extra = serde_json::json!({"variant": "ujefnet"});
        write_checkpoint(&mut buf, &store, &Adam::new(5e-4), extra.clone()).unwrap();
        assert_eq!(&buf[..4], b"FDDP");
        let (back, manifest) = read_checkpoint::<_, f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(manifest.step, 7);
        assert_eq!(manifest.extra, extra);
        assert_eq!(manifest.optimizer.lr, 5e-4);
        assert_eq!(back.value("a.kernel").unwrap(), store.value("a.kernel").unwrap());
        assert_eq!(back.get("a.kernel").unwrap().m1, store.get("a.kernel").unwrap().m1);
        assert_eq!(back.get("a.bn.moving_var").unwrap().role, Role::Buffer);
    }

    #[test]
    fn rejects_foreign_magic() {
        let bytes = b"FDDS\x01\x00\x00\x00\x00".to_vec();
        assert!(matches!(read_checkpoint::<_, f32>(&mut bytes.as_slice()), Err(DiffError::Format(_))));
    }
}
