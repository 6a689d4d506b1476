//! Binary checkpoints.
//!
//! Layout (little endian): magic, u32 version, u64-prefixed JSON header,
//! u64 parameter count, then per parameter: u32 name length, name bytes,
//! u8 trainable flag, u32 rank, u64 dims, f64 values. Optimizer slots follow
//! as u64 count, then per slot: name, u64 step count, f64 m, f64 v.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamSlot, TrainConfig};

pub const MAGIC: &[u8; 8] = b"SEGMATTE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar = f64> {
    pub header: Header,
    pub model: Model<T>,
    pub adam: Option<Adam<T>>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_values<T: Scalar>(w: &mut impl Write, vals: &[T]) -> Result<()> {
    for v in vals {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn put_name(w: &mut impl Write, name: &str) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    Ok(w.write_all(name.as_bytes())?)
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    const LIMIT: usize = 1 << 32;
    if n > LIMIT {
        return Err(Error::Format(format!("implausible length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_name(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    String::from_utf8(get_bytes(r, n)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
}

fn get_values<T: Scalar>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    (0..n)
        .map(|_| {
            let v = f64::from_le_bytes(get(r)?);
            T::from_f64(v).ok_or_else(|| Error::Format("value not representable".into()))
        })
        .collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        let header = serde_json::to_vec(&self.header)?;
        put_u64(w, header.len() as u64)?;
        w.write_all(&header)?;
        let store = &self.model.store;
        put_u64(w, store.len() as u64)?;
        for (name, p) in store.iter() {
            put_name(w, name)?;
            w.write_all(&[p.group.trainable() as u8])?;
            put_u32(w, p.tensor.rank() as u32)?;
            for &d in p.tensor.shape() {
                put_u64(w, d as u64)?;
            }
            put_values(w, p.tensor.data())?;
        }
        let slots = self.adam.as_ref().map(|a| &a.slots);
        put_u64(w, slots.map_or(0, BTreeMap::len) as u64)?;
        for (name, s) in slots.into_iter().flatten() {
            put_name(w, name)?;
            put_u64(w, s.t)?;
            put_values(w, &s.m)?;
            put_values(w, &s.v)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        if &get::<8>(r)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = get_u64(r)? as usize;
        let header: Header = serde_json::from_slice(&get_bytes(r, n)?)?;
        let mut store = ParamStore::new();
        for _ in 0..get_u64(r)? {
            let name = get_name(r)?;
            let flag = get::<1>(r)?[0];
            let group = ParamGroup::of(&name)?;
            if flag > 1 || (flag == 1) != group.trainable() {
                return Err(Error::Format(format!("trainable flag {flag} disagrees with group of `{name}`")));
            }
            let rank = get_u32(r)? as usize;
            let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            store.insert(&name, Tensor::new(shape, get_values(r, len)?)?)?;
        }
        let nslots = get_u64(r)?;
        let adam = if nslots == 0 {
            None
        } else {
            let lr = header.train.as_ref().map_or(TrainConfig::default().lr, |t| t.lr);
            let mut adam = Adam::for_trainable(&store, lr)?;
            for _ in 0..nslots {
                let name = get_name(r)?;
                let len = store.get(&name)?.len();
                let t = get_u64(r)?;
                let slot = AdamSlot { m: get_values(r, len)?, v: get_values(r, len)?, t };
                if adam.slots.insert(name.clone(), slot).is_none() {
                    return Err(Error::Format(format!("optimizer slot for non-trainable `{name}`")));
                }
            }
            if adam.slots.len() as u64 != nslots {
                return Err(Error::Format("optimizer slots do not cover the trainable set".into()));
            }
            Some(adam)
        };
        let model = Model::from_parts(header.model.clone(), store)?;
        Ok(Self { header, model, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(std::fs::write(path, buf)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cur = bytes.as_slice();
        let ck = Self::read(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }
}
