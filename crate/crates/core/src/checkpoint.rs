//! Versioned parameter container.
//!
//! Layout (little-endian): magic `RSRCCKPT`, `u32` version, `u32` metadata
//! count with `(key, value)` strings, `u32` parameter count, then per
//! parameter: name, `u32` rank, `u64` dims, `u8` trainable flag, and the
//! values prefixed by their byte width (4 or 8). The checkpoint id is a
//! digest of names, shapes and values only, so neither metadata nor the
//! trainable flags change it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{digest_hex, write_atomic, Decoder, Encoder};
use crate::param::ParamStore;
use crate::{Error, Real, Result, Tensor};

const MAGIC: &[u8; 8] = b"RSRCCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub values: Vec<Real>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub id: String,
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<StoredParam>,
}

fn encode_params(e: &mut Encoder, store: &ParamStore) {
    e.u32(store.len() as u32);
    for p in store.params() {
        e.str(&p.name);
        e.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            e.u64(d as u64);
        }
        e.u8(p.trainable as u8);
        e.reals(p.value.data());
    }
}

/// Id of the weights currently held by `store`.
pub fn checkpoint_id(store: &ParamStore) -> String {
    let mut e = Encoder::default();
    for p in store.params() {
        e.str(&p.name);
        e.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            e.u64(d as u64);
        }
        e.reals(p.value.data());
    }
    digest_hex(&e.finish())
}

pub fn encode(store: &ParamStore, metadata: &BTreeMap<String, String>) -> (Vec<u8>, String) {
    let mut e = Encoder::new(MAGIC, VERSION);
    e.u32(metadata.len() as u32);
    for (k, v) in metadata {
        e.str(k);
        e.str(v);
    }
    encode_params(&mut e, store);
    (e.finish(), checkpoint_id(store))
}

/// Writes `store` atomically and returns its checkpoint id.
pub fn save(path: &Path, store: &ParamStore, metadata: &BTreeMap<String, String>) -> Result<String> {
    let (bytes, id) = encode(store, metadata);
    write_atomic(path, &bytes)?;
    Ok(id)
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let (mut d, _) = Decoder::new(bytes, path, MAGIC, VERSION)?;
    let n_meta = d.u32()?;
    let mut metadata = BTreeMap::new();
    for _ in 0..n_meta {
        let k = d.str()?;
        let v = d.str()?;
        metadata.insert(k, v);
    }
    let n = d.u32()?;
    let mut params = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = d.str()?;
        let rank = d.u32()? as usize;
        let shape = (0..rank)
            .map(|_| d.u64().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let trainable = d.u8()? != 0;
        let values = d.reals()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(d.err(&format!("parameter {name}: shape/value count mismatch")));
        }
        params.push(StoredParam {
            name,
            shape,
            trainable,
            values,
        });
    }
    if !d.at_end() {
        return Err(d.err("trailing bytes"));
    }
    // The id is recomputed from the loaded weights, so a file written at
    // the other precision gets the id of the values actually in use.
    let mut store = ParamStore::new();
    for p in &params {
        store.add(
            p.name.clone(),
            Tensor::new(p.shape.clone(), p.values.clone())?,
            p.trainable,
        );
    }
    let id = checkpoint_id(&store);
    Ok(Checkpoint {
        id,
        metadata,
        params,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

impl Checkpoint {
    /// Copies stored values into a store with the same parameter names and
    /// shapes. Trainable flags in `store` are kept.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .id_of(&p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {}", p.name)))?;
            let target = store.get_mut(id);
            if target.value.shape() != p.shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    p.shape,
                    target.value.shape()
                )));
            }
            target.value.data_mut().copy_from_slice(&p.values);
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}
