//! Columnar storage of ⟨user representation, target-item embedding⟩ pairs.

use std::path::Path;

use rayon::prelude::*;

use crate::binio::{digest_hex, write_atomic, Decoder, Encoder};
use crate::data::{Origin, Split, TrainExample};
use crate::encoder::Backbone;
use crate::tensor::normalized;
use crate::{Error, ItemId, Real, Result};

const MAGIC: &[u8; 8] = b"RSRCBANK";
const VERSION: u32 = 1;
const ENCODE_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryMeta {
    pub target: ItemId,
    /// Timestamp of the target interaction.
    pub timestamp: i64,
    pub origin: Origin,
    /// Untruncated prefix length.
    pub prefix_len: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub dim: usize,
    /// Checkpoint id of the backbone that produced the keys and values.
    pub checkpoint_id: String,
    keys: Vec<Real>,
    unit_keys: Vec<Real>,
    values: Vec<Real>,
    meta: Vec<EntryMeta>,
}

/// Every `⟨prefix, next item⟩` pair of the training sequences.
pub fn build_reference_set(split: &Split, max_len: usize) -> Vec<TrainExample> {
    split.train_examples(max_len)
}

/// Encodes each reference with the backbone in evaluation mode.
pub fn encode_bank(refs: &[TrainExample], backbone: &Backbone, checkpoint_id: &str) -> Result<MemoryBank> {
    let d = backbone.config.hidden;
    let chunks: Vec<Vec<Real>> = refs
        .par_chunks(ENCODE_BATCH)
        .map(|chunk| {
            let prefixes: Vec<&[ItemId]> = chunk.iter().map(|r| r.prefix.as_slice()).collect();
            Ok(backbone.represent(&prefixes)?.into_data())
        })
        .collect::<Result<_>>()?;
    let mut bank = MemoryBank::empty(d, checkpoint_id);
    let table = backbone.item_embeddings();
    for (r, key) in refs.iter().zip(chunks.concat().chunks(d)) {
        bank.push(
            key,
            table.row(r.target as usize),
            EntryMeta {
                target: r.target,
                timestamp: r.timestamp,
                origin: r.origin(),
                prefix_len: r.step,
            },
        );
    }
    Ok(bank)
}

impl MemoryBank {
    pub fn empty(dim: usize, checkpoint_id: &str) -> Self {
        Self {
            dim,
            checkpoint_id: checkpoint_id.to_string(),
            keys: Vec::new(),
            unit_keys: Vec::new(),
            values: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn push(&mut self, key: &[Real], value: &[Real], meta: EntryMeta) {
        assert_eq!(key.len(), self.dim, "key width");
        assert_eq!(value.len(), self.dim, "value width");
        self.keys.extend_from_slice(key);
        self.unit_keys.extend(normalized(key));
        self.values.extend_from_slice(value);
        self.meta.push(meta);
    }

    pub fn key(&self, id: usize) -> &[Real] {
        &self.keys[id * self.dim..(id + 1) * self.dim]
    }

    /// L2-normalized key; a zero key stays zero.
    pub fn unit_key(&self, id: usize) -> &[Real] {
        &self.unit_keys[id * self.dim..(id + 1) * self.dim]
    }

    pub fn unit_keys(&self) -> &[Real] {
        &self.unit_keys
    }

    pub fn value(&self, id: usize) -> &[Real] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    pub fn meta(&self, id: usize) -> &EntryMeta {
        &self.meta[id]
    }

    pub fn metas(&self) -> &[EntryMeta] {
        &self.meta
    }

    /// The entries `ids`, in that order, as a new bank.
    pub fn subset(&self, ids: &[usize]) -> MemoryBank {
        let mut out = MemoryBank::empty(self.dim, &self.checkpoint_id);
        for &i in ids {
            out.push(self.key(i), self.value(i), self.meta[i]);
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.str(&self.checkpoint_id);
        e.u32(self.dim as u32);
        e.u64(self.len() as u64);
        e.reals(&self.keys);
        e.reals(&self.values);
        let col = |f: fn(&EntryMeta) -> u32| self.meta.iter().map(f).collect::<Vec<u32>>();
        e.u32s(&col(|m| m.target));
        e.i64s(&self.meta.iter().map(|m| m.timestamp).collect::<Vec<_>>());
        e.u32s(&col(|m| m.origin.user));
        e.u32s(&col(|m| m.origin.step));
        e.u32s(&col(|m| m.prefix_len));
        e.finish()
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let (mut d, _) = Decoder::new(bytes, path, MAGIC, VERSION)?;
        let checkpoint_id = d.str()?;
        let dim = d.u32()? as usize;
        let n = d.u64()? as usize;
        let keys = d.reals()?;
        let values = d.reals()?;
        let targets = d.u32s()?;
        let timestamps = d.i64s()?;
        let users = d.u32s()?;
        let steps = d.u32s()?;
        let lens = d.u32s()?;
        if keys.len() != n * dim || values.len() != n * dim {
            return Err(d.err("key/value table size"));
        }
        if [targets.len(), timestamps.len(), users.len(), steps.len(), lens.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(d.err("metadata column length"));
        }
        if !d.at_end() {
            return Err(d.err("trailing bytes"));
        }
        let mut bank = MemoryBank::empty(dim, &checkpoint_id);
        for i in 0..n {
            bank.push(
                &keys[i * dim..(i + 1) * dim],
                &values[i * dim..(i + 1) * dim],
                EntryMeta {
                    target: targets[i],
                    timestamp: timestamps[i],
                    origin: Origin {
                        user: users[i],
                        step: steps[i],
                    },
                    prefix_len: lens[i],
                },
            );
        }
        Ok(bank)
    }

    /// Content digest, used as the bank's lineage id.
    pub fn id(&self) -> String {
        digest_hex(&self.encode())
    }

    /// Writes the bank atomically and returns its id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        write_atomic(path, &bytes)?;
        Ok(digest_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let bank = Self::decode(&bytes, &path.display().to_string())?;
        Ok((bank, digest_hex(&bytes)))
    }

    pub(crate) fn check_checkpoint(&self, id: &str) -> Result<()> {
        if self.checkpoint_id != id {
            return Err(Error::LineageMismatch(format!(
                "memory bank was encoded with checkpoint {}, expected {id}",
                self.checkpoint_id
            )));
        }
        Ok(())
    }
}
