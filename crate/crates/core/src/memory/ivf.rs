//! Inverted-file index: k-means centroids plus one entry list per centroid.

use std::cmp::Ordering;
use std::path::Path;

use crate::binio::{digest_hex, write_atomic, Decoder, Encoder};
use crate::memory::bank::{EntryMeta, MemoryBank};
use crate::memory::kmeans::{nearest, spherical_kmeans};
use crate::rng::stream;
use crate::tensor::{dot, normalized};
use crate::{Error, Real, Result};

const MAGIC: &[u8; 8] = b"RSRCIVFX";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct IvfIndex {
    pub dim: usize,
    pub nprobe: usize,
    /// `k × dim` unit rows; empty for an exhaustive index.
    pub centroids: Vec<Real>,
    pub lists: Vec<Vec<u32>>,
    /// Set when the bank was too small for the requested `k`: one list holds
    /// every entry and every query scans it.
    pub exhaustive: bool,
    pub requested_k: usize,
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

/// One retrieved entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u32,
    pub cosine: Real,
}

/// Similarity evaluations spent on one query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryCost {
    pub centroid_dots: usize,
    pub entry_dots: usize,
}

impl QueryCost {
    /// Multiply-adds, at `dim` per similarity.
    pub fn flops(&self, dim: usize) -> usize {
        (self.centroid_dots + self.entry_dots) * dim
    }
}

/// Cosine descending, then lower id.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.cosine
        .partial_cmp(&a.cosine)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

/// Keeps the `k` best hits, sorted.
pub(crate) fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    hits
}

pub type Filter<'f> = &'f (dyn Fn(usize, &EntryMeta) -> bool + Sync);

impl IvfIndex {
    /// Spherical k-means over the bank's normalized keys with the `kmeans`
    /// stream of `seed`. A bank with fewer than `k` entries gets an
    /// exhaustive index.
    pub fn build(bank: &MemoryBank, k: usize, nprobe: usize, seed: u64) -> Result<Self> {
        if k == 0 || nprobe == 0 {
            return Err(Error::Config("cluster count and nprobe must be positive".into()));
        }
        let n = bank.len();
        if n < k {
            return Ok(Self {
                dim: bank.dim,
                nprobe,
                centroids: Vec::new(),
                lists: vec![(0..n as u32).collect()],
                exhaustive: true,
                requested_k: k,
                inertia: Vec::new(),
                iterations: 0,
            });
        }
        let km = spherical_kmeans(bank.unit_keys(), bank.dim, k, &mut stream(seed, "kmeans"));
        let mut lists = vec![Vec::new(); k];
        for (i, &c) in km.assignment.iter().enumerate() {
            lists[c as usize].push(i as u32);
        }
        Ok(Self {
            dim: bank.dim,
            nprobe,
            centroids: km.centroids,
            lists,
            exhaustive: false,
            requested_k: k,
            inertia: km.inertia,
            iterations: km.iterations,
        })
    }

    pub fn k(&self) -> usize {
        self.lists.len()
    }

    pub fn num_entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// The list a new unit key joins.
    pub fn route(&self, unit_key: &[Real]) -> usize {
        if self.exhaustive {
            0
        } else {
            nearest(&self.centroids, self.dim, unit_key).0
        }
    }

    /// Lists to scan for a normalized query, most similar first.
    fn probe(&self, q: &[Real], nprobe: usize, cost: &mut QueryCost) -> Vec<usize> {
        if self.exhaustive {
            return vec![0];
        }
        let mut sims: Vec<Hit> = self
            .centroids
            .chunks(self.dim)
            .enumerate()
            .map(|(c, row)| Hit {
                id: c as u32,
                cosine: dot(row, q),
            })
            .collect();
        cost.centroid_dots += sims.len();
        sims = top_k(sims, nprobe.min(self.k()));
        sims.into_iter().map(|h| h.id as usize).collect()
    }

    /// Top-`k` entries by cosine to `query` among the `nprobe` closest lists,
    /// skipping entries for which `filter` is false.
    pub fn search(
        &self,
        bank: &MemoryBank,
        query: &[Real],
        k: usize,
        nprobe: usize,
        filter: Option<Filter<'_>>,
    ) -> Result<(Vec<Hit>, QueryCost)> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim
            )));
        }
        let q = normalized(query);
        let mut cost = QueryCost::default();
        let mut hits = Vec::new();
        for list in self.probe(&q, nprobe, &mut cost) {
            for &id in &self.lists[list] {
                let i = id as usize;
                if filter.is_some_and(|f| !f(i, bank.meta(i))) {
                    continue;
                }
                cost.entry_dots += 1;
                hits.push(Hit {
                    id,
                    cosine: dot(&q, bank.unit_key(i)),
                });
            }
        }
        Ok((top_k(hits, k), cost))
    }

    /// The same centroids with lists restricted to `keep` (ascending old
    /// ids) and renumbered to positions in `keep`.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let mut new_id = vec![u32::MAX; self.num_entries()];
        for (n, &o) in keep.iter().enumerate() {
            new_id[o] = n as u32;
        }
        let lists = self
            .lists
            .iter()
            .map(|l| {
                l.iter()
                    .filter_map(|&o| (new_id[o as usize] != u32::MAX).then(|| new_id[o as usize]))
                    .collect()
            })
            .collect();
        Self {
            lists,
            ..self.clone()
        }
    }

    pub fn encode(&self, bank_id: &str) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.str(bank_id);
        e.u32(self.dim as u32);
        e.u32(self.nprobe as u32);
        e.u32(self.requested_k as u32);
        e.u8(self.exhaustive as u8);
        e.u32(self.iterations as u32);
        e.u32(self.inertia.len() as u32);
        for &x in &self.inertia {
            e.u64(x.to_bits());
        }
        e.reals(&self.centroids);
        e.u32(self.lists.len() as u32);
        for l in &self.lists {
            e.u32s(l);
        }
        e.finish()
    }

    /// Returns the index and the id of the bank it was built for.
    pub fn decode(bytes: &[u8], path: &str) -> Result<(Self, String)> {
        let (mut d, _) = Decoder::new(bytes, path, MAGIC, VERSION)?;
        let bank_id = d.str()?;
        let dim = d.u32()? as usize;
        let nprobe = d.u32()? as usize;
        let requested_k = d.u32()? as usize;
        let exhaustive = d.u8()? != 0;
        let iterations = d.u32()? as usize;
        let n_inertia = d.u32()?;
        let inertia = (0..n_inertia)
            .map(|_| d.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let centroids = d.reals()?;
        let n_lists = d.u32()?;
        let lists = (0..n_lists).map(|_| d.u32s()).collect::<Result<Vec<_>>>()?;
        if dim == 0 || centroids.len() % dim != 0 || (!exhaustive && centroids.len() / dim != lists.len()) {
            return Err(d.err("centroid table does not match list count"));
        }
        if !d.at_end() {
            return Err(d.err("trailing bytes"));
        }
        Ok((
            Self {
                dim,
                nprobe,
                centroids,
                lists,
                exhaustive,
                requested_k,
                inertia,
                iterations,
            },
            bank_id,
        ))
    }

    pub fn save(&self, path: &Path, bank_id: &str) -> Result<String> {
        let bytes = self.encode(bank_id);
        write_atomic(path, &bytes)?;
        Ok(digest_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes, &path.display().to_string())
    }
}
