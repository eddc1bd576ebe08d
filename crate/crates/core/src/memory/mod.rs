//! Explicit memory: the bank of encoded training pairs and its IVF index.
//!
//! Retrieval ranks entries by cosine similarity of normalized keys; callers
//! get back raw keys and values. Drift and partition filters derive
//! sub-memories that keep the original centroids, so keeping every entry
//! reproduces the full memory exactly.

pub mod bank;
pub mod ivf;
pub mod kmeans;

use std::collections::BTreeSet;

use crate::data::Origin;
use crate::tensor::{dot, normalized};
use crate::{Error, Real, Result};

pub use bank::{build_reference_set, encode_bank, EntryMeta, MemoryBank};
pub use ivf::{hit_order, Filter, Hit, IvfIndex, QueryCost};

pub const DEFAULT_CLUSTERS: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub bank: MemoryBank,
    pub index: IvfIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<Hit>,
    pub cost: QueryCost,
}

/// Prefix-length partition of Table-5 style ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Short,
    Medium,
    Long,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Short, Part::Medium, Part::Long];

    pub fn letter(self) -> char {
        match self {
            Part::Short => 'S',
            Part::Medium => 'M',
            Part::Long => 'L',
        }
    }

    /// `S` below `lo`, `M` in `lo..=hi`, `L` above `hi`.
    pub fn of(prefix_len: u32, lo: u32, hi: u32) -> Part {
        if prefix_len < lo {
            Part::Short
        } else if prefix_len <= hi {
            Part::Medium
        } else {
            Part::Long
        }
    }
}

impl Memory {
    pub fn build(bank: MemoryBank, k: usize, nprobe: usize, seed: u64) -> Result<Self> {
        let index = IvfIndex::build(&bank, k, nprobe, seed)?;
        Ok(Self { bank, index })
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    /// Top-`k` memories for `query` using the index's `nprobe`. The entry
    /// whose origin equals `exclude` and entries failing `filter` are
    /// skipped.
    pub fn retrieve_topk(
        &self,
        query: &[Real],
        k: usize,
        exclude: Option<Origin>,
        filter: Option<Filter<'_>>,
    ) -> Result<Retrieval> {
        self.retrieve_with_nprobe(query, k, self.index.nprobe, exclude, filter)
    }

    pub fn retrieve_with_nprobe(
        &self,
        query: &[Real],
        k: usize,
        nprobe: usize,
        exclude: Option<Origin>,
        filter: Option<Filter<'_>>,
    ) -> Result<Retrieval> {
        let keep = |i: usize, m: &EntryMeta| exclude != Some(m.origin) && filter.is_none_or(|f| f(i, m));
        let (hits, cost) = self.index.search(&self.bank, query, k, nprobe, Some(&keep))?;
        Ok(Retrieval { hits, cost })
    }

    /// The sub-memory of entries `keep` (ascending ids) with the same
    /// centroids.
    pub fn subset(&self, keep: &[usize]) -> Memory {
        Memory {
            bank: self.bank.subset(keep),
            index: self.index.restrict(keep),
        }
    }

    /// Ids kept after removing the `⌊ratio·N⌋` entries with the latest
    /// target timestamps; among equal timestamps higher ids go first.
    pub fn drift_keep(&self, ratio: f64) -> Result<Vec<usize>> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("drift ratio {ratio} outside [0, 1)")));
        }
        let n = self.len();
        let remove = ((ratio * n as f64) + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (self.bank.meta(i).timestamp, i));
        let mut keep = order[..n - remove].to_vec();
        keep.sort_unstable();
        Ok(keep)
    }

    pub fn drift_filter(&self, ratio: f64) -> Result<Memory> {
        Ok(self.subset(&self.drift_keep(ratio)?))
    }

    /// Entry ids of each partition.
    pub fn partition_ids(&self, lo: u32, hi: u32) -> Result<[Vec<usize>; 3]> {
        if lo >= hi {
            return Err(Error::InvalidArgument(format!("partition bounds {lo} ≥ {hi}")));
        }
        let mut parts: [Vec<usize>; 3] = Default::default();
        for (i, m) in self.bank.metas().iter().enumerate() {
            parts[Part::of(m.prefix_len, lo, hi) as usize].push(i);
        }
        Ok(parts)
    }

    /// The sub-memory made of the chosen partitions.
    pub fn partition_subset(&self, lo: u32, hi: u32, parts: &BTreeSet<Part>) -> Result<Memory> {
        let ids = self.partition_ids(lo, hi)?;
        let mut keep: Vec<usize> = parts.iter().flat_map(|&p| ids[p as usize].iter().copied()).collect();
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }

    /// Appends entries encoded with the same checkpoint, routing each to its
    /// nearest existing centroid.
    pub fn append_entries(&mut self, new: &MemoryBank) -> Result<()> {
        new.check_checkpoint(&self.bank.checkpoint_id)?;
        if new.dim != self.bank.dim {
            return Err(Error::InvalidArgument("appended entries have another width".into()));
        }
        for i in 0..new.len() {
            let id = self.bank.len() as u32;
            let list = self.index.route(new.unit_key(i));
            self.bank.push(new.key(i), new.value(i), *new.meta(i));
            self.index.lists[list].push(id);
        }
        Ok(())
    }
}

/// Cosine top-`k` over every entry, same tie rule, no index involved.
pub fn exhaustive_topk(bank: &MemoryBank, query: &[Real], k: usize, exclude: Option<Origin>) -> Vec<Hit> {
    let q = normalized(query);
    let hits = (0..bank.len())
        .filter(|&i| exclude != Some(bank.meta(i).origin))
        .map(|i| Hit {
            id: i as u32,
            cosine: dot(&q, bank.unit_key(i)),
        })
        .collect();
    ivf::top_k(hits, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, InteractionLog, RawRecord};
    use crate::encoder::{Backbone, EncoderConfig};
    use crate::rng::stream;
    use crate::tensor::l2_norm;
    use rand::Rng;

    fn random_bank(n: usize, dim: usize, seed: u64) -> MemoryBank {
        let mut r = stream(seed, "bank");
        let mut b = MemoryBank::empty(dim, "ck");
        for i in 0..n {
            let key: Vec<Real> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let value: Vec<Real> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            b.push(
                &key,
                &value,
                EntryMeta {
                    target: (i % 17) as u32,
                    timestamp: r.random_range(0..50),
                    origin: Origin {
                        user: (i / 5) as u32,
                        step: (i % 5) as u32 + 1,
                    },
                    prefix_len: (i % 9) as u32 + 1,
                },
            );
        }
        b
    }

    /// Independent brute-force oracle: cosine as `q·k / (|q||k|)`.
    fn oracle(bank: &MemoryBank, q: &[Real], k: usize, skip: impl Fn(usize) -> bool) -> Vec<u32> {
        let mut all: Vec<(Real, u32)> = (0..bank.len())
            .filter(|&i| !skip(i))
            .map(|i| {
                let key = bank.key(i);
                (dot(q, key) / (l2_norm(q) * l2_norm(key)), i as u32)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn keys_are_unit_and_values_are_stored() {
        let b = random_bank(30, 6, 1);
        for i in 0..30 {
            assert!((l2_norm(b.unit_key(i)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn probe_all_equals_exhaustive_scan() {
        let bank = random_bank(2000, 8, 2);
        let mem = Memory::build(bank, 32, 32, 0).unwrap();
        let mut r = stream(3, "q");
        for _ in 0..100 {
            let q: Vec<Real> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let got: Vec<u32> = mem.retrieve_topk(&q, 20, None, None).unwrap().hits.iter().map(|h| h.id).collect();
            assert_eq!(got, oracle(&mem.bank, &q, 20, |_| false));
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let bank = random_bank(500, 8, 4);
        let mem = Memory::build(bank, 16, 16, 0).unwrap();
        let key = mem.bank.key(123).to_vec();
        let hits = mem.retrieve_topk(&key, 3, None, None).unwrap().hits;
        assert_eq!(hits[0].id, 123);
        assert!((hits[0].cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exclusion_and_filter_are_sound() {
        let bank = random_bank(500, 8, 5);
        let mem = Memory::build(bank, 8, 8, 0).unwrap();
        let key = mem.bank.key(42).to_vec();
        let origin = mem.bank.meta(42).origin;
        let hits = mem.retrieve_topk(&key, 50, Some(origin), None).unwrap().hits;
        assert!(hits.iter().all(|h| mem.bank.meta(h.id as usize).origin != origin));
        let even = |i: usize, _: &EntryMeta| i % 2 == 0;
        let hits = mem.retrieve_topk(&key, 50, None, Some(&even)).unwrap().hits;
        assert_eq!(hits.len(), 50);
        assert!(hits.iter().all(|h| h.id % 2 == 0));
        let none = |_: usize, _: &EntryMeta| false;
        assert!(mem.retrieve_topk(&key, 5, None, Some(&none)).unwrap().hits.is_empty());
        assert!(mem.retrieve_topk(&key, 0, None, None).is_err());
    }

    #[test]
    fn fewer_candidates_than_k() {
        let bank = random_bank(7, 4, 6);
        let mem = Memory::build(bank, 128, 1, 0).unwrap();
        assert!(mem.index.exhaustive);
        assert_eq!(mem.retrieve_topk(&[1.0, 0.0, 0.0, 0.0], 20, None, None).unwrap().hits.len(), 7);
    }

    #[test]
    fn every_entry_in_exactly_one_list() {
        let bank = random_bank(1000, 8, 7);
        let mem = Memory::build(bank, 20, 1, 0).unwrap();
        let mut seen = vec![0; 1000];
        for (c, l) in mem.index.lists.iter().enumerate() {
            assert!(!l.is_empty());
            for &i in l {
                seen[i as usize] += 1;
                assert_eq!(mem.index.route(mem.bank.unit_key(i as usize)), c);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn single_probe_is_cheaper_than_full_scan() {
        let bank = random_bank(10_000, 16, 8);
        let mem = Memory::build(bank, 64, 1, 0).unwrap();
        let mut r = stream(9, "q");
        let (mut ivf, mut full, mut recall) = (0usize, 0usize, 0usize);
        for _ in 0..50 {
            let q: Vec<Real> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
            let got = mem.retrieve_topk(&q, 20, None, None).unwrap();
            ivf += got.cost.flops(16);
            full += 10_000 * 16;
            let truth = exhaustive_topk(&mem.bank, &q, 20, None);
            recall += got.hits.iter().filter(|h| truth.iter().any(|t| t.id == h.id)).count();
        }
        eprintln!("nprobe=1 recall@20 = {:.3}", recall as f64 / 1000.0);
        assert!(ivf * 10 < full);
    }

    #[test]
    fn drift_removes_latest() {
        let bank = random_bank(100, 4, 10);
        let mem = Memory::build(bank, 4, 4, 0).unwrap();
        assert_eq!(mem.drift_filter(0.0).unwrap(), mem);
        let keep = mem.drift_keep(0.1).unwrap();
        assert_eq!(keep.len(), 90);
        let removed: Vec<usize> = (0..100).filter(|i| !keep.contains(i)).collect();
        let kept_max = keep.iter().map(|&i| mem.bank.meta(i).timestamp).max().unwrap();
        let removed_min = removed.iter().map(|&i| mem.bank.meta(i).timestamp).min().unwrap();
        assert!(kept_max <= removed_min);
        for r in [0.2, 0.3] {
            assert_eq!(mem.drift_keep(r).unwrap().len(), 100 - (r * 100.0).round() as usize);
        }
        assert!(mem.drift_keep(1.0).is_err());
    }

    #[test]
    fn drift_tie_removes_higher_ids() {
        let mut bank = MemoryBank::empty(2, "ck");
        for i in 0..10 {
            let meta = EntryMeta {
                target: 0,
                timestamp: 5,
                origin: Origin { user: i, step: 1 },
                prefix_len: 1,
            };
            bank.push(&[1.0, i as Real], &[0.0, 0.0], meta);
        }
        let mem = Memory::build(bank, 2, 2, 0).unwrap();
        assert_eq!(mem.drift_keep(0.3).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn partitions_cover_disjointly() {
        let bank = random_bank(300, 4, 11);
        let mem = Memory::build(bank, 4, 4, 0).unwrap();
        let [s, m, l] = mem.partition_ids(3, 6).unwrap();
        assert_eq!(s.len() + m.len() + l.len(), 300);
        assert!(s.iter().all(|&i| mem.bank.meta(i).prefix_len < 3));
        assert!(m.iter().all(|&i| (3..=6).contains(&mem.bank.meta(i).prefix_len)));
        assert!(l.iter().all(|&i| mem.bank.meta(i).prefix_len > 6));
        assert_eq!(Part::of(3, 3, 6), Part::Medium);
        assert_eq!(Part::of(6, 3, 6), Part::Medium);
        assert_eq!(Part::of(7, 3, 6), Part::Long);
        let all: BTreeSet<Part> = Part::ALL.into_iter().collect();
        assert_eq!(mem.partition_subset(3, 6, &all).unwrap(), mem);
        assert!(mem.partition_ids(4, 4).is_err());
    }

    #[test]
    fn sub_memory_matches_filtered_search() {
        let bank = random_bank(800, 8, 12);
        let mem = Memory::build(bank, 10, 10, 0).unwrap();
        let keep = mem.drift_keep(0.3).unwrap();
        let sub = mem.subset(&keep);
        let mut r = stream(13, "q");
        for _ in 0..20 {
            let q: Vec<Real> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let a: Vec<u32> = sub
                .retrieve_topk(&q, 10, None, None)
                .unwrap()
                .hits
                .iter()
                .map(|h| keep[h.id as usize] as u32)
                .collect();
            let inkeep = |i: usize, _: &EntryMeta| keep.binary_search(&i).is_ok();
            let b: Vec<u32> = mem.retrieve_topk(&q, 10, None, Some(&inkeep)).unwrap().hits.iter().map(|h| h.id).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn append_matches_rebuild_with_same_centroids() {
        let all = random_bank(3000, 8, 14);
        let first: Vec<usize> = (0..2000).collect();
        let rest: Vec<usize> = (2000..3000).collect();
        let base = Memory::build(all.subset(&first), 16, 16, 0).unwrap();
        let mut appended = base.clone();
        appended.append_entries(&all.subset(&rest)).unwrap();

        let mut rebuilt = IvfIndex {
            lists: vec![Vec::new(); 16],
            ..base.index.clone()
        };
        for i in 0..3000 {
            let c = rebuilt.route(all.unit_key(i));
            rebuilt.lists[c].push(i as u32);
        }
        let rebuilt = Memory {
            bank: all.clone(),
            index: rebuilt,
        };
        assert_eq!(appended.bank, rebuilt.bank);
        let mut r = stream(15, "q");
        for _ in 0..100 {
            let q: Vec<Real> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            assert_eq!(
                appended.retrieve_topk(&q, 10, None, None).unwrap(),
                rebuilt.retrieve_topk(&q, 10, None, None).unwrap()
            );
        }
        let key = all.key(2500).to_vec();
        assert_eq!(appended.retrieve_topk(&key, 1, None, None).unwrap().hits[0].id, 2500);
        assert_eq!(appended.drift_filter(0.0).unwrap(), appended);

        let mut other = MemoryBank::empty(8, "other");
        other.push(&[1.0; 8], &[0.0; 8], *all.meta(0));
        assert!(matches!(appended.append_entries(&other), Err(Error::LineageMismatch(_))));
    }

    #[test]
    fn files_round_trip() {
        let bank = random_bank(200, 6, 16);
        let mem = Memory::build(bank, 8, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bank_id = mem.bank.save(&dir.path().join("bank.bin")).unwrap();
        mem.index.save(&dir.path().join("index.bin"), &bank_id).unwrap();
        let (bank, id2) = MemoryBank::load(&dir.path().join("bank.bin")).unwrap();
        let (index, for_bank) = IvfIndex::load(&dir.path().join("index.bin")).unwrap();
        assert_eq!(id2, bank_id);
        assert_eq!(for_bank, bank_id);
        assert_eq!(bank, mem.bank);
        assert_eq!(index, mem.index);
        let mut bytes = mem.bank.encode();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(MemoryBank::decode(&bytes, "x"), Err(Error::Format { .. })));
    }

    fn corpus() -> crate::data::Split {
        let mut recs = Vec::new();
        for u in 0..12 {
            for t in 0..(3 + u % 5) {
                recs.push(RawRecord {
                    user: format!("u{u}"),
                    item: format!("i{}", (u * 3 + t * 7) % 11),
                    timestamp: (u * 100 + t) as i64,
                });
            }
        }
        leave_one_out_split(&InteractionLog::from_records(&recs, 1).unwrap())
    }

    #[test]
    fn reference_set_counts_and_encoding() {
        let split = corpus();
        let refs = build_reference_set(&split, 4);
        let expected: usize = (0..split.users.len()).map(|i| split.train_sequence(i).len().saturating_sub(1)).sum();
        assert_eq!(refs.len(), expected);
        let mut c = EncoderConfig::new(split.num_items);
        c.hidden = 8;
        c.inner = 16;
        c.max_len = 4;
        let mut bb = Backbone::new(c, 3).unwrap();
        bb.set_frozen(true);
        let bank = encode_bank(&refs, &bb, "ck").unwrap();
        assert_eq!(bank.len(), refs.len());
        for (i, r) in refs.iter().enumerate() {
            assert_eq!(bank.value(i), bb.item_embeddings().row(r.target as usize));
            assert_eq!(bank.meta(i).prefix_len, r.step);
            let one = bb.represent(&[&r.prefix]).unwrap();
            assert_eq!(bank.key(i), one.row(0));
        }
    }
}
