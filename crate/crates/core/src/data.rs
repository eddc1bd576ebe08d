//! Interaction logs, k-core filtering, leave-one-out splits, training-prefix
//! enumeration, retrieval positives and evaluation-time noise.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::binio::{digest_hex, write_atomic, Decoder, Encoder};
use crate::{Error, ItemId, Result, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub item: ItemId,
    pub timestamp: i64,
}

/// A filtered log with dense ids. `sequences[u]` is user `u`'s history in
/// timestamp order, ties kept in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
    pub sequences: Vec<Vec<Interaction>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl fmt::Display for LogStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "#users\t#items\t#inters\t#avg.length\tsparsity")?;
        writeln!(
            f,
            "{}\t{}\t{}\t{:.2}\t{:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.avg_length,
            self.sparsity * 100.0
        )
    }
}

/// Reads a tab-separated `(user, item, timestamp)` file and applies iterated
/// `min_core` filtering. A first line whose timestamp does not parse is taken
/// as a header.
pub fn ingest_interactions(path: &Path, min_core: usize) -> Result<InteractionLog> {
    let file = std::fs::File::open(path)?;
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse {
            path: display.clone(),
            line: i + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        match fields[2].trim().parse::<i64>() {
            Ok(ts) => records.push(RawRecord {
                user: fields[0].to_string(),
                item: fields[1].to_string(),
                timestamp: ts,
            }),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(err(format!("timestamp {:?} is not an integer", fields[2]))),
        }
    }
    InteractionLog::from_records(&records, min_core)
}

impl InteractionLog {
    /// Builds a log from records in input order, filtering users and items
    /// with fewer than `min_core` interactions until no more can be removed.
    pub fn from_records(records: &[RawRecord], min_core: usize) -> Result<Self> {
        let mut user_tmp: HashMap<&str, usize> = HashMap::new();
        let mut item_tmp: HashMap<&str, usize> = HashMap::new();
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            let nu = user_tmp.len();
            let u = *user_tmp.entry(&r.user).or_insert(nu);
            let ni = item_tmp.len();
            let it = *item_tmp.entry(&r.item).or_insert(ni);
            pairs.push((u, it));
        }
        let mut alive = vec![true; records.len()];
        loop {
            let mut udeg = vec![0usize; user_tmp.len()];
            let mut ideg = vec![0usize; item_tmp.len()];
            for (k, &(u, i)) in pairs.iter().enumerate() {
                if alive[k] {
                    udeg[u] += 1;
                    ideg[i] += 1;
                }
            }
            let mut changed = false;
            for (k, &(u, i)) in pairs.iter().enumerate() {
                if alive[k] && (udeg[u] < min_core || ideg[i] < min_core) {
                    alive[k] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut user_ids: HashMap<usize, UserId> = HashMap::new();
        let mut item_ids: HashMap<usize, ItemId> = HashMap::new();
        let mut user_names = Vec::new();
        let mut item_names = Vec::new();
        let mut sequences: Vec<Vec<Interaction>> = Vec::new();
        for (k, r) in records.iter().enumerate() {
            if !alive[k] {
                continue;
            }
            let (u, i) = pairs[k];
            let uid = *user_ids.entry(u).or_insert_with(|| {
                user_names.push(r.user.clone());
                sequences.push(Vec::new());
                (user_names.len() - 1) as UserId
            });
            let iid = *item_ids.entry(i).or_insert_with(|| {
                item_names.push(r.item.clone());
                (item_names.len() - 1) as ItemId
            });
            sequences[uid as usize].push(Interaction {
                item: iid,
                timestamp: r.timestamp,
            });
        }
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for s in &mut sequences {
            // stable: equal timestamps keep input order
            s.sort_by_key(|x| x.timestamp);
        }
        Ok(Self {
            user_names,
            item_names,
            sequences,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn stats(&self) -> LogStats {
        let users = self.num_users();
        let items = self.num_items();
        let interactions: usize = self.sequences.iter().map(Vec::len).sum();
        LogStats {
            users,
            items,
            interactions,
            avg_length: interactions as f64 / users as f64,
            sparsity: 1.0 - interactions as f64 / (users as f64 * items as f64),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new(b"RSRCCORP", 1);
        e.u64(self.user_names.len() as u64);
        for n in &self.user_names {
            e.str(n);
        }
        e.u64(self.item_names.len() as u64);
        for n in &self.item_names {
            e.str(n);
        }
        for s in &self.sequences {
            let items: Vec<u32> = s.iter().map(|x| x.item).collect();
            let ts: Vec<i64> = s.iter().map(|x| x.timestamp).collect();
            e.u32s(&items);
            e.i64s(&ts);
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let (mut d, _) = Decoder::new(bytes, path, b"RSRCCORP", 1)?;
        let nu = d.u64()? as usize;
        let user_names = (0..nu).map(|_| d.str()).collect::<Result<Vec<_>>>()?;
        let ni = d.u64()? as usize;
        let item_names = (0..ni).map(|_| d.str()).collect::<Result<Vec<_>>>()?;
        let mut sequences = Vec::with_capacity(nu);
        for _ in 0..nu {
            let items = d.u32s()?;
            let ts = d.i64s()?;
            if items.len() != ts.len() || items.iter().any(|&i| i as usize >= ni) {
                return Err(d.err("inconsistent user sequence"));
            }
            sequences.push(
                items
                    .into_iter()
                    .zip(ts)
                    .map(|(item, timestamp)| Interaction { item, timestamp })
                    .collect(),
            );
        }
        if !d.at_end() {
            return Err(d.err("trailing bytes"));
        }
        Ok(Self {
            user_names,
            item_names,
            sequences,
        })
    }

    /// Writes the corpus atomically and returns its content id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        write_atomic(path, &bytes)?;
        Ok(digest_hex(&bytes))
    }

    /// Loads a corpus and its content id.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let log = Self::decode(&bytes, &path.display().to_string())?;
        Ok((log, digest_hex(&bytes)))
    }
}

/// Identifies one `⟨prefix, next item⟩` pair: `step` is the number of items
/// in the (untruncated) prefix, i.e. the position of the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub user: UserId,
    pub step: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub user: UserId,
    pub step: u32,
    /// At most `max_len` most recent items before the target.
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
    pub timestamp: i64,
}

impl TrainExample {
    pub fn origin(&self) -> Origin {
        Origin {
            user: self.user,
            step: self.step,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: UserId,
    /// Full history before the target; truncation happens at encoding.
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user: UserId,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

/// Leave-one-out split: per user the last item is the test target, the
/// second-to-last the validation target, and everything before is training.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub num_items: usize,
    pub users: Vec<UserHistory>,
    /// Users with fewer than three interactions, excluded from the split.
    pub dropped_users: usize,
}

pub fn leave_one_out_split(log: &InteractionLog) -> Split {
    let mut users = Vec::with_capacity(log.num_users());
    let mut dropped = 0;
    for (u, seq) in log.sequences.iter().enumerate() {
        if seq.len() < 3 {
            dropped += 1;
            continue;
        }
        users.push(UserHistory {
            user: u as UserId,
            items: seq.iter().map(|x| x.item).collect(),
            timestamps: seq.iter().map(|x| x.timestamp).collect(),
        });
    }
    Split {
        num_items: log.num_items(),
        users,
        dropped_users: dropped,
    }
}

impl Split {
    pub fn train_sequence(&self, idx: usize) -> &[ItemId] {
        let items = &self.users[idx].items;
        &items[..items.len() - 2]
    }

    pub fn valid_cases(&self) -> Vec<EvalCase> {
        self.cases(2)
    }

    pub fn test_cases(&self) -> Vec<EvalCase> {
        self.cases(1)
    }

    fn cases(&self, from_end: usize) -> Vec<EvalCase> {
        self.users
            .iter()
            .map(|h| {
                let t = h.items.len() - from_end;
                EvalCase {
                    user: h.user,
                    prefix: h.items[..t].to_vec(),
                    target: h.items[t],
                }
            })
            .collect()
    }

    /// Every `⟨prefix, next item⟩` pair inside the training sequences, in
    /// user order then time order, prefixes truncated to `max_len`.
    pub fn train_examples(&self, max_len: usize) -> Vec<TrainExample> {
        let mut out = Vec::new();
        for (idx, h) in self.users.iter().enumerate() {
            let train = self.train_sequence(idx);
            for t in 1..train.len() {
                out.push(TrainExample {
                    user: h.user,
                    step: t as u32,
                    prefix: truncate_sequence(&train[..t], max_len).to_vec(),
                    target: train[t],
                    timestamp: h.timestamps[t],
                });
            }
        }
        out
    }

    /// Interaction count of every item inside the training sequences.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_items];
        for idx in 0..self.users.len() {
            for &i in self.train_sequence(idx) {
                c[i as usize] += 1;
            }
        }
        c
    }

    /// Full history of a user, by user id.
    pub fn history(&self, user: UserId) -> Option<&UserHistory> {
        self.users
            .binary_search_by_key(&user, |h| h.user)
            .ok()
            .map(|i| &self.users[i])
    }

    /// Keeps only the users for which `keep` holds.
    pub fn filter_users<F: Fn(UserId) -> bool>(&self, keep: F) -> Split {
        Split {
            num_items: self.num_items,
            users: self.users.iter().filter(|h| keep(h.user)).cloned().collect(),
            dropped_users: self.dropped_users,
        }
    }
}

/// The last `min(len, max_len)` items.
pub fn truncate_sequence(seq: &[ItemId], max_len: usize) -> &[ItemId] {
    assert!(max_len >= 1, "maximum length must be at least 1");
    &seq[seq.len().saturating_sub(max_len)..]
}

/// Training examples grouped by target item.
pub struct TargetIndex {
    by_target: Vec<Vec<usize>>,
}

impl TargetIndex {
    pub fn new(examples: &[TrainExample], num_items: usize) -> Self {
        let mut by_target = vec![Vec::new(); num_items];
        for (i, e) in examples.iter().enumerate() {
            by_target[e.target as usize].push(i);
        }
        Self { by_target }
    }

    pub fn with_target(&self, item: ItemId) -> &[usize] {
        &self.by_target[item as usize]
    }
}

/// A uniformly chosen other example with the same target as example `idx`,
/// or `None` when it is the only one.
pub fn sample_retrieval_positive<R: Rng + ?Sized>(
    idx: usize,
    examples: &[TrainExample],
    index: &TargetIndex,
    rng: &mut R,
) -> Option<usize> {
    let group = index.with_target(examples[idx].target);
    if group.len() < 2 {
        return None;
    }
    let me = group.binary_search(&idx).expect("example missing from its target group");
    let r = rng.random_range(0..group.len() - 1);
    Some(group[if r >= me { r + 1 } else { r }])
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyPrefix {
    pub items: Vec<ItemId>,
    /// Items inserted before the final truncation.
    pub inserted: usize,
}

/// Inserts `round(ratio · len)` items the user never interacted with at
/// uniformly random positions, then keeps the last `max_len` items.
pub fn inject_noise<R: Rng + ?Sized>(
    prefix: &[ItemId],
    history: &[ItemId],
    num_items: usize,
    ratio: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<NoisyPrefix> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "noise ratio {ratio} outside [0, 1]"
        )));
    }
    let count = (ratio * prefix.len() as f64).round() as usize;
    let mut items = prefix.to_vec();
    if count > 0 {
        let seen: HashSet<ItemId> = history.iter().copied().collect();
        let candidates: Option<Vec<ItemId>> = (seen.len() * 2 > num_items)
            .then(|| (0..num_items as ItemId).filter(|i| !seen.contains(i)).collect());
        if seen.len() >= num_items || candidates.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "user has interacted with every item; no negatives to insert".into(),
            ));
        }
        for _ in 0..count {
            let item = match &candidates {
                Some(c) => c[rng.random_range(0..c.len())],
                None => loop {
                    let i = rng.random_range(0..num_items) as ItemId;
                    if !seen.contains(&i) {
                        break i;
                    }
                },
            };
            let pos = rng.random_range(0..=items.len());
            items.insert(pos, item);
        }
    }
    let items = truncate_sequence(&items, max_len).to_vec();
    Ok(NoisyPrefix {
        items,
        inserted: count,
    })
}
