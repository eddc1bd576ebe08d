//! Leave-one-out ranking evaluation over the full catalog.
//!
//! A target's rank is `1 + #{items scoring higher} + #{items scoring equal
//! with a lower id}`, so ties never favour the target by accident and
//! results do not depend on sort stability.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::data::EvalCase;
use crate::encoder::Backbone;
use crate::{Error, ItemId, Real, Result, Tensor, UserId};

/// Anything that maps prefixes to full-catalog scores.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;
    /// One row of `num_items` scores per prefix.
    fn score(&self, prefixes: &[&[ItemId]]) -> Result<Tensor>;
}

impl Scorer for Backbone {
    fn num_items(&self) -> usize {
        self.config.num_items
    }

    fn score(&self, prefixes: &[&[ItemId]]) -> Result<Tensor> {
        Ok(self.score_items(&self.represent(prefixes)?))
    }
}

pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 10];
const EVAL_BATCH: usize = 128;

/// 1-based rank of `target` under the tie rule above.
pub fn rank_of(scores: &[Real], target: usize) -> usize {
    let st = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > st || (s == st && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Ranks of every case's target, computed in parallel batches.
pub fn rank_cases<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase]) -> Result<Vec<usize>> {
    let n = scorer.num_items();
    if let Some(c) = cases.iter().find(|c| c.target as usize >= n) {
        return Err(Error::Index(format!("target {} outside catalog of {n}", c.target)));
    }
    let chunks: Vec<Vec<usize>> = cases
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let prefixes: Vec<&[ItemId]> = chunk.iter().map(|c| c.prefix.as_slice()).collect();
            let scores = scorer.score(&prefixes)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, c)| rank_of(scores.row(r), c.target as usize))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

fn check(ranks: &[usize], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("cutoff must be at least 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("metric over an empty result set".into()));
    }
    Ok(())
}

pub fn hr_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    check(ranks, n)?;
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    check(ranks, n)?;
    let sum: f64 = ranks
        .iter()
        .filter(|&&r| r <= n)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(sum / ranks.len() as f64)
}

/// HR and NDCG at several cutoffs over one cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub users: usize,
    pub cutoffs: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Result<Self> {
        Ok(Self {
            users: ranks.len(),
            cutoffs: cutoffs.to_vec(),
            hr: cutoffs.iter().map(|&n| hr_at_n(ranks, n)).collect::<Result<_>>()?,
            ndcg: cutoffs.iter().map(|&n| ndcg_at_n(ranks, n)).collect::<Result<_>>()?,
        })
    }

    pub fn hr(&self, n: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == n).map(|i| self.hr[i])
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == n).map(|i| self.ndcg[i])
    }

    fn columns(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> =
            self.cutoffs.iter().zip(&self.hr).map(|(n, v)| (format!("HR@{n}"), *v)).collect();
        out.extend(self.cutoffs.iter().zip(&self.ndcg).map(|(n, v)| (format!("NDCG@{n}"), *v)));
        out
    }
}

/// Assigns `g` equal-size (±1) groups after sorting by `key`; group ids grow
/// with the key.
fn balanced_groups<K: Ord>(n: usize, g: usize, key: impl Fn(usize) -> K) -> Vec<usize> {
    assert!(g >= 1, "need at least one group");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| key(i));
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos * g / n.max(1);
    }
    labels
}

/// Groups by the training popularity of each case's target. Equal
/// popularity falls back to item id, then user id.
pub fn group_by_item_popularity(cases: &[EvalCase], train_counts: &[usize], g: usize) -> Vec<usize> {
    balanced_groups(cases.len(), g, |i| {
        let c = &cases[i];
        (train_counts[c.target as usize], c.target, c.user)
    })
}

/// Groups by test-prefix length, falling back to user id.
pub fn group_by_user_frequency(cases: &[EvalCase], g: usize) -> Vec<usize> {
    balanced_groups(cases.len(), g, |i| (cases[i].prefix.len(), cases[i].user))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub user: UserId,
    pub target: ItemId,
    pub rank: usize,
    pub prefix_len: usize,
    pub popularity_group: usize,
    pub frequency_group: usize,
}

pub const POPULARITY_GROUPS: usize = 10;
pub const FREQUENCY_GROUPS: usize = 8;

/// Ranks every case and attaches cohort labels.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase], train_counts: &[usize]) -> Result<Vec<RankResult>> {
    let ranks = rank_cases(scorer, cases)?;
    let pop = group_by_item_popularity(cases, train_counts, POPULARITY_GROUPS);
    let freq = group_by_user_frequency(cases, FREQUENCY_GROUPS);
    Ok(cases
        .iter()
        .enumerate()
        .map(|(i, c)| RankResult {
            user: c.user,
            target: c.target,
            rank: ranks[i],
            prefix_len: c.prefix.len(),
            popularity_group: pop[i],
            frequency_group: freq[i],
        })
        .collect())
}

/// One line of a report: a method or ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub cohort: String,
    pub metrics: Metrics,
    /// Standard deviations across seeds, when the row is an average.
    pub std: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub title: String,
    pub fingerprint: String,
    pub artifacts: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new(title: impl Into<String>, fingerprint: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            fingerprint: fingerprint.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, label: impl Into<String>, cohort: impl Into<String>, metrics: Metrics) {
        self.rows.push(ReportRow {
            label: label.into(),
            cohort: cohort.into(),
            metrics,
            std: None,
        });
    }

    /// Adds the overall row and one row per popularity and frequency group.
    pub fn push_evaluation(&mut self, label: &str, results: &[RankResult], cutoffs: &[usize]) -> Result<()> {
        let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
        self.push(label, "all", Metrics::from_ranks(&ranks, cutoffs)?);
        for (name, g, f) in [
            ("popularity", POPULARITY_GROUPS, (|r: &RankResult| r.popularity_group) as fn(&RankResult) -> usize),
            ("frequency", FREQUENCY_GROUPS, |r: &RankResult| r.frequency_group),
        ] {
            for gid in 0..g {
                let ranks: Vec<usize> = results.iter().filter(|r| f(r) == gid).map(|r| r.rank).collect();
                if !ranks.is_empty() {
                    self.push(label, format!("{name}-{gid}"), Metrics::from_ranks(&ranks, cutoffs)?);
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, label: &str, cohort: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label && r.cohort == cohort)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.title);
        let _ = writeln!(s, "# fingerprint {}", self.fingerprint);
        for (k, v) in &self.artifacts {
            let _ = writeln!(s, "# {k} {v}");
        }
        let Some(first) = self.rows.first() else {
            return s;
        };
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let cohort_w = self.rows.iter().map(|r| r.cohort.len()).max().unwrap_or(0).max(6);
        let _ = write!(s, "{:<label_w$}  {:<cohort_w$}  {:>6}", "label", "cohort", "users");
        for (name, _) in first.metrics.columns() {
            let _ = write!(s, "  {name:>9}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<label_w$}  {:<cohort_w$}  {:>6}", r.label, r.cohort, r.metrics.users);
            let std = r.std.as_ref().map(|m| m.columns());
            for (i, (_, v)) in r.metrics.columns().into_iter().enumerate() {
                match &std {
                    Some(sd) => {
                        let _ = write!(s, "  {v:.4}±{:.4}", sd[i].1);
                    }
                    None => {
                        let _ = write!(s, "  {v:>9.4}");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let mut m = Map::new();
            m.insert("report".into(), json!(self.title));
            m.insert("fingerprint".into(), json!(self.fingerprint));
            m.insert("artifacts".into(), json!(self.artifacts));
            m.insert("label".into(), json!(r.label));
            m.insert("cohort".into(), json!(r.cohort));
            m.insert("users".into(), json!(r.metrics.users));
            for (k, v) in r.metrics.columns() {
                m.insert(k, json!(v));
            }
            if let Some(sd) = &r.std {
                for (k, v) in sd.columns() {
                    m.insert(format!("{k}_std"), json!(v));
                }
            }
            s.push_str(&Value::Object(m).to_string());
            s.push('\n');
        }
        s
    }
}

/// Mean and (population) standard deviation of several runs' metrics.
pub fn mean_std(runs: &[Metrics]) -> Result<(Metrics, Metrics)> {
    let first = runs
        .first()
        .ok_or_else(|| Error::UndefinedMetric("no runs to average".into()))?;
    let k = runs.len() as f64;
    let agg = |get: fn(&Metrics) -> &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        let len = get(first).len();
        let mean: Vec<f64> = (0..len).map(|i| runs.iter().map(|r| get(r)[i]).sum::<f64>() / k).collect();
        let std = (0..len)
            .map(|i| (runs.iter().map(|r| (get(r)[i] - mean[i]).powi(2)).sum::<f64>() / k).sqrt())
            .collect();
        (mean, std)
    };
    let (hr_m, hr_s) = agg(|m| &m.hr);
    let (nd_m, nd_s) = agg(|m| &m.ndcg);
    let mk = |hr, ndcg| Metrics {
        users: first.users,
        cutoffs: first.cutoffs.clone(),
        hr,
        ndcg,
    };
    Ok((mk(hr_m, nd_m), mk(hr_s, nd_s)))
}
