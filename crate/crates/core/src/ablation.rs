//! Ablation protocols over trained artifacts: bank drift, bank partitions,
//! noisy test prefixes and the fusion hyperparameter sweep.

use std::collections::BTreeSet;

use crate::data::{inject_noise, EvalCase, Split};
use crate::encoder::Backbone;
use crate::eval::{mean_std, rank_cases, Metrics, Scorer, DEFAULT_CUTOFFS};
use crate::memory::{Memory, Part};
use crate::ram::{raft_train, AugmentedModel, FusionConfig, RaftConfig, Ram};
use crate::rng::stream;
use crate::{Error, Result};

/// The frozen artifacts every protocol reads.
#[derive(Clone, Copy)]
pub struct Trained<'a> {
    pub backbone: &'a Backbone,
    pub backbone_id: &'a str,
    pub memory: &'a Memory,
    pub ram: &'a Ram,
    pub split: &'a Split,
}

pub type Row = (String, Metrics);

fn metrics<S: Scorer + ?Sized>(scorer: &S, cases: &[EvalCase]) -> Result<Metrics> {
    Metrics::from_ranks(&rank_cases(scorer, cases)?, &DEFAULT_CUTOFFS)
}

fn augmented_metrics(t: &Trained<'_>, memory: &Memory, fusion: FusionConfig, cases: &[EvalCase]) -> Result<Metrics> {
    metrics(&AugmentedModel::new(t.backbone, memory, t.ram, fusion)?, cases)
}

/// Test metrics with the latest `r` fraction of the bank removed, per ratio.
pub fn drift(t: &Trained<'_>, fusion: FusionConfig, ratios: &[f64]) -> Result<Vec<Row>> {
    let cases = t.split.test_cases();
    ratios
        .iter()
        .map(|&r| {
            let m = t.memory.drift_filter(r)?;
            Ok((format!("drift r={r}"), augmented_metrics(t, &m, fusion, &cases)?))
        })
        .collect()
}

/// The seven nonempty combinations of short, medium and long partitions.
pub fn partition_subsets() -> Vec<BTreeSet<Part>> {
    use Part::{Long as L, Medium as M, Short as S};
    [&[S][..], &[M], &[L], &[S, M], &[S, L], &[M, L], &[S, M, L]]
        .iter()
        .map(|ps| ps.iter().copied().collect())
        .collect()
}

pub fn partition_label(parts: &BTreeSet<Part>) -> String {
    parts.iter().map(|p| p.letter().to_string()).collect::<Vec<_>>().join("+")
}

/// Test metrics with the bank restricted to each partition subset.
pub fn partition(t: &Trained<'_>, fusion: FusionConfig, lo: u32, hi: u32) -> Result<Vec<Row>> {
    let cases = t.split.test_cases();
    partition_subsets()
        .iter()
        .map(|parts| {
            let m = t.memory.partition_subset(lo, hi, parts)?;
            Ok((format!("partition {}", partition_label(parts)), augmented_metrics(t, &m, fusion, &cases)?))
        })
        .collect()
}

/// Test cases with `ratio` noise items inserted into each prefix.
pub fn noisy_cases(split: &Split, ratio: f64, max_len: usize, seed: u64) -> Result<Vec<EvalCase>> {
    let mut rng = stream(seed, "noise");
    split
        .test_cases()
        .into_iter()
        .map(|c| {
            let history = &split
                .history(c.user)
                .ok_or_else(|| Error::Index(format!("user {} missing from split", c.user)))?
                .items;
            let noisy = inject_noise(&c.prefix, history, split.num_items, ratio, max_len, &mut rng)?;
            Ok(EvalCase {
                prefix: noisy.items,
                ..c
            })
        })
        .collect()
}

/// Per ratio, the backbone alone and the augmented model on the same noisy
/// prefixes.
pub fn noise(t: &Trained<'_>, fusion: FusionConfig, ratios: &[f64], seed: u64) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for &r in ratios {
        let cases = noisy_cases(t.split, r, t.backbone.config.max_len, seed)?;
        rows.push((format!("noise r={r} w/o aug"), metrics(t.backbone, &cases)?));
        rows.push((format!("noise r={r} w/ aug"), augmented_metrics(t, t.memory, fusion, &cases)?));
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Vary one of α, β, K at a time around the base setting.
    Axis,
    /// Every combination.
    Grid,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub ks: Vec<usize>,
    pub seeds: usize,
    /// Training settings; its fusion is the base point of an axis sweep and
    /// its seed the first of `seeds` consecutive seeds.
    pub base: RaftConfig,
}

impl SweepConfig {
    /// Cells in sweep order, without duplicates.
    pub fn cells(&self) -> Vec<FusionConfig> {
        let b = self.base.fusion;
        let cell = |a: f64, be: f64, k: usize| FusionConfig {
            alpha: a as _,
            beta: be as _,
            k,
        };
        let mut out: Vec<FusionConfig> = Vec::new();
        let mut add = |f: FusionConfig| {
            if !out.contains(&f) {
                out.push(f);
            }
        };
        match self.mode {
            SweepMode::Axis => {
                self.alphas.iter().for_each(|&a| add(cell(a, f64::from(b.beta), b.k)));
                self.betas.iter().for_each(|&be| add(cell(f64::from(b.alpha), be, b.k)));
                self.ks.iter().for_each(|&k| add(cell(f64::from(b.alpha), f64::from(b.beta), k)));
            }
            SweepMode::Grid => {
                for &a in &self.alphas {
                    for &be in &self.betas {
                        for &k in &self.ks {
                            add(cell(a, be, k));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub fusion: FusionConfig,
    pub mean: Metrics,
    pub std: Metrics,
}

impl SweepRow {
    pub fn label(&self) -> String {
        format!("alpha={} beta={} K={}", self.fusion.alpha, self.fusion.beta, self.fusion.k)
    }
}

/// Trains a fresh RAM per cell and seed and reports test metrics as mean and
/// standard deviation over seeds. `on_run` sees `(cell, seed, metrics)`.
pub fn sweep(
    t: &Trained<'_>,
    cfg: &SweepConfig,
    mut on_run: impl FnMut(&FusionConfig, u64, &Metrics),
) -> Result<Vec<SweepRow>> {
    if cfg.seeds == 0 {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let cases = t.split.test_cases();
    let dim = t.backbone.config.hidden;
    let heads = t.backbone.config.heads;
    cfg.cells()
        .into_iter()
        .map(|fusion| {
            let runs = (0..cfg.seeds as u64)
                .map(|s| {
                    let seed = cfg.base.seed + s;
                    let raft = RaftConfig {
                        seed,
                        fusion,
                        ..cfg.base.clone()
                    };
                    let ram = Ram::new(dim, heads, seed)?;
                    let out = raft_train(t.backbone, t.backbone_id, t.memory, t.split, ram, &raft, |_| {})?;
                    let m = metrics(&AugmentedModel::new(t.backbone, t.memory, &out.ram, fusion)?, &cases)?;
                    on_run(&fusion, seed, &m);
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&runs)?;
            Ok(SweepRow { fusion, mean, std })
        })
        .collect()
}
