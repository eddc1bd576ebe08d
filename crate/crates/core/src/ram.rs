//! Retrieval-augmented module: two cross-attention channels over retrieved
//! memories and a fixed convex fusion with the backbone representation.
//!
//! Channel one attends from `h` to the retrieved user representations and
//! aggregates their target-item embeddings; channel two swaps the roles. The
//! fused representation is
//! `h̃ = α·h + (1−α)·(β·c₁ + (1−β)·c₂)`.
//! The retrieved set carries no positional signal, so both channels are
//! invariant to the order of the memories.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attention::{AttentionOutput, MultiHeadAttention};
use crate::data::{Origin, Split, TrainExample};
use crate::encoder::Backbone;
use crate::eval::{hr_at_n, ndcg_at_n, rank_cases, Scorer};
use crate::gradcheck::Parametrized;
use crate::graph::{Graph, NodeId, Segment};
use crate::memory::{Hit, Memory};
use crate::optim::{Adam, AdamConfig};
use crate::param::ParamStore;
use crate::rng::stream;
use crate::{Error, ItemId, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub alpha: Real,
    pub beta: Real,
    pub k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.9,
            k: 20,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "fusion coefficients must lie in [0, 1], got α={} β={}",
                self.alpha, self.beta
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        Ok(())
    }
}

/// `α·h + (1−α)·(β·c1 + (1−β)·c2)` on plain vectors.
pub fn fuse(h: &[Real], c1: &[Real], c2: &[Real], alpha: Real, beta: Real) -> Result<Vec<Real>> {
    FusionConfig { alpha, beta, k: 1 }.validate()?;
    if h.len() != c1.len() || h.len() != c2.len() {
        return Err(Error::InvalidArgument("fuse needs equally long vectors".into()));
    }
    Ok(h.iter()
        .zip(c1.iter().zip(c2))
        .map(|(h, (a, b))| alpha * h + (1.0 - alpha) * (beta * a + (1.0 - beta) * b))
        .collect())
}

/// Graph version of [`fuse`] with one `α` per row.
pub fn fuse_rows(g: &mut Graph<'_>, h: NodeId, c1: NodeId, c2: NodeId, alpha: &[Real], beta: Real) -> NodeId {
    let w1: Vec<Real> = alpha.iter().map(|a| (1.0 - a) * beta).collect();
    let w2: Vec<Real> = alpha.iter().map(|a| (1.0 - a) * (1.0 - beta)).collect();
    g.weighted_sum(&[(h, alpha.to_vec()), (c1, w1), (c2, w2)])
}

/// The retrieved memories of a batch, packed: query `b` owns rows
/// `segments[b].k_start..+k_len` of `keys` and `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMemories {
    pub keys: Tensor,
    pub values: Tensor,
    pub segments: Vec<Segment>,
}

impl PackedMemories {
    pub fn pack(memory: &Memory, hits: &[Vec<Hit>]) -> Self {
        let d = memory.bank.dim;
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        let mut segments = Vec::with_capacity(hits.len());
        let mut start = 0;
        for (b, hs) in hits.iter().enumerate() {
            segments.push(Segment {
                q_start: b,
                q_len: 1,
                k_start: start,
                k_len: hs.len(),
            });
            for h in hs {
                keys.extend_from_slice(memory.bank.key(h.id as usize));
                values.extend_from_slice(memory.bank.value(h.id as usize));
            }
            start += hs.len();
        }
        Self {
            keys: Tensor::matrix(start, d, keys),
            values: Tensor::matrix(start, d, values),
            segments,
        }
    }

    /// Packs explicit per-query `(keys, values)` row lists.
    pub fn from_sets(sets: &[(Vec<Vec<Real>>, Vec<Vec<Real>>)], dim: usize) -> Self {
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        let mut segments = Vec::new();
        let mut start = 0;
        for (b, (ks, vs)) in sets.iter().enumerate() {
            assert_eq!(ks.len(), vs.len(), "keys and values differ in count");
            segments.push(Segment {
                q_start: b,
                q_len: 1,
                k_start: start,
                k_len: ks.len(),
            });
            keys.extend(ks.iter().flatten());
            values.extend(vs.iter().flatten());
            start += ks.len();
        }
        Self {
            keys: Tensor::matrix(start, dim, keys),
            values: Tensor::matrix(start, dim, values),
            segments,
        }
    }

    /// Queries that got at least one memory.
    pub fn has_memories(&self) -> Vec<bool> {
        self.segments.iter().map(|s| s.k_len > 0).collect()
    }
}

/// The RAM parameters: two independent attention groups.
#[derive(Clone, Debug)]
pub struct Ram {
    pub dim: usize,
    pub heads: usize,
    pub store: ParamStore,
    channel1: MultiHeadAttention,
    channel2: MultiHeadAttention,
}

pub struct ChannelOutputs {
    pub c1: AttentionOutput,
    pub c2: AttentionOutput,
}

impl Ram {
    pub fn new(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "ram-init");
        let mut store = ParamStore::new();
        let channel1 = MultiHeadAttention::new(&mut store, "channel1", dim, heads, &mut rng)?;
        let channel2 = MultiHeadAttention::new(&mut store, "channel2", dim, heads, &mut rng)?;
        Ok(Self {
            dim,
            heads,
            store,
            channel1,
            channel2,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    pub fn channel1(&self) -> &MultiHeadAttention {
        &self.channel1
    }

    pub fn channel2(&self) -> &MultiHeadAttention {
        &self.channel2
    }

    /// Both channels for queries `h` (one row per packed query).
    pub fn channels<'a>(&'a self, g: &mut Graph<'a>, h: NodeId, keys: NodeId, values: NodeId, segments: &[Segment]) -> Result<ChannelOutputs> {
        let c1 = self.channel1.forward(g, &self.store, h, keys, values, segments, false)?;
        let c2 = self.channel2.forward(g, &self.store, h, values, keys, segments, false)?;
        Ok(ChannelOutputs { c1, c2 })
    }

    /// `h̃` for a batch. Rows without memories use `α = 1`.
    pub fn augment<'a>(&'a self, g: &mut Graph<'a>, h: NodeId, mem: &PackedMemories, fusion: &FusionConfig) -> Result<NodeId> {
        let keys = g.constant(mem.keys.clone());
        let values = g.constant(mem.values.clone());
        let ch = self.channels(g, h, keys, values, &mem.segments)?;
        let alpha: Vec<Real> = mem
            .has_memories()
            .iter()
            .map(|&m| if m { fusion.alpha } else { 1.0 })
            .collect();
        Ok(fuse_rows(g, h, ch.c1.output, ch.c2.output, &alpha, fusion.beta))
    }
}

impl Parametrized for Ram {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Full-catalog cross entropy at the fused representation. Gradients reach
/// only the RAM: the backbone's item table enters through a frozen store.
pub fn raft_loss<'a>(
    g: &mut Graph<'a>,
    backbone: &'a Backbone,
    ram: &'a Ram,
    h: NodeId,
    mem: &PackedMemories,
    targets: &[ItemId],
    fusion: &FusionConfig,
) -> Result<NodeId> {
    let fused = ram.augment(g, h, mem, fusion)?;
    let table = g.param(&backbone.store, backbone.item_embedding_id());
    let logits = g.matmul_nt(fused, table);
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &t)
}

/// One retrieved memory, for auditing.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub entry: u32,
    pub origin: Origin,
    pub target: ItemId,
    pub cosine: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedOutput {
    pub fused: Tensor,
    pub traces: Vec<Vec<TraceEntry>>,
    /// Queries that retrieved nothing and fell back to `h̃ = h`.
    pub fallback: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub items: Vec<(ItemId, Real)>,
    pub trace: Vec<TraceEntry>,
    pub fallback: bool,
}

/// Backbone, memory and RAM assembled for inference.
#[derive(Clone, Copy)]
pub struct AugmentedModel<'m> {
    pub backbone: &'m Backbone,
    pub memory: &'m Memory,
    pub ram: &'m Ram,
    pub fusion: FusionConfig,
}

impl<'m> AugmentedModel<'m> {
    pub fn new(backbone: &'m Backbone, memory: &'m Memory, ram: &'m Ram, fusion: FusionConfig) -> Result<Self> {
        fusion.validate()?;
        if ram.dim != backbone.config.hidden || memory.bank.dim != ram.dim {
            return Err(Error::InvalidArgument("backbone, memory and RAM widths differ".into()));
        }
        Ok(Self {
            backbone,
            memory,
            ram,
            fusion,
        })
    }

    fn retrieve(&self, h: &Tensor, exclude: Option<&[Origin]>) -> Result<Vec<Vec<Hit>>> {
        (0..h.rows())
            .map(|r| {
                let ex = exclude.map(|e| e[r]);
                Ok(self.memory.retrieve_topk(h.row(r), self.fusion.k, ex, None)?.hits)
            })
            .collect()
    }

    /// Fused representations of already encoded queries.
    pub fn augment_representations(&self, h: &Tensor, exclude: Option<&[Origin]>) -> Result<AugmentedOutput> {
        let hits = self.retrieve(h, exclude)?;
        let mem = PackedMemories::pack(self.memory, &hits);
        let mut g = Graph::new();
        let hn = g.constant_ref(h);
        let fused = self.ram.augment(&mut g, hn, &mem, &self.fusion)?;
        let traces = hits
            .iter()
            .map(|hs| {
                hs.iter()
                    .map(|x| {
                        let m = self.memory.bank.meta(x.id as usize);
                        TraceEntry {
                            entry: x.id,
                            origin: m.origin,
                            target: m.target,
                            cosine: x.cosine,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(AugmentedOutput {
            fused: g.value(fused).clone(),
            traces,
            fallback: mem.has_memories().iter().map(|m| !m).collect(),
        })
    }

    pub fn infer(&self, prefixes: &[&[ItemId]]) -> Result<AugmentedOutput> {
        let h = self.backbone.represent(prefixes)?;
        self.augment_representations(&h, None)
    }

    /// Top-`n` items by `h̃·V[i]`, ties to the lower id.
    pub fn recommend(&self, prefix: &[ItemId], n: usize) -> Result<Recommendation> {
        let out = self.infer(&[prefix])?;
        let scores = self.backbone.score_items(&out.fused);
        let mut items: Vec<(ItemId, Real)> = scores.row(0).iter().enumerate().map(|(i, &s)| (i as ItemId, s)).collect();
        items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        items.truncate(n);
        Ok(Recommendation {
            items,
            trace: out.traces.into_iter().next().unwrap_or_default(),
            fallback: out.fallback[0],
        })
    }
}

impl Scorer for AugmentedModel<'_> {
    fn num_items(&self) -> usize {
        self.backbone.config.num_items
    }

    fn score(&self, prefixes: &[&[ItemId]]) -> Result<Tensor> {
        Ok(self.backbone.score_items(&self.infer(prefixes)?.fused))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaftConfig {
    pub lr: Real,
    pub batch: usize,
    pub beta1: Real,
    pub beta2: Real,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 1024,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaftEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RaftOutcome {
    pub ram: Ram,
    pub epochs: Vec<RaftEpoch>,
    pub best_epoch: usize,
    /// Training examples that retrieved nothing (after self-exclusion).
    pub fallback_examples: usize,
}

impl RaftOutcome {
    pub fn log_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\tval_hr@10\tval_ndcg@10\twall_secs\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}", e.epoch, e.loss, e.val_hr10, e.val_ndcg10, e.wall_secs);
        }
        s
    }
}

fn example_queries(backbone: &Backbone, memory: &Memory, examples: &[TrainExample]) -> Result<Tensor> {
    let d = backbone.config.hidden;
    let same = memory.len() == examples.len()
        && examples
            .iter()
            .enumerate()
            .all(|(i, e)| memory.bank.meta(i).origin == e.origin());
    if same {
        // The bank is this exact reference set encoded by this backbone.
        let rows: Vec<&[Real]> = (0..examples.len()).map(|i| memory.bank.key(i)).collect();
        return Ok(Tensor::from_rows(&rows, d));
    }
    let chunks: Vec<Vec<Real>> = examples
        .par_chunks(256)
        .map(|c| {
            let p: Vec<&[ItemId]> = c.iter().map(|e| e.prefix.as_slice()).collect();
            Ok(backbone.represent(&p)?.into_data())
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::matrix(examples.len(), d, chunks.concat()))
}

/// Validation HR@10 / NDCG@10 of the augmented model.
pub fn validate_augmented(model: &AugmentedModel<'_>, split: &Split) -> Result<(f64, f64)> {
    let ranks = rank_cases(model, &split.valid_cases())?;
    Ok((hr_at_n(&ranks, 10)?, ndcg_at_n(&ranks, 10)?))
}

/// Fine-tunes `ram` on the training pairs of `split` with the backbone frozen.
/// Each example retrieves from `memory` with its own entry excluded.
pub fn raft_train(
    backbone: &Backbone,
    backbone_id: &str,
    memory: &Memory,
    split: &Split,
    mut ram: Ram,
    cfg: &RaftConfig,
    mut on_epoch: impl FnMut(&RaftEpoch),
) -> Result<RaftOutcome> {
    cfg.fusion.validate()?;
    if cfg.batch == 0 || cfg.patience == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch, patience and epochs must be positive".into()));
    }
    memory.bank.check_checkpoint(backbone_id)?;
    if !backbone.is_frozen() {
        return Err(Error::InvalidArgument("the backbone must be frozen for RAFT".into()));
    }
    let examples = split.train_examples(backbone.config.max_len);
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let queries = example_queries(backbone, memory, &examples)?;
    let hits: Vec<Vec<Hit>> = (0..examples.len())
        .into_par_iter()
        .map(|i| {
            Ok(memory
                .retrieve_topk(queries.row(i), cfg.fusion.k, Some(examples[i].origin()), None)?
                .hits)
        })
        .collect::<Result<_>>()?;
    let fallback_examples = hits.iter().filter(|h| h.is_empty()).count();

    ram.store.set_trainable(true);
    let mut adam = Adam::new(
        &ram.store,
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        },
    );
    let mut order_rng = stream(cfg.seed, "raft-sampling");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<((f64, f64), ParamStore)> = None;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let d = backbone.config.hidden;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let rows: Vec<&[Real]> = batch.iter().map(|&i| queries.row(i)).collect();
            let h = Tensor::from_rows(&rows, d);
            let bh: Vec<Vec<Hit>> = batch.iter().map(|&i| hits[i].clone()).collect();
            let mem = PackedMemories::pack(memory, &bh);
            let targets: Vec<ItemId> = batch.iter().map(|&i| examples[i].target).collect();
            let (grads, loss) = {
                let r: &Ram = &ram;
                let mut g = Graph::new();
                let hn = g.constant(h);
                let loss = raft_loss(&mut g, backbone, r, hn, &mem, &targets, &cfg.fusion)?;
                let lv = g.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        msg: "non-finite RAFT loss".into(),
                    });
                }
                (g.backward(loss), lv as f64)
            };
            ram.store.zero_grad();
            ram.store.accumulate(&grads);
            adam.step(&mut ram.store);
            loss_sum += loss * batch.len() as f64;
            n += batch.len();
        }
        let model = AugmentedModel::new(backbone, memory, &ram, cfg.fusion)?;
        let (hr, ndcg) = validate_augmented(&model, split)?;
        let e = RaftEpoch {
            epoch,
            loss: loss_sum / n as f64,
            val_hr10: hr,
            val_ndcg10: ndcg,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&e);
        epochs.push(e);
        if best.as_ref().is_none_or(|(b, _)| (hr, ndcg) > *b) {
            best = Some(((hr, ndcg), ram.store.clone()));
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, s)) = best {
        ram.store = s;
    }
    Ok(RaftOutcome {
        ram,
        epochs,
        best_epoch,
        fallback_examples,
    })
}
