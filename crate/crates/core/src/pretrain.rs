//! Stage one: joint next-item and retrieval pre-training of the backbone.
//!
//! Every mini-batch minimises `L_rec + λ·L_ret`. `L_rec` is the full-catalog
//! softmax cross entropy at each example's representation. `L_ret` pairs each
//! example with another training example sharing its target and contrasts the
//! two representations against the rest of the batch.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{sample_retrieval_positive, Split, TargetIndex, TrainExample};
use crate::encoder::Backbone;
use crate::eval::{hr_at_n, ndcg_at_n, rank_cases};
use crate::graph::{Graph, NodeId};
use crate::optim::{Adam, AdamConfig};
use crate::param::ParamStore;
use crate::rng::stream;
use crate::{Error, ItemId, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: Real,
    pub batch: usize,
    pub beta1: Real,
    pub beta2: Real,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau: Real,
    pub lambda_ret: Real,
    pub seed: u64,
    /// Compute the retrieval loss for the log even when `lambda_ret` is 0.
    /// It never reaches the gradient in that case.
    pub track_retrieval_loss: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 1024,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 100,
            patience: 10,
            tau: 1.0,
            lambda_ret: 0.1,
            seed: 42,
            track_retrieval_loss: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lambda_ret >= 0.0) {
            return bad("retrieval loss weight must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Mean next-item cross entropy over the rows of `h`.
pub fn rec_loss<'a>(g: &mut Graph<'a>, backbone: &'a Backbone, h: NodeId, targets: &[ItemId]) -> Result<NodeId> {
    let v = g.param(&backbone.store, backbone.item_embedding_id());
    let logits = g.matmul_nt(h, v);
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &t)
}

/// Symmetric in-batch InfoNCE between paired rows of `a` and `b`.
pub fn ret_loss(g: &mut Graph<'_>, a: NodeId, b: NodeId, tau: Real) -> Result<NodeId> {
    g.info_nce(a, b, tau)
}

/// `L_rec + λ·L_ret`; with `λ = 0` the retrieval term is left out of the
/// graph's loss entirely.
pub fn joint_loss(g: &mut Graph<'_>, rec: NodeId, ret: Option<NodeId>, lambda: Real) -> NodeId {
    match ret {
        Some(r) if lambda != 0.0 => g.weighted_sum(&[(rec, vec![1.0]), (r, vec![lambda])]),
        _ => rec,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    /// `None` when the retrieval loss was not computed.
    pub ret: Option<f64>,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged { epoch: usize, batch: usize },
}

#[derive(Clone, Debug)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch\trec_loss\tret_loss\tval_hr@10\tval_ndcg@10\twall_secs";

    /// Tab-separated, one line per completed epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::HEADER);
        for e in &self.epochs {
            let ret = e.ret.map_or_else(|| "-".to_string(), |r| format!("{r:.6}"));
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.3}",
                e.epoch, e.rec, ret, e.val_hr10, e.val_ndcg10, e.wall_secs
            );
        }
        s
    }

    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub struct PretrainOutcome {
    /// Parameters of the epoch with the best validation HR@10.
    pub backbone: Backbone,
    pub log: TrainingLog,
}

/// Validation HR@10 and NDCG@10 of `backbone` on `split`.
pub fn validate(backbone: &Backbone, split: &Split) -> Result<(f64, f64)> {
    let cases = split.valid_cases();
    let ranks = rank_cases(backbone, &cases)?;
    Ok((hr_at_n(&ranks, 10)?, ndcg_at_n(&ranks, 10)?))
}

struct BatchLoss {
    rec: f64,
    ret: Option<(f64, usize)>,
}

/// One optimizer step on `batch`. Returns `None` when the loss is not finite,
/// in which case the parameters are left untouched.
#[allow(clippy::too_many_arguments)]
fn train_step(
    backbone: &mut Backbone,
    adam: &mut Adam,
    examples: &[TrainExample],
    batch: &[usize],
    partners: &[Option<usize>],
    cfg: &PretrainConfig,
    dropout: &mut crate::rng::StreamRng,
    pair_dropout: &mut crate::rng::StreamRng,
) -> Result<Option<BatchLoss>> {
    let grads = {
        let bb: &Backbone = backbone;
        let mut g = Graph::new();
        let prefixes: Vec<&[ItemId]> = batch.iter().map(|&i| examples[i].prefix.as_slice()).collect();
        let targets: Vec<ItemId> = batch.iter().map(|&i| examples[i].target).collect();
        let h = bb.encode(&mut g, &prefixes, Some(dropout))?;
        let rec = rec_loss(&mut g, bb, h, &targets)?;

        let rows: Vec<usize> = (0..batch.len()).filter(|&r| partners[r].is_some()).collect();
        let ret = if !rows.is_empty() && (cfg.lambda_ret != 0.0 || cfg.track_retrieval_loss) {
            let anchor = g.gather_rows(h, &rows)?;
            let pp: Vec<&[ItemId]> = rows
                .iter()
                .map(|&r| examples[partners[r].unwrap()].prefix.as_slice())
                .collect();
            let positive = bb.encode(&mut g, &pp, Some(pair_dropout))?;
            Some(ret_loss(&mut g, anchor, positive, cfg.tau)?)
        } else {
            None
        };
        let loss = joint_loss(&mut g, rec, ret, cfg.lambda_ret);
        if !g.scalar(loss).is_finite() {
            return Ok(None);
        }
        let out = BatchLoss {
            rec: g.scalar(rec) as f64,
            ret: ret.map(|r| (g.scalar(r) as f64, rows.len())),
        };
        (g.backward(loss), out)
    };
    let (grads, out) = grads;
    backbone.store.zero_grad();
    backbone.store.accumulate(&grads);
    adam.step(&mut backbone.store);
    Ok(Some(out))
}

/// Trains `backbone` on the training part of `split` with early stopping on
/// validation HR@10. `on_epoch` sees each epoch's log line as it completes.
pub fn pretrain(
    mut backbone: Backbone,
    split: &Split,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if backbone.config.num_items != split.num_items {
        return Err(Error::InvalidArgument(format!(
            "backbone catalog {} differs from corpus catalog {}",
            backbone.config.num_items, split.num_items
        )));
    }
    let examples = split.train_examples(backbone.config.max_len);
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    backbone.set_frozen(false);
    let targets = TargetIndex::new(&examples, split.num_items);
    let mut order_rng = stream(cfg.seed, "sampling");
    let mut positive_rng = stream(cfg.seed, "positives");
    let mut dropout = stream(cfg.seed, "dropout");
    let mut pair_dropout = stream(cfg.seed, "pair-dropout");
    let mut adam = Adam::new(&backbone.store, cfg.adam());

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let initial = backbone.store.clone();
    let mut best: Option<((f64, f64), ParamStore)> = None;
    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stop: StopReason::MaxEpochs,
    };
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut rec_sum, mut rec_n) = (0.0, 0usize);
        let (mut ret_sum, mut ret_n) = (0.0, 0usize);
        let mut any_ret = false;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let partners: Vec<Option<usize>> = batch
                .iter()
                .map(|&i| sample_retrieval_positive(i, &examples, &targets, &mut positive_rng))
                .collect();
            let step = train_step(
                &mut backbone,
                &mut adam,
                &examples,
                batch,
                &partners,
                cfg,
                &mut dropout,
                &mut pair_dropout,
            )?;
            let Some(l) = step else {
                log.stop = StopReason::Diverged { epoch, batch: b };
                return finish(backbone, best, initial, log);
            };
            rec_sum += l.rec * batch.len() as f64;
            rec_n += batch.len();
            if let Some((r, n)) = l.ret {
                any_ret = true;
                ret_sum += r * n as f64;
                ret_n += n;
            }
        }
        let (hr, ndcg) = validate(&backbone, split)?;
        let entry = EpochLog {
            epoch,
            rec: rec_sum / rec_n as f64,
            ret: any_ret.then(|| ret_sum / ret_n as f64),
            val_hr10: hr,
            val_ndcg10: ndcg,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        // HR@10 decides; NDCG@10 only breaks exact ties.
        if best.as_ref().is_none_or(|(b, _)| (hr, ndcg) > *b) {
            best = Some(((hr, ndcg), backbone.store.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stop = StopReason::Patience;
                break;
            }
        }
    }
    finish(backbone, best, initial, log)
}

/// Restores the best validated parameters, or the initial ones when no
/// epoch completed.
fn finish(
    mut backbone: Backbone,
    best: Option<((f64, f64), ParamStore)>,
    initial: ParamStore,
    log: TrainingLog,
) -> Result<PretrainOutcome> {
    backbone.store = best.map_or(initial, |(_, s)| s);
    Ok(PretrainOutcome { backbone, log })
}
