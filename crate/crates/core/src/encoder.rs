//! The sequence encoder: item + position embeddings followed by a stack of
//! causal post-norm transformer blocks. The hidden state at the last position
//! of the last block is the user representation.
//!
//! Sequences are right-aligned in the position table, so the most recent item
//! always sits at position `max_len − 1`. Attention only ever spans real
//! items; there is no padding.

use crate::attention::MultiHeadAttention;
use crate::data::truncate_sequence;
use crate::graph::{Graph, NodeId, Segment};
use crate::param::{ParamId, ParamStore};
use crate::rng::{stream, StreamRng};
use crate::tensor::matmul_nt_acc;
use crate::{Error, ItemId, Real, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_items: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the position-wise feed-forward layer.
    pub inner: usize,
    pub dropout: Real,
    pub ln_eps: Real,
}

impl EncoderConfig {
    pub fn new(num_items: usize) -> Self {
        Self {
            num_items,
            hidden: 64,
            max_len: 50,
            layers: 2,
            heads: 2,
            inner: 256,
            dropout: 0.5,
            ln_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.hidden == 0 || self.max_len == 0 || self.inner == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: MultiHeadAttention,
    ln1: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub store: ParamStore,
    item_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
}

/// Hidden states of a packed batch: row block `segments[b]` belongs to
/// prefix `b`.
pub struct PackedStates {
    pub states: NodeId,
    pub segments: Vec<Segment>,
}

impl Backbone {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init");
        let mut store = ParamStore::new();
        let d = config.hidden;
        let item_emb = store.add_weight("item_embeddings", &[config.num_items, d], &mut rng);
        let pos_emb = store.add_weight("position_embeddings", &[config.max_len, d], &mut rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            let attn = MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, config.heads, &mut rng)?;
            let ln1 = (
                store.add_ones(format!("{p}.ln1.gamma"), &[d]),
                store.add_zeros(format!("{p}.ln1.beta"), &[d]),
            );
            let w1 = store.add_weight(format!("{p}.ffn.w1"), &[d, config.inner], &mut rng);
            let b1 = store.add_zeros(format!("{p}.ffn.b1"), &[config.inner]);
            let w2 = store.add_weight(format!("{p}.ffn.w2"), &[config.inner, d], &mut rng);
            let b2 = store.add_zeros(format!("{p}.ffn.b2"), &[d]);
            let ln2 = (
                store.add_ones(format!("{p}.ln2.gamma"), &[d]),
                store.add_zeros(format!("{p}.ln2.beta"), &[d]),
            );
            blocks.push(Block {
                attn,
                ln1,
                w1,
                b1,
                w2,
                b2,
                ln2,
            });
        }
        Ok(Self {
            config,
            store,
            item_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn item_embeddings(&self) -> &Tensor {
        self.store.value(self.item_emb)
    }

    pub fn item_embedding_id(&self) -> ParamId {
        self.item_emb
    }

    pub fn position_embedding_id(&self) -> ParamId {
        self.pos_emb
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.store.set_trainable(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.params().iter().all(|p| !p.trainable)
    }

    fn check_prefix(&self, prefix: &[ItemId]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i as usize >= self.config.num_items) {
            return Err(Error::Index(format!(
                "item {bad} outside catalog of {}",
                self.config.num_items
            )));
        }
        Ok(())
    }

    /// `H0 = V[items] + P[positions]` for a packed batch of prefixes, each
    /// truncated to `max_len` and right-aligned.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, prefixes: &[&[ItemId]]) -> Result<PackedStates> {
        let t = self.config.max_len;
        let mut items = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            self.check_prefix(p)?;
            let p = truncate_sequence(p, t);
            segments.push(Segment::square(items.len(), p.len()));
            items.extend(p.iter().map(|&i| i as usize));
            positions.extend(t - p.len()..t);
        }
        let v = g.param(&self.store, self.item_emb);
        let pt = g.param(&self.store, self.pos_emb);
        let iv = g.gather_rows(v, &items)?;
        let pv = g.gather_rows(pt, &positions)?;
        Ok(PackedStates {
            states: g.add(iv, pv),
            segments,
        })
    }

    /// Single-prefix `H0` as a plain tensor.
    pub fn embed_sequence(&self, prefix: &[ItemId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.embed(&mut g, &[prefix])?;
        Ok(g.value(h.states).clone())
    }

    /// Last-block hidden states at every position. `dropout` is the training
    /// RNG; `None` runs in evaluation mode.
    pub fn encode_states<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefixes: &[&[ItemId]],
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<PackedStates> {
        let PackedStates { states, segments } = self.embed(g, prefixes)?;
        let p = self.config.dropout;
        let eps = self.config.ln_eps;
        let s = &self.store;
        let mut h = g.dropout(states, p, dropout.as_deref_mut());
        for b in &self.blocks {
            let a = b.attn.forward(g, s, h, h, h, &segments, true)?.output;
            let a = g.dropout(a, p, dropout.as_deref_mut());
            let r = g.add(h, a);
            let (gm, bt) = (g.param(s, b.ln1.0), g.param(s, b.ln1.1));
            h = g.layer_norm(r, gm, bt, eps);

            let (w1, b1, w2, b2) = (g.param(s, b.w1), g.param(s, b.b1), g.param(s, b.w2), g.param(s, b.b2));
            let f = g.matmul(h, w1);
            let f = g.add_bias(f, b1);
            let f = g.gelu(f);
            let f = g.matmul(f, w2);
            let f = g.add_bias(f, b2);
            let f = g.dropout(f, p, dropout.as_deref_mut());
            let r = g.add(h, f);
            let (gm, bt) = (g.param(s, b.ln2.0), g.param(s, b.ln2.1));
            h = g.layer_norm(r, gm, bt, eps);
        }
        Ok(PackedStates {
            states: h,
            segments,
        })
    }

    /// User representations (one row per prefix): the last position of the
    /// last block.
    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefixes: &[&[ItemId]],
        dropout: Option<&mut StreamRng>,
    ) -> Result<NodeId> {
        let packed = self.encode_states(g, prefixes, dropout)?;
        let last: Vec<usize> = packed
            .segments
            .iter()
            .map(|s| s.q_start + s.q_len - 1)
            .collect();
        g.gather_rows(packed.states, &last)
    }

    /// Evaluation-mode representations as a `B×d` tensor.
    pub fn represent(&self, prefixes: &[&[ItemId]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.encode(&mut g, prefixes, None)?;
        Ok(g.value(h).clone())
    }

    /// `h · V[i]` for every catalog item, one row per representation.
    pub fn score_items(&self, h: &Tensor) -> Tensor {
        let v = self.item_embeddings();
        let (b, d, n) = (h.rows(), h.cols(), v.rows());
        let mut out = vec![0.0; b * n];
        matmul_nt_acc(h.data(), v.data(), b, d, n, &mut out);
        Tensor::matrix(b, n, out)
    }

    /// Number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }
}

impl crate::gradcheck::Parametrized for Backbone {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::Rng;

    fn small(layers: usize) -> Backbone {
        let mut c = EncoderConfig::new(20);
        c.hidden = 8;
        c.inner = 16;
        c.max_len = 6;
        c.layers = layers;
        c.dropout = 0.2;
        let mut b = Backbone::new(c, 11).unwrap();
        // move away from the tiny init so differences are visible
        for p in b.store.params_mut() {
            if p.name.contains("gamma") {
                continue;
            }
            for v in p.value.data_mut() {
                *v *= 25.0;
            }
        }
        b
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let mut b = small(1);
        b.store.get_mut(b.item_emb).value.fill(0.0);
        b.store.get_mut(b.pos_emb).value.fill(0.0);
        let h = b.embed_sequence(&[1, 2, 3]).unwrap();
        assert!(h.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn embedding_is_item_plus_right_aligned_position() {
        let b = small(1);
        let v = b.item_embeddings();
        let p = b.store.value(b.pos_emb);
        let h = b.embed_sequence(&[7]).unwrap();
        for c in 0..8 {
            assert_eq!(h.row(0)[c], v.row(7)[c] + p.row(5)[c]);
        }
        let h = b.embed_sequence(&[4, 9, 2]).unwrap();
        for (r, (&item, pos)) in [4usize, 9, 2].iter().zip(3..6).enumerate() {
            for c in 0..8 {
                assert_eq!(h.row(r)[c], v.row(item)[c] + p.row(pos)[c]);
            }
        }
    }

    #[test]
    fn bad_prefixes_are_rejected() {
        let b = small(1);
        assert!(matches!(b.represent(&[&[]]), Err(Error::InvalidArgument(_))));
        assert!(matches!(b.represent(&[&[25]]), Err(Error::Index(_))));
    }

    #[test]
    fn zero_layers_return_last_embedding_row() {
        let b = small(0);
        let h = b.represent(&[&[3, 4, 5]]).unwrap();
        let e = b.embed_sequence(&[3, 4, 5]).unwrap();
        assert_eq!(h.row(0), e.row(2));
    }

    #[test]
    fn appending_leaves_earlier_positions_unchanged() {
        // Right alignment shifts positions, so causality is checked on the
        // packed states of a fixed-length window.
        let b = small(2);
        let run = |p: &[ItemId]| {
            let mut g = Graph::new();
            let s = b.encode_states(&mut g, &[p], None).unwrap();
            g.value(s.states).clone()
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let c = run(&[1, 2, 3, 4, 9]);
        for i in 0..4 {
            assert_eq!(a.row(i), c.row(i));
        }
        assert_ne!(a.row(4), c.row(4));
    }

    #[test]
    fn truncation_is_consistent() {
        let b = small(2);
        let long: Vec<ItemId> = (0..15).map(|i| i % 20).collect();
        let h1 = b.represent(&[&long]).unwrap();
        let h2 = b.represent(&[truncate_sequence(&long, 6)]).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn batching_is_bit_identical() {
        let b = small(2);
        let prefixes: Vec<Vec<ItemId>> = vec![vec![1], vec![2, 3, 4], vec![5, 6, 7, 8, 9, 10, 11], vec![0, 19]];
        let refs: Vec<&[ItemId]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let batch = b.represent(&refs).unwrap();
        for (i, p) in refs.iter().enumerate() {
            let one = b.represent(&[p]).unwrap();
            assert_eq!(one.row(0), batch.row(i));
        }
    }

    #[test]
    fn train_mode_is_seed_deterministic() {
        let b = small(2);
        let run = |seed| {
            let mut r = stream(seed, "dropout");
            let mut g = Graph::new();
            let h = b.encode(&mut g, &[&[1, 2, 3, 4, 5]], Some(&mut r)).unwrap();
            g.value(h).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert_ne!(run(1), b.represent(&[&[1, 2, 3, 4, 5]]).unwrap());
    }

    #[test]
    fn scores_are_dot_products() {
        let b = small(1);
        let h = b.represent(&[&[1, 2], &[3]]).unwrap();
        let s = b.score_items(&h);
        let v = b.item_embeddings();
        for r in 0..2 {
            for i in 0..20 {
                assert!((s.row(r)[i] - dot(h.row(r), v.row(i))).abs() < 1e-9);
            }
        }
        let zero = Tensor::zeros(&[1, 8]);
        assert!(b.score_items(&zero).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn orthonormal_table_self_scores_highest() {
        let mut c = EncoderConfig::new(4);
        c.hidden = 4;
        c.heads = 2;
        let mut b = Backbone::new(c, 0).unwrap();
        let v = b.store.get_mut(b.item_emb);
        v.value.fill(0.0);
        for i in 0..4 {
            v.value.row_mut(i)[i] = 1.0;
        }
        let mut r = stream(0, "x");
        let j = r.random_range(0..4);
        let h = Tensor::from_rows(&[b.item_embeddings().row(j).to_vec()], 4);
        let s = b.score_items(&h);
        let best = (0..4).max_by(|&a, &c| s.row(0)[a].partial_cmp(&s.row(0)[c]).unwrap()).unwrap();
        assert_eq!(best, j);
    }
}
