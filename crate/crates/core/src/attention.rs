//! Multi-head attention with learned query/key/value/output projections.

use crate::graph::{Graph, NodeId, Segment};
use crate::param::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Concatenated per-head context vectors, before the output projection.
    /// This is the attention node itself, so its weights can be inspected
    /// with [`Graph::attention_weights`].
    pub context: NodeId,
    pub output: NodeId,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut StreamRng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        let mut w = |s: &str| store.add_weight(format!("{name}.{s}"), &[dim, dim], rng);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |s: &str| store.add_zeros(format!("{name}.{s}"), &[dim]);
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        Ok(Self {
            heads,
            dim,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn project<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wn = g.param(store, w);
        let bn = g.param(store, b);
        let y = g.matmul(x, wn);
        g.add_bias(y, bn)
    }

    /// Queries come from `query_in`, keys from `key_in`, values from
    /// `value_in`; `segments` pairs query rows with key/value rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        query_in: NodeId,
        key_in: NodeId,
        value_in: NodeId,
        segments: &[Segment],
        causal: bool,
    ) -> Result<AttentionOutput> {
        let q = self.project(g, store, query_in, self.wq, self.bq);
        let k = self.project(g, store, key_in, self.wk, self.bk);
        let v = self.project(g, store, value_in, self.wv, self.bv);
        let context = g.attention(q, k, v, segments, self.heads, causal)?;
        let output = self.project(g, store, context, self.wo, self.bo);
        Ok(AttentionOutput { context, output })
    }

    /// The value projection alone, `x·Wv + bv`.
    pub fn project_values<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> NodeId {
        self.project(g, store, x, self.wv, self.bv)
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::{dot, softmax};
    use crate::{Real, Tensor};
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = stream(seed, "x");
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random::<f64>() as Real - 0.5).collect())
    }

    fn setup(dim: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut r = stream(3, "init");
        let mha = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut r).unwrap();
        // larger weights so attention is far from uniform
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v *= 30.0;
            }
        }
        (store, mha)
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, mha) = setup(4, 2);
        let mut g = Graph::new();
        let q = g.constant(rand_mat(1, 4, 1));
        let kv = g.constant(rand_mat(1, 4, 2));
        let seg = Segment { q_start: 0, q_len: 1, k_start: 0, k_len: 1 };
        let out = mha.forward(&mut g, &store, q, kv, kv, &[seg], false).unwrap();
        let pv = mha.project_values(&mut g, &store, kv);
        assert!(g.value(out.context).max_abs_diff(g.value(pv)) < 1e-12);
    }

    #[test]
    fn identical_keys_average_values() {
        let (store, mha) = setup(4, 2);
        let mut g = Graph::new();
        let q = g.constant(rand_mat(1, 4, 1));
        let key_row = rand_mat(1, 4, 2);
        let keys = Tensor::from_rows(&[key_row.row(0), key_row.row(0), key_row.row(0)], 4);
        let k = g.constant(keys);
        let v = g.constant(rand_mat(3, 4, 3));
        let seg = Segment { q_start: 0, q_len: 1, k_start: 0, k_len: 3 };
        let out = mha.forward(&mut g, &store, q, k, v, &[seg], false).unwrap();
        let pv = mha.project_values(&mut g, &store, v);
        let pv = g.value(pv);
        for c in 0..4 {
            let mean = (0..3).map(|r| pv.row(r)[c]).sum::<Real>() / 3.0;
            assert!((g.value(out.context).row(0)[c] - mean).abs() < crate::TIGHT);
        }
    }

    /// Straightforward per-head loops, sharing no code with the graph op.
    fn naive(
        x: &Tensor,
        store: &ParamStore,
        mha: &MultiHeadAttention,
        causal: bool,
    ) -> Tensor {
        let [wq, bq, wk, bk, wv, bv, wo, bo] = mha.param_ids().map(|id| store.value(id).clone());
        let n = x.rows();
        let d = x.cols();
        let lin = |w: &Tensor, b: &Tensor, row: &[Real]| -> Vec<Real> {
            (0..d)
                .map(|j| (0..d).map(|k| row[k] * w.data()[k * d + j]).sum::<Real>() + b.data()[j])
                .collect()
        };
        let q: Vec<Vec<Real>> = (0..n).map(|i| lin(&wq, &bq, x.row(i))).collect();
        let k: Vec<Vec<Real>> = (0..n).map(|i| lin(&wk, &bk, x.row(i))).collect();
        let v: Vec<Vec<Real>> = (0..n).map(|i| lin(&wv, &bv, x.row(i))).collect();
        let dh = d / mha.heads;
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..mha.heads {
            let r = h * dh..(h + 1) * dh;
            for i in 0..n {
                let m = if causal { i + 1 } else { n };
                let logits: Vec<Real> = (0..m)
                    .map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (dh as Real).sqrt())
                    .collect();
                let p = softmax(&logits).unwrap();
                for j in 0..m {
                    for c in r.clone() {
                        ctx[i][c] += p[j] * v[j][c];
                    }
                }
            }
        }
        let out: Vec<Vec<Real>> = ctx.iter().map(|row| lin(&wo, &bo, row)).collect();
        Tensor::from_rows(&out, d)
    }

    #[test]
    fn matches_naive_loops() {
        let (store, mha) = setup(6, 2);
        let x = rand_mat(4, 6, 9);
        for causal in [false, true] {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let out = mha
                .forward(&mut g, &store, xn, xn, xn, &[Segment::square(0, 4)], causal)
                .unwrap();
            let expect = naive(&x, &store, &mha, causal);
            assert!(g.value(out.output).max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn causal_output_ignores_later_positions() {
        let (store, mha) = setup(4, 2);
        let x = rand_mat(5, 4, 1);
        let mut y = x.clone();
        for c in 0..4 {
            y.row_mut(3)[c] += 1.0;
        }
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let n = g.constant(t.clone());
            let o = mha.forward(&mut g, &store, n, n, n, &[Segment::square(0, 5)], true).unwrap();
            g.value(o.output).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut r = stream(3, "init");
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "m", 6, 4, &mut r),
            Err(Error::Config(_))
        ));
    }
}
