//! Define-by-run reverse-mode differentiation over the small op set the
//! encoder, the retrieval-augmented module and their losses are built from.
//!
//! A [`Graph`] evaluates eagerly: every op computes its value when it is
//! recorded. Parameters enter as borrowed leaves, and [`Graph::backward`]
//! returns the gradients of the trainable ones, keyed by [`ParamId`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, axpy, dot, log_sum_exp};
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One attention problem inside a packed batch: queries
/// `q_start..q_start+q_len` attend keys/values `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention over rows `start..start+len`.
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        src: NodeId,
        idx: Vec<usize>,
    },
    Add(NodeId, NodeId),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    MatMul {
        a: NodeId,
        w: NodeId,
    },
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<Real>,
    },
    WeightedSum {
        terms: Vec<(NodeId, Vec<Real>)>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Real>,
        offsets: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    InfoNce {
        a: NodeId,
        b: NodeId,
        tau: Real,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => unreachable!(),
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn requires_grad(&self, n: NodeId) -> bool {
        self.nodes[n.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, n: NodeId) -> Real {
        let v = self.value(n);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, &[])
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, &[])
    }

    /// Leaf borrowing a parameter value; it carries gradient iff trainable.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Rows `idx` of a matrix node (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> Result<NodeId> {
        let s = self.value(src);
        let cols = s.cols();
        let rows = s.rows();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of a {rows}-row table")));
            }
            data.extend_from_slice(s.row(i));
        }
        let t = Tensor::matrix(idx.len(), cols, data);
        Ok(self.push(
            Cow::Owned(t),
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut t = self.value(a).clone();
        assert_eq!(t.shape(), self.value(b).shape(), "add: shape mismatch");
        t.add_assign(self.value(b));
        self.push(Cow::Owned(t), Op::Add(a, b), &[a, b])
    }

    /// `x (n×d) + bias (d)` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut t = self.value(x).clone();
        let b = self.value(bias);
        let d = t.cols();
        assert_eq!(b.len(), d, "add_bias: width mismatch");
        for r in t.data_mut().chunks_mut(d) {
            for (v, bb) in r.iter_mut().zip(b.data()) {
                *v += *bb;
            }
        }
        self.push(Cow::Owned(t), Op::AddBias { x, bias }, &[x, bias])
    }

    /// `a (n×k) · w (k×m)`.
    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let (av, wv) = (self.value(a), self.value(w));
        let (n, k, m) = (av.rows(), av.cols(), wv.cols());
        assert_eq!(wv.rows(), k, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        tensor::matmul_acc(av.data(), wv.data(), n, k, m, &mut out);
        self.push(
            Cow::Owned(Tensor::matrix(n, m, out)),
            Op::MatMul { a, w },
            &[a, w],
        )
    }

    /// `a (n×k) · bᵀ` for `b (m×k)`; scores against an embedding table.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(bv.cols(), k, "matmul_nt: inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        tensor::matmul_nt_acc(av.data(), bv.data(), n, k, m, &mut out);
        self.push(
            Cow::Owned(Tensor::matrix(n, m, out)),
            Op::MatMulNt { a, b },
            &[a, b],
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: Real) -> NodeId {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            Cow::Owned(Tensor::matrix(n, d, out)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v = gelu(*v);
        }
        self.push(Cow::Owned(t), Op::Gelu(x), &[x])
    }

    /// Inverted dropout with drop probability `p`; `rng = None` is eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: Real, rng: Option<&mut R>) -> NodeId {
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
        let n = self.value(x).len();
        let mask: Vec<Real> = (0..n)
            .map(|_| {
                if (rng.random::<f64>() as Real) < keep {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let mut t = self.value(x).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= *m;
        }
        self.push(Cow::Owned(t), Op::Dropout { x, mask }, &[x])
    }

    /// `Σ_t coef_t[row] · x_t[row]`. Each coefficient vector has one entry per
    /// row or a single broadcast entry. Terms whose coefficients are all zero
    /// contribute nothing, not even a signed zero.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, Vec<Real>)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let shape = self.value(terms[0].0).shape().to_vec();
        let rows = self.value(terms[0].0).rows();
        let mut out = Tensor::zeros(&shape);
        let mut first = true;
        for (node, coefs) in terms {
            let v = self.value(*node);
            assert_eq!(v.shape(), &shape[..], "weighted_sum: shape mismatch");
            assert!(
                coefs.len() == 1 || coefs.len() == rows,
                "weighted_sum: coefficient count"
            );
            if coefs.iter().all(|c| *c == 0.0) {
                continue;
            }
            for r in 0..rows {
                let c = if coefs.len() == 1 { coefs[0] } else { coefs[r] };
                let src = v.row(r);
                let dst = out.row_mut(r);
                if first {
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o = c * s;
                    }
                } else if c != 0.0 {
                    axpy(c, src, dst);
                }
            }
            first = false;
        }
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(
            Cow::Owned(out),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &inputs,
        )
    }

    /// Scaled dot-product attention split into `heads` column blocks.
    ///
    /// Returns the concatenated per-head context (before any output
    /// projection), one row per query. With `causal`, every segment must be
    /// square and query `i` attends keys `0..=i` of its segment. A segment
    /// with no keys yields zero context rows.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d} is not divisible by {heads} heads"
            )));
        }
        if kv.cols() != d || vv.cols() != d {
            return Err(Error::InvalidArgument("attention: width mismatch".into()));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::InvalidArgument(
                "attention: key and value counts differ".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut out = vec![0.0; qv.rows() * d];
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for s in segments {
            if causal && s.q_len != s.k_len {
                return Err(Error::InvalidArgument(
                    "causal attention needs square segments".into(),
                ));
            }
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() {
                return Err(Error::Index("attention segment out of range".into()));
            }
            offsets.push(total);
            total += heads * s.q_len * s.k_len;
        }
        let mut probs = vec![0.0; total];
        for (s, &off) in segments.iter().zip(&offsets) {
            if s.k_len == 0 {
                continue;
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.q_len {
                    let qi = &qv.row(s.q_start + i)[cols.clone()];
                    let p = &mut probs[off + (h * s.q_len + i) * s.k_len..][..s.k_len];
                    let visible = if causal { i + 1 } else { s.k_len };
                    for j in 0..visible {
                        p[j] = dot(qi, &kv.row(s.k_start + j)[cols.clone()]) * scale;
                    }
                    tensor::softmax_in_place(&mut p[..visible]);
                    let o = &mut out[(s.q_start + i) * d + h * dh..][..dh];
                    for j in 0..visible {
                        axpy(p[j], &vv.row(s.k_start + j)[cols.clone()], o);
                    }
                }
            }
        }
        let n = qv.rows();
        Ok(self.push(
            Cow::Owned(Tensor::matrix(n, d, out)),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
                offsets,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights of an attention node for one segment, head and
    /// query: a slice of `k_len` values (zeros past the causal horizon).
    pub fn attention_weights(&self, n: NodeId, segment: usize, head: usize, query: usize) -> &[Real] {
        match &self.nodes[n.0].op {
            Op::Attention {
                segments,
                probs,
                offsets,
                ..
            } => {
                let s = segments[segment];
                &probs[offsets[segment] + (head * s.q_len + query) * s.k_len..][..s.k_len]
            }
            _ => panic!("not an attention node"),
        }
    }

    /// Mean over rows of `−log softmax(logits_row)[target_row]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != targets.len() || targets.is_empty() {
            return Err(Error::InvalidArgument(
                "cross_entropy: one target per row required".into(),
            ));
        }
        let m = l.cols();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(Error::Index(format!("target {t} of {m} classes")));
            }
            let row = l.row(r);
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as Real;
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Symmetric in-batch InfoNCE with inner-product similarity.
    ///
    /// Row `i` of `a` and row `i` of `b` form a positive pair; every other row
    /// of either matrix is a negative. The result is the mean over pairs of
    /// the sum of both directional terms.
    pub fn info_nce(&mut self, a: NodeId, b: NodeId, tau: Real) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rows() == 0 {
            return Err(Error::InvalidArgument(
                "info_nce needs two equally shaped, nonempty batches".into(),
            ));
        }
        let loss = info_nce_rows(av, bv, tau, |_, _, _| {});
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::InfoNce { a, b, tau },
            &[a, b],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.map
                        .entry(*id)
                        .and_modify(|t| t.add_assign(&g))
                        .or_insert(g);
                }
                Op::Gather { src, idx } => {
                    self.acc(&mut grads, *src, |gs| {
                        for (r, &i) in idx.iter().enumerate() {
                            axpy(1.0, g.row(r), gs.row_mut(i));
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |ga| ga.add_assign(&g));
                    self.acc(&mut grads, *b, |gb| gb.add_assign(&g));
                }
                Op::AddBias { x, bias } => {
                    self.acc(&mut grads, *x, |gx| gx.add_assign(&g));
                    self.acc(&mut grads, *bias, |gb| {
                        let d = gb.len();
                        for r in g.data().chunks(d) {
                            axpy(1.0, r, gb.data_mut());
                        }
                    });
                }
                Op::MatMul { a, w } => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let (n, k, m) = (av.rows(), av.cols(), wv.cols());
                    self.acc(&mut grads, *a, |ga| {
                        tensor::matmul_nt_acc(g.data(), wv.data(), n, m, k, ga.data_mut())
                    });
                    self.acc(&mut grads, *w, |gw| {
                        tensor::matmul_tn_acc(av.data(), g.data(), n, k, m, gw.data_mut())
                    });
                }
                Op::MatMulNt { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                    self.acc(&mut grads, *a, |ga| {
                        tensor::matmul_acc(g.data(), bv.data(), n, m, k, ga.data_mut())
                    });
                    self.acc(&mut grads, *b, |gb| {
                        tensor::matmul_tn_acc(g.data(), av.data(), n, m, k, gb.data_mut())
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = g.cols();
                    let n = g.rows();
                    let gam = self.value(*gamma).data();
                    self.acc(&mut grads, *gamma, |gg| {
                        for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                gg.data_mut()[c] += gr[c] * xr[c];
                            }
                        }
                    });
                    self.acc(&mut grads, *beta, |gb| {
                        for gr in g.data().chunks(d) {
                            axpy(1.0, gr, gb.data_mut());
                        }
                    });
                    self.acc(&mut grads, *x, |gx| {
                        let dn = d as Real;
                        for r in 0..n {
                            let gr = g.row(r);
                            let xr = &xhat[r * d..(r + 1) * d];
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for c in 0..d {
                                let dxh = gr[c] * gam[c];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xr[c];
                            }
                            let out = gx.row_mut(r);
                            for c in 0..d {
                                let dxh = gr[c] * gam[c];
                                out[c] += inv_std[r] / dn * (dn * dxh - sum_dxh - xr[c] * sum_dxh_xh);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    self.acc(&mut grads, *x, |gx| {
                        for ((o, gi), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                            *o += gi * gelu_grad(*xi);
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    self.acc(&mut grads, *x, |gx| {
                        for ((o, gi), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                            *o += gi * m;
                        }
                    });
                }
                Op::WeightedSum { terms } => {
                    for (node, coefs) in terms {
                        if coefs.iter().all(|c| *c == 0.0) {
                            continue;
                        }
                        self.acc(&mut grads, *node, |gn| {
                            for r in 0..g.rows() {
                                let c = if coefs.len() == 1 { coefs[0] } else { coefs[r] };
                                if c != 0.0 {
                                    axpy(c, g.row(r), gn.row_mut(r));
                                }
                            }
                        });
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                    offsets,
                } => {
                    let (gq, gk, gv) = self.attention_backward(
                        &g, *q, *k, *v, segments, *heads, probs, offsets,
                    );
                    self.acc(&mut grads, *q, |t| t.add_assign(&gq));
                    self.acc(&mut grads, *k, |t| t.add_assign(&gk));
                    self.acc(&mut grads, *v, |t| t.add_assign(&gv));
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let up = g.data()[0] / targets.len() as Real;
                    self.acc(&mut grads, *logits, |gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let mut p = lv.row(r).to_vec();
                            tensor::softmax_in_place(&mut p);
                            p[t] -= 1.0;
                            axpy(up, &p, gl.row_mut(r));
                        }
                    });
                }
                Op::InfoNce { a, b, tau } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let up = g.data()[0];
                    let bsz = av.rows();
                    let d = av.cols();
                    let mut gz = vec![0.0; 2 * bsz * d];
                    info_nce_rows(av, bv, *tau, |i, j, coef| {
                        // coef = ∂loss/∂s_ij where s_ij = z_i·z_j / τ
                        let c = up * coef / tau;
                        let zi = if i < bsz { av.row(i) } else { bv.row(i - bsz) };
                        let zj = if j < bsz { av.row(j) } else { bv.row(j - bsz) };
                        axpy(c, zj, &mut gz[i * d..(i + 1) * d]);
                        axpy(c, zi, &mut gz[j * d..(j + 1) * d]);
                    });
                    self.acc(&mut grads, *a, |ga| axpy(1.0, &gz[..bsz * d], ga.data_mut()));
                    self.acc(&mut grads, *b, |gb| axpy(1.0, &gz[bsz * d..], gb.data_mut()));
                }
            }
        }
        out
    }

    fn acc<F: FnOnce(&mut Tensor)>(&self, grads: &mut [Option<Tensor>], n: NodeId, f: F) {
        if !self.nodes[n.0].requires_grad {
            return;
        }
        let slot = &mut grads[n.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros_like(self.value(n)));
        }
        f(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
        probs: &[Real],
        offsets: &[usize],
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut gq = Tensor::zeros_like(qv);
        let mut gk = Tensor::zeros_like(kv);
        let mut gv = Tensor::zeros_like(vv);
        let mut dp = Vec::new();
        for (s, &off) in segments.iter().zip(offsets) {
            if s.k_len == 0 {
                continue;
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.q_len {
                    let p = &probs[off + (h * s.q_len + i) * s.k_len..][..s.k_len];
                    let go = &g.row(s.q_start + i)[cols.clone()];
                    // Zero-probability keys (causally masked) contribute
                    // nothing, so the trailing run of them is skipped.
                    let visible = p.iter().rposition(|x| *x != 0.0).map_or(0, |x| x + 1);
                    dp.clear();
                    let mut weighted = 0.0;
                    for j in 0..visible {
                        let dpj = dot(go, &vv.row(s.k_start + j)[cols.clone()]);
                        dp.push(dpj);
                        weighted += p[j] * dpj;
                        axpy(p[j], go, &mut gv.row_mut(s.k_start + j)[cols.clone()]);
                    }
                    let qi = qv.row(s.q_start + i)[cols.clone()].to_vec();
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(
                            ds,
                            &kv.row(s.k_start + j)[cols.clone()],
                            &mut gq.row_mut(s.q_start + i)[cols.clone()],
                        );
                        axpy(ds, &qi, &mut gk.row_mut(s.k_start + j)[cols.clone()]);
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

/// Evaluates the symmetric InfoNCE loss and reports, through `on_grad`, the
/// derivative of the loss with respect to every similarity logit `s_ij`
/// (rows `0..B` are `a`, rows `B..2B` are `b`).
fn info_nce_rows<F: FnMut(usize, usize, Real)>(a: &Tensor, b: &Tensor, tau: Real, mut on_grad: F) -> Real {
    let bsz = a.rows();
    let n = 2 * bsz;
    let row = |i: usize| if i < bsz { a.row(i) } else { b.row(i - bsz) };
    let mut total = 0.0;
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let pos = (i + bsz) % n;
        for j in 0..n {
            logits[j] = if j == i {
                Real::NEG_INFINITY
            } else {
                dot(row(i), row(j)) / tau
            };
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[pos];
        for j in 0..n {
            if j == i {
                continue;
            }
            let p = (logits[j] - lse).exp();
            let coef = (p - if j == pos { 1.0 } else { 0.0 }) / bsz as Real;
            on_grad(i, j, coef);
        }
    }
    total / bsz as Real
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
