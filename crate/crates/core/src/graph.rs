//! Reverse-mode differentiation over a flat tape of tensor operations.
//!
//! A [`Graph`] records every forward operation; [`Graph::backward`] walks the
//! tape in reverse and accumulates exact gradients into every node that
//! (transitively) depends on a gradient-tracked leaf. Gradients are reset at
//! the start of each `backward` call; repeated calls recompute from scratch
//! rather than accumulating, so training steps stay stateless.
//!
//! All kernels run single-threaded with a fixed reduction order; identical
//! inputs produce bit-identical outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    /// Fused scaled-dot-product attention: scores, row softmax, and the
    /// weighted sum over values in one pass. The softmax probabilities are
    /// materialized once for the backward sweep.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    /// Row r of the output is row r of `x` plus row `r % period` of `table`.
    AddCyclic {
        x: NodeId,
        table: NodeId,
        period: usize,
    },
    Gelu {
        x: NodeId,
        inner_tanh: Vec<f64>,
    },
    Relu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    AttnScores {
        q: NodeId,
        k: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    AttnApply {
        attn: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MeanPool {
        x: NodeId,
        batch: usize,
        seq: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    SmoothedCe {
        logits: NodeId,
        labels: Vec<usize>,
        epsilon: f64,
        probs: Vec<f64>,
    },
}

/// Tape of tensor operations supporting reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    /// `None` if the node does not require gradients or was unreachable.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.values[a.0].dims2()?;
        let (kb, n) = self.values[b.0].dims2()?;
        if ka != kb {
            return Err(TensorError::MatmulMismatch {
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(
            self.values[a.0].data(),
            self.values[b.0].data(),
            m,
            ka,
            n,
            &mut out,
        );
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, req, Op::Matmul { a, b }))
    }

    /// `x @ w + bias` in one op: `[R, K] @ [K, N] + [N]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, kx) = self.values[x.0].dims2()?;
        let (kw, n) = self.values[w.0].dims2()?;
        if kx != kw {
            return Err(TensorError::MatmulMismatch {
                lhs: self.values[x.0].shape().to_vec(),
                rhs: self.values[w.0].shape().to_vec(),
            });
        }
        if self.values[bias.0].shape() != [n] {
            return Err(TensorError::BinaryShapeMismatch {
                op: "linear",
                lhs: self.values[w.0].shape().to_vec(),
                rhs: self.values[bias.0].shape().to_vec(),
            });
        }
        let bd = self.values[bias.0].data();
        let mut out = Vec::with_capacity(r * n);
        for _ in 0..r {
            out.extend_from_slice(bd);
        }
        mm_nn(
            self.values[x.0].data(),
            self.values[w.0].data(),
            r,
            kx,
            n,
            &mut out,
        );
        let req = self.req(x) || self.req(w) || self.req(bias);
        Ok(self.push(
            Tensor::new(vec![r, n], out)?,
            req,
            Op::Linear { x, w, bias },
        ))
    }

    /// Fused multi-head attention: per (batch, head) block this computes
    /// scaled scores, a stable row softmax, and the weighted value sum
    /// without materializing intermediate score tensors on the tape.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, m) = self.values[q.0].dims2()?;
        self.check_attn("attention", k, rows, m, batch, seq, heads)?;
        self.check_attn("attention", v, rows, m, batch, seq, heads)?;
        let dh = m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.values[q.0].data();
        let kd = self.values[k.0].data();
        let vd = self.values[v.0].data();
        let req = self.req(q) || self.req(k) || self.req(v);

        // Per-group score block stays cache-resident; the probabilities are
        // spilled to a full buffer only when a backward pass will need them.
        let mut probs = Vec::with_capacity(if req { batch * heads * seq * seq } else { 0 });
        let mut out = vec![0.0; batch * seq * m];
        let mut scores = vec![0.0; seq * seq];
        let mut q_t = vec![0.0; dh * seq];
        let mut k_t = vec![0.0; dh * seq];
        let mut v_t = vec![0.0; dh * seq];
        let mut o_t = vec![0.0; dh * seq];
        for b in 0..batch {
            for h in 0..heads {
                gather_head_t(qd, &mut q_t, b, h, seq, m, dh, scale);
                gather_head_t(kd, &mut k_t, b, h, seq, m, dh, 1.0);
                gather_head_t(vd, &mut v_t, b, h, seq, m, dh, 1.0);
                scores.fill(0.0);
                mm_tn(&q_t, &k_t, dh, seq, seq, &mut scores);
                for row in scores.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                if req {
                    probs.extend_from_slice(&scores);
                }
                o_t.fill(0.0);
                mm_nt(&v_t, &scores, dh, seq, seq, &mut o_t);
                scatter_head_t(&o_t, &mut out, b, h, seq, m, dh);
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch * seq, m], out)?,
            req,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(TensorError::BinaryShapeMismatch {
                op: name,
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, data)?, req, op))
    }

    /// `[R, C] + [C]` row broadcast.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.values[x.0].dims2()?;
        if self.values[bias.0].shape() != [c] {
            return Err(TensorError::BinaryShapeMismatch {
                op: "add_bias",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: self.values[bias.0].shape().to_vec(),
            });
        }
        let bd = self.values[bias.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        let req = self.req(x) || self.req(bias);
        Ok(self.push(Tensor::new(vec![r, c], data)?, req, Op::AddBias { x, bias }))
    }

    /// Adds `table[r % period]` to row `r`; used for positional encodings
    /// where rows cycle through sequence positions.
    pub fn add_cyclic(
        &mut self,
        x: NodeId,
        table: NodeId,
        period: usize,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.values[x.0].dims2()?;
        let (p, tc) = self.values[table.0].dims2()?;
        if p != period || tc != c || r % period != 0 {
            return Err(TensorError::Contract {
                op: "add_cyclic",
                expected: format!("table [{period}, {c}] and row count divisible by {period}"),
                got: self.values[table.0].shape().to_vec(),
            });
        }
        let td = self.values[table.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let trow = &td[(i % period) * c..][..c];
            for (v, t) in row.iter_mut().zip(trow) {
                *v += t;
            }
        }
        let req = self.req(x) || self.req(table);
        Ok(self.push(
            Tensor::new(vec![r, c], data)?,
            req,
            Op::AddCyclic { x, table, period },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.values[x.0].data();
        let mut inner_tanh = Vec::with_capacity(xs.len());
        let data: Vec<f64> = xs
            .iter()
            .map(|&v| {
                let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                inner_tanh.push(t);
                0.5 * v * (1.0 + t)
            })
            .collect();
        let shape = self.values[x.0].shape().to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Gelu { x, inner_tanh }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<f64> = self.values[x.0].data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.values[x.0].shape().to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Relu { x }))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// the affine rescale `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.values[x.0].dims2()?;
        if self.values[gamma.0].shape() != [c] || self.values[beta.0].shape() != [c] {
            return Err(TensorError::Contract {
                op: "layer_norm",
                expected: format!("gamma and beta of shape [{c}]"),
                got: self.values[gamma.0].shape().to_vec(),
            });
        }
        let xs = self.values[x.0].data();
        let gd = self.values[gamma.0].data();
        let bd = self.values[beta.0].data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..][..c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * gd[j] + bd[j];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], data)?,
            req,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Stable softmax along the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.values[x.0].dims2()?;
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let req = self.req(x);
        Ok(self.push(Tensor::new(vec![r, c], data)?, req, Op::SoftmaxRows { x }))
    }

    /// Scaled dot-product attention scores. `q` and `k` are `[batch*seq, m]`;
    /// the result is `[batch*heads*seq, seq]` with rows grouped by (batch,
    /// head, query position) and scaled by `1/sqrt(m/heads)`.
    pub fn attn_scores(
        &mut self,
        q: NodeId,
        k: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, m) = self.values[q.0].dims2()?;
        self.check_attn("attn_scores", k, rows, m, batch, seq, heads)?;
        let dh = m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.values[q.0].data();
        let kd = self.values[k.0].data();
        let mut out = vec![0.0; batch * heads * seq * seq];
        let mut q_t = vec![0.0; dh * seq];
        let mut k_t = vec![0.0; dh * seq];
        for b in 0..batch {
            for h in 0..heads {
                // Transposed per-head copies [dh, seq] keep every inner loop
                // running over the full sequence length; the scale folds into
                // the gathered queries.
                gather_head_t(qd, &mut q_t, b, h, seq, m, dh, scale);
                gather_head_t(kd, &mut k_t, b, h, seq, m, dh, 1.0);
                let dst = &mut out[((b * heads + h) * seq * seq)..][..seq * seq];
                mm_tn(&q_t, &k_t, dh, seq, seq, dst);
            }
        }
        let req = self.req(q) || self.req(k);
        Ok(self.push(
            Tensor::new(vec![batch * heads * seq, seq], out)?,
            req,
            Op::AttnScores {
                q,
                k,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Applies attention weights `[batch*heads*seq, seq]` to values
    /// `[batch*seq, m]`, producing `[batch*seq, m]`.
    pub fn attn_apply(
        &mut self,
        attn: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, m) = self.values[v.0].dims2()?;
        self.check_attn("attn_apply", v, rows, m, batch, seq, heads)?;
        let (arows, acols) = self.values[attn.0].dims2()?;
        if arows != batch * heads * seq || acols != seq {
            return Err(TensorError::Contract {
                op: "attn_apply",
                expected: format!("attention of shape [{}, {seq}]", batch * heads * seq),
                got: self.values[attn.0].shape().to_vec(),
            });
        }
        let dh = m / heads;
        let ad = self.values[attn.0].data();
        let vd = self.values[v.0].data();
        let mut out = vec![0.0; batch * seq * m];
        let mut v_t = vec![0.0; dh * seq];
        let mut o_t = vec![0.0; dh * seq];
        for b in 0..batch {
            for h in 0..heads {
                gather_head_t(vd, &mut v_t, b, h, seq, m, dh, 1.0);
                o_t.fill(0.0);
                let a_bh = &ad[((b * heads + h) * seq * seq)..][..seq * seq];
                // out_t = V_t @ A^T
                mm_nt(&v_t, a_bh, dh, seq, seq, &mut o_t);
                scatter_head_t_add(&o_t, &mut out, b, h, seq, m, dh);
            }
        }
        let req = self.req(attn) || self.req(v);
        Ok(self.push(
            Tensor::new(vec![batch * seq, m], out)?,
            req,
            Op::AttnApply {
                attn,
                v,
                batch,
                seq,
                heads,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn check_attn(
        &self,
        op: &'static str,
        other: NodeId,
        rows: usize,
        m: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<(), TensorError> {
        let ok = rows == batch * seq
            && heads > 0
            && m.is_multiple_of(heads)
            && self.values[other.0].shape() == [rows, m];
        if ok {
            Ok(())
        } else {
            Err(TensorError::Contract {
                op,
                expected: format!(
                    "[{}, m] operands with m divisible by {heads} heads",
                    batch * seq
                ),
                got: self.values[other.0].shape().to_vec(),
            })
        }
    }

    /// Mean over the sequence axis: `[batch*seq, m]` -> `[batch, m]`.
    pub fn mean_pool(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, m) = self.values[x.0].dims2()?;
        if rows != batch * seq {
            return Err(TensorError::Contract {
                op: "mean_pool",
                expected: format!("[{}, m]", batch * seq),
                got: self.values[x.0].shape().to_vec(),
            });
        }
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; batch * m];
        for b in 0..batch {
            let orow = &mut out[b * m..][..m];
            for i in 0..seq {
                let xrow = &xd[(b * seq + i) * m..][..m];
                for (o, v) in orow.iter_mut().zip(xrow) {
                    *o += v;
                }
            }
            let inv = 1.0 / seq as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(vec![batch, m], out)?,
            req,
            Op::MeanPool { x, batch, seq },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` so the expected
    /// value is unchanged. `p == 0` is a no-op that returns `x` itself.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract {
                op: "dropout",
                expected: "p in [0, 1)".into(),
                got: self.values[x.0].shape().to_vec(),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.values[x.0].numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = self.values[x.0]
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.values[x.0].shape().to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.values[x.0].data().iter().sum();
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(s), req, Op::Sum { x }))
    }

    /// Label-smoothed cross-entropy from logits via a fused log-softmax,
    /// averaged over rows. The target weight for class k of a row labeled y is
    /// `(1-epsilon) * 1{y=k} + epsilon/K`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        epsilon: f64,
    ) -> Result<NodeId, TensorError> {
        let (rows, classes) = self.values[logits.0].dims2()?;
        if labels.len() != rows {
            return Err(TensorError::Contract {
                op: "smoothed_cross_entropy",
                expected: format!("{rows} labels"),
                got: vec![labels.len()],
            });
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(TensorError::LabelOutOfRange {
                    row,
                    label,
                    classes,
                });
            }
        }
        let ld = self.values[logits.0].data();
        let uniform = epsilon / classes as f64;
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let lrow = &ld[i * classes..][..classes];
            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = lrow.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let mut row_loss = 0.0;
            for (k, &l) in lrow.iter().enumerate() {
                let w = if k == label { 1.0 - epsilon + uniform } else { uniform };
                row_loss += w * (lse - l);
                probs[i * classes + k] = (l - lse).exp();
            }
            total += row_loss;
        }
        let loss = total / rows as f64;
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::SmoothedCe {
                logits,
                labels: labels.to_vec(),
                epsilon,
                probs,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Gradients from any previous
    /// call are discarded first; each call computes fresh exact gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.values[loss.0].is_scalar() {
            return Err(TensorError::BackwardNonScalar(
                self.values[loss.0].shape().to_vec(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.values.len()).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Leaves keep their gradient for the caller to read.
            if matches!(self.ops[i], Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: ops and values are read, grads are written.
        match &self.ops[i] {
            Op::Leaf => unreachable!("leaf handled in backward"),
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.values[a.0].dims2().expect("checked in forward");
                let n = self.values[b.0].shape()[1];
                if self.requires[a.0] {
                    let mut da = vec![0.0; m * k];
                    mm_nt(g, self.values[b.0].data(), m, n, k, &mut da);
                    accumulate(&mut self.grads[a.0], &da);
                }
                if self.requires[b.0] {
                    let mut db = vec![0.0; k * n];
                    mm_tn(self.values[a.0].data(), g, m, k, n, &mut db);
                    accumulate(&mut self.grads[b.0], &db);
                }
            }
            Op::Linear { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let (r, k) = self.values[x.0].dims2().expect("checked in forward");
                let n = self.values[w.0].shape()[1];
                if self.requires[x.0] {
                    let mut dx = vec![0.0; r * k];
                    mm_nt(g, self.values[w.0].data(), r, n, k, &mut dx);
                    accumulate(&mut self.grads[x.0], &dx);
                }
                if self.requires[w.0] {
                    let mut dw = vec![0.0; k * n];
                    mm_tn(self.values[x.0].data(), g, r, k, n, &mut dw);
                    accumulate(&mut self.grads[w.0], &dw);
                }
                if self.requires[bias.0] {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut self.grads[bias.0], &db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (qid, kid, vid) = (*q, *k, *v);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let m = self.values[qid.0].shape()[1];
                let dh = m / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = self.values[qid.0].data();
                let kd = self.values[kid.0].data();
                let vd = self.values[vid.0].data();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut g_t = vec![0.0; dh * seq];
                let mut gathered = vec![0.0; dh * seq];
                let mut d_t = vec![0.0; dh * seq];
                let mut ds = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[((b * heads + h) * seq * seq)..][..seq * seq];
                        gather_head_t(g, &mut g_t, b, h, seq, m, dh, 1.0);
                        // dV_t = g_t @ P
                        d_t.fill(0.0);
                        mm_nn(&g_t, p, dh, seq, seq, &mut d_t);
                        scatter_head_t_add(&d_t, &mut dv, b, h, seq, m, dh);
                        // dP = g^T @ V in transposed blocks, then the softmax
                        // Jacobian turns it into dS in place.
                        gather_head_t(vd, &mut gathered, b, h, seq, m, dh, 1.0);
                        ds.fill(0.0);
                        mm_tn(&g_t, &gathered, dh, seq, seq, &mut ds);
                        for (ds_row, p_row) in ds.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                            for (d, pv) in ds_row.iter_mut().zip(p_row) {
                                *d = pv * (*d - dot);
                            }
                        }
                        // dQ_t = scale * K_t @ dS^T
                        gather_head_t(kd, &mut gathered, b, h, seq, m, dh, scale);
                        d_t.fill(0.0);
                        mm_nt(&gathered, &ds, dh, seq, seq, &mut d_t);
                        scatter_head_t_add(&d_t, &mut dq, b, h, seq, m, dh);
                        // dK_t = scale * Q_t @ dS
                        gather_head_t(qd, &mut gathered, b, h, seq, m, dh, scale);
                        d_t.fill(0.0);
                        mm_nn(&gathered, &ds, dh, seq, seq, &mut d_t);
                        scatter_head_t_add(&d_t, &mut dk, b, h, seq, m, dh);
                    }
                }
                if self.requires[qid.0] {
                    accumulate(&mut self.grads[qid.0], &dq);
                }
                if self.requires[kid.0] {
                    accumulate(&mut self.grads[kid.0], &dk);
                }
                if self.requires[vid.0] {
                    accumulate(&mut self.grads[vid.0], &dv);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires[a.0] {
                    accumulate(&mut self.grads[a.0], g);
                }
                if self.requires[b.0] {
                    accumulate(&mut self.grads[b.0], g);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires[a.0] {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(g, y)| g * y)
                        .collect();
                    accumulate(&mut self.grads[a.0], &da);
                }
                if self.requires[b.0] {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(g, x)| g * x)
                        .collect();
                    accumulate(&mut self.grads[b.0], &db);
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = self.values[bias.0].numel();
                if self.requires[x.0] {
                    accumulate(&mut self.grads[x.0], g);
                }
                if self.requires[bias.0] {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut self.grads[bias.0], &db);
                }
            }
            Op::AddCyclic { x, table, period } => {
                let (x, table, period) = (*x, *table, *period);
                let c = self.values[table.0].shape()[1];
                if self.requires[x.0] {
                    accumulate(&mut self.grads[x.0], g);
                }
                if self.requires[table.0] {
                    let mut dt = vec![0.0; period * c];
                    for (r, row) in g.chunks(c).enumerate() {
                        let trow = &mut dt[(r % period) * c..][..c];
                        for (d, gv) in trow.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut self.grads[table.0], &dt);
                }
            }
            Op::Gelu { x, inner_tanh } => {
                let xid = *x;
                if self.requires[xid.0] {
                    let xs = self.values[xid.0].data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xs)
                        .zip(inner_tanh)
                        .map(|((g, &v), &t)| {
                            let sech2 = 1.0 - t * t;
                            let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner)
                        })
                        .collect();
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::Relu { x } => {
                let xid = *x;
                if self.requires[xid.0] {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.values[xid.0].data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (xid, gid, bid) = (*x, *gamma, *beta);
                let c = self.values[gid.0].numel();
                let rows = inv_std.len();
                if self.requires[gid.0] {
                    let mut dg = vec![0.0; c];
                    for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row[j] * xh[j];
                        }
                    }
                    accumulate(&mut self.grads[gid.0], &dg);
                }
                if self.requires[bid.0] {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for j in 0..c {
                            db[j] += row[j];
                        }
                    }
                    accumulate(&mut self.grads[bid.0], &db);
                }
                if self.requires[xid.0] {
                    let gd = self.values[gid.0].data();
                    let mut dx = vec![0.0; rows * c];
                    let cf = c as f64;
                    for i in 0..rows {
                        let grow = &g[i * c..][..c];
                        let xhrow = &xhat[i * c..][..c];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhrow[j];
                        }
                        let istd = inv_std[i];
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            dx[i * c + j] =
                                istd / cf * (cf * dxh - sum_dxhat - xhrow[j] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                let xid = *x;
                if self.requires[xid.0] {
                    let c = self.values[i].shape()[1];
                    let p = self.values[i].data();
                    let mut dx = vec![0.0; p.len()];
                    for (r, (grow, prow)) in g.chunks(c).zip(p.chunks(c)).enumerate() {
                        let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                        for j in 0..c {
                            dx[r * c + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::AttnScores {
                q,
                k,
                batch,
                seq,
                heads,
            } => {
                let (qid, kid) = (*q, *k);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let m = self.values[qid.0].shape()[1];
                let dh = m / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = self.values[qid.0].data();
                let kd = self.values[kid.0].data();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut gathered = vec![0.0; dh * seq];
                let mut d_t = vec![0.0; dh * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let g_bh = &g[((b * heads + h) * seq * seq)..][..seq * seq];
                        // dQ_t = scale * K_t @ g^T
                        gather_head_t(kd, &mut gathered, b, h, seq, m, dh, scale);
                        d_t.fill(0.0);
                        mm_nt(&gathered, g_bh, dh, seq, seq, &mut d_t);
                        scatter_head_t_add(&d_t, &mut dq, b, h, seq, m, dh);
                        // dK_t = scale * Q_t @ g
                        gather_head_t(qd, &mut gathered, b, h, seq, m, dh, scale);
                        d_t.fill(0.0);
                        mm_nn(&gathered, g_bh, dh, seq, seq, &mut d_t);
                        scatter_head_t_add(&d_t, &mut dk, b, h, seq, m, dh);
                    }
                }
                if self.requires[qid.0] {
                    accumulate(&mut self.grads[qid.0], &dq);
                }
                if self.requires[kid.0] {
                    accumulate(&mut self.grads[kid.0], &dk);
                }
            }
            Op::AttnApply {
                attn,
                v,
                batch,
                seq,
                heads,
            } => {
                let (aid, vid) = (*attn, *v);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let m = self.values[vid.0].shape()[1];
                let dh = m / heads;
                let ad = self.values[aid.0].data();
                let vd = self.values[vid.0].data();
                let mut da = vec![0.0; ad.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut g_t = vec![0.0; dh * seq];
                let mut v_t = vec![0.0; dh * seq];
                let mut d_t = vec![0.0; dh * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        gather_head_t(g, &mut g_t, b, h, seq, m, dh, 1.0);
                        let a_bh = &ad[((b * heads + h) * seq * seq)..][..seq * seq];
                        // dA = g_t^T @ V_t
                        gather_head_t(vd, &mut v_t, b, h, seq, m, dh, 1.0);
                        let da_bh = &mut da[((b * heads + h) * seq * seq)..][..seq * seq];
                        mm_tn(&g_t, &v_t, dh, seq, seq, da_bh);
                        // dV_t = g_t @ A
                        d_t.fill(0.0);
                        mm_nn(&g_t, a_bh, dh, seq, seq, &mut d_t);
                        scatter_head_t_add(&d_t, &mut dv, b, h, seq, m, dh);
                    }
                }
                if self.requires[aid.0] {
                    accumulate(&mut self.grads[aid.0], &da);
                }
                if self.requires[vid.0] {
                    accumulate(&mut self.grads[vid.0], &dv);
                }
            }
            Op::MeanPool { x, batch, seq } => {
                let xid = *x;
                let (batch, seq) = (*batch, *seq);
                if self.requires[xid.0] {
                    let m = self.values[xid.0].shape()[1];
                    let inv = 1.0 / seq as f64;
                    let mut dx = vec![0.0; batch * seq * m];
                    for b in 0..batch {
                        let grow = &g[b * m..][..m];
                        for i2 in 0..seq {
                            let drow = &mut dx[(b * seq + i2) * m..][..m];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let xid = *x;
                if self.requires[xid.0] {
                    let dx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::Sum { x } => {
                let xid = *x;
                if self.requires[xid.0] {
                    let dx = vec![g[0]; self.values[xid.0].numel()];
                    accumulate(&mut self.grads[xid.0], &dx);
                }
            }
            Op::SmoothedCe {
                logits,
                labels,
                epsilon,
                probs,
            } => {
                let lid = *logits;
                if self.requires[lid.0] {
                    let classes = self.values[lid.0].shape()[1];
                    let rows = labels.len();
                    let uniform = epsilon / classes as f64;
                    let gscale = g[0] / rows as f64;
                    let mut dl = vec![0.0; rows * classes];
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..classes {
                            let w = if k == label {
                                1.0 - epsilon + uniform
                            } else {
                                uniform
                            };
                            dl[r * classes + k] = gscale * (probs[r * classes + k] - w);
                        }
                    }
                    accumulate(&mut self.grads[lid.0], &dl);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const LAYER_NORM_EPS: f64 = 1e-12;

fn accumulate(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    match slot {
        Some(buf) => {
            for (d, s) in buf.iter_mut().zip(src) {
                *d += s;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

/// Dot product with four fixed-order accumulator lanes. The reduction order
/// is fixed, so results are identical on every run.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let mut acc = [0.0_f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Copy head `h` of `src` (`[batch*seq, m]`) into a transposed dense
/// `[dh, seq]` buffer, scaling on the way. The transpose keeps every matmul
/// over attention blocks running along the sequence axis.
#[allow(clippy::too_many_arguments)]
fn gather_head_t(
    src: &[f64],
    dst: &mut [f64],
    b: usize,
    h: usize,
    seq: usize,
    m: usize,
    dh: usize,
    scale: f64,
) {
    let base = b * seq * m + h * dh;
    for t in 0..dh {
        let drow = &mut dst[t * seq..][..seq];
        for (i, dv) in drow.iter_mut().enumerate() {
            *dv = src[base + i * m + t] * scale;
        }
    }
}

/// Add a transposed `[dh, seq]` head buffer back into its strided position
/// in a `[batch*seq, m]` gradient.
fn scatter_head_t_add(src: &[f64], dst: &mut [f64], b: usize, h: usize, seq: usize, m: usize, dh: usize) {
    let base = b * seq * m + h * dh;
    for t in 0..dh {
        let srow = &src[t * seq..][..seq];
        for (i, sv) in srow.iter().enumerate() {
            dst[base + i * m + t] += sv;
        }
    }
}

/// Overwrite variant of [`scatter_head_t_add`] for disjoint head blocks.
fn scatter_head_t(src: &[f64], dst: &mut [f64], b: usize, h: usize, seq: usize, m: usize, dh: usize) {
    let base = b * seq * m + h * dh;
    for t in 0..dh {
        let srow = &src[t * seq..][..seq];
        for (i, sv) in srow.iter().enumerate() {
            dst[base + i * m + t] = *sv;
        }
    }
}

/// C[m,n] += A[m,k] @ B[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..][..n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] @ B^T where B is [k,n]
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..][..n];
        let orow = &mut out[i * k..][..k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * n..][..n]);
        }
    }
}

/// C[k,n] += A^T @ B where A is [m,k], B is [m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..][..n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Numerically stable in-place softmax over one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Label-smoothed cross-entropy evaluated directly on class probabilities.
///
/// This is the probability-space form of the loss; the graph op
/// [`Graph::smoothed_cross_entropy`] computes the identical quantity from
/// logits through a fused log-softmax. Any probability that is not strictly
/// positive under a nonzero target weight is a domain error.
pub fn smoothed_cross_entropy_from_probs(
    probs: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<f64, TensorError> {
    let (rows, classes) = probs.dims2()?;
    if labels.len() != rows {
        return Err(TensorError::Contract {
            op: "smoothed_cross_entropy_from_probs",
            expected: format!("{rows} labels"),
            got: vec![labels.len()],
        });
    }
    let uniform = epsilon / classes as f64;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::LabelOutOfRange {
                row: r,
                label,
                classes,
            });
        }
        for k in 0..classes {
            let w = if k == label { 1.0 - epsilon + uniform } else { uniform };
            if w == 0.0 {
                continue;
            }
            let p = probs.data()[r * classes + k];
            if p <= 0.0 {
                return Err(TensorError::ProbabilityDomain {
                    row: r,
                    class: k,
                    value: p,
                });
            }
            total -= w * p.ln();
        }
    }
    Ok(total / rows as f64)
}
