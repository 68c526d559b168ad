//! Transformer building blocks: RMSNorm, SwiGLU MLP, RoPE and grouped-query
//! attention with Q/K/V biases.
//!
//! Parameter bundles hold graph handles ([`Var`]); the model binds its
//! stored tensors into a graph and hands the handles to these functions.

use crate::autograd::{Graph, Op, SeqLayout, Var};
use crate::tensor::{Result, TensorError};

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GqaParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub b_q: Var,
    pub b_k: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl GqaParams {
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    fn validate(&self, g: &Graph, d_model: usize) -> Result<()> {
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(TensorError::Invalid(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        let q = self.n_heads * self.head_dim;
        let kv = self.n_kv_heads * self.head_dim;
        let expect = [
            (self.w_q, vec![d_model, q]),
            (self.w_k, vec![d_model, kv]),
            (self.w_v, vec![d_model, kv]),
            (self.w_o, vec![q, d_model]),
        ];
        for (v, shape) in expect {
            if g.shape(v) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "gqa_attention",
                    lhs: g.shape(v).to_vec(),
                    rhs: shape,
                });
            }
        }
        for (b, n) in [(self.b_q, q), (self.b_k, kv), (self.b_v, kv)] {
            if g.value(b).len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "gqa_attention",
                    lhs: g.shape(b).to_vec(),
                    rhs: vec![n],
                });
            }
        }
        Ok(())
    }
}

pub fn rmsnorm(g: &mut Graph, x: Var, p: &NormParams) -> Result<Var> {
    g.rmsnorm(x, p.gamma, p.eps)
}

/// `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
pub fn swiglu_mlp(g: &mut Graph, x: Var, p: &MlpParams) -> Result<Var> {
    let gate = g.matmul(x, p.w_gate)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(x, p.w_up)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, p.w_down)
}

/// RoPE on a `[T × H × head_dim]` (or `[T × H·head_dim]`) tensor.
pub fn rope_apply(g: &mut Graph, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    match shape.as_slice() {
        [t, h, d] => {
            let flat = g.reshape(x, vec![*t, h * d])?;
            let rotated = g.rope(flat, *d, positions, theta)?;
            g.reshape(rotated, shape)
        }
        _ => Err(TensorError::Invalid(format!(
            "rope_apply expects [T × H × head_dim], got {shape:?}"
        ))),
    }
}

/// `x·W + b` with the bias expanded over rows.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let rows = g.shape(y)[0];
    let bb = g.broadcast_rows(b, rows)?;
    g.add(y, bb)
}

/// Causal grouped-query attention. Returns `(y, h_attn)` where `h_attn` is
/// the concatenated head output before `W_O` and `y = h_attn · W_O`.
pub fn gqa_attention(
    g: &mut Graph,
    x: Var,
    p: &GqaParams,
    theta: f64,
    layout: SeqLayout,
) -> Result<(Var, Var)> {
    let d_model = g.shape(x)[1];
    p.validate(g, d_model)?;
    let positions = layout.positions();
    let q = affine(g, x, p.w_q, p.b_q)?;
    let k = affine(g, x, p.w_k, p.b_k)?;
    let v = affine(g, x, p.w_v, p.b_v)?;
    let q = g.rope(q, p.head_dim, &positions, theta)?;
    let k = g.rope(k, p.head_dim, &positions, theta)?;
    let h = g.causal_attention(q, k, v, p.n_heads, p.n_kv_heads, p.head_dim, layout)?;
    let y = g.matmul(h, p.w_o)?;
    Ok((y, h))
}

/// Saved forward state of a fused causal attention node.
pub(crate) struct AttentionSaved {
    pub(crate) q: Var,
    pub(crate) k: Var,
    pub(crate) v: Var,
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
    layout: SeqLayout,
    probs: Vec<f64>,
}

impl AttentionSaved {
    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub(crate) fn backward(&self, g: &Graph, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (q, k, v) = (g.value(self.q).data(), g.value(self.k).data(), g.value(self.v).data());
        let (hd, nh, nkv) = (self.head_dim, self.n_heads, self.n_kv_heads);
        let (qw, kw) = (nh * hd, nkv * hd);
        let t_len = self.layout.seq;
        let group = nh / nkv;
        let scale = self.scale();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dp = vec![0.0; t_len];
        for b in 0..self.layout.batch {
            for h in 0..nh {
                let kvh = h / group;
                for t in 0..t_len {
                    let qrow = (b * t_len + t) * qw + h * hd;
                    let prow = ((b * nh + h) * t_len + t) * t_len;
                    let go = &gout[qrow..qrow + hd];
                    let mut dot = 0.0;
                    for s in 0..=t {
                        let vrow = (b * t_len + s) * kw + kvh * hd;
                        let p = self.probs[prow + s];
                        let mut acc = 0.0;
                        for j in 0..hd {
                            acc += go[j] * v[vrow + j];
                            dv[vrow + j] += p * go[j];
                        }
                        dp[s] = acc;
                        dot += p * acc;
                    }
                    for s in 0..=t {
                        let ds = self.probs[prow + s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * t_len + s) * kw + kvh * hd;
                        for j in 0..hd {
                            dq[qrow + j] += ds * k[krow + j];
                            dk[krow + j] += ds * q[qrow + j];
                        }
                    }
                }
            }
        }
        vec![(self.q, dq), (self.k, dk), (self.v, dv)]
    }
}

impl Graph {
    /// Fused causal scaled dot-product attention over packed sequences.
    /// Query head `i` reads KV head `i / (n_heads / n_kv_heads)`.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
        layout: SeqLayout,
    ) -> Result<Var> {
        let (qw, kw) = (n_heads * head_dim, n_kv_heads * head_dim);
        let rows = layout.rows();
        if self.shape(q) != [rows, qw] || self.shape(k) != [rows, kw] || self.shape(v) != [rows, kw] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
            return Err(TensorError::Invalid(format!(
                "n_heads {n_heads} not divisible by n_kv_heads {n_kv_heads}"
            )));
        }
        let group = n_heads / n_kv_heads;
        let t_len = layout.seq;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * qw];
        let mut probs = vec![0.0; layout.batch * n_heads * t_len * t_len];
        for b in 0..layout.batch {
            for h in 0..n_heads {
                let kvh = h / group;
                for t in 0..t_len {
                    let qrow = (b * t_len + t) * qw + h * head_dim;
                    let prow = ((b * n_heads + h) * t_len + t) * t_len;
                    let p = &mut probs[prow..prow + t + 1];
                    let mut max = f64::NEG_INFINITY;
                    for (s, ps) in p.iter_mut().enumerate() {
                        let krow = (b * t_len + s) * kw + kvh * head_dim;
                        let dot: f64 = (0..head_dim).map(|j| qd[qrow + j] * kd[krow + j]).sum();
                        *ps = dot * scale;
                        max = max.max(*ps);
                    }
                    let mut sum = 0.0;
                    for ps in p.iter_mut() {
                        *ps = (*ps - max).exp();
                        sum += *ps;
                    }
                    for ps in p.iter_mut() {
                        *ps /= sum;
                    }
                    for (s, ps) in p.iter().enumerate() {
                        let vrow = (b * t_len + s) * kw + kvh * head_dim;
                        for j in 0..head_dim {
                            out[qrow + j] += ps * vd[vrow + j];
                        }
                    }
                }
            }
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            n_heads,
            n_kv_heads,
            head_dim,
            layout,
            probs,
        };
        self.push(vec![rows, qw], out, Op::Attention(Box::new(saved)))
    }

    /// Attention weights recorded by a `causal_attention` node, as
    /// `[batch][head][query][key]` flattened.
    pub fn attention_weights(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }
}
