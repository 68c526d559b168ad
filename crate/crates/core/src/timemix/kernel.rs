//! Sequential RWKV-7 state recurrence as a single differentiable node.
//!
//! Per head, with value×key state `S` and per-token vectors of length `d`:
//!
//! ```text
//! S_t = S_{t-1} · (diag(w_t) − κ̂_tᵀ (a_t ⊙ κ̂_t)) + v_tᵀ k̃_t
//! o_t = S_t · r_tᵀ
//! ```
//!
//! The transition is applied as `S·diag(w) − (S κ̂)(a ⊙ κ̂)ᵀ`, so a step costs
//! O(d²). Every intermediate state is kept for the reverse pass.

use crate::autograd::{Graph, Op, SeqLayout, Var};
use crate::tensor::{precision, Result, Tensor, TensorError};

use super::TimeMixState;

pub(crate) struct Wkv7Saved {
    inputs: [Var; 6],
    n_heads: usize,
    head_dim: usize,
    layout: SeqLayout,
    /// `S_0..S_T` for every (sequence, head).
    states: Vec<f64>,
}

impl Wkv7Saved {
    pub(crate) fn inputs(&self) -> &[Var; 6] {
        &self.inputs
    }

    fn state_offset(&self, b: usize, h: usize, t: usize) -> usize {
        let d2 = self.head_dim * self.head_dim;
        ((b * self.n_heads + h) * (self.layout.seq + 1) + t) * d2
    }

    pub(crate) fn backward(&self, g: &Graph, gout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let [r, w, k, v, kappa, a] = self.inputs;
        let (rv, wv, kv, vv, cv, av) = (
            g.value(r).data(),
            g.value(w).data(),
            g.value(k).data(),
            g.value(v).data(),
            g.value(kappa).data(),
            g.value(a).data(),
        );
        let d = self.head_dim;
        let width = self.n_heads * d;
        let n = rv.len();
        let (mut dr, mut dw, mut dk, mut dv, mut dc, mut da) = (
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        );
        let mut ds = vec![0.0; d * d];
        let mut u = vec![0.0; d];
        let mut sk = vec![0.0; d];
        let mut db = vec![0.0; d];
        for b in 0..self.layout.batch {
            for h in 0..self.n_heads {
                ds.iter_mut().for_each(|x| *x = 0.0);
                for t in (0..self.layout.seq).rev() {
                    let row = (b * self.layout.seq + t) * width + h * d;
                    let cur = &self.states[self.state_offset(b, h, t + 1)..][..d * d];
                    let prev = &self.states[self.state_offset(b, h, t)..][..d * d];
                    let go = &gout[row..row + d];
                    let rr = &rv[row..row + d];
                    // o = S_t r
                    for i in 0..d {
                        for j in 0..d {
                            ds[i * d + j] += go[i] * rr[j];
                        }
                    }
                    for j in 0..d {
                        dr[row + j] = (0..d).map(|i| cur[i * d + j] * go[i]).sum();
                    }
                    let (ww, kk, vvv, cc, aa) = (
                        &wv[row..row + d],
                        &kv[row..row + d],
                        &vv[row..row + d],
                        &cv[row..row + d],
                        &av[row..row + d],
                    );
                    // S_t = S_{t-1} M + v kᵀ,  M = diag(w) − κ bᵀ,  b = a ⊙ κ
                    for i in 0..d {
                        let dsi = &ds[i * d..(i + 1) * d];
                        dv[row + i] = (0..d).map(|j| dsi[j] * kk[j]).sum();
                        u[i] = (0..d).map(|j| dsi[j] * aa[j] * cc[j]).sum();
                        sk[i] = (0..d).map(|p| prev[i * d + p] * cc[p]).sum();
                    }
                    for j in 0..d {
                        let mut acc_k = 0.0;
                        let mut acc_w = 0.0;
                        let mut acc_b = 0.0;
                        let mut acc_c = 0.0;
                        for i in 0..d {
                            let dsij = ds[i * d + j];
                            acc_k += dsij * vvv[i];
                            acc_w += prev[i * d + j] * dsij;
                            acc_b += sk[i] * dsij;
                            acc_c += prev[i * d + j] * u[i];
                        }
                        dk[row + j] = acc_k;
                        dw[row + j] = acc_w;
                        db[j] = -acc_b;
                        dc[row + j] = -acc_c;
                    }
                    for j in 0..d {
                        da[row + j] = db[j] * cc[j];
                        dc[row + j] += db[j] * aa[j];
                    }
                    // dS_{t-1} = dS Mᵀ
                    for i in 0..d {
                        for p in 0..d {
                            ds[i * d + p] = ds[i * d + p] * ww[p] - u[i] * cc[p];
                        }
                    }
                }
            }
        }
        Ok(vec![(r, dr), (w, dw), (k, dk), (v, dv), (kappa, dc), (a, da)])
    }
}

impl Graph {
    /// Runs the recurrence over packed `[rows × n_heads·head_dim]` signals.
    /// Returns the readout and the final state of every sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn wkv7(
        &mut self,
        r: Var,
        w: Var,
        k: Var,
        v: Var,
        kappa: Var,
        a: Var,
        n_heads: usize,
        head_dim: usize,
        layout: SeqLayout,
        initial: Option<&[TimeMixState]>,
    ) -> Result<(Var, Vec<TimeMixState>)> {
        let d = head_dim;
        let width = n_heads * d;
        let rows = layout.rows();
        for x in [r, w, k, v, kappa, a] {
            if self.shape(x) != [rows, width] {
                return Err(TensorError::ShapeMismatch {
                    op: "wkv7",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![rows, width],
                });
            }
        }
        if let Some(init) = initial {
            if init.len() != layout.batch
                || init.iter().any(|s| s.s.shape() != [n_heads, d, d])
            {
                return Err(TensorError::Invalid(format!(
                    "wkv7: initial state must be {} × [{n_heads}, {d}, {d}]",
                    layout.batch
                )));
            }
        }
        let prec = precision();
        let (rv, wv, kv, vv, cv, av) = (
            self.value(r).data(),
            self.value(w).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(kappa).data(),
            self.value(a).data(),
        );
        let d2 = d * d;
        let mut states = vec![0.0; layout.batch * n_heads * (layout.seq + 1) * d2];
        let mut out = vec![0.0; rows * width];
        let mut finals = Vec::with_capacity(layout.batch);
        let mut sk = vec![0.0; d];
        for b in 0..layout.batch {
            let mut fin = vec![0.0; n_heads * d2];
            for h in 0..n_heads {
                let base = (b * n_heads + h) * (layout.seq + 1) * d2;
                if let Some(init) = initial {
                    states[base..base + d2].copy_from_slice(&init[b].s.data()[h * d2..(h + 1) * d2]);
                }
                for t in 0..layout.seq {
                    let row = (b * layout.seq + t) * width + h * d;
                    let (prev, cur) = states[base + t * d2..base + (t + 2) * d2].split_at_mut(d2);
                    for i in 0..d {
                        sk[i] = (0..d).map(|p| prev[i * d + p] * cv[row + p]).sum();
                    }
                    for i in 0..d {
                        for j in 0..d {
                            let x = prev[i * d + j] * wv[row + j]
                                - sk[i] * av[row + j] * cv[row + j]
                                + vv[row + i] * kv[row + j];
                            cur[i * d + j] = prec.round(x);
                        }
                    }
                    if cur.iter().any(|x| !x.is_finite()) {
                        return Err(TensorError::NonFinite { op: "wkv7", index: t });
                    }
                    for i in 0..d {
                        out[row + i] = (0..d).map(|j| cur[i * d + j] * rv[row + j]).sum();
                    }
                }
                let last = base + layout.seq * d2;
                fin[h * d2..(h + 1) * d2].copy_from_slice(&states[last..last + d2]);
            }
            finals.push(TimeMixState {
                s: Tensor::from_raw(vec![n_heads, d, d], fin),
            });
        }
        let saved = Wkv7Saved {
            inputs: [r, w, k, v, kappa, a],
            n_heads,
            head_dim,
            layout,
            states,
        };
        let var = self.push(vec![rows, width], out, Op::Wkv7(Box::new(saved)))?;
        Ok((var, finals))
    }
}
