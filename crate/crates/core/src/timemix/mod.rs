//! RWKV-7 time mixing: the attention replacement.
//!
//! Every token is first token-shifted (`x̃_t = μ ⊙ x_t + (1 − μ) ⊙ x_{t−1}`)
//! and projected into the signals of the state recurrence:
//!
//! | signal | recipe                                   | codomain      |
//! |--------|------------------------------------------|---------------|
//! | `w`    | `exp(−exp(x̃·W_w + w_bias))`               | (0, 1)        |
//! | `a`    | `σ(x̃·W_a + a_bias)` (×2 when extended)    | (0, 1) / (0, 2) |
//! | `κ̂`    | per-head L2 normalisation of `x̃·W_κ`      | unit rows     |
//! | `k̃`    | `x̃·W_k`                                   |               |
//! | `v`    | `x̃·W_v`                                   |               |
//! | `r`    | `x̃·W_r`                                   |               |
//! | `g`    | `σ(x̃·W_g + g_bias)`                       | (0, 1)        |
//!
//! The readout `o_t = S_t·r_tᵀ` is optionally group-normalised per head and
//! gated before the output projection.

pub mod kernel;
mod recurrence;

pub use recurrence::{
    eigenvalues, rwkv6_step, rwkv7_step, spectral_radius, transition_matrix, StepSignals,
};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Floor used when normalising removal keys.
pub const KAPPA_EPS: f64 = 1e-8;
/// Variance floor of the optional per-head normalisation.
pub const GROUP_NORM_EPS: f64 = 1e-5;
/// Gate bias at initialisation; `σ(16) = 1 − 1.1e-7`.
pub const GATE_INIT_BIAS: f64 = 16.0;

/// Codomain of the in-context learning rate `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ARange {
    /// `a ∈ (0, 1)`.
    #[default]
    Unit,
    /// `a ∈ (0, 2)`: transitions can have negative eigenvalues.
    Extended,
}

impl ARange {
    pub fn scale(self) -> f64 {
        match self {
            ARange::Unit => 1.0,
            ARange::Extended => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Gated,
    GateFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    GroupNorm,
    #[default]
    None,
}

/// Which state update drives the mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recurrence {
    Rwkv7,
    /// Decay-only update without the removal term.
    Rwkv6,
}

#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w_g: Var,
    pub g_bias: Var,
}

/// Graph handles of one time-mixing block.
///
/// `w_kappa`, `w_a` and `a_bias` are `None` for the RWKV-6 recurrence;
/// `gate` is `None` in gate-free mode.
#[derive(Debug, Clone, Copy)]
pub struct TimeMixParams {
    pub w_r: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_kappa: Option<Var>,
    pub w_w: Var,
    pub w_bias: Var,
    pub w_a: Option<Var>,
    pub a_bias: Option<Var>,
    pub gate: Option<GateParams>,
    pub w_o: Var,
    /// Token-shift logits; the mix coefficient is `σ(mix)`.
    pub mix: Var,
    pub n_heads: usize,
    pub head_dim: usize,
    pub a_range: ARange,
    pub recurrence: Recurrence,
}

impl TimeMixParams {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn gate_mode(&self) -> GateMode {
        if self.gate.is_some() {
            GateMode::Gated
        } else {
            GateMode::GateFree
        }
    }
}

/// Per-head matrix state, `[n_heads × head_dim(value) × head_dim(key)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMixState {
    pub s: Tensor,
}

impl TimeMixState {
    pub fn zeros(n_heads: usize, head_dim: usize) -> Self {
        Self {
            s: Tensor::zeros(&[n_heads, head_dim, head_dim]),
        }
    }

    /// The `head_dim × head_dim` matrix of head `h`.
    pub fn head(&self, h: usize) -> Tensor {
        let d = self.s.shape()[1];
        let data = self.s.data()[h * d * d..(h + 1) * d * d].to_vec();
        Tensor::new(vec![d, d], data).expect("head shape")
    }
}

/// Recurrence inputs for every packed row, `[rows × n_heads·head_dim]` each.
#[derive(Debug, Clone, Copy)]
pub struct TokenSignals {
    pub r: Var,
    pub k: Var,
    pub v: Var,
    pub kappa: Var,
    pub w: Var,
    pub a: Var,
    pub g: Option<Var>,
}

pub struct TimeMixOutput {
    pub y: Var,
    /// Readout before `W_O` (after gate and optional normalisation).
    pub h_tm: Var,
    pub signals: TokenSignals,
    pub states: Vec<TimeMixState>,
}

fn add_bias(g: &mut Graph, y: Var, bias: Var) -> Result<Var> {
    let rows = g.shape(y)[0];
    let b = g.broadcast_rows(bias, rows)?;
    g.add(y, b)
}

/// Token-shift interpolation. `x_prev` (`[batch × d_model]`) stands in for
/// the token before each sequence; zero when absent.
pub fn token_shift_mix(
    g: &mut Graph,
    x: Var,
    mix: Var,
    layout: SeqLayout,
    x_prev: Option<&Tensor>,
) -> Result<Var> {
    let rows = layout.rows();
    let d = g.shape(x)[1];
    let mut shifted = g.token_shift(x, layout)?;
    if let Some(prev) = x_prev {
        if prev.shape() != [layout.batch, d] {
            return Err(TensorError::ShapeMismatch {
                op: "token_shift_mix",
                lhs: prev.shape().to_vec(),
                rhs: vec![layout.batch, d],
            });
        }
        let mut fill = vec![0.0; rows * d];
        for b in 0..layout.batch {
            let row = b * layout.seq * d;
            fill[row..row + d].copy_from_slice(prev.row(b));
        }
        let fill = g.constant(Tensor::new(vec![rows, d], fill)?);
        shifted = g.add(shifted, fill)?;
    }
    let coef = g.sigmoid(mix)?;
    let coef = g.broadcast_rows(coef, rows)?;
    let diff = g.sub(x, shifted)?;
    let scaled = g.mul(coef, diff)?;
    g.add(shifted, scaled)
}

/// Projects token-shifted inputs into the recurrence signals.
pub fn timemix_project(
    g: &mut Graph,
    x: Var,
    x_prev: Option<&Tensor>,
    p: &TimeMixParams,
    layout: SeqLayout,
) -> Result<TokenSignals> {
    let rows = layout.rows();
    let width = p.width();
    let xs = token_shift_mix(g, x, p.mix, layout, x_prev)?;

    let r = g.matmul(xs, p.w_r)?;
    let k = g.matmul(xs, p.w_k)?;
    let v = g.matmul(xs, p.w_v)?;

    let w = g.matmul(xs, p.w_w)?;
    let w = add_bias(g, w, p.w_bias)?;
    let w = g.exp(w)?;
    let w = g.scale(w, -1.0)?;
    let w = g.exp(w)?;

    let (kappa, a) = match (p.recurrence, p.w_kappa, p.w_a, p.a_bias) {
        (Recurrence::Rwkv7, Some(w_kappa), Some(w_a), Some(a_bias)) => {
            let kappa = g.matmul(xs, w_kappa)?;
            let kappa = g.reshape(kappa, vec![rows * p.n_heads, p.head_dim])?;
            let kappa = g.rows_l2_normalize(kappa, KAPPA_EPS)?;
            let kappa = g.reshape(kappa, vec![rows, width])?;
            let a = g.matmul(xs, w_a)?;
            let a = add_bias(g, a, a_bias)?;
            let mut a = g.sigmoid(a)?;
            if p.a_range == ARange::Extended {
                a = g.scale(a, 2.0)?;
            }
            (kappa, a)
        }
        (Recurrence::Rwkv6, ..) => {
            let z = g.constant(Tensor::zeros(&[rows, width]));
            (z, z)
        }
        _ => {
            return Err(TensorError::Invalid(
                "rwkv7 time mixing needs w_kappa, w_a and a_bias".into(),
            ))
        }
    };

    let gate = match p.gate {
        Some(gp) => {
            let z = g.matmul(xs, gp.w_g)?;
            let z = add_bias(g, z, gp.g_bias)?;
            Some(g.sigmoid(z)?)
        }
        None => None,
    };
    Ok(TokenSignals {
        r,
        k,
        v,
        kappa,
        w,
        a,
        g: gate,
    })
}

/// Full time-mixing block over packed sequences.
pub fn timemix_forward(
    g: &mut Graph,
    x: Var,
    p: &TimeMixParams,
    layout: SeqLayout,
    initial: Option<&[TimeMixState]>,
    norm_mode: NormMode,
) -> Result<TimeMixOutput> {
    let sig = timemix_project(g, x, None, p, layout)?;
    let rows = layout.rows();
    let (mut o, states) = g.wkv7(
        sig.r,
        sig.w,
        sig.k,
        sig.v,
        sig.kappa,
        sig.a,
        p.n_heads,
        p.head_dim,
        layout,
        initial,
    )?;
    if norm_mode == NormMode::GroupNorm {
        let per_head = g.reshape(o, vec![rows * p.n_heads, p.head_dim])?;
        let normed = g.layer_norm_rows(per_head, GROUP_NORM_EPS)?;
        o = g.reshape(normed, vec![rows, p.width()])?;
    }
    if let Some(gate) = sig.g {
        o = g.mul(o, gate)?;
    }
    let y = g.matmul(o, p.w_o)?;
    Ok(TimeMixOutput {
        y,
        h_tm: o,
        signals: sig,
        states,
    })
}
