use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DEFAULT_ROPE_THETA;
use crate::timemix::{ARange, GateMode, NormMode, Recurrence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Gqa,
    Rwkv7,
    Rwkv6,
    /// Teacher attention and a student mixer side by side.
    Wrapper,
}

/// How a wrapper layer feeds its output forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// The layer emits the teacher output; the student only sees the
    /// alignment loss.
    #[default]
    PassThrough,
    /// `h_tm + stopgrad(h_attn − h_tm)`: teacher values forward, gradients
    /// into the student.
    StraightThrough,
}

/// The mixer a wrapper trains next to the teacher attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WrapperStudent {
    #[default]
    Rwkv7,
    Rwkv6,
    /// A copy of the teacher attention; a debugging aid.
    Gqa,
}

impl WrapperStudent {
    pub fn recurrence(self) -> Option<Recurrence> {
        match self {
            WrapperStudent::Rwkv7 => Some(Recurrence::Rwkv7),
            WrapperStudent::Rwkv6 => Some(Recurrence::Rwkv6),
            WrapperStudent::Gqa => None,
        }
    }
}

/// Which hidden state a wrapper compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignTarget {
    /// Block outputs after the output projection.
    #[default]
    PostWo,
    /// Concatenated head outputs before the output projection.
    PreWo,
}

fn default_theta() -> f64 {
    DEFAULT_ROPE_THETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub attention_kind: AttentionKind,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub a_range: ARange,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default)]
    pub combine_mode: CombineMode,
    #[serde(default)]
    pub wrapper_student: WrapperStudent,
    #[serde(default)]
    pub align_target: AlignTarget,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale teacher: 4 layers, width 64, vocab 256.
    pub fn toy(seed: u64) -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            d_ffn: 128,
            max_seq_len: 128,
            rope_theta: DEFAULT_ROPE_THETA,
            attention_kind: AttentionKind::Gqa,
            gate_mode: GateMode::Gated,
            a_range: ARange::Unit,
            norm_mode: NormMode::None,
            combine_mode: CombineMode::PassThrough,
            wrapper_student: WrapperStudent::Rwkv7,
            align_target: AlignTarget::PostWo,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::config(
                "d_model",
                format!(
                    "d_model {} must equal n_heads·head_dim = {}·{}",
                    self.d_model, self.n_heads, self.head_dim
                ),
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(
                "n_kv_heads",
                format!(
                    "n_heads {} is not divisible by n_kv_heads {}",
                    self.n_heads, self.n_kv_heads
                ),
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config("head_dim", "must be even for rotary embeddings"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::config("rope_theta", "must be positive and finite"));
        }
        Ok(())
    }

    /// Shape a parameter called `name` must have under this config, or
    /// `None` for names the config does not define.
    pub fn expected_shape(&self, name: &str) -> Option<Vec<usize>> {
        let (d, v, f) = (self.d_model, self.vocab_size, self.d_ffn);
        let (q, kv) = (self.n_heads * self.head_dim, self.n_kv_heads * self.head_dim);
        match name {
            "embed" => return Some(vec![v, d]),
            "head" => return Some(vec![d, v]),
            "final_norm.gamma" => return Some(vec![d]),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, rest) = rest.split_once('.')?;
        if idx.parse::<usize>().ok()? >= self.n_layers {
            return None;
        }
        let gqa = |n: &str| match n {
            "w_q" => Some(vec![d, q]),
            "b_q" => Some(vec![q]),
            "w_k" | "w_v" => Some(vec![d, kv]),
            "b_k" | "b_v" => Some(vec![kv]),
            "w_o" => Some(vec![q, d]),
            _ => None,
        };
        let (block, leaf) = rest.split_once('.')?;
        match block {
            "norm1" | "norm2" if leaf == "gamma" => Some(vec![d]),
            "mlp" => match leaf {
                "w_gate" | "w_up" => Some(vec![d, f]),
                "w_down" => Some(vec![f, d]),
                _ => None,
            },
            "attn" if matches!(self.attention_kind, AttentionKind::Gqa | AttentionKind::Wrapper) => {
                gqa(leaf)
            }
            "tm" if self.attention_kind == AttentionKind::Wrapper
                && self.wrapper_student == WrapperStudent::Gqa =>
            {
                gqa(leaf)
            }
            "tm" if self.attention_kind != AttentionKind::Gqa => match leaf {
                "w_r" | "w_k" | "w_v" | "w_kappa" | "w_w" | "w_a" | "w_g" => Some(vec![d, q]),
                "w_bias" | "a_bias" | "g_bias" => Some(vec![q]),
                "w_o" => Some(vec![q, d]),
                "mix" => Some(vec![d]),
                _ => None,
            },
            _ => None,
        }
    }
}
