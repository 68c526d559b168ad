//! Decoder models: the GQA teacher, recurrent students and the alignment
//! wrapper that hosts both attention paths in one layer.
//!
//! Every layer follows the pre-norm residual topology
//!
//! ```text
//! x ← x + Attn(RMSNorm(x))
//! x ← x + MLP(RMSNorm(x))
//! ```
//!
//! Parameters live in a flat, ordered [`ParamStore`] keyed by dotted names
//! (`layers.3.mlp.w_up`, `layers.0.tm.w_kappa`, ...). A tensor's
//! `requires_grad` flag is its trainable bit; see [`apply_freeze`].

mod config;

pub use config::{AlignTarget, AttentionKind, CombineMode, ModelConfig, WrapperStudent};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::error::{Error, Result};
use crate::init::{derived_rng, normal_tensor};
use crate::layers::{gqa_attention, rmsnorm, swiglu_mlp, GqaParams, MlpParams, NormParams};
use crate::tensor::Tensor;
use crate::timemix::{
    timemix_forward, GateMode, GateParams, Recurrence, TimeMixParams, TimeMixState,
    GATE_INIT_BIAS,
};

pub const RMS_EPS: f64 = 1e-6;
/// Standard deviation of teacher projections and embeddings.
pub const INIT_STD: f64 = 0.02;

pub type ParamStore = IndexMap<String, Tensor>;

/// How fresh time-mix parameters are obtained when converting a teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Fresh,
    /// `W_r ← W_Q`, `W_k ← W_K`, `W_v ← W_V` (KV heads expanded), `W_O ← W_O`.
    FromTeacher,
}

/// Coarse parameter families used by freeze masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Norm,
    Attention,
    TimeMix,
    Mlp,
    Head,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name == "embed" {
        ParamGroup::Embedding
    } else if name == "head" {
        ParamGroup::Head
    } else if name.contains(".attn.") {
        ParamGroup::Attention
    } else if name.contains(".tm.") {
        ParamGroup::TimeMix
    } else if name.contains(".mlp.") {
        ParamGroup::Mlp
    } else {
        ParamGroup::Norm
    }
}

/// Gate parameters of a time-mix block.
pub fn is_gate_param(name: &str) -> bool {
    name.ends_with(".tm.w_g") || name.ends_with(".tm.g_bias")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles of every parameter of a model.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// One `(teacher, student)` output pair recorded by a wrapper layer.
#[derive(Debug, Clone, Copy)]
pub struct AlignPair {
    pub teacher: Var,
    pub student: Var,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub pairs: Vec<AlignPair>,
    /// Final recurrent state of every time-mix layer (empty for attention).
    pub states: Vec<Vec<TimeMixState>>,
}

fn f32_tensor(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| v as f32 as f64).collect();
    Tensor::new(shape, data).expect("same shape")
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    f32_tensor(normal_tensor(rng, shape, std))
}

fn layer_prefix(i: usize) -> String {
    format!("layers.{i}")
}

/// Fresh attention tensors `(suffix, tensor)`.
fn gqa_tensors(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<(&'static str, Tensor)> {
    let (d, q, kv) = (cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim);
    vec![
        ("w_q", normal(rng, &[d, q], INIT_STD)),
        ("b_q", Tensor::zeros(&[q])),
        ("w_k", normal(rng, &[d, kv], INIT_STD)),
        ("b_k", Tensor::zeros(&[kv])),
        ("w_v", normal(rng, &[d, kv], INIT_STD)),
        ("b_v", Tensor::zeros(&[kv])),
        ("w_o", normal(rng, &[q, d], INIT_STD)),
    ]
}

/// Fresh time-mix tensors `(suffix, tensor)`.
fn timemix_tensors(
    cfg: &ModelConfig,
    rng: &mut impl Rng,
    recurrence: Recurrence,
) -> Vec<(&'static str, Tensor)> {
    let d = cfg.d_model;
    let (hd, width) = (cfg.head_dim, cfg.n_heads * cfg.head_dim);
    let std_in = 1.0 / (d as f64).sqrt();
    // Decay logits spread over each head, from slow to fast.
    let w_bias: Vec<f64> = (0..width)
        .map(|c| {
            let j = (c % hd) as f64 / (hd.max(2) - 1) as f64;
            -6.0 + 5.0 * j
        })
        .collect();
    let mut out = vec![
        ("w_r", normal(rng, &[d, width], std_in)),
        ("w_k", normal(rng, &[d, width], std_in)),
        ("w_v", normal(rng, &[d, width], std_in)),
    ];
    if recurrence == Recurrence::Rwkv7 {
        out.push(("w_kappa", normal(rng, &[d, width], std_in)));
    }
    out.push(("w_w", normal(rng, &[d, width], 0.1 * std_in)));
    out.push(("w_bias", f32_tensor(Tensor::new(vec![width], w_bias).expect("bias"))));
    if recurrence == Recurrence::Rwkv7 {
        out.push(("w_a", normal(rng, &[d, width], 0.1 * std_in)));
        out.push(("a_bias", Tensor::zeros(&[width])));
    }
    if cfg.gate_mode == GateMode::Gated {
        out.push(("w_g", Tensor::zeros(&[d, width])));
        out.push(("g_bias", Tensor::full(&[width], GATE_INIT_BIAS)));
    }
    out.push(("w_o", normal(rng, &[width, d], INIT_STD)));
    out.push(("mix", Tensor::zeros(&[d])));
    out
}

fn mlp_tensors(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<(&'static str, Tensor)> {
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    vec![
        ("w_gate", normal(rng, &[d, f], INIT_STD)),
        ("w_up", normal(rng, &[d, f], INIT_STD)),
        ("w_down", normal(rng, &[f, d], INIT_STD)),
    ]
}

/// Builds a deterministic GQA teacher from `cfg.seed`.
pub fn build_teacher(cfg: &ModelConfig) -> Result<DecoderModel> {
    cfg.validate()?;
    if cfg.attention_kind != AttentionKind::Gqa {
        return Err(Error::config("attention_kind", "a teacher must use gqa attention"));
    }
    let mut rng = derived_rng(cfg.seed, 0);
    let mut params = ParamStore::new();
    params.insert("embed".into(), normal(&mut rng, &[cfg.vocab_size, cfg.d_model], INIT_STD));
    for i in 0..cfg.n_layers {
        let p = layer_prefix(i);
        params.insert(format!("{p}.norm1.gamma"), Tensor::full(&[cfg.d_model], 1.0));
        for (name, t) in gqa_tensors(cfg, &mut rng) {
            params.insert(format!("{p}.attn.{name}"), t);
        }
        params.insert(format!("{p}.norm2.gamma"), Tensor::full(&[cfg.d_model], 1.0));
        for (name, t) in mlp_tensors(cfg, &mut rng) {
            params.insert(format!("{p}.mlp.{name}"), t);
        }
    }
    params.insert("final_norm.gamma".into(), Tensor::full(&[cfg.d_model], 1.0));
    params.insert("head".into(), normal(&mut rng, &[cfg.d_model, cfg.vocab_size], INIT_STD));
    let mut model = DecoderModel {
        config: cfg.clone(),
        params,
    };
    model.set_all_trainable(true);
    Ok(model)
}

/// Repeats the KV-head column blocks of `[d × n_kv·hd]` up to `[d × n_heads·hd]`.
fn expand_kv(t: &Tensor, n_heads: usize, n_kv: usize, hd: usize) -> Tensor {
    let d = t.rows();
    let group = n_heads / n_kv;
    let mut out = Vec::with_capacity(d * n_heads * hd);
    for r in 0..d {
        let row = t.row(r);
        for h in 0..n_heads {
            let kvh = h / group;
            out.extend_from_slice(&row[kvh * hd..(kvh + 1) * hd]);
        }
    }
    Tensor::new(vec![d, n_heads * hd], out).expect("expanded shape")
}

/// Time-mix tensors for layer `i` of a model converted from `teacher`.
fn student_tensors(
    teacher: &DecoderModel,
    cfg: &ModelConfig,
    recurrence: Recurrence,
    init_mode: InitMode,
    layer: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(String, Tensor)>> {
    let p = layer_prefix(layer);
    let mut fresh: Vec<(String, Tensor)> = timemix_tensors(cfg, rng, recurrence)
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    if init_mode == InitMode::FromTeacher {
        let get = |n: &str| teacher.param(&format!("{p}.attn.{n}")).cloned();
        let (nh, nkv, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
        for (name, t) in fresh.iter_mut() {
            match name.as_str() {
                "w_r" => *t = get("w_q")?,
                "w_k" => *t = expand_kv(&get("w_k")?, nh, nkv, hd),
                "w_v" => *t = expand_kv(&get("w_v")?, nh, nkv, hd),
                "w_o" => *t = get("w_o")?,
                _ => {}
            }
        }
    }
    Ok(fresh)
}

fn check_teacher(teacher: &DecoderModel) -> Result<()> {
    if teacher.config.attention_kind != AttentionKind::Gqa {
        return Err(Error::Invalid(format!(
            "expected a gqa model, got {:?}",
            teacher.config.attention_kind
        )));
    }
    Ok(())
}

/// Replaces every attention block of `teacher` with a time-mixing block.
/// All other parameters are copied bit-exactly.
pub fn convert_to_student(
    teacher: &DecoderModel,
    recurrence: Recurrence,
    init_mode: InitMode,
) -> Result<DecoderModel> {
    check_teacher(teacher)?;
    let mut cfg = teacher.config.clone();
    cfg.attention_kind = match recurrence {
        Recurrence::Rwkv7 => AttentionKind::Rwkv7,
        Recurrence::Rwkv6 => AttentionKind::Rwkv6,
    };
    let mut rng = derived_rng(cfg.seed, 1);
    let mut params = ParamStore::new();
    for (name, t) in &teacher.params {
        if let Some(rest) = name.strip_suffix(".attn.w_q") {
            let layer: usize = rest
                .strip_prefix("layers.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("bad parameter name `{name}`")))?;
            for (n, t) in student_tensors(teacher, &cfg, recurrence, init_mode, layer, &mut rng)? {
                params.insert(format!("{rest}.tm.{n}"), t);
            }
        } else if param_group(name) != ParamGroup::Attention {
            params.insert(name.clone(), t.clone());
        }
    }
    let mut model = DecoderModel { config: cfg, params };
    model.set_all_trainable(true);
    Ok(model)
}

/// Options of [`wrap_for_alignment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WrapOptions {
    pub combine_mode: CombineMode,
    pub student: WrapperStudent,
    pub init_mode: InitMode,
    pub align_target: AlignTarget,
}

impl Default for WrapOptions {
    fn default() -> Self {
        Self {
            combine_mode: CombineMode::PassThrough,
            student: WrapperStudent::Rwkv7,
            init_mode: InitMode::Fresh,
            align_target: AlignTarget::PostWo,
        }
    }
}

/// Turns every layer of `teacher` into a wrapper holding the original
/// attention and a student mixer side by side.
pub fn wrap_for_alignment(teacher: &DecoderModel, opts: WrapOptions) -> Result<DecoderModel> {
    if teacher.config.attention_kind == AttentionKind::Wrapper {
        return Err(Error::Invalid("model is already wrapped".into()));
    }
    check_teacher(teacher)?;
    let mut cfg = teacher.config.clone();
    cfg.attention_kind = AttentionKind::Wrapper;
    cfg.combine_mode = opts.combine_mode;
    cfg.wrapper_student = opts.student;
    cfg.align_target = opts.align_target;
    let mut rng = derived_rng(cfg.seed, 1);
    let mut params = ParamStore::new();
    for (name, t) in &teacher.params {
        params.insert(name.clone(), t.clone());
        if let Some(rest) = name.strip_suffix(".attn.w_o") {
            let layer: usize = rest
                .strip_prefix("layers.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("bad parameter name `{name}`")))?;
            let student = match opts.student {
                WrapperStudent::Gqa => ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o"]
                    .iter()
                    .map(|n| Ok((n.to_string(), teacher.param(&format!("{rest}.attn.{n}"))?.clone())))
                    .collect::<Result<Vec<_>>>()?,
                WrapperStudent::Rwkv7 | WrapperStudent::Rwkv6 => {
                    let rec = opts.student.recurrence().expect("recurrent student");
                    student_tensors(teacher, &cfg, rec, opts.init_mode, layer, &mut rng)?
                }
            };
            for (n, t) in student {
                params.insert(format!("{rest}.tm.{n}"), t);
            }
        }
    }
    let mut model = DecoderModel { config: cfg, params };
    model.set_all_trainable(true);
    Ok(model)
}

/// Drops the teacher attention from a wrapped model, leaving the recurrent
/// student.
pub fn unwrap_student(wrapped: &DecoderModel) -> Result<DecoderModel> {
    if wrapped.config.attention_kind != AttentionKind::Wrapper {
        return Err(Error::Invalid("model is not wrapped".into()));
    }
    let rec = wrapped
        .config
        .wrapper_student
        .recurrence()
        .ok_or_else(|| Error::Invalid("a gqa student cannot be unwrapped".into()))?;
    let mut cfg = wrapped.config.clone();
    cfg.attention_kind = match rec {
        Recurrence::Rwkv7 => AttentionKind::Rwkv7,
        Recurrence::Rwkv6 => AttentionKind::Rwkv6,
    };
    cfg.combine_mode = CombineMode::default();
    cfg.wrapper_student = WrapperStudent::default();
    cfg.align_target = AlignTarget::default();
    let params = wrapped
        .params
        .iter()
        .filter(|(n, _)| param_group(n) != ParamGroup::Attention)
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    Ok(DecoderModel { config: cfg, params })
}

/// Removes every gate parameter; the mixers become gate-free.
pub fn drop_gates(model: &DecoderModel) -> DecoderModel {
    let mut out = model.clone();
    out.params.retain(|n, _| !is_gate_param(n));
    out.config.gate_mode = GateMode::GateFree;
    out
}

/// Per-parameter trainable flags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    pub trainable: IndexMap<String, bool>,
}

impl FreezeMask {
    pub fn from_fn(model: &DecoderModel, f: impl Fn(&str) -> bool) -> Self {
        Self {
            trainable: model.params.keys().map(|n| (n.clone(), f(n))).collect(),
        }
    }

    pub fn all(model: &DecoderModel, trainable: bool) -> Self {
        Self::from_fn(model, |_| trainable)
    }

    /// Only the listed groups are trainable.
    pub fn groups(model: &DecoderModel, groups: &[ParamGroup]) -> Self {
        Self::from_fn(model, |n| groups.contains(&param_group(n)))
    }
}

/// Sets each parameter's trainable bit from `mask`, which must name every
/// parameter exactly once.
pub fn apply_freeze(model: &mut DecoderModel, mask: &FreezeMask) -> Result<()> {
    for name in model.params.keys() {
        if !mask.trainable.contains_key(name) {
            return Err(Error::Invalid(format!("freeze mask has no entry for `{name}`")));
        }
    }
    for name in mask.trainable.keys() {
        if !model.params.contains_key(name) {
            return Err(Error::Invalid(format!("freeze mask names unknown parameter `{name}`")));
        }
    }
    for (name, t) in model.params.iter_mut() {
        t.requires_grad = mask.trainable[name];
    }
    Ok(())
}

impl DecoderModel {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for t in self.params.values_mut() {
            t.requires_grad = on;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// SHA-256 over names, shapes and value bits of the selected parameters.
    pub fn param_hash(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            if !filter(name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn frozen_hash(&self) -> String {
        self.param_hash(|n| !self.params[n].requires_grad)
    }

    /// Records every parameter as a graph leaf, tracked iff trainable.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as an untracked constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.config.attention_kind, AttentionKind::Rwkv7 | AttentionKind::Rwkv6)
    }

    fn gqa_params(&self, b: &Bound, prefix: &str) -> Result<GqaParams> {
        let get = |n: &str| b.get(&format!("{prefix}.{n}"));
        Ok(GqaParams {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            b_q: get("b_q")?,
            b_k: get("b_k")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            n_heads: self.config.n_heads,
            n_kv_heads: self.config.n_kv_heads,
            head_dim: self.config.head_dim,
        })
    }

    fn timemix_params(&self, b: &Bound, prefix: &str, rec: Recurrence) -> Result<TimeMixParams> {
        let get = |n: &str| b.get(&format!("{prefix}.{n}"));
        let opt = |n: &str| b.opt(&format!("{prefix}.{n}"));
        let gate = match (opt("w_g"), opt("g_bias")) {
            (Some(w_g), Some(g_bias)) => Some(GateParams { w_g, g_bias }),
            (None, None) => None,
            _ => return Err(Error::Invalid(format!("{prefix}: incomplete gate parameters"))),
        };
        Ok(TimeMixParams {
            w_r: get("w_r")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_kappa: opt("w_kappa"),
            w_w: get("w_w")?,
            w_bias: get("w_bias")?,
            w_a: opt("w_a"),
            a_bias: opt("a_bias"),
            gate,
            w_o: get("w_o")?,
            mix: get("mix")?,
            n_heads: self.config.n_heads,
            head_dim: self.config.head_dim,
            a_range: self.config.a_range,
            recurrence: rec,
        })
    }

    fn check_tokens(&self, tokens: &[usize], layout: SeqLayout) -> Result<()> {
        if tokens.len() != layout.rows() || layout.rows() == 0 {
            return Err(Error::Invalid(format!(
                "{} tokens do not fill a {}×{} batch",
                tokens.len(),
                layout.batch,
                layout.seq
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        if !self.is_recurrent() && layout.seq > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                layout.seq, self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Causal LM forward over packed sequences.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: &[usize],
        layout: SeqLayout,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens, layout)?;
        let cfg = &self.config;
        let mut x = g.embedding(b.get("embed")?, tokens)?;
        let mut pairs = Vec::new();
        let mut states = Vec::new();
        for i in 0..cfg.n_layers {
            let p = layer_prefix(i);
            let norm1 = NormParams {
                gamma: b.get(&format!("{p}.norm1.gamma"))?,
                eps: RMS_EPS,
            };
            let h = rmsnorm(g, x, &norm1)?;
            let y = match cfg.attention_kind {
                AttentionKind::Gqa => {
                    let ap = self.gqa_params(b, &format!("{p}.attn"))?;
                    gqa_attention(g, h, &ap, cfg.rope_theta, layout)?.0
                }
                AttentionKind::Rwkv7 | AttentionKind::Rwkv6 => {
                    let rec = if cfg.attention_kind == AttentionKind::Rwkv7 {
                        Recurrence::Rwkv7
                    } else {
                        Recurrence::Rwkv6
                    };
                    let tp = self.timemix_params(b, &format!("{p}.tm"), rec)?;
                    let out = timemix_forward(g, h, &tp, layout, None, cfg.norm_mode)?;
                    states.push(out.states);
                    out.y
                }
                AttentionKind::Wrapper => {
                    let ap = self.gqa_params(b, &format!("{p}.attn"))?;
                    let (y_t, h_t) = gqa_attention(g, h, &ap, cfg.rope_theta, layout)?;
                    let (y_s, h_s) = match cfg.wrapper_student.recurrence() {
                        Some(rec) => {
                            let tp = self.timemix_params(b, &format!("{p}.tm"), rec)?;
                            let out = timemix_forward(g, h, &tp, layout, None, cfg.norm_mode)?;
                            (out.y, out.h_tm)
                        }
                        None => {
                            let sp = self.gqa_params(b, &format!("{p}.tm"))?;
                            gqa_attention(g, h, &sp, cfg.rope_theta, layout)?
                        }
                    };
                    pairs.push(match cfg.align_target {
                        AlignTarget::PostWo => AlignPair {
                            teacher: y_t,
                            student: y_s,
                        },
                        AlignTarget::PreWo => AlignPair {
                            teacher: h_t,
                            student: h_s,
                        },
                    });
                    match cfg.combine_mode {
                        CombineMode::PassThrough => y_t,
                        CombineMode::StraightThrough => g.straight_through(y_t, y_s)?,
                    }
                }
            };
            x = g.add(x, y)?;
            let norm2 = NormParams {
                gamma: b.get(&format!("{p}.norm2.gamma"))?,
                eps: RMS_EPS,
            };
            let h2 = rmsnorm(g, x, &norm2)?;
            let mp = MlpParams {
                w_gate: b.get(&format!("{p}.mlp.w_gate"))?,
                w_up: b.get(&format!("{p}.mlp.w_up"))?,
                w_down: b.get(&format!("{p}.mlp.w_down"))?,
            };
            let m = swiglu_mlp(g, h2, &mp)?;
            x = g.add(x, m)?;
        }
        let fin = NormParams {
            gamma: b.get("final_norm.gamma")?,
            eps: RMS_EPS,
        };
        let xf = rmsnorm(g, x, &fin)?;
        let logits = g.matmul(xf, b.get("head")?)?;
        Ok(ForwardOutput {
            logits,
            pairs,
            states,
        })
    }
}

/// Logits `[T × vocab]` for one sequence, without gradient tracking.
pub fn forward_lm(model: &DecoderModel, tokens: &[usize]) -> Result<Tensor> {
    forward_batch(model, tokens, SeqLayout::single(tokens.len()))
}

/// Logits `[rows × vocab]` for packed sequences, without gradient tracking.
pub fn forward_batch(model: &DecoderModel, tokens: &[usize], layout: SeqLayout) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind_constant(&mut g);
    let out = model.forward(&mut g, &b, tokens, layout)?;
    Ok(g.value(out.logits).clone())
}
