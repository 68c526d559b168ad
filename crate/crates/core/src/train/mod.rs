//! The conversion recipe: attention alignment, word-level distillation and
//! long-context fine-tuning, plus the optimizer and resumable run state.

mod adam;
mod data;
mod loss;

pub use adam::{adam_step, AdamState};
pub use data::{Batch, BatchSource, StreamBatches};
pub use loss::{alignment_loss, alignment_loss_value, kd_loss_value, kd_loss_wordlevel};

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::{
    decode_checkpoint, encode_checkpoint, validate_shapes, CheckpointKind, CheckpointMeta,
    MetricRecord, MetricsWriter,
};
use crate::model::{
    apply_freeze, drop_gates, forward_batch, is_gate_param, param_group, AlignTarget,
    AttentionKind, Bound, CombineMode, DecoderModel, FreezeMask, InitMode, ParamGroup,
};
use crate::tensor::Tensor;
use crate::timemix::GateMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Next-token training of the teacher itself.
    Pretrain,
    Align,
    Distill,
    Sft,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Align => "align",
            Stage::Distill => "distill",
            Stage::Sft => "sft",
        }
    }
}

/// Only forward `KL(teacher ‖ student)` is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    Forward,
}

/// The distillation ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Gate-free, frozen MLP.
    #[serde(rename = "ARWKV")]
    Arwkv,
    /// Gate-free, trainable MLP.
    #[serde(rename = "ARWKV-M")]
    ArwkvM,
    /// Gated, trainable MLP.
    #[serde(rename = "ARWKV-G-M")]
    ArwkvGM,
    /// Gate-free, frozen MLP, distilled from a larger teacher.
    #[serde(rename = "ARWKV-from-larger")]
    ArwkvFromLarger,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Arwkv,
        Variant::ArwkvM,
        Variant::ArwkvGM,
        Variant::ArwkvFromLarger,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Arwkv => "ARWKV",
            Variant::ArwkvM => "ARWKV-M",
            Variant::ArwkvGM => "ARWKV-G-M",
            Variant::ArwkvFromLarger => "ARWKV-from-larger",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            Variant::ArwkvGM => GateMode::Gated,
            _ => GateMode::GateFree,
        }
    }

    pub fn freeze_mlp(self) -> bool {
        matches!(self, Variant::Arwkv | Variant::ArwkvFromLarger)
    }

    pub fn larger_teacher(self) -> bool {
        self == Variant::ArwkvFromLarger
    }

    /// Names the grid cell of a configuration, if it is one.
    pub fn classify(gate_mode: GateMode, freeze_mlp: bool, larger_teacher: bool) -> Option<Self> {
        Self::ALL.into_iter().find(|v| {
            v.gate_mode() == gate_mode
                && v.freeze_mlp() == freeze_mlp
                && v.larger_teacher() == larger_teacher
        })
    }
}

fn d_lr() -> f64 {
    3e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    8
}
fn d_seq() -> usize {
    64
}
fn d_steps() -> u64 {
    200
}
fn d_log() -> u64 {
    10
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default = "d_steps")]
    pub max_steps: u64,
    #[serde(default = "d_log")]
    pub log_every: u64,
    #[serde(default = "d_true")]
    pub freeze_mlp: bool,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default)]
    pub teacher_path: Option<String>,
    #[serde(default)]
    pub student_path: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub combine_mode: CombineMode,
    #[serde(default)]
    pub align_target: AlignTarget,
    #[serde(default)]
    pub init_mode: InitMode,
    /// Train one layer's mixer at a time instead of all jointly.
    #[serde(default)]
    pub layerwise: bool,
    /// Marks a distillation run whose teacher is larger than the model the
    /// student was converted from.
    #[serde(default)]
    pub larger_teacher: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        serde_json::from_value(serde_json::json!({ "stage": stage })).expect("defaults")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (field, v) in [("batch_size", self.batch_size), ("seq_len", self.seq_len)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        Ok(())
    }

    /// Fails naming `field` when a stage-specific path is absent.
    pub fn require_path(&self, field: &str) -> Result<&str> {
        let v = match field {
            "teacher_path" => &self.teacher_path,
            "student_path" => &self.student_path,
            _ => return Err(Error::config(field, "unknown path field")),
        };
        v.as_deref()
            .ok_or_else(|| Error::config(field, format!("required for stage {}", self.stage.as_str())))
    }

    /// Grid tag of a distillation configuration, or `custom`.
    pub fn variant_tag(&self) -> String {
        Variant::classify(self.gate_mode, self.freeze_mlp, self.larger_teacher)
            .map(|v| v.tag().to_string())
            .unwrap_or_else(|| "custom".into())
    }
}

/// Mutable state of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub stage: Stage,
    pub variant: String,
    /// Completed optimizer steps.
    pub step: u64,
    pub tokens_seen: u64,
    pub adam: AdamState,
    /// `(step, loss)` with the loss measured before that step's update.
    pub losses: Vec<(u64, f64)>,
    pub wall_ms: Vec<u64>,
}

impl TrainRun {
    pub fn new(stage: Stage, variant: impl Into<String>) -> Self {
        Self {
            stage,
            variant: variant.into(),
            step: 0,
            tokens_seen: 0,
            adam: AdamState::default(),
            losses: Vec::new(),
            wall_ms: Vec::new(),
        }
    }

    pub fn loss_values(&self) -> Vec<f64> {
        self.losses.iter().map(|(_, l)| *l).collect()
    }

    /// Serializes parameters, optimizer moments and counters.
    pub fn encode_state(&self, model: &DecoderModel) -> Result<Vec<u8>> {
        let mut tensors: IndexMap<String, Tensor> = model.params.clone();
        for (name, m) in &self.adam.m {
            let shape = model.param(name)?.shape().to_vec();
            tensors.insert(format!("m:{name}"), Tensor::new(shape.clone(), m.clone())?);
            tensors.insert(format!("v:{name}"), Tensor::new(shape, self.adam.v[name].clone())?);
        }
        let meta = CheckpointMeta {
            kind: CheckpointKind::TrainState,
            model: model.config.clone(),
            stage: Some(self.stage.as_str().into()),
            variant: Some(self.variant.clone()),
            tokens_seen: self.tokens_seen,
            seq_len: None,
            step: self.step,
            trainable: model.trainable_names(),
        };
        encode_checkpoint(&meta, &tensors)
    }

    pub fn decode_state(bytes: &[u8]) -> Result<(DecoderModel, TrainRun)> {
        let (meta, tensors) = decode_checkpoint(bytes)?;
        if meta.kind != CheckpointKind::TrainState {
            return Err(Error::Invalid("not a training-state checkpoint".into()));
        }
        validate_shapes(&meta.model, &tensors)?;
        let stage = match meta.stage.as_deref() {
            Some("pretrain") => Stage::Pretrain,
            Some("align") => Stage::Align,
            Some("distill") => Stage::Distill,
            Some("sft") => Stage::Sft,
            other => return Err(Error::Invalid(format!("unknown stage {other:?}"))),
        };
        let mut params = IndexMap::new();
        let mut adam = AdamState {
            t: meta.step,
            ..Default::default()
        };
        for (name, t) in tensors {
            if let Some(base) = name.strip_prefix("m:") {
                adam.m.insert(base.to_string(), t.into_data());
            } else if let Some(base) = name.strip_prefix("v:") {
                adam.v.insert(base.to_string(), t.into_data());
            } else {
                params.insert(name, t);
            }
        }
        let model = DecoderModel {
            config: meta.model,
            params,
        };
        let run = TrainRun {
            stage,
            variant: meta.variant.unwrap_or_default(),
            step: meta.step,
            tokens_seen: meta.tokens_seen,
            adam,
            losses: Vec::new(),
            wall_ms: Vec::new(),
        };
        Ok((model, run))
    }

    pub fn save_state(&self, model: &DecoderModel, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.encode_state(model)?)
    }

    pub fn load_state(path: &Path) -> Result<(DecoderModel, TrainRun)> {
        Self::decode_state(&crate::io::read_bytes(path)?)
    }
}

/// Runs optimizer steps until `run.step == until`.
///
/// `step_fn` builds the loss for one step on a freshly bound graph and
/// returns it with the number of tokens consumed. Gradients are taken for
/// every trainable parameter; frozen parameters are checked for drift at the
/// end.
pub fn train_until<F>(
    model: &mut DecoderModel,
    run: &mut TrainRun,
    cfg: &TrainConfig,
    until: u64,
    mut metrics: Option<&mut MetricsWriter>,
    mut step_fn: F,
) -> Result<()>
where
    F: FnMut(&mut Graph, &Bound, &DecoderModel, u64) -> Result<(Var, u64)>,
{
    cfg.validate()?;
    let frozen_before = model.frozen_hash();
    let start = Instant::now();
    while run.step < until {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (loss, tokens) = step_fn(&mut g, &bound, model, run.step)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss at step {}", run.step)));
        }
        g.backward(loss)?;
        let mut grads = IndexMap::new();
        for (name, var) in bound.iter() {
            let p = &model.params[name];
            if p.requires_grad {
                let gr = g.grad(var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
                grads.insert(name.to_string(), gr);
            }
        }
        drop(g);
        adam_step(model, &grads, &mut run.adam, cfg)?;
        run.step += 1;
        run.tokens_seen += tokens;
        run.losses.push((run.step, value));
        let wall = start.elapsed().as_millis() as u64;
        run.wall_ms.push(wall);
        if let Some(w) = metrics.as_deref_mut() {
            if run.step.is_multiple_of(cfg.log_every) {
                w.write(&MetricRecord {
                    step: run.step,
                    loss: value,
                    tokens_seen: run.tokens_seen,
                    wall_ms: wall,
                    stage: run.stage.as_str().into(),
                    variant: run.variant.clone(),
                })?;
            }
        }
    }
    if model.frozen_hash() != frozen_before {
        return Err(Error::FrozenDrift(run.stage.as_str().into()));
    }
    Ok(())
}

/// Stage-one loss: mean over layers of the per-layer alignment loss.
fn stage1_loss(
    g: &mut Graph,
    b: &Bound,
    model: &DecoderModel,
    batch: &Batch,
    layer: Option<usize>,
) -> Result<Var> {
    let out = model.forward(g, b, &batch.tokens, batch.layout)?;
    let d = model.config.d_model;
    let mut terms = Vec::new();
    for (i, p) in out.pairs.iter().enumerate() {
        if layer.is_none_or(|l| l == i) {
            let l = alignment_loss(g, p.teacher, p.student, d)?;
            terms.push(l);
        }
    }
    mean_of(g, &terms)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::Invalid("no loss terms".into()))?;
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64)?)
}

/// Mean alignment loss of a wrapped model on one batch.
pub fn eval_alignment(model: &DecoderModel, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind_constant(&mut g);
    let l = stage1_loss(&mut g, &b, model, batch, None)?;
    Ok(g.value(l).item())
}

/// Stage one: trains only the student mixers of a wrapped model to match
/// the teacher attention outputs layer by layer.
pub fn stage1_align(
    wrapped: &mut DecoderModel,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    run: &mut TrainRun,
    metrics: Option<&mut MetricsWriter>,
) -> Result<()> {
    if wrapped.config.attention_kind != AttentionKind::Wrapper {
        return Err(Error::Invalid("stage 1 needs a wrapped model".into()));
    }
    let n_layers = wrapped.config.n_layers as u64;
    let per_layer = cfg.max_steps.div_ceil(n_layers).max(1);
    let layer_of = |step: u64| (step / per_layer).min(n_layers - 1) as usize;
    let set_mask = |m: &mut DecoderModel, layer: Option<usize>| {
        let prefix = layer.map(|l| format!("layers.{l}.tm."));
        let mask = FreezeMask::from_fn(m, |n| {
            param_group(n) == ParamGroup::TimeMix
                && prefix.as_ref().is_none_or(|p| n.starts_with(p.as_str()))
        });
        apply_freeze(m, &mask)
    };
    if !cfg.layerwise {
        set_mask(wrapped, None)?;
        return train_until(wrapped, run, cfg, cfg.max_steps, metrics, |g, b, m, step| {
            let batch = data.batch(step);
            let l = stage1_loss(g, b, m, &batch, None)?;
            Ok((l, batch.tokens.len() as u64))
        });
    }
    let mut metrics = metrics;
    while run.step < cfg.max_steps {
        let layer = layer_of(run.step);
        set_mask(wrapped, Some(layer))?;
        let until = ((layer as u64 + 1) * per_layer).min(cfg.max_steps);
        train_until(wrapped, run, cfg, until, metrics.as_deref_mut(), |g, b, m, step| {
            let batch = data.batch(step);
            let l = stage1_loss(g, b, m, &batch, Some(layer))?;
            Ok((l, batch.tokens.len() as u64))
        })?;
    }
    Ok(())
}

/// Mask of a distillation run: the token mixers, plus the MLPs unless
/// frozen.
pub fn distill_mask(model: &DecoderModel, freeze_mlp: bool) -> FreezeMask {
    FreezeMask::from_fn(model, |n| match param_group(n) {
        ParamGroup::TimeMix | ParamGroup::Attention => true,
        ParamGroup::Mlp => !freeze_mlp,
        _ => false,
    })
}

/// Puts `student` into the gate mode of `cfg`, removing gates for
/// gate-free runs.
pub fn prepare_student(student: &DecoderModel, cfg: &TrainConfig) -> Result<DecoderModel> {
    let has_gates = student.params.keys().any(|n| is_gate_param(n));
    match (cfg.gate_mode, has_gates) {
        (GateMode::GateFree, true) => Ok(drop_gates(student)),
        (GateMode::Gated, false) if student.is_recurrent() => Err(Error::config(
            "gate_mode",
            "gated distillation needs a student that still has its gates",
        )),
        _ => {
            let mut s = student.clone();
            if s.is_recurrent() {
                s.config.gate_mode = cfg.gate_mode;
            }
            Ok(s)
        }
    }
}

/// Held-out word-level KL averaged over `batches`.
pub fn eval_kl(teacher: &DecoderModel, student: &DecoderModel, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let t = forward_batch(teacher, &b.tokens, b.layout)?;
        let s = forward_batch(student, &b.tokens, b.layout)?;
        total += kd_loss_value(&t, &s)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Stage two: word-level KL distillation of `student` from `teacher`.
/// The teacher is never modified.
pub fn stage2_distill(
    teacher: &DecoderModel,
    student: &mut DecoderModel,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    run: &mut TrainRun,
    metrics: Option<&mut MetricsWriter>,
) -> Result<()> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::Invalid(format!(
            "vocab mismatch: teacher {} vs student {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    if student.config.attention_kind == AttentionKind::Wrapper {
        return Err(Error::Invalid("unwrap the student before distillation".into()));
    }
    let mask = distill_mask(student, cfg.freeze_mlp);
    apply_freeze(student, &mask)?;
    train_until(student, run, cfg, cfg.max_steps, metrics, |g, b, m, step| {
        let batch = data.batch(step);
        let t = forward_batch(teacher, &batch.tokens, batch.layout)?;
        let out = m.forward(g, b, &batch.tokens, batch.layout)?;
        let l = kd_loss_wordlevel(g, &t, out.logits)?;
        Ok((l, batch.tokens.len() as u64))
    })
}

/// Next-token cross-entropy on one batch.
pub fn lm_loss(g: &mut Graph, b: &Bound, model: &DecoderModel, batch: &Batch) -> Result<Var> {
    let out = model.forward(g, b, &batch.tokens, batch.layout)?;
    Ok(g.cross_entropy(out.logits, &batch.targets)?)
}

/// Cross-entropy training with the trainable set given by `mask`.
pub fn train_lm(
    model: &mut DecoderModel,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    run: &mut TrainRun,
    metrics: Option<&mut MetricsWriter>,
    mask: &FreezeMask,
) -> Result<()> {
    apply_freeze(model, mask)?;
    train_until(model, run, cfg, cfg.max_steps, metrics, |g, b, m, step| {
        let batch = data.batch(step);
        let l = lm_loss(g, b, m, &batch)?;
        let n = batch.targets.iter().filter(|t| t.is_some()).count() as u64;
        Ok((l, n))
    })
}

/// Stage three: cross-entropy fine-tuning at a longer context than the
/// previous stage. Everything trains except the MLPs when `freeze_mlp`.
pub fn stage3_sft(
    student: &mut DecoderModel,
    data: &dyn BatchSource,
    cfg: &TrainConfig,
    run: &mut TrainRun,
    metrics: Option<&mut MetricsWriter>,
    previous_seq_len: Option<usize>,
) -> Result<()> {
    if let Some(prev) = previous_seq_len {
        if cfg.seq_len <= prev {
            return Err(Error::config(
                "seq_len",
                format!("fine-tuning length {} must exceed the previous {prev}", cfg.seq_len),
            ));
        }
    }
    if !student.is_recurrent() && cfg.seq_len > student.config.max_seq_len {
        return Err(Error::config("seq_len", "exceeds the model's max_seq_len"));
    }
    let mask = FreezeMask::from_fn(student, |n| !(cfg.freeze_mlp && param_group(n) == ParamGroup::Mlp));
    train_lm(student, data, cfg, run, metrics, &mask)
}

#[cfg(test)]
mod tests;
