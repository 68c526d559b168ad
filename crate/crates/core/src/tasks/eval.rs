use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::probes::{eval_set, pack, TaskKind, TaskSample, TaskSpec};
use crate::autograd::SeqLayout;
use crate::error::{Error, Result};
use crate::model::{forward_batch, DecoderModel};
use crate::tensor::Tensor;
use crate::train::{eval_kl, Batch, StreamBatches};

/// Anything that maps packed token sequences to next-token logits.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    fn logits(&self, tokens: &[usize], layout: SeqLayout) -> Result<Tensor>;
}

impl Scorer for DecoderModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, tokens: &[usize], layout: SeqLayout) -> Result<Tensor> {
        forward_batch(self, tokens, layout)
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[target] - max - z.ln()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `exp` of the mean next-token cross-entropy over non-overlapping
/// windows of `seq_len` tokens.
pub fn eval_perplexity(model: &dyn Scorer, corpus: &[usize], seq_len: usize, batch: usize) -> Result<f64> {
    if corpus.len() < seq_len + 1 || seq_len == 0 {
        return Err(Error::Invalid(format!(
            "corpus of {} tokens is too short for windows of {seq_len}",
            corpus.len()
        )));
    }
    let n_windows = (corpus.len() - 1) / seq_len;
    let mut nll = 0.0;
    let mut count = 0usize;
    let v = model.vocab_size();
    for chunk_start in (0..n_windows).step_by(batch.max(1)) {
        let nb = batch.max(1).min(n_windows - chunk_start);
        let mut tokens = Vec::with_capacity(nb * seq_len);
        let mut targets = Vec::with_capacity(nb * seq_len);
        for w in chunk_start..chunk_start + nb {
            let s = w * seq_len;
            tokens.extend_from_slice(&corpus[s..s + seq_len]);
            targets.extend_from_slice(&corpus[s + 1..s + seq_len + 1]);
        }
        let logits = model.logits(&tokens, SeqLayout::new(nb, seq_len))?;
        for (r, t) in targets.iter().enumerate() {
            nll -= log_softmax_at(&logits.data()[r * v..(r + 1) * v], *t);
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Accuracy at one evaluation length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthAccuracy {
    pub length: usize,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    /// Mean over all buckets, weighted by scored items.
    pub overall: f64,
    pub per_length: Vec<LengthAccuracy>,
}

impl TaskAccuracy {
    pub fn at(&self, length: usize) -> Option<f64> {
        self.per_length
            .iter()
            .find(|l| l.length == length)
            .map(|l| l.accuracy)
    }
}

/// Per-position or exact-match scores of `samples`: returns
/// `(correct, scored)` counts.
///
/// With `exact_match`, a sample counts once and is correct only if every
/// targeted position is; for teacher-forced answers this equals greedy
/// decoding.
pub fn score_samples(
    model: &dyn Scorer,
    samples: &[TaskSample],
    exact_match: bool,
    batch: usize,
) -> Result<(usize, usize)> {
    let v = model.vocab_size();
    let (mut correct, mut scored) = (0, 0);
    for chunk in samples.chunks(batch.max(1)) {
        let b: Batch = pack(chunk);
        let logits = model.logits(&b.tokens, b.layout)?;
        let seq = b.layout.seq;
        for (i, _) in chunk.iter().enumerate() {
            let mut all = true;
            for t in 0..seq {
                let r = i * seq + t;
                if let Some(target) = b.targets[r] {
                    let ok = argmax(&logits.data()[r * v..(r + 1) * v]) == target;
                    if exact_match {
                        all &= ok;
                    } else {
                        correct += ok as usize;
                        scored += 1;
                    }
                }
            }
            if exact_match {
                correct += all as usize;
                scored += 1;
            }
        }
    }
    Ok((correct, scored))
}

/// Exact-match accuracy for passkey, per-position accuracy for the state
/// tracking tasks and next-token accuracy for text; one bucket per
/// evaluation length.
pub fn eval_task_accuracy(model: &dyn Scorer, spec: &TaskSpec, batch: usize) -> Result<TaskAccuracy> {
    if model.vocab_size() < spec.vocab_size() {
        return Err(Error::Invalid(format!(
            "model vocab {} does not cover task vocab {}",
            model.vocab_size(),
            spec.vocab_size()
        )));
    }
    let exact = spec.kind == TaskKind::Passkey;
    let mut per_length = Vec::new();
    let (mut c_all, mut n_all) = (0, 0);
    for len in spec.lengths() {
        let samples = eval_set(spec, len);
        let (c, n) = score_samples(model, &samples, exact, batch)?;
        c_all += c;
        n_all += n;
        per_length.push(LengthAccuracy {
            length: len,
            accuracy: c as f64 / n.max(1) as f64,
            n,
        });
    }
    Ok(TaskAccuracy {
        overall: c_all as f64 / n_all.max(1) as f64,
        per_length,
    })
}

impl TaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::CharLm => "char_lm",
            TaskKind::Passkey => "passkey",
            TaskKind::Parity => "parity",
            TaskKind::GroupComp => "group_comp",
        }
    }
}

/// What [`evaluate`] measures.
#[derive(Debug, Clone, Default)]
pub struct EvalPlan<'a> {
    /// Held-out text for perplexity and teacher KL.
    pub heldout: Option<&'a [usize]>,
    pub seq_len: usize,
    /// Windows of held-out text used for KL.
    pub kl_windows: usize,
    pub task: Option<TaskSpec>,
    pub teacher: Option<&'a DecoderModel>,
    pub batch: usize,
}

/// Named metrics of one model: `ppl`, `kl` against the teacher, and
/// `<task>@<length>` accuracies.
pub fn evaluate(model: &DecoderModel, plan: &EvalPlan<'_>) -> Result<IndexMap<String, f64>> {
    let mut out = IndexMap::new();
    let batch = plan.batch.max(1);
    if let Some(text) = plan.heldout {
        let mut seq = plan.seq_len;
        if !model.is_recurrent() {
            seq = seq.min(model.config.max_seq_len);
        }
        out.insert("ppl".to_string(), eval_perplexity(model, text, seq, batch)?);
        if let Some(teacher) = plan.teacher {
            let seq = seq.min(teacher.config.max_seq_len);
            let stream = StreamBatches::new(text.to_vec(), 1, seq, 0);
            let batches: Vec<Batch> = (0..plan.kl_windows.max(1))
                .map_while(|i| stream.sequential(i))
                .collect();
            out.insert("kl".to_string(), eval_kl(teacher, model, &batches)?);
        }
    }
    if let Some(spec) = &plan.task {
        let acc = eval_task_accuracy(model, spec, batch)?;
        for l in &acc.per_length {
            out.insert(format!("{}@{}", spec.kind.tag(), l.length), l.accuracy);
        }
    }
    Ok(out)
}
