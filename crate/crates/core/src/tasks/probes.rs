use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::MarkovSource;
use crate::autograd::SeqLayout;
use crate::init::derived_rng;
use crate::train::{Batch, BatchSource};

pub const PASSKEY_MARK: u8 = b'#';
pub const PASSKEY_QUERY: u8 = b'?';
pub const PARITY_BOS: usize = 2;
pub const PARITY_VOCAB: usize = 3;
/// Input token of the transposition `(0 1)`.
pub const S3_SWAP: usize = 0;
/// Input token of the 3-cycle `(0 1 2)`.
pub const S3_CYCLE: usize = 1;
pub const S3_BOS: usize = 7;
pub const S3_VOCAB: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CharLm,
    Passkey,
    Parity,
    GroupComp,
}

impl TaskKind {
    pub fn vocab_size(self) -> usize {
        match self {
            TaskKind::CharLm | TaskKind::Passkey => 256,
            TaskKind::Parity => PARITY_VOCAB,
            TaskKind::GroupComp => S3_VOCAB,
        }
    }
}

/// A task instance. For state tracking `seq_len_*` counts input symbols
/// after the start token; for passkey it is the context length including
/// the query mark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len_train: usize,
    pub seq_len_eval: usize,
    /// Lengths reported separately; defaults to `[seq_len_eval]`.
    #[serde(default)]
    pub eval_lengths: Vec<usize>,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Passkey digits.
    #[serde(default = "default_key_len")]
    pub key_len: usize,
}

fn default_key_len() -> usize {
    4
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seq_len_train: usize, seq_len_eval: usize, seed: u64) -> Self {
        Self {
            kind,
            seq_len_train,
            seq_len_eval,
            eval_lengths: vec![seq_len_eval],
            seed,
            n_train: 0,
            n_eval: 100,
            key_len: default_key_len(),
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        if self.eval_lengths.is_empty() {
            vec![self.seq_len_eval]
        } else {
            self.eval_lengths.clone()
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.kind.vocab_size()
    }
}

/// One labelled sequence: `targets[t]` is what row `t` should predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasskeySample {
    /// Context ending with the query mark.
    pub context: Vec<usize>,
    /// Index of the first digit in `context`.
    pub key_pos: usize,
    pub answer: Vec<usize>,
}

impl PasskeySample {
    /// Context followed by the answer, with targets on the answer only.
    pub fn to_task_sample(&self) -> TaskSample {
        let mut tokens = self.context.clone();
        tokens.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        let mut targets = vec![None; tokens.len()];
        let q = self.context.len() - 1;
        for (i, d) in self.answer.iter().enumerate() {
            targets[q + i] = Some(*d);
        }
        TaskSample { tokens, targets }
    }
}

/// Filler text with `#` and distinct digits at `key_pos` (random when
/// `None`), ending in `?`. Panics if the key does not fit.
pub fn gen_passkey(
    source: &MarkovSource,
    rng: &mut impl Rng,
    context_len: usize,
    key_len: usize,
    key_pos: Option<usize>,
) -> PasskeySample {
    assert!((1..=10).contains(&key_len), "key length {key_len} outside 1..=10");
    assert!(context_len >= key_len + 2, "context {context_len} too short for key {key_len}");
    let free = context_len - key_len - 2;
    let mark = key_pos.map(|p| p.min(free)).unwrap_or_else(|| rng.random_range(0..=free));
    let digits: Vec<usize> = sample_indices(rng, 10, key_len)
        .into_iter()
        .map(|d| b'0' as usize + d)
        .collect();
    let filler = source.sample_bytes(rng, free);
    let mut context = Vec::with_capacity(context_len);
    context.extend_from_slice(&filler[..mark]);
    context.push(PASSKEY_MARK as usize);
    context.extend_from_slice(&digits);
    context.extend_from_slice(&filler[mark..]);
    context.push(PASSKEY_QUERY as usize);
    PasskeySample {
        context,
        key_pos: mark + 1,
        answer: digits,
    }
}

/// Running parity after each bit, with a start token in front.
pub fn parity_sample(bits: &[usize]) -> TaskSample {
    let mut tokens = vec![PARITY_BOS];
    tokens.extend_from_slice(bits);
    let mut targets = vec![None];
    let mut p = 0;
    for b in bits {
        p ^= b;
        targets.push(Some(p));
    }
    TaskSample { tokens, targets }
}

pub fn gen_parity(rng: &mut impl Rng, len: usize) -> TaskSample {
    let bits: Vec<usize> = (0..len).map(|_| rng.random_range(0..2)).collect();
    parity_sample(&bits)
}

/// Permutations of {0, 1, 2} in lexicographic order; the class of a
/// permutation is its index here.
pub const S3_ELEMENTS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

pub fn s3_class(p: [usize; 3]) -> usize {
    S3_ELEMENTS.iter().position(|e| *e == p).expect("a permutation of three")
}

fn s3_generator(token: usize) -> [usize; 3] {
    match token {
        S3_SWAP => [1, 0, 2],
        S3_CYCLE => [1, 2, 0],
        _ => panic!("not an S3 generator token: {token}"),
    }
}

/// Running product `p_t = p_{t-1} ∘ g_t` (apply `g_t` first), starting from
/// the identity.
pub fn group_comp_sample(gens: &[usize]) -> TaskSample {
    let mut tokens = vec![S3_BOS];
    tokens.extend_from_slice(gens);
    let mut targets = vec![None];
    let mut p = [0, 1, 2];
    for t in gens {
        let g = s3_generator(*t);
        p = [p[g[0]], p[g[1]], p[g[2]]];
        targets.push(Some(s3_class(p)));
    }
    TaskSample { tokens, targets }
}

pub fn gen_group_comp(rng: &mut impl Rng, len: usize) -> TaskSample {
    let gens: Vec<usize> = (0..len)
        .map(|_| if rng.random_bool(0.5) { S3_SWAP } else { S3_CYCLE })
        .collect();
    group_comp_sample(&gens)
}

/// One sample of `spec.kind` at length `len`, drawn from `rng`.
pub fn gen_sample(spec: &TaskSpec, source: &MarkovSource, rng: &mut impl Rng, len: usize) -> TaskSample {
    match spec.kind {
        TaskKind::Parity => gen_parity(rng, len),
        TaskKind::GroupComp => gen_group_comp(rng, len),
        TaskKind::Passkey => gen_passkey(source, rng, len, spec.key_len, None).to_task_sample(),
        TaskKind::CharLm => {
            let toks = source.sample_bytes(rng, len + 1);
            TaskSample {
                tokens: toks[..len].to_vec(),
                targets: toks[1..].iter().map(|t| Some(*t)).collect(),
            }
        }
    }
}

/// The fixed evaluation set at one length: pure in `(spec.seed, len)`.
pub fn eval_set(spec: &TaskSpec, len: usize) -> Vec<TaskSample> {
    let source = MarkovSource::new(spec.seed);
    let mut rng = derived_rng(spec.seed ^ 0x5eed_e7a1, len as u64);
    (0..spec.n_eval)
        .map(|_| gen_sample(spec, &source, &mut rng, len))
        .collect()
}

/// Packs equal-length samples into one batch.
pub fn pack(samples: &[TaskSample]) -> Batch {
    let seq = samples[0].tokens.len();
    assert!(samples.iter().all(|s| s.tokens.len() == seq), "samples differ in length");
    Batch {
        tokens: samples.iter().flat_map(|s| s.tokens.iter().copied()).collect(),
        targets: samples.iter().flat_map(|s| s.targets.iter().copied()).collect(),
        layout: SeqLayout::new(samples.len(), seq),
    }
}

/// Fresh training batches; each step draws its length uniformly from
/// `min_len..=spec.seq_len_train`.
#[derive(Debug, Clone)]
pub struct TaskBatches {
    pub spec: TaskSpec,
    pub batch_size: usize,
    pub min_len: usize,
    /// Score every next token, not only the task answers.
    pub dense: bool,
    source: MarkovSource,
}

impl TaskBatches {
    pub fn new(spec: TaskSpec, batch_size: usize, min_len: usize) -> Self {
        let source = MarkovSource::new(spec.seed);
        let min_len = min_len.clamp(1, spec.seq_len_train);
        Self {
            spec,
            batch_size,
            min_len,
            dense: false,
            source,
        }
    }

    pub fn dense(mut self) -> Self {
        self.dense = true;
        self
    }
}

/// Next-token targets at every position but the last, whose target is
/// kept from `s`.
fn densify(s: TaskSample) -> TaskSample {
    let n = s.tokens.len();
    let mut targets: Vec<Option<usize>> = s.tokens[1..].iter().map(|t| Some(*t)).collect();
    targets.push(s.targets[n - 1]);
    TaskSample {
        tokens: s.tokens,
        targets,
    }
}

impl BatchSource for TaskBatches {
    fn batch(&self, step: u64) -> Batch {
        let mut rng = derived_rng(self.spec.seed, 1_000_000 + step);
        let len = rng.random_range(self.min_len..=self.spec.seq_len_train);
        let samples: Vec<TaskSample> = (0..self.batch_size)
            .map(|_| gen_sample(&self.spec, &self.source, &mut rng, len))
            .map(|s| if self.dense { densify(s) } else { s })
            .collect();
        pack(&samples)
    }
}
