use rand::Rng;

use crate::autograd::SeqLayout;
use crate::init::derived_rng;

/// A packed batch: `tokens[r]` is fed at row `r`, `targets[r]` is the
/// token that row should predict (`None` rows carry no loss).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub layout: SeqLayout,
}

/// Deterministic batches indexed by training step.
pub trait BatchSource {
    fn batch(&self, step: u64) -> Batch;
}

/// Random windows of a token stream; window starts depend only on
/// `(seed, step)`.
#[derive(Debug, Clone)]
pub struct StreamBatches {
    tokens: Vec<usize>,
    batch: usize,
    seq: usize,
    seed: u64,
}

impl StreamBatches {
    /// Panics if the stream is shorter than one window plus its target.
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize, seed: u64) -> Self {
        assert!(tokens.len() > seq, "stream of {} tokens cannot fill windows of {seq}", tokens.len());
        Self {
            tokens,
            batch,
            seq,
            seed,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Consecutive non-overlapping windows from the start of the stream.
    pub fn sequential(&self, index: usize) -> Option<Batch> {
        let span = self.batch * self.seq;
        let start = index * span;
        if start + span + 1 > self.tokens.len() {
            return None;
        }
        Some(self.windows((0..self.batch).map(|b| start + b * self.seq)))
    }

    fn windows(&self, starts: impl Iterator<Item = usize>) -> Batch {
        let mut tokens = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for s in starts {
            tokens.extend_from_slice(&self.tokens[s..s + self.seq]);
            targets.extend(self.tokens[s + 1..s + self.seq + 1].iter().map(|t| Some(*t)));
        }
        Batch {
            tokens,
            targets,
            layout: SeqLayout::new(self.batch, self.seq),
        }
    }
}

impl BatchSource for StreamBatches {
    fn batch(&self, step: u64) -> Batch {
        let mut rng = derived_rng(self.seed, step);
        let max_start = self.tokens.len() - self.seq - 1;
        let starts: Vec<usize> = (0..self.batch)
            .map(|_| rng.random_range(0..=max_start))
            .collect();
        self.windows(starts.into_iter())
    }
}

impl<F: Fn(u64) -> Batch> BatchSource for F {
    fn batch(&self, step: u64) -> Batch {
        self(step)
    }
}
