use rand::seq::SliceRandom;
use rand::Rng;

use crate::init::derived_rng;

/// Symbols of the synthetic text, as byte token ids.
pub const ALPHABET: &[u8; 8] = b"abcdefg ";
/// Successor weights, assigned per context to three distinct symbols.
pub const SUCCESSOR_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];
pub const ORDER: usize = 3;

/// Weighted order-3 Markov source over [`ALPHABET`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    /// For context index `c`, the successor symbol indices in decreasing
    /// weight order.
    successors: Vec<[usize; 3]>,
}

fn n_contexts() -> usize {
    ALPHABET.len().pow(ORDER as u32)
}

impl MarkovSource {
    pub fn new(seed: u64) -> Self {
        let mut rng = derived_rng(seed, 0);
        let mut symbols: Vec<usize> = (0..ALPHABET.len()).collect();
        let successors = (0..n_contexts())
            .map(|_| {
                symbols.shuffle(&mut rng);
                [symbols[0], symbols[1], symbols[2]]
            })
            .collect();
        Self { successors }
    }

    pub fn context_index(ctx: &[usize]) -> usize {
        ctx.iter().fold(0, |acc, s| acc * ALPHABET.len() + s)
    }

    /// Successor symbol indices of a context, most likely first.
    pub fn ranking(&self, ctx: &[usize]) -> [usize; 3] {
        self.successors[Self::context_index(ctx)]
    }

    /// `n` symbol indices drawn from the source.
    pub fn sample_symbols(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..ORDER.min(n))
            .map(|_| rng.random_range(0..ALPHABET.len()))
            .collect();
        while out.len() < n {
            let ctx = &out[out.len() - ORDER..];
            let succ = self.ranking(ctx);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = succ[2];
            for (s, w) in succ.iter().zip(SUCCESSOR_WEIGHTS) {
                acc += w;
                if u < acc {
                    pick = *s;
                    break;
                }
            }
            out.push(pick);
        }
        out
    }

    /// `n` byte tokens drawn from the source.
    pub fn sample_bytes(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        self.sample_symbols(rng, n)
            .into_iter()
            .map(|s| ALPHABET[s] as usize)
            .collect()
    }
}

/// Symbol index of a byte token, if it belongs to the alphabet.
pub fn symbol_of(token: usize) -> Option<usize> {
    ALPHABET.iter().position(|b| *b as usize == token)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    pub source: MarkovSource,
}

/// Train and held-out streams come from separate random streams of the
/// same source.
pub fn gen_char_corpus(seed: u64, n_train: usize, n_heldout: usize) -> CharCorpus {
    let source = MarkovSource::new(seed);
    let train = source.sample_bytes(&mut derived_rng(seed, 1), n_train);
    let heldout = source.sample_bytes(&mut derived_rng(seed, 2), n_heldout);
    CharCorpus {
        train,
        heldout,
        source,
    }
}
