//! Synthetic corpora, probe tasks, evaluation and the ablation report.

mod corpus;
mod eval;
mod probes;
mod report;

pub use corpus::*;
pub use eval::*;
pub use probes::*;
pub use report::*;

#[cfg(test)]
mod tests;
