//! A desk-scale laboratory for turning a small grouped-query-attention
//! transformer into an RWKV-7 recurrent model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`autograd`]: dense tensors and a reverse-mode tape.
//! - [`layers`]: RMSNorm, SwiGLU, RoPE and GQA attention.
//! - [`timemix`]: the RWKV-7 time-mixing block and its recurrence.
//! - [`model`]: teacher construction, conversion to a recurrent student and
//!   the alignment wrapper.
//! - [`train`]: alignment, word-level distillation and fine-tuning stages.
//! - [`tasks`]: synthetic corpora, probes and the ablation report.
//! - [`io`]: checkpoints, corpus files, configs, metrics and manifests.

pub mod autograd;
pub mod error;
pub mod init;
pub mod io;
pub mod layers;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod timemix;
pub mod train;

pub use autograd::{Graph, SeqLayout, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Tensor, TensorError};
