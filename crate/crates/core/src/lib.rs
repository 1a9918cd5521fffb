//! Decoder-only neural machine translation at desk scale.
//!
//! A single causal language model reads `<src> x1..xS <tgt> y1..yT </s>` and is
//! trained with a decaying auto-encoding loss on the source side plus the usual
//! translation loss on the target side. An encoder-decoder baseline built from
//! the same blocks is included for comparison, together with the data pipeline,
//! optimizer, incremental decoding and the evaluation tools (BLEU, language id,
//! off-target analysis) needed to run standard, pivot and zero-shot protocols.

pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use data::{TokenId, Vocabulary};
pub use error::{Error, Result};
pub use model::{Family, Model, ModelConfig};
pub use tensor::{Float, Tape, Tensor, Var};
