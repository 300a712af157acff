//! Byte-level base language model: tokenizer, transformer, pretraining and
//! force-decoded evaluation.

mod decode;
mod model;
mod tokenizer;
mod train;

pub use decode::{force_decode_nll, force_decode_tokens, generate, CompletionReport};
pub use model::{BaseModel, LinearId, LinearKind, ModelConfig};
pub use tokenizer::Tokenizer;
pub use train::{mean_nll, pretrain, PretrainConfig, PretrainLog};

pub(crate) use model::Adaptation;
pub(crate) use train::training_window;
