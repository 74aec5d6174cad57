//! Sequence personalization for ranking: a transformer-style sequence
//! encoder with max pooling, pooled pretrained and on-the-fly entity
//! representations, deep-and-cross ranking models, calibration and the
//! representation learners that feed them.

pub mod adsformer;
pub mod autograd;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod pretrain;
pub mod ranking;
pub mod rng;
pub mod sequences;
pub mod tensor;
pub mod training_eval;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{Param, ParamId, ParamStore};
pub use rng::Stream;
pub use tensor::Tensor;
