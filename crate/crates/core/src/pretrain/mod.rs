//! Learners for the frozen listing tables: session skip-gram and the
//! co-click retrieval encoder.

mod air;
mod skipgram;

pub use air::{
    air_batch_loss, air_table, in_batch_softmax_loss, retrieval_accuracy, train_air, AirConfig,
    AirModel, AirTraining, AIR_DIM,
};
pub use skipgram::{
    hs_pair_loss, ns_pair_loss, train_skipgram, HuffmanTree, SkipGramConfig, SkipGramMode,
    SkipGramModel, SKIPGRAM_DIM,
};
