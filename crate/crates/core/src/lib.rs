//! Snippet-based video expression classifier: tensor autodiff core, snippet
//! pipeline, attention-augmented feature extraction, encoder-decoder
//! transformer, and the shuffled-order training loop.

pub mod rng;
pub mod tensor;
