//! Zero-shot cross-lingual NLU laboratory: a tape-based autodiff engine, a
//! toy encoder with joint intent/entity heads, a family of auxiliary
//! alignment losses, adaptive CoV loss weighting, IO/BIO tagging utilities,
//! synthetic parallel-corpus generation, and evaluation metrics with a
//! two-proportion significance test.

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tagging;
pub mod tensor;
pub mod trainer;
pub mod weighting;
