//! Offline evaluation: lexical diversity of dialogue corpora, significance
//! testing and the recommendation experiment.

pub mod diversity;
pub mod recommendation;
pub mod stats;
