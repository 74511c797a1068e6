//! Geo-temporal context enrichment and context-aware sequential
//! recommendation.

pub mod corpus;
pub mod enrichment;
pub mod io;
pub mod embedding;
pub mod diagnostics;
pub mod losses;
pub mod sampling;
pub mod model;
pub mod evaluation;
pub mod training;
pub mod synth;
