//! Image-to-scene-graph translation toolkit.
//!
//! Scene graphs are serialized into token sequences with relation-aware
//! `[ENT]` / `[REL]` delimiters, generated by a pluggable token scorer with
//! multi-round nucleus sampling, parsed back into triplets, grounded to boxes
//! by an attention head, converted to benchmark categories, post-processed
//! and evaluated with the usual SGG recall metrics.

pub mod codec;
pub mod conversion;
pub mod decoder;
pub mod eval;
pub mod fixture;
pub mod gradcheck;
pub mod grounding;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod tensor;
pub mod tokenizer;
