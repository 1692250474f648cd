//! Desk-scale image captioning: a patch-based visual encoder, a causal
//! language decoder, a cross-modal fusion module with self-ensemble logits,
//! CE + SCST training, beam-search decoding, CIDEr-D/BLEU@4 metrics and a
//! synthetic shapes-and-captions corpus generator.

pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
