//! Cross-modal guided decoding for small vision-language transformers.
//!
//! Generation contrasts an unmasked *expert* pass with an *amateur* pass in
//! which the most-attended visual keys are removed from attention at a few
//! selected layers. The fused logits amplify what the expert knows from the
//! image beyond what the degraded view still predicts.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod fixtures;
pub mod guidance;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod trace_io;

pub use error::{CmgError, Result};
