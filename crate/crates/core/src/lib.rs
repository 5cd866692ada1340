//! Universal-identity backdoor poisoning of GE2E-trained d-vector speaker
//! verification models.
//!
//! The pipeline runs log-mel featurization ([`dataio`]), a fully connected
//! d-vector network with analytic gradients ([`model`]), the GE2E loss with
//! the outer-attacker term ([`ge2e`]), attacker selection and batch
//! poisoning ([`poison`]), a deterministic trainer ([`trainer`]) and
//! EER / attack-success evaluation ([`eval`]). [`runner`] ties them into
//! config-driven experiments.

// `!(x >= lo)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod eval;
pub mod ge2e;
pub mod model;
pub mod par;
pub mod poison;
pub mod rng;
pub mod runner;
pub mod trainer;

pub use error::{Error, Result};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value maps are ordered by key.
    let canonical = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}
