//! Evidence-grounded alignment rewards and self-correcting preference
//! learning for radiology report pipelines, at desk scale.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`corpus`]: on-disk data model for studies and deterministic synthetic
//!   corpora built from a per-disease sentence template bank.
//! - [`labeler`]: disease-status extraction and per-disease report
//!   segmentation, with a rule-based default and a remote HTTP backend.
//! - [`grounding`]: disease response maps from pluggable providers, with a
//!   deterministic synthetic provider and an on-disk cache.
//! - [`gear`]: group-wise alignment rewards over response maps, partitioned
//!   into true-positive, false-negative, and false-positive disease groups.
//! - [`spl`]: preference dataset construction, a lightweight preference
//!   predictor, and dual-threshold KL filtering of trustworthy samples.
//! - [`refine`]: re-integration of candidate observations into one refined
//!   report, constrained by trusted disease evidence.
//! - [`policy`]: a toy per-disease report policy and REINFORCE training loop
//!   that closes the cycle: sample, refine, score, update.
//! - [`metrics`]: BLEU, ROUGE-L, and disease-level precision/recall/F1.

pub mod backends;
mod binio;
pub mod corpus;
mod error;
pub mod gear;
pub mod grounding;
pub mod http;
pub mod labeler;
pub mod llm;
pub mod metrics;
pub mod policy;
pub mod refine;
pub mod spl;
pub mod templates;
pub mod text;

pub use error::{Error, Result};
