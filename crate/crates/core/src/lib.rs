//! Survival prediction from multimodal patient data.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: a small define-by-run reverse-mode autodiff engine with Adam.
//! - [`survstat`]: C-index, Cox partial-likelihood loss, Kaplan-Meier and logrank.
//! - [`modality`]: per-modality graphs, GraphSAGE-style layers and attention pooling.
//! - [`bipartite`]: the patient-modality graph, edge dropout, siamese encoder and
//!   complete/incomplete alignment loss.
//! - [`ecmc`]: rank-stability confidence tracking and surrogate event times for
//!   reliable censored patients.
//! - [`pipeline`]: training schedule, cross-validation, ablations and
//!   missing-modality evaluation.
//! - [`dataio`]: synthetic cohorts, dataset files and result export.

pub mod bipartite;
pub mod dataio;
pub mod diffcore;
pub mod ecmc;
mod error;
pub mod modality;
pub mod pipeline;
pub mod survstat;

pub use error::{Error, Result};
