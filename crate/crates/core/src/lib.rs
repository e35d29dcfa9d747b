//! Pseudolabel subset selection for weak supervision.
//!
//! The pipeline is: aggregate labeling-function votes into pseudolabels
//! ([`label_models`]), build a K-nearest-neighbor graph over the covered
//! examples ([`graph`]), rank examples by the cut statistic or by soft-label
//! entropy and keep the best fraction ([`selectors`]), then train and
//! evaluate a linear end model across a range of kept fractions
//! ([`end_model`]). [`synth`] generates two-view data with known
//! class-conditional noise for checking the whole chain.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod end_model;
pub mod error;
pub mod graph;
pub mod label_models;
pub mod selectors;
pub mod synth;

pub use data::{Dataset, EmbeddingMatrix, LabelMatrix, PseudoLabeling, ABSTAIN};
pub use error::{Error, Result};
pub use graph::NeighborGraph;
pub use selectors::{ScoreMethod, ScoredSelection};
