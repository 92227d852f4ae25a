//! Deep variable-block chain (DVC) classification with adaptive variable selection.
//!
//! Features are grouped into correlated variable blocks ([`blocks`]), the blocks
//! are ordered greedily into a chain whose prefixes each carry an LSTM-style
//! network with per-cell parameters ([`model`], [`training`], [`chain`]), and a
//! pruned regression tree over per-sample ν-numbers decides how many blocks each
//! region of the feature space needs ([`avs`]).

pub mod avs;
pub mod blocks;
pub mod chain;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{DvcError, Result};
