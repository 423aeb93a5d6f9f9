//! Profit-aware learning to rank for flagging high-risk traders.
//!
//! Traders are ranked within small groups by a transformer that attends
//! over each trader's feature tokens and then across the traders of a group.
//! Training uses a pairwise cross-entropy weighted by log profit gaps, and
//! evaluation covers ranking metrics, classification under a known or
//! unknown positive rate, and the market maker's hedged P&L.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
