//! Kernel optimization lineages: de-optimization into stepwise chains,
//! lifting of transitions into reusable skills, retrieval and
//! materialization under a cost budget.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod gate;
pub mod model;
pub mod process;
pub mod registry;
pub mod rewrite;
pub mod cost;
pub mod diff;
pub mod library;
pub mod lift;
pub mod materialize;
pub mod sim;
pub mod deopt;
pub mod store;
pub mod analytics;
pub mod config;
