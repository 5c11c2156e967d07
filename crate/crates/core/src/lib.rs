//! Co-optimization and closed-loop evaluation toolkit for modular
//! end-to-end driving stacks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cost;
pub mod fixtures;
pub mod ir;
pub mod metrics;
pub mod passes;
pub mod quant;
pub mod runner;
pub mod sim;
