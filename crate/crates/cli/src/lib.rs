//! Configuration loading and experiment drivers behind the `steinflow` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
