//! Experiment runner for the online data-assimilation loop: presets,
//! config files, run directories, offline verification and replay.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod runner;
pub mod verify;
