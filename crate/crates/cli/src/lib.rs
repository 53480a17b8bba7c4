//! Experiment runner binding data generation, training and evaluation into
//! reproducible subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
