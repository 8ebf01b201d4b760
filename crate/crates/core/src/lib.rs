//! Multimodal representation learning over Hi-C contact maps and epigenomic
//! tracks: preprocessing, contrastive pretraining, task fine-tuning, loop
//! annotation and evaluation on desk-scale data.

// `!(x > t)` is the intended NaN-rejecting form; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod crossmodal;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion_heads;
pub mod genomic_io;
pub mod loop_annotation;
pub mod model;
pub mod nn;
pub mod plot;
pub mod preprocessing;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
