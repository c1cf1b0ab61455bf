//! Cloth-changing person re-identification with hairstyle-oriented
//! augmentation, cloth-preserved erasing and parsing-guided attention.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod checkpoint;
pub mod config;
pub mod cpre;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod hsoa;
pub mod losses;
pub mod masks;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sample;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid, SoftMask};
pub use masks::{LabelSchema, RegionMasks, RegionSets, SemanticMap};
pub use sample::{HairstyleLabel, Sample, View};
pub use seed::SeedStream;
