#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod networks;
pub mod postproc;
pub mod tensor;
pub mod voxel_grid;
