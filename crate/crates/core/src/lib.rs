#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod augment;
pub mod catalog;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod tensor;
