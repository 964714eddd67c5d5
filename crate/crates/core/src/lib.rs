//! Desk-scale sequence-to-sequence transformer toolkit for grafting new
//! input networks onto pretrained bodies, within-network adapters and
//! selective parameter freezing.

pub mod accounting;
pub mod adapters;
pub mod data;
pub mod error;
pub mod freeze;
pub mod input_module;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
