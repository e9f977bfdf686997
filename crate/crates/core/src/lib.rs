pub mod datagen;
pub mod nets;
pub mod segments;
pub mod losses;
pub mod anchor_bank;
pub mod metrics;
pub mod trainer;
pub mod verify;
pub mod error;

pub use error::{Result, TemsrError};
