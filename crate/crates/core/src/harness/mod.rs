//! Verification commands, PSNR evaluation and experiment campaigns.

pub mod experiment;
pub mod verify;

pub use experiment::*;
pub use verify::*;
