//! Adversarial shadow detection and removal for OCT B-scans.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluate;
pub mod imaging;
pub mod losses;
pub mod manifest;
pub mod net;
pub mod optim;
pub mod phantom;
pub mod remover;
pub mod trainer;

pub use error::{Error, Result};
