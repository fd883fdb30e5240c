//! Continual real-vs-forged image detection with historical distribution
//! preserving.
//!
//! The crate trains a small convolutional detector over a sequence of
//! synthetic forgery stages. Instead of storing past data, each finished
//! stage is distilled into a single universal adversarial perturbation (UAP)
//! kept in a pool; later stages replay pseudo-forged samples (real images
//! plus a pooled perturbation) with an entropy loss and distill real and
//! pseudo features against the frozen previous model. SFT and Joint
//! baselines, ACC/AUC/AVG/PRE evaluation, and a batch CLI sit on top.

pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod trainer;
pub mod uap;

pub use error::{Error, Result};
