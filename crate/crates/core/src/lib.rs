//! Prompt-guided test-time training for a small promptable segmentation
//! network, written against `core` + `alloc` only.
//!
//! The pieces:
//! - [`model`]: encoder, prompt encoder and the two mask decoders, with
//!   hand-written backward passes.
//! - [`losses`]: Dice, BCE, the dual-task training objective and the
//!   test-time consistency loss.
//! - [`trainer`]: source training, the loss-saturation schedule and a
//!   finite-difference gradient oracle.
//! - [`ttt`]: consistency-driven encoder adaptation over videos, plus the
//!   rotation and masked-reconstruction baselines.
//! - [`metrics`]: DSC, HD95, ASD and sensitivity with per-anatomy tables.
//! - [`synth`]: seeded synthetic swallow videos with analytic masks.
//! - [`protocol`]: the evaluation loop tying the above together.

#![no_std]

extern crate alloc;

pub mod augment;
pub mod error;
mod heads;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod ttt;

pub use error::{Error, Result};
pub use image::{BoxPrompt, Image, Mask, MaskProb, Plane, PointPrompt, Prompt};
pub use model::{ArchConfig, Component, ModelParams};
