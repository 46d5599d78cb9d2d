//! Nullspace analysis and nullspace-noise augmented training for a toy
//! vision transformer.
//!
//! The crate is organized around three layers:
//!
//! * numeric plumbing: [`mat`] (plain matrices), [`tensor`] (reverse-mode
//!   autodiff tape), [`linalg`] (SVD, nullspaces, rank), [`rng`] (named,
//!   seeded random substreams) and [`optim`] (AdamW + cosine schedule);
//! * the model: [`vit`] (patch embedding, pre-norm encoder, linear
//!   classifier, supervised training) and [`data`] (in-memory labeled
//!   image sets, synthetic desk-scale datasets);
//! * the nullspace machinery: [`patch_nullspace`] (exact input-level
//!   nullspace of the patch embedding), [`attention_nullspace`]
//!   (constructive head-invariant noise and its certification),
//!   [`noise`] (gradient-based synthesis of approximate encoder-level
//!   nullspace noise), [`finetune`] (noise-augmented fine-tuning rounds)
//!   and [`property`] (scaling/combination sweeps and an FGSM probe).
//!
//! The crate is `no_std` (with `alloc`); everything that touches files,
//! clocks or threads lives in the companion CLI crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention_nullspace;
pub mod data;
pub mod error;
pub mod fmath;
pub mod finetune;
pub mod linalg;
pub mod mat;
pub mod noise;
pub mod optim;
pub mod patch_nullspace;
pub mod property;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::Error;
pub use mat::Mat;
pub use tensor::{Tape, TensorId};
