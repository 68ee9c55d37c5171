//! Temporal adversarial data augmentation for time-series classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: float64 tensors and a reverse-mode tape.
//! * [`signal`]: windowed DFT, phase-shift warping and its index-mapping reference.
//! * [`warp`]: the monotone, boundary-aligned, bounded warp path built from free parameters.
//! * [`model`]: a small 1-D CNN classifier, its losses and checkpoint format.
//! * [`adversarial`]: amplitude (ADA), temporal (TADA) and combined sample generation.
//! * [`training`]: the alternating min/max training loop and macro-F1 evaluation.
//! * [`data`]: CSV/manifest I/O and the synthetic domain-shift benchmark.
//! * [`gradcheck`]: the finite-difference suite behind `warpada gradcheck`.

pub mod adversarial;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod signal;
pub mod tensor;
pub mod training;
pub mod warp;
