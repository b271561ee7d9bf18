//! Audio-driven talking-head motion generation, trained and verified
//! end-to-end on a procedurally generated synthetic world.
//!
//! The stack has three stages, mirrored by the module layout:
//!
//! 1. [`diffusion`] — a conditional denoising diffusion model over residual
//!    head-pose sequences, with a conformer-structured denoiser and
//!    classifier-free guidance.
//! 2. [`expression`] — a two-stage audio-to-expression predictor: frame-wise
//!    lip-motion distillation from a lip-sync teacher, then an LSTM generator
//!    for temporally dependent eye motion, trained adversarially.
//! 3. [`animator`] — a latent navigable face animator: identity encoding,
//!    windowed coefficient smoothing, gaze conditioning, and an orthogonal
//!    motion codebook.
//!
//! Everything trains on [`world`], a deterministic synthetic universe with
//! known ground truth (audio features, correlated pose/expression streams,
//! an exact lip-sync oracle, and a toy face renderer), so every qualitative
//! claim is checkable against an oracle.
//!
//! Start with the runnable examples (`cargo run --example <name>` inside
//! this crate) or the `marionette` binary for the end-to-end pipeline.

pub mod animator;
pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod expression;
pub mod landmarks;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod types;
pub mod world;

pub use error::{Error, Result};
