//! Desk-scale lab for studying diffusion-based watermark removal.
//!
//! The pieces fit together in one pipeline: [`watermark`] embeds spread-
//! spectrum marks into [`image`]s, [`sampler`] runs an exactly solvable
//! Gaussian-mixture diffusion model against them, [`attacks`] collects that
//! regeneration attack next to classical baselines (noise, blur, JPEG, FGSM),
//! [`theory`] predicts what the decoder should see, and [`experiment`] runs
//! the whole grid deterministically and writes CSV tables.
//!
//! Everything is driven by counter-based random streams ([`rng`]), so any
//! result is reproducible from a single seed regardless of thread count.
//! The `parallel` feature (on by default) runs trial loops on rayon;
//! disabling it leaves a sequential core with the same outputs.

pub mod attacks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod image;
pub mod io;
pub mod jpeg;
pub mod message;
pub mod metrics;
pub mod parallel;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod theory;
pub mod watermark;

pub use error::{Error, Result};
pub use image::Image;
pub use message::Message;
pub use rng::RngStream;
