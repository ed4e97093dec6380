//! Feature-decomposition domain adaptation for monocular depth estimation.
//!
//! A shared content encoder with per-domain batch-norm branches, two style
//! encoders, a depth decoder that fuses content and target style, a
//! generator for translation and reconstruction, and three discriminators,
//! trained end to end on procedurally generated stereo scenes.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod model;
pub mod networks;
pub mod normalization;
pub mod perceptual;
pub mod training;

pub use config::Config;
pub use error::{LfdaError, Result};
pub use model::LfdaModel;
pub use training::{Trainer, Variant};
