//! Detection training in degraded scenes with vision-language weight guidance.
//!
//! The crate is organized around three pillars:
//!
//! - weight estimation: mutually exclusive prompt pairs are encoded by an
//!   [`embedding`] provider and turned into per-object loss weights
//!   ([`weights`], [`adapter`], [`loss`]);
//! - data synthesis: physically-based haze compositing from depth maps
//!   ([`haze`]), plus dataset bookkeeping and a synthetic-shapes fixture
//!   generator ([`data`], [`shapes`]);
//! - a desk-scale detection harness and evaluator ([`detector`], [`trainer`],
//!   [`eval`]) wired together by [`config`] and [`pipeline`].

pub mod adapter;
pub mod boxes;
pub mod config;
pub mod data;
pub mod detector;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod haze;
pub mod loss;
pub mod pipeline;
pub mod raster;
pub mod shapes;
pub mod trainer;
pub mod util;
pub mod weights;

pub use error::{CoreError, Result};
