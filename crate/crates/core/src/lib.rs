//! Core library of a small, fully synthetic laboratory for CTR-driven ad
//! image generation: a product catalog with a hidden click oracle, a
//! description policy, a DDIM-style renderer that keeps the product pixels
//! fixed, a pairwise reward model and preference optimization with and
//! without product-context contrast.

pub mod catalog;
pub mod dims;
pub mod experiment;
pub mod numerics;
pub mod prefopt;
pub mod oracle;
pub mod policy;
pub mod renderer;
pub mod reward;
pub mod seeds;

mod error;

pub use error::{Error, Result};
