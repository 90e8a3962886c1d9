//! Task-oriented dexterous grasp synthesis driven by part analysis.
//!
//! The pipeline takes an object point cloud, a category, and a task, then:
//! generates category- and part-level grasp descriptions through a language
//! provider, segments the object into labeled parts, encodes descriptions
//! and clouds into a per-part condition vector, samples one 61-dim grasp
//! per part from a conditional diffusion model, and keeps the (part, grasp)
//! pair whose hand surface makes the most contact with its part.
//!
//! Modules follow those stages: [`language`], [`geometry`],
//! [`conditioning`], [`diffusion`], [`pipeline`], and [`eval`] for the
//! metrics.

pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod geometry;
pub mod language;
pub mod nn;
pub mod pipeline;
pub(crate) mod util;
