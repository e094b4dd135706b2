//! Glossy-surface reconstruction from posed multi-view images.
//!
//! The scene is a cloud of 3D Gaussians carrying physically based material
//! attributes. Rendering rasterizes the cloud into per-pixel G-buffers and
//! shades them with a split-sum specular model: direct reflection comes
//! from a roughness-indexed mip cubemap, indirect reflection from a bank
//! of anisotropic spherical Gaussian lobes whose radiometric parameters a
//! small network predicts per surface point. Training runs in two stages
//! and is regularized by a multi-view reflection score and external
//! depth/normal priors.
//!
//! Entry points: [`pipeline::run`] drives end-to-end training from a scene
//! config; the `specsplat` binary wraps it with `run`, `render`, `metrics`,
//! `make-scene`, and `oracle` subcommands.

pub mod envmap;
// pub mod geometry;
// pub mod imageio;
pub mod indiasg;
pub mod math;
// pub mod optim;
// pub mod oracle;
pub mod pbr;
// pub mod pipeline;
// pub mod priors;
// pub mod shading;
pub mod splat;
// pub mod ssim;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum SpecError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, SpecError>;
