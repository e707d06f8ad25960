//! Numerical core for 6DoF object-pose estimation.
//!
//! The crate is organized around pure, deterministic operations over plain
//! value types — poses, pinhole cameras, triangle meshes, pixel grids — so
//! that every result is reproducible from its inputs and every gradient can
//! be checked against finite differences:
//!
//! - [`geometry`]: poses, cameras, meshes, projection and its Jacobian.
//! - [`keypoint`]: farthest-point sampling, attention-weighted keypoint
//!   aggregation from per-pixel offset fields, and the synthetic keypoint
//!   and offset losses.
//! - [`pnp`]: EPnP pose solving, Gauss–Newton refinement, and pose
//!   Jacobians w.r.t. the 2D keypoints via the implicit function theorem.
//! - [`render`]: differentiable soft silhouette rasterization, hard
//!   silhouettes, visible-mask composition, and the Dice overlap loss.
//! - [`selfsup`]: 2D similarity transforms, the dual-scale keypoint
//!   consistency loss, keypoint ensembling, the combined self-supervision
//!   objective, and silhouette-alignment pose refinement.
//! - [`pseudolabel`]: test-time-augmentation merging, trinary pseudo-label
//!   generation, the segmentation loss, and the multi-round harness.
//! - [`metrics`]: ADD / ADD-S pose errors, model diameter, recall, mask IoU.
//! - [`synth`]: seeded synthetic scenes and prediction fields used as
//!   oracles by tests and experiments.
//!
//! `no_std`-compatible: disable the default `std` feature to build against
//! `core` + `alloc` only (float math falls back to `libm` via `num-traits`).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod geometry;
pub mod keypoint;
pub mod metrics;
pub mod numeric;
pub mod pnp;
pub mod pseudolabel;
pub mod render;
pub mod selfsup;
pub mod synth;
