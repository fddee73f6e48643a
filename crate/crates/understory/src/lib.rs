//! Canopy-free ground reconstruction from posed aerial RGB images.
//!
//! The crate fits a dense voxel radiance field to a set of posed images by
//! differentiable volume rendering, then renders ground-only views either by
//! starting each ray's integration slightly above the terrain (height crop)
//! or by masking occluders with a trained visibility channel. A built-in
//! procedural forest with a closed-form layered renderer provides exact
//! ground truth for quantitative evaluation, and the exported density field
//! feeds a stem-counting pipeline (HSV foliage removal, DTM crops, HDBSCAN
//! clustering, PCA tilt filtering).
//!
//! See the `book/` guide for a narrative walkthrough; the `understory`
//! binary drives the full pipeline (`synth`, `train`, `render`, `eval`,
//! `stems`, `inspect-lighting`).

pub mod analysis;
pub mod cli;
pub mod cloud;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod img;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod booktests {
    macro_rules! book_page {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    book_page!(introduction, "../../../book/src/introduction.md");
    book_page!(geometry, "../../../book/src/geometry.md");
    book_page!(voxel_field, "../../../book/src/voxel-field.md");
    book_page!(volume_rendering, "../../../book/src/volume-rendering.md");
    book_page!(training, "../../../book/src/training.md");
    book_page!(synthetic_forests, "../../../book/src/synthetic-forests.md");
    book_page!(ground_only, "../../../book/src/ground-only.md");
    book_page!(stem_counting, "../../../book/src/stem-counting.md");
    book_page!(cli_page, "../../../book/src/cli.md");
}
