//! Mandible segmentation from CT volumes in three stages:
//!
//! 1. **Recognition** ([`recognition`]): per-slice random-forest regression in the
//!    sagittal, coronal and axial views, fused into a bounding box.
//! 2. **Delineation** ([`fc`]): single-seed fuzzy connectedness on the cropped
//!    sub-volume, thresholded to an object.
//! 3. **Refinement** ([`refinement`]): a five-state machine over axial slices that
//!    separates teeth and prunes leaks into the skull.
//!
//! [`phantom`] generates synthetic CT cases with ground truth, [`metrics`] scores
//! results, and [`pipeline`] wires the stages together.

pub mod error;
pub mod fc;
pub mod grid;
pub mod io;
pub mod labeling;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod recognition;
pub mod refinement;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{Adjacency, BoundingBox, Grid, VoxelCoord};
pub use volume::{Mask, Volume};
