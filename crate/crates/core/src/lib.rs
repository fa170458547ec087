//! Self-supervised tracking features on a desk-scale synthetic rig.
//!
//! The pipeline: render deterministic stereo sequences with ground truth
//! (`synthscene`), run a stereo visual-odometry frontend over them
//! (`features`, `matcher_vo`), convert track geometry into per-cell
//! keypoint labels (`supervision`), train a small detector/descriptor
//! network on those labels plus warped copies (`model`), and measure the
//! result (`eval`). `config` and `pipeline` tie the stages together for the
//! command-line tool.

pub mod config;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod matcher_vo;
pub mod model;
pub mod pipeline;
pub mod supervision;
pub mod synthscene;
