//! Triple-view co-training for semi-supervised binary image segmentation.
//!
//! Three architecturally distinct pixel classifiers share one low-level
//! feature stem. After a supervised warm-up on the labelled subset, each view
//! is trained on pseudo-labels voted by the other two views, weighted by their
//! measured confidence, while the most contested pseudo-labels are dropped on a
//! schedule. A final stage keeps training the least confident view until it
//! catches up with the others, and inference combines all three views.
//!
//! Modules:
//! - [`data`]: grids, directory ingestion, splitting and a synthetic generator
//! - [`perturb`]: flip / rotate / brightness / contrast augmentation
//! - [`views`]: the shared stem and the three classifier views
//! - [`labelproc`]: removal schedule, disagreement, voting, confidence
//! - [`losses`]: focal Tversky and boundary + overlap losses
//! - [`trainer`]: the three training stages and the end-to-end pipeline
//! - [`metrics`]: overlap, distance and boundary-Dice evaluation
//! - [`overlay`]: TP/FN/FP/TN colour overlays
//! - [`config`]: the run configuration file
//! - [`cli`]: the `triseg` command line

pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod labelproc;
pub mod losses;
pub mod metrics;
pub mod overlay;
pub mod perturb;
mod seed;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
