//! Tooling for map-conditioned driver gaze prediction.
//!
//! The crate covers the offline data path end to end: extracting a drivable
//! street graph from OpenStreetMap XML, snapping noisy GPS traces onto that
//! graph with an HMM matcher, rasterizing the graph into metric occupancy
//! images, cutting rotated heading-up map/route patches around the matched
//! positions, running a deterministic CPU reference of the map/scene fusion
//! network, and scoring predicted gaze maps against ground truth.
//!
//! Everything is deterministic: identical inputs and configuration produce
//! bit-identical artifacts, which the pipeline relies on for caching and
//! regression comparison.

pub mod dataset;
pub mod fusion;
pub mod geo;
pub mod imgops;
pub mod matching;
pub mod metrics;
pub mod osm;
pub mod patch;
pub mod pipeline;
pub mod raster;

/// Build identifier embedded in artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
