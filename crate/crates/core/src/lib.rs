//! Toolkit for building metric-depth training data for underwater scenes from
//! depth-conditioned image generation, and for evaluating depth models on it.
//!
//! Stages, in pipeline order:
//!
//! - [`prep`]: pseudo-label and caption a directory of underwater images into
//!   {image, depth, caption} triplets.
//! - [`genpipe`]: train a depth-conditioned generator on the triplets and
//!   sample images from terrestrial depth maps.
//! - [`uncertainty`]: flip-consistency depth uncertainty and validity masks.
//! - [`datasetbuild`]: convert conditioning depth to capped metric depth and
//!   assemble the training set.
//! - [`evaluate`]: depth metrics, model evaluation and report rendering.
//! - [`physics`]: underwater image formation and dewatering.
//!
//! Every stage reads and appends JSON Lines manifests ([`manifest`]) so runs
//! are resumable and auditable. Neural models sit behind the traits in
//! [`backends`], which also provides deterministic mocks.

// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod codec;
pub mod datasetbuild;
pub mod depth;
pub mod error;
pub mod evaluate;
pub mod genpipe;
pub mod manifest;
pub mod physics;
pub mod prep;
pub mod raster;
pub mod stage;
pub mod uncertainty;

pub use depth::{DepthMap, DepthRaster, InverseRelativeDepthMap, MetricDepthMap, RawDepth};
pub use error::{Error, Result};
pub use manifest::{Clock, Manifest, ManifestRecord, RecordKind};
pub use raster::RgbImage;
