//! Height estimation from single aerial images, cast as ordinal regression
//! over spacing-increasing height bins.
//!
//! The pipeline: [`synth`] makes training data, [`discretize`] turns heights
//! into ordinal classes, [`net`] holds the autodiff engine and the dilated
//! residual network with its ASPP head, [`ordinal`] provides the losses and
//! decoding, [`trainer`] fits the model, and [`predict`] tiles an image,
//! predicts each patch and [`stitch`]es the relative heights back together.
//! [`metrics`] scores the result.

pub mod cli;
pub mod discretize;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod net;
pub mod ordinal;
pub mod predict;
pub mod raster;
pub mod rng;
pub mod stitch;
pub mod synth;
pub mod trainer;

pub use discretize::{ClassMap, DiscretizationScheme, Midpoint, SchemeKind};
pub use error::{Error, Result};
pub use metrics::{evaluate, evaluate_batch, MetricReport};
pub use net::{Checkpoint, HeadKind, NetConfig, OrdinalNet};
pub use raster::{ImageTile, PatchSpec, RasterGrid, TilePair};
pub use rng::SplitMix64;
pub use stitch::{stitch, PatchLayout, PatchRect, StitchResult};
pub use synth::SceneConfig;
pub use trainer::{train, OptimConfig, TrainReport};
