//! Cross-domain few-shot segmentation: dual-branch prototype matching with
//! adaptive refine self-matching, channel-statistics disruption, a
//! distribution alignment module and per-episode test-time adaptation.

pub mod arsm;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dam;
pub mod episode_store;
pub mod error;
pub mod eval_harness;
pub mod feature;
pub mod losses;
pub mod model;
pub mod optim;
pub mod prototype_matching;
pub mod tta_driver;

pub use error::{DarnetError, Result};
pub use feature::FeatureMap;
