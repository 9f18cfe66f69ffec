//! Semi-supervised contrastive learning for unsupervised domain adaptation
//! of slice-wise volumetric segmentation.
//!
//! The crate bundles everything needed to run the method end to end on a
//! synthetic two-domain phantom:
//!
//! - [`phantom`]: layered-tissue volumes with lesion classes, two appearance
//!   domains, stratification and the on-disk volume format.
//! - [`pairgen`]: contrastive pair generators (augmentation, nearby slices,
//!   and their combination).
//! - [`nn`] and [`model`]: a small CPU tensor engine with hand-written
//!   backward passes, the UNet, the pooling and channel-wise projection heads
//!   and the SimSiam predictor.
//! - [`losses`]: log-Dice, NT-Xent, SimSiam and the joint objective.
//! - [`trainer`]: supervised, pretrain-then-finetune and joint regimes.
//! - [`metrics`]: per-slice Dice/UVD, baseline-relative tables and the
//!   inter-grader agreement fraction.
//! - [`experiment`]: config schema, experiment grid and report emission.

pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pairgen;
pub mod par;
pub mod phantom;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::Real;
