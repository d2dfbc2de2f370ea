//! Two-view X-ray to CT reconstruction with anatomy-aware losses.
//!
//! [`fanbeam`] builds the sparse scanner operators, [`phantoms`] produces a
//! labeled synthetic chest corpus, [`networks`] holds the generator,
//! discriminator, segmentation network and feature extractor, [`losses`]
//! the training objectives, [`training`] the pretraining and adversarial
//! loops, and [`evaluation`] the image-quality and segmentation metrics.

pub mod error;
pub mod evaluation;
pub mod fanbeam;
pub mod fsutil;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantoms;
pub mod storage;
pub mod training;

pub use error::{Error, Result};
