//! Hierarchical contrastive selective coding at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] generates and persists synthetic datasets with known label hierarchies.
//! * [`encoder`] is a small MLP with hand-written backward pass, its momentum copy and
//!   the negative key queue.
//! * [`hierarchy`] builds hierarchical prototypes with bottom-up k-means.
//! * [`selection`] computes selection probabilities and draws Bernoulli negatives.
//! * [`losses`] holds InfoNCE / ProtoNCE and their selective, level-averaged variants.
//! * [`trainer`] ties everything into the momentum-contrast training loop.
//! * [`eval`] offers KNN, NMI/AMI, a linear probe and selection diagnostics.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod losses;
pub mod rng;
pub mod selection;
pub mod trainer;
pub mod vector;

pub use error::{HcscError, Result};
