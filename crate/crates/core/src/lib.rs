//! Deep image clustering with a masked-patch Transformer autoencoder,
//! instance- and cluster-level contrastive heads, and pseudo-label alignment
//! between the two levels.

pub mod assignment;
pub mod augment;
pub mod crosslevel;
pub mod data;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod par;
pub mod seed;
pub mod trainer;

pub use error::{PiciError, Result};
