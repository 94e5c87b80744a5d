//! Explainable semi-supervised volume classification.
//!
//! The pipeline learns a representation with a conditional VAE whose encoder
//! gates image features with features of a lesion mask, transfers the
//! encoder into a slice-to-volume classifier (spatial pyramid pooling,
//! NetVLAD, focal loss) and explains predictions with composite layer-wise
//! relevance propagation. Synthetic phantom volumes stand in for CT data.

pub mod checkpoint;
pub mod classifier;
pub mod cvae;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod render;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A reproducible random stream: `(seed, stream)` pairs never overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
