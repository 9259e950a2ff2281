//! Face presentation attack detection with a multi-specialist network.
//!
//! Three attack-specific sub-networks (print, replay, mask) are trained
//! jointly under a weighted four-term loss and fused into a single
//! genuine/attack score. The crate also carries the handcrafted texture
//! baselines, the ISO 30107-3 metric engine, the cross-validation and
//! cross-database protocol drivers, and the visual diagnostics.

pub mod datamodel;
pub mod diagnostics;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod imaging;
pub mod mixnet;
pub mod nn;
pub mod protocols;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

/// Derives an independent RNG seed for a numbered stream (splitmix64 mix).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
