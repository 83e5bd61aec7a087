//! Images, masks, the synthetic corpus and everything that feeds batches.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod netpbm;
pub mod sampler;
pub mod synth;

pub use image::{Image, PixelMask};
pub use manifest::{Manifest, Record, Split};
pub use synth::{Sample, SynthConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for a named sub-stream of `seed`.
pub fn derive_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let s = stream.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(s)
}
