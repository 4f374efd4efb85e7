//! Seeded randomness.
//!
//! Every randomized operation takes an explicit `u64` seed and builds a fresh
//! [`ChaCha8Rng`] from it with `SeedableRng::seed_from_u64`. ChaCha8 is a
//! portable, fully specified stream cipher generator, so the integer stream
//! (and therefore every drawn index) is identical on every platform. Gaussian
//! draws use the ziggurat sampler of `rand_distr::StandardNormal` on top of that
//! stream.
//!
//! Pipelines derive per-stage seeds from one master seed with
//! [`derive_seed`]:
//!
//! ```text
//! h  = splitmix64(master ^ fnv1a64(stage))
//! h  = splitmix64(h ^ index * 0x9E37_79B9_7F4A_7C15)
//! ```
//!
//! where `fnv1a64` is the 64-bit FNV-1a hash of the UTF-8 stage label and
//! `splitmix64` is the finalizer of Steele et al.'s SplitMix64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives an independent seed for `stage`/`index` from a master seed.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let h = splitmix64(master ^ fnv1a64(stage.as_bytes()));
    splitmix64(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn fill_standard_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
