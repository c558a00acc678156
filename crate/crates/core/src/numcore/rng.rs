//! Seed derivation. Every random decision in the crate hangs off a root seed through named
//! substreams, so changing one consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the substream `name` under `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Seed of the `index`-th child of `seed` (per epoch, per step, per sentence...).
pub fn child(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[0, 1)` value addressed by `(seed, site, step, index)`; no state is carried.
pub fn counter_uniform(seed: u64, site: u64, step: u64, index: u64) -> f64 {
    let h = splitmix64(child(child(child(seed, site), step), index));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
