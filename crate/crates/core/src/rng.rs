//! Seeding helpers. All randomness in the crate flows from explicit `u64`
//! seeds through ChaCha8 so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministically derive a child seed from a root seed and a path of
/// labels (splitmix64 over the sequence).
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut s = splitmix(root ^ 0x9e37_79b9_7f4a_7c15);
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    s
}

/// Stable 64-bit label for a string (FNV-1a), for use in [`derive_seed`].
pub fn label(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
