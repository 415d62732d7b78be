use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout; portable and reproducible across platforms.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named stage of a run, so that adding or
/// skipping one stage never shifts the draws of another.
pub fn stream(seed: u64, label: &str) -> Rng {
    // FNV-1a over the label, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h)
}
