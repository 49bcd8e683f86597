use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Combines a base seed with stream labels into an independent 64-bit seed.
pub(crate) fn derive(base: u64, labels: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x5eed_f1e5_a1e5_0000);
    for &l in labels {
        h = splitmix(h ^ splitmix(l.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

pub(crate) fn rng(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, labels))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
