use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Deterministic generator used everywhere randomness is drawn.
///
/// Xoshiro256++ seeded through SplitMix64 produces the same stream on every
/// platform for a given seed.
pub type Rng = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
