use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible random stream keyed by `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for the `index`-th repetition of a seeded procedure (SplitMix64 mix).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Stream identifiers, one per randomized consumer.
pub(crate) const SYNTH_ID: u64 = 1 << 32;
pub(crate) const SYNTH_OOD: u64 = 2 << 32;
pub(crate) const SPLIT_MAIN: u64 = 3 << 32;
pub(crate) const SPLIT_OOD: u64 = 4 << 32;
pub(crate) const SPLIT_TEST_ORDER: u64 = 5 << 32;
pub(crate) const INIT: u64 = 6 << 32;
pub(crate) const KMEANS: u64 = 7 << 32;
pub(crate) const SHUFFLE: u64 = 8 << 32;
pub(crate) const BANK: u64 = 9 << 32;
pub(crate) const GRADCHECK: u64 = 10 << 32;
