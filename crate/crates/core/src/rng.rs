use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible random stream for `(seed, stream)`.
///
/// ChaCha streams share the key but never overlap, so per-purpose and
/// per-iteration generators can be split off a single user seed.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids for the different consumers of the user seed.
pub(crate) const NOISE_STREAM: u64 = 1;
pub(crate) const SUBSAMPLE_STREAM: u64 = 2;
pub(crate) const CONSTANCY_STREAM: u64 = 3;
/// Frequency draws for iteration `i` use `FREQUENCY_STREAM_BASE + i`.
pub(crate) const FREQUENCY_STREAM_BASE: u64 = 1 << 32;
