//! Reproducible random-number streams.
//!
//! Streams are derived from a `(seed, stream_id)` pair by keying a ChaCha
//! counter-based stream cipher, so replicas get statistically independent
//! generators without any sequential splitting, and the same pair always
//! reproduces the same draws bit for bit. Gaussians come from the ziggurat
//! sampler behind `StandardNormal`.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub use rand::Rng;

/// The generator type used throughout the crate.
pub type Stream = ChaCha12Rng;

/// Derives the generator for `(seed, stream_id)`.
pub fn stream(seed: u64, stream_id: u64) -> Stream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// One standard normal draw.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
