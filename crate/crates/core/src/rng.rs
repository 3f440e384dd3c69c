//! Seeded random streams keyed by position, so that any (seed, index...)
//! tuple always yields the same sequence regardless of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of indices into a 64-bit stream key.
pub fn stream_key(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, path))
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard Gumbel draw by inversion: `-ln(-ln U)`.
pub fn gumbel<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    -(-open_unit(rng).ln()).ln()
}
