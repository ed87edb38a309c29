//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! run's base seed, a domain tag and up to two indices. Streams never depend
//! on the order in which other streams were consumed, so prefetching or
//! reordering work cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base_seed: u64, domain: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base_seed);
    for byte in domain.bytes() {
        h = splitmix64(h ^ u64::from(byte));
    }
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn stream(base_seed: u64, domain: &str, a: u64, b: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(base_seed, domain, a, b))
}
