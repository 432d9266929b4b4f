//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own xoshiro256++ stream derived
//! from a base seed and a stream tag, so adding draws in one place never shifts
//! the numbers seen by another.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Independent consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Batching,
    Hutchinson,
    HessianProbe,
    Data,
    Split,
    Sampling,
    Custom(u64),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Batching => 2,
            Stream::Hutchinson => 3,
            Stream::HessianProbe => 4,
            Stream::Data => 5,
            Stream::Split => 6,
            Stream::Sampling => 7,
            Stream::Custom(k) => 0x100 + k,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mixed = splitmix64(seed ^ splitmix64(stream.tag()));
    Xoshiro256PlusPlus::seed_from_u64(mixed)
}
