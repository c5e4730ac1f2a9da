//! Seed derivation. Every randomized step draws from a ChaCha stream keyed by
//! the master seed plus a purpose tag and coordinates (round, client, ...), so
//! results never depend on the order in which tasks execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    ClassMeans = 2,
    TrainSamples = 3,
    TestSamples = 4,
    Partition = 5,
    Imbalance = 6,
    ClientSampling = 7,
    LocalShuffle = 8,
    PersonalShuffle = 9,
    Poison = 10,
    MetaSet = 11,
    Finetune = 12,
    Holdout = 13,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream tag and coordinates into a child seed.
pub fn derive_seed(master: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix(master ^ splitmix(stream as u64));
    for &c in coords {
        h = splitmix(h ^ splitmix(c.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

pub fn stream_rng(master: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, coords))
}
