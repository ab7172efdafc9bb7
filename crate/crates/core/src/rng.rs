//! Counter-based random streams.
//!
//! Every work item (trajectory, Ulam cell, probe) owns the ChaCha stream
//! selected by its index, under a key derived from the master seed and a
//! domain tag. Two work items never share a stream, and a stream does not
//! depend on which thread evaluates it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags so that e.g. trajectory 7 and Ulam cell 7 of the same seed
/// draw unrelated numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Trajectory = 0x7472_616a,
    UlamCell = 0x756c_616d,
    Centering = 0x6365_6e74,
    LongRun = 0x6c6f_6e67,
    Probe = 0x7072_6f62,
    Power = 0x706f_7772,
}

/// splitmix64 finalizer, used to spread (seed, domain) over the key space.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(master_seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(master_seed ^ mix(domain as u64)));
    rng.set_stream(index);
    rng
}
