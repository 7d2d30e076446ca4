//! Named random substreams derived from one master seed.
//!
//! Every stochastic decision in the simulator draws from a ChaCha stream keyed
//! by `(master seed, stream, a, b)`. Streams never depend on how many numbers
//! another subsystem consumed, so sweeping one knob only perturbs the
//! subsystem it touches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Subsystems that own an independent substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Population,
    Selection,
    Matching,
    Training,
    Clustering,
    Ldp,
    Faults,
    Evaluation,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Population => 0x706f_7075,
            Stream::Selection => 0x7365_6c65,
            Stream::Matching => 0x6d61_7463,
            Stream::Training => 0x7472_6169,
            Stream::Clustering => 0x636c_7573,
            Stream::Ldp => 0x6c64_7021,
            Stream::Faults => 0x6661_756c,
            Stream::Evaluation => 0x6576_616c,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the master seed with a stream tag and two discriminators.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(master ^ stream.tag());
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(17))
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, a, b))
}

/// Folds an arbitrary byte key (e.g. a cohort path) into a discriminator.
pub fn key_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
