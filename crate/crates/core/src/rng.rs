//! Named random substreams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that draw randomness. Each gets an independent stream so that,
/// for example, toggling dropout never perturbs batch shuffling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    InitReconstructor,
    Shuffle,
    Dropout,
    Sampling,
    Data,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974,
            Stream::InitReconstructor => 0x7265_6369,
            Stream::Shuffle => 0x7368_7566,
            Stream::Dropout => 0x6472_6f70,
            Stream::Sampling => 0x7361_6d70,
            Stream::Data => 0x6461_7461,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `stream`, further split by `index` (e.g. update or sentence number).
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(seed ^ stream.tag()) ^ splitmix(index));
    ChaCha8Rng::seed_from_u64(s)
}
