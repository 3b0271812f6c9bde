//! Named, replayable random streams.
//!
//! Every consumer of randomness derives its own stream from the run seed and
//! a label path, so draws never depend on the order in which unrelated parts
//! of a run execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seed plus the path of labels that led to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix(seed),
        }
    }

    pub fn label(self, label: &str) -> Self {
        let mut h = FNV_OFFSET;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        Self {
            state: splitmix(self.state ^ h),
        }
    }

    pub fn index(self, i: u64) -> Self {
        Self {
            state: splitmix(self.state.rotate_left(17) ^ splitmix(i)),
        }
    }

    pub fn indices(self, items: impl IntoIterator<Item = u64>) -> Self {
        let mut s = self.index(0xa5a5);
        for i in items {
            s = s.index(i);
        }
        s
    }

    pub fn seed(self) -> u64 {
        self.state
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}
