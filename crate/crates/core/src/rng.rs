//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, voxel, channel)`, so results do not
//! depend on how work is split across threads. The key of a ChaCha8
//! generator is derived from `(seed, channel)` by SplitMix64 and the voxel
//! index selects the ChaCha stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngSpec {
    pub seed: u64,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        RngSpec { seed }
    }

    /// Independent spec for a separate purpose (e.g. noise vs. families).
    pub fn derive(&self, tag: u64) -> RngSpec {
        let mut s = self.seed ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        RngSpec {
            seed: splitmix64(&mut s),
        }
    }

    /// Generator for one `(voxel, channel)` cell.
    pub fn stream(&self, voxel: u64, channel: u64) -> ChaCha8Rng {
        let mut state = self.seed ^ channel.wrapping_mul(0xA24B_AED4_963E_E407);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(voxel);
        rng
    }
}
