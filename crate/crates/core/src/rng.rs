//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a stream named by `(root seed, purpose tag,
//! index)`. The stream seed is
//!
//! ```text
//! splitmix64(splitmix64(root ^ fnv1a64(tag)) ^ index)
//! ```
//!
//! and feeds a ChaCha8 generator. Training step `k` draws from `(seed, "dde-step", k)`,
//! so a run resumed at step `k` sees exactly the numbers an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffengine::Mat;

pub type Rng = ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(tag.as_bytes())) ^ index)
}

pub fn stream(root: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tag, index))
}

/// `rows×cols` matrix of independent N(0, std²) draws.
pub fn normal_mat(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Mat::from_vec(rows, cols, data).expect("length matches shape")
}
