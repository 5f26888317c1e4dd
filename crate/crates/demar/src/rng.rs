//! Named random streams derived from a single master seed.
//!
//! Every consumer of randomness owns a stream keyed by a purpose string
//! ("explore", "replay", "subsets", "init:agent-0-1", "oracle:shard-17", ...).
//! Streams are independent ChaCha8 instances whose keys are derived from
//! (master seed, name), so changing how often one stream is consumed never
//! perturbs any other stream. That is what makes e.g. the ensemble subset
//! size tunable without disturbing the exploration sequence.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, then one splitmix round to spread the bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut s = h;
    splitmix64(&mut s)
}

/// Factory for named streams; cheap to clone and share.
#[derive(Clone, Copy, Debug)]
pub struct RngHub {
    master: u64,
}

impl RngHub {
    pub fn new(master: u64) -> Self {
        RngHub { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> Stream {
        let mut state = self.master ^ hash_name(name);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Stream { rng: ChaCha8Rng::from_seed(key) }
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Gaussian via Box-Muller (no spare caching, two uniforms per draw).
    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// k distinct indices from 0..n via Floyd's algorithm, sorted ascending.
    /// O(k log k) regardless of n; suits sampling from large replay rings.
    pub fn distinct_floyd(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut picked = std::collections::BTreeSet::new();
        for j in (n - k)..n {
            let t = self.below(j + 1);
            if !picked.insert(t) {
                picked.insert(j);
            }
        }
        picked.into_iter().collect()
    }

    /// k distinct indices from 0..n, sorted ascending (partial Fisher-Yates).
    pub fn distinct_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
