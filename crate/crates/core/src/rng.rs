//! Counter-based deterministic random streams.
//!
//! Every stream is identified by a `(seed, name)` pair and a draw counter.
//! The value at draw index `i` is a pure function of `(seed, name, i)`, so
//! parallel evaluation of one stream can never perturb another, and a stream
//! can be checkpointed and resumed by storing its `(key, counter)` state.

/// splitmix64 finalizer; full-period bijective mixer on u64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used for stream names and content fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// A named, seeded, counter-based pseudo-random stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> Self {
        let key = mix64(seed.wrapping_mul(GOLDEN) ^ mix64(fnv1a64(name.as_bytes())));
        RngStream { key, counter: 0 }
    }

    /// Derive an independent child stream without advancing this one.
    pub fn derive(&self, name: &str) -> Self {
        let key = mix64(self.key ^ mix64(fnv1a64(name.as_bytes()).wrapping_add(GOLDEN)));
        RngStream { key, counter: 0 }
    }

    /// Current `(key, counter)` state, for checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn restore(key: u64, counter: u64) -> Self {
        RngStream { key, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ c.wrapping_mul(GOLDEN))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) * SCALE
    }

    /// Uniform in [0, 1) with 24 bits of precision.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        const SCALE: f32 = 1.0 / (1u32 << 24) as f32;
        ((self.next_u64() >> 40) as f32) * SCALE
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "next_index over empty range");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (cosine branch only, so the stream
    /// state stays a plain counter).
    pub fn next_normal(&mut self) -> f32 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (std::f64::consts::TAU * u2).cos()) as f32
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    /// Draw from a discrete distribution given by `probs` (assumed to sum to 1).
    pub fn next_discrete(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_name_index_gives_same_value() {
        let mut a = RngStream::new(7, "data");
        let mut b = RngStream::new(7, "data");
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_names_give_distinct_streams() {
        let mut a = RngStream::new(7, "data");
        let mut b = RngStream::new(7, "gan");
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn restore_resumes_exactly() {
        let mut a = RngStream::new(3, "s");
        for _ in 0..17 {
            a.next_u64();
        }
        let (k, c) = a.state();
        let mut b = RngStream::restore(k, c);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = RngStream::new(11, "normal");
        let n = 200_000;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for _ in 0..n {
            let x = rng.next_normal() as f64;
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn next_index_covers_range_uniformly() {
        let mut rng = RngStream::new(5, "idx");
        let mut counts = [0usize; 8];
        for _ in 0..80_000 {
            counts[rng.next_index(8)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "counts {counts:?}");
        }
    }
}
