use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded, splittable random stream.
///
/// Every stream is a ChaCha8 keystream selected by `(seed, stream)`, so
/// outputs are reproducible across runs and platforms. Child streams come
/// from [`Prng::split`] (sequential counter) or [`Prng::derive`] (stable
/// name hash), which lets independently-named consumers draw without
/// disturbing each other.
#[derive(Clone, Debug)]
pub struct Prng {
    seed: u64,
    stream: u64,
    splits: u64,
    rng: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used to map names onto stream ids.
pub fn stable_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            splits: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Next child stream in sequence.
    pub fn split(&mut self) -> Prng {
        self.splits += 1;
        Prng::with_stream(self.seed, mix(self.stream ^ mix(self.splits)))
    }

    /// Child stream keyed by name; independent of how many splits happened.
    pub fn derive(&self, name: &str) -> Prng {
        Prng::with_stream(self.seed, mix(self.stream ^ stable_hash(name)))
    }

    /// Child stream keyed by an integer, e.g. an example index.
    pub fn derive_index(&self, index: u64) -> Prng {
        Prng::with_stream(self.seed, mix(self.stream.wrapping_add(mix(index ^ 0x5555))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct values from `0..n` in random order.
    pub fn sample_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot draw {count} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}
