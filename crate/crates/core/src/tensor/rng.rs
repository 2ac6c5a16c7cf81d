use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// Seeded random stream.
///
/// `(seed, stream_id)` fully determines the sequence. Distinct stream ids
/// select disjoint ChaCha streams, so per-patch or per-shard generators
/// can be derived without coordination.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream keyed by `id`, same seed.
    pub fn substream(&self, id: u64) -> Rng {
        Rng::new(self.seed, splitmix64(self.stream_id ^ splitmix64(id)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform on the open interval `(0, 1)`, drawn from the grid
    /// `k·2⁻⁵³`. On that grid `1 − u` is exact, so `u ↦ 1 − u` is an exact
    /// reflection.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let k = self.next_u64() >> 11;
            if k != 0 {
                return k as f64 * TWO_POW_M53;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Poisson draw with the given mean; a mean of zero yields zero.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        Poisson::new(mean)
            .expect("finite positive mean")
            .sample(&mut self.inner) as u64
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi);
        let span = hi - lo + 1;
        if span == 0 {
            return self.next_u64();
        }
        // Lemire-style rejection keeps the draw unbiased.
        let zone = u64::MAX - (u64::MAX - span + 1) % span;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return lo + v % span;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.int_inclusive(0, n as u64 - 1) as usize
    }
}
