//! Deterministic random number generation.
//!
//! Training, sampling and data loading all draw from this generator, so two
//! runs with the same seed produce bitwise-identical streams on every
//! platform. The core is SplitMix64; normals come from Box-Muller on the
//! uniform stream (no ziggurat tables, no platform-dependent paths).

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

/// Seeded generator with an explicit, serializable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    state: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            state: seed,
            cached_normal: None,
        }
    }

    /// Derive an independent child stream. Children depend only on the
    /// parent's seed and the stream tag, never on how much the parent has
    /// already been consumed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `{0, .., n-1}`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let i = (self.uniform() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Standard normal draw (Box-Muller; the second value of each pair is
    /// cached so consecutive draws cost one transform per two values).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(n) = self.cached_normal.take() {
            return n;
        }
        // 1 - u keeps the argument of ln strictly positive.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Serializable internal state: `(seed, state, cached_normal)`.
    pub fn state(&self) -> (u64, u64, Option<f64>) {
        (self.seed, self.state, self.cached_normal)
    }

    pub fn from_state(seed: u64, state: u64, cached_normal: Option<f64>) -> Self {
        Rng {
            seed,
            state,
            cached_normal,
        }
    }
}
