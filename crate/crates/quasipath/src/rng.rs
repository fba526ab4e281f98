//! Counter-based random numbers for reproducible parallel simulation.
//!
//! Exit-time ensembles run trajectories in parallel, and a single trajectory
//! must produce the same noise increments no matter how work is scheduled.
//! Instead of a stateful generator that would have to be advanced in lock
//! step, every draw is a pure function of `(seed, step, lane)`. The mixing
//! function is the splitmix64 finalizer, whose output passes standard
//! statistical batteries and which costs a handful of arithmetic ops.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer: bijective avalanche mixing of a 64-bit word.
#[inline]
pub fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed mixing of three words; used as `hash(seed, step, lane)`.
#[inline]
fn mix3(seed: u64, step: u64, lane: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ step) ^ lane)
}

/// Uniform draw in the open interval (0, 1), keyed by `(seed, step, lane)`.
///
/// The offset of half an ulp keeps the result strictly inside the interval,
/// so logarithms of it are always finite.
#[inline]
pub fn uniform(seed: u64, step: u64, lane: u64) -> f64 {
    let bits = mix3(seed, step, lane) >> 11;
    (bits as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0) // 2^-53
}

/// Standard normal draw keyed by `(seed, step, lane)`.
///
/// Box-Muller transform on two keyed uniforms. Each lane uses its own pair
/// of uniform lanes, so distinct `(seed, step, lane)` triples are
/// independent draws.
#[inline]
pub fn standard_normal(seed: u64, step: u64, lane: u64) -> f64 {
    let u1 = uniform(seed, step, 2 * lane);
    let u2 = uniform(seed, step, 2 * lane + 1);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Derives the seed of the `index`-th member of an ensemble from the master
/// seed. Distinct indices give statistically independent streams.
#[inline]
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    mix64(master_seed ^ mix64(index))
}

/// Small stateful helper for test utilities and bootstrap resampling, built
/// on the same mixing function. Not used in trajectory simulation, which
/// needs the keyed stateless form above.
#[derive(Clone, Debug)]
pub struct Stream {
    seed: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = mix3(self.seed, self.counter, 0);
        self.counter += 1;
        z
    }

    /// Uniform in (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        // Modulo bias is ~n / 2^64, irrelevant for the sizes used here.
        (self.next_u64() % n as u64) as usize
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
