//! Counter-based pseudo-randomness.
//!
//! All randomness in this crate flows through the SplitMix64 finaliser: a
//! 64-bit key is mixed to produce each output word, so any sample can be
//! regenerated from (key, counter) without storing stream state. Seed
//! splitting in [`crate::brownian`] builds on the same mixer.

/// SplitMix64 output function (Steele, Lea, Flood 2014).
#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Two-word mix used to derive child keys: a strong, cheap combiner.
#[inline]
pub(crate) fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a).wrapping_add(b.rotate_left(23)) ^ 0x632be59bd9b4e019)
}

/// A tiny sequential generator over the SplitMix64 stream.
#[derive(Debug, Clone)]
pub(crate) struct Mix64 {
    state: u64,
}

impl Mix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed ^ 0x1720aedce6f2a9d5),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1), 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-1, 1).
    pub fn uniform_signed(&mut self) -> f64 {
        2.0 * self.uniform() - 1.0
    }

    /// Standard normal via Box-Muller.
    #[allow(dead_code)] // exercised by the moments test
    pub fn normal(&mut self) -> f64 {
        // Shift into (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Uniform in [0,1) derived from a (key, counter) pair without stream state.
#[inline]
pub(crate) fn counter_uniform(key: u64, counter: u64) -> f64 {
    (mix2(key, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal derived from a (key, counter) pair. Each draw consumes two
/// counter slots.
pub(crate) fn counter_normal(key: u64, draw_index: u64) -> f64 {
    let u1 = ((mix2(key, 2 * draw_index) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = counter_uniform(key, 2 * draw_index + 1);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_draws_are_deterministic() {
        assert_eq!(counter_normal(5, 0), counter_normal(5, 0));
        assert_ne!(counter_normal(5, 0), counter_normal(5, 1));
        assert_ne!(counter_normal(5, 0), counter_normal(6, 0));
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Mix64::new(1234);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
