use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Seeded xoshiro256++ stream.
///
/// Child streams are derived by hashing `(seed, purpose tag, index)`, never
/// from the parent's current state, so the draws a task sees do not depend on
/// how much of any other stream was consumed.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: Xoshiro256PlusPlus,
}

pub const ALGORITHM: &str = "xoshiro256++";

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the child stream `(parent, tag, index)`.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(parent);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ splitmix(index ^ 0xD1B5_4A32_D192_ED03))
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream {
            seed,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for `(tag, index)`.
    pub fn child(&self, tag: &str, index: u64) -> RandomStream {
        RandomStream::new(derive_seed(self.seed, tag, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw via Box-Muller (cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normals(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.normal()).collect()
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang; shapes below one use the
    /// `G(a) = G(a + 1) * U^(1/a)` boost.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0);
            return g * self.uniform_open().powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let z = self.normal();
            let v = 1.0 + c * z;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            if u < 1.0 - 0.0331 * z.powi(4) || u.ln() < 0.5 * z * z + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Beta(alpha, beta) strictly inside `(0, 1)`.
    pub fn beta(&mut self, alpha: f64, beta: f64) -> f64 {
        loop {
            let x = self.gamma(alpha);
            let y = self.gamma(beta);
            let b = x / (x + y);
            if b > 0.0 && b < 1.0 {
                return b;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `count` Beta(alpha, beta) draws in `(0, 1)`.
pub fn sample_beta(stream: &mut RandomStream, alpha: f64, beta: f64, count: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::contract(format!(
            "Beta shape parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    Ok((0..count).map(|_| stream.beta(alpha, beta)).collect())
}
