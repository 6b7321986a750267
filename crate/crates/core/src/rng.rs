//! Deterministic random streams.
//!
//! All randomness in the pipeline flows from one root seed through named
//! sub-streams (`data`, `model`, `maps`, `shuffle`, ...), so components can
//! be varied independently while runs stay bit-reproducible. The generator
//! is xoshiro256++ seeded through splitmix64; normal variates come from
//! Box-Muller. Everything below is fixed by construction and will never
//! change output across versions of any external crate.

use alloc::vec::Vec;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// xoshiro256++ generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    /// Cached second Box-Muller variate.
    spare: Option<f64>,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, spare: None }
    }

    /// Derive a named sub-stream: the name is folded into the seed with FNV-1a.
    pub fn substream(seed: u64, name: &str) -> Self {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Self::from_seed(seed ^ h)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the ranges used here (n << 2^64),
        // but reject-sampling keeps it exact.
        let bound = u64::MAX - u64::MAX % n as u64;
        loop {
            let v = self.next_u64();
            if v < bound {
                return (v % n as u64) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let mut u1 = self.uniform();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        let r = libm_sqrt(-2.0 * libm_ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm_sin(theta));
        r * libm_cos(theta)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    /// Fisher-Yates shuffle of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

// Thin wrappers so the crate body stays no_std-clean; num-traits re-exports
// libm-backed Float for f64 but plain function calls read better here.
#[inline]
fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}
#[inline]
fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}
#[inline]
fn libm_sin(x: f64) -> f64 {
    num_traits::Float::sin(x)
}
#[inline]
fn libm_cos(x: f64) -> f64 {
    num_traits::Float::cos(x)
}
