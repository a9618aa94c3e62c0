//! Deterministic counter-based random number generation.
//!
//! Every generated artifact (scene tensors, layer parameters, verification
//! instances) must be byte-reproducible from a 64-bit seed, in any language.
//! The generator is the SplitMix64 output function applied to a counter:
//!
//! ```text
//! state_i = seed + (i + 1) * 0x9E3779B97F4A7C15          (wrapping)
//! z = state_i
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9               (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB               (wrapping)
//! out_i = z ^ (z >> 31)
//! ```
//!
//! Uniform doubles take the top 53 bits: `(out >> 11) * 2^-53`. Normal
//! variates use the Box-Muller transform on two consecutive uniforms.
//! Independent substreams are derived by hashing a label (FNV-1a) into the
//! seed, so e.g. the camera-3/level-0 tensor stream does not depend on how
//! many values earlier streams consumed.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Counter-based generator; cloning or re-creating from the same seed
/// reproduces the stream exactly.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
    /// Spare Box-Muller variate, if one is buffered.
    cached_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            seed,
            counter: 0,
            cached_normal: None,
        }
    }

    /// Independent substream for `label`; used for per-tensor streams.
    pub fn substream(&self, label: &str) -> CounterRng {
        CounterRng::new(self.seed ^ fnv1a(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        splitmix64_mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // Guard u1 away from zero so ln() stays finite.
        let u1 = (self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
