//! Counter-based random generation.
//!
//! Every draw is a pure function of `(key, counter)`, hashed through the
//! SplitMix64 finalizer, so sequences are identical on every platform and
//! independent streams can be split off by re-keying instead of sharing state.
//! Gaussian variates use the Box–Muller transform.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn stage labels into stream keys.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: mix64(seed ^ 0x5eed_0f_7ac0),
            counter: 0,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream for the `index`-th child (e.g. one sampling chain).
    pub fn child(&self, index: u64) -> Rng {
        let seed = mix64(self.key ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)));
        Rng::new(seed)
    }

    /// Independent stream for a named pipeline stage ("train", "calib", ...).
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(mix64(self.key ^ fnv1a(label)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(c.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on the open-closed interval (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is < n / 2^64 and irrelevant here.
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}
