//! Counter-based pseudo-random generation.
//!
//! Every random quantity in this crate (data samples, weight init, feature
//! draws, minibatch order) flows through [`RngState`], a counter-based
//! generator keyed by a 64-bit seed. The n-th output is a pure function of
//! (key, n), so streams can be split into independent substreams by key
//! derivation and replayed exactly.
//!
//! Normal variates use the polar method with a series-based natural log, so
//! draws involve only IEEE-exact arithmetic (+, -, *, /, sqrt) and are
//! bit-identical across platforms for a given seed.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Natural log via range reduction and the atanh series, pure arithmetic.
///
/// Relative error is below 1e-15 on normal doubles, which is more than the
/// polar transform needs. Requires `x` finite and > 0.
fn det_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7FF) as i64;
    let mut mant_bits = bits & 0x000F_FFFF_FFFF_FFFF;
    if exp == 0 {
        // subnormal: renormalize
        let shift = mant_bits.leading_zeros() as i64 - 11;
        mant_bits = (mant_bits << (shift + 1)) & 0x000F_FFFF_FFFF_FFFF;
        exp -= shift;
    }
    // m in [1, 2)
    let mut m = f64::from_bits(mant_bits | (1023u64 << 52));
    let mut e = exp - 1023;
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // ln m = 2 atanh(t), t = (m-1)/(m+1), |t| <= 0.1716
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let mut series = 1.0 / 23.0;
    for k in (0..11).rev() {
        series = series * t2 + 1.0 / (2 * k + 1) as f64;
    }
    2.0 * t * series + e as f64 * std::f64::consts::LN_2
}

/// Deterministic counter-based random stream.
#[derive(Clone, Debug)]
pub struct RngState {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            key: mix64(seed ^ GOLDEN),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent substream. Distinct tags give unrelated streams;
    /// the parent stream is not advanced.
    pub fn substream(&self, tag: u64) -> Self {
        RngState {
            key: mix64(self.key ^ mix64(tag.wrapping_add(GOLDEN))),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive a fresh 64-bit seed without advancing the stream.
    pub fn derive_seed(&self, tag: u64) -> u64 {
        mix64(self.key ^ mix64(tag.wrapping_mul(GOLDEN) ^ 0xD6E8_FEB8_6659_FD93))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in (0, 1].
    pub fn next_uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via the polar method.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_uniform() - 1.0;
            let v = 2.0 * self.next_uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = (-2.0 * det_ln(s) / s).sqrt();
                self.spare_normal = Some(v * scale);
                return u * scale;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.next_normal();
        }
    }

    /// Uniform index in `0..n` (n > 0).
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}
