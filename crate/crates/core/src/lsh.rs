//! Seed-deterministic LSH families and their m-fold composition.
//!
//! Two families are provided:
//!
//! * [`HashFamily::L1BitSample`]: `h(x) = [clamp(x[coord]) >= threshold]` with
//!   `coord` uniform over `[0, d)` and `threshold` uniform over `[0, C)`. For
//!   inputs clamped into `[0, C]` two points collide on one component with
//!   probability `1 - ||x - y||_1 / (d C)`.
//! * [`HashFamily::CosineProjection`]: `h(x) = [<normal, x> >= 0]` with a
//!   standard Gaussian normal; collision probability `1 - θ(x, y) / π`.
//!
//! Every component is derived from `(seed, component index)` through
//! SplitMix64 (plus Box-Muller for Gaussians), so a [`HashSpec`] of a few
//! integers is enough to rebuild the exact same functions on another host.
//! Components of a composition with `m` members are a prefix of the
//! composition with `m + 1` members built from the same seed.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Quantization ceiling for the l1 family, in mmHg.
pub const DEFAULT_CEILING: f64 = 250.0;

/// Keys of up to this many bits are packed into a `u128`.
pub const PACKED_KEY_BITS: usize = 128;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator. Small, fast and trivially portable.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)`, multiply-shift reduction.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for component `index` of a composition seeded with `seed`.
pub fn component_seed(seed: u64, index: u64) -> u64 {
    seed ^ SplitMix64::new(index).next_u64()
}

/// Derives an independent seed for `(stream, index)` below `base`.
///
/// Used to hand out table seeds from a single master seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = SplitMix64::new(base ^ mix64(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)));
    let s = rng.next_u64();
    mix64(s ^ index.wrapping_mul(GOLDEN_GAMMA).wrapping_add(stream))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashFamily {
    L1BitSample,
    CosineProjection,
}

impl fmt::Display for HashFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HashFamily::L1BitSample => f.write_str("l1_bit_sample"),
            HashFamily::CosineProjection => f.write_str("cosine_projection"),
        }
    }
}

/// `(r, cr, p1, p2)` sensitivity of a family. Only used to state properties
/// in tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityParams {
    pub r: f64,
    pub c: f64,
    pub p1: f64,
    pub p2: f64,
}

impl SensitivityParams {
    pub fn new(r: f64, c: f64, p1: f64, p2: f64) -> Result<Self> {
        if !(r > 0.0) || !(c >= 1.0) || !(p1 > p2) || !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2)
        {
            return Err(Error::invalid(format!(
                "sensitivity requires r > 0, c >= 1, 1 >= p1 > p2 >= 0 (got r={r}, c={c}, p1={p1}, p2={p2})"
            )));
        }
        Ok(Self { r, c, p1, p2 })
    }

    /// Single-component sensitivity of the l1 bit-sampling family.
    pub fn l1_bit_sample(r: f64, c: f64, d: usize, ceiling: f64) -> Result<Self> {
        let scale = d as f64 * ceiling;
        Self::new(r, c, 1.0 - r / scale, 1.0 - (c * r) / scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitSampleFunction {
    pub coord: usize,
    pub threshold: f64,
}

impl BitSampleFunction {
    fn derive(seed: u64, d: usize, ceiling: f64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let coord = rng.next_below(d);
        let threshold = rng.next_f64() * ceiling;
        Self { coord, threshold }
    }

    #[inline]
    pub fn bit(&self, x: &[f64], ceiling: f64) -> bool {
        x[self.coord].clamp(0.0, ceiling) >= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjectionFunction {
    pub normal: Vec<f64>,
}

impl RandomProjectionFunction {
    fn derive(seed: u64, d: usize) -> Self {
        let mut rng = SplitMix64::new(seed);
        loop {
            let mut normal = Vec::with_capacity(d);
            while normal.len() < d {
                // Box-Muller; u1 in (0, 1] keeps ln finite.
                let u1 = 1.0 - rng.next_f64();
                let u2 = rng.next_f64();
                let radius = (-2.0 * u1.ln()).sqrt();
                let angle = 2.0 * PI * u2;
                normal.push(radius * angle.cos());
                if normal.len() < d {
                    normal.push(radius * angle.sin());
                }
            }
            if normal.iter().any(|&c| c != 0.0) {
                return Self { normal };
            }
        }
    }

    /// Dot product exactly zero hashes to 1.
    #[inline]
    pub fn bit(&self, x: &[f64]) -> bool {
        let dot: f64 = self.normal.iter().zip(x).map(|(a, b)| a * b).sum();
        dot >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Components {
    BitSample(Vec<BitSampleFunction>),
    Projection(Vec<RandomProjectionFunction>),
}

/// Serializable description of a composed hash: everything needed to
/// regenerate its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashSpec {
    pub family: HashFamily,
    pub seed: u64,
    pub m: usize,
    pub d: usize,
    pub ceiling: f64,
}

impl HashSpec {
    pub fn new(family: HashFamily, seed: u64, m: usize, d: usize) -> Self {
        Self { family, seed, m, d, ceiling: DEFAULT_CEILING }
    }

    pub fn regenerate(&self) -> Result<ComposedHash> {
        ComposedHash::derive_with_ceiling(self.family, self.seed, self.m, self.d, self.ceiling)
    }
}

/// Concatenation of the m component bits of a composed hash.
///
/// Bit `i` is component `i`; bits are packed little-endian.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BucketKey {
    Packed(u128),
    Wide(Box<[u8]>),
}

impl BucketKey {
    fn from_bits(m: usize, mut bit: impl FnMut(usize) -> bool) -> Self {
        if m <= PACKED_KEY_BITS {
            let mut key = 0u128;
            for i in 0..m {
                if bit(i) {
                    key |= 1u128 << i;
                }
            }
            BucketKey::Packed(key)
        } else {
            let mut bytes = vec![0u8; m.div_ceil(8)];
            for i in 0..m {
                if bit(i) {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            BucketKey::Wide(bytes.into_boxed_slice())
        }
    }

    /// Value of bit `i`.
    pub fn bit(&self, i: usize) -> bool {
        match self {
            BucketKey::Packed(k) => i < 128 && (k >> i) & 1 == 1,
            BucketKey::Wide(b) => b.get(i / 8).is_some_and(|byte| (byte >> (i % 8)) & 1 == 1),
        }
    }

    /// Little-endian byte form, `ceil(m / 8)` bytes.
    pub fn to_bytes(&self, m: usize) -> Vec<u8> {
        match self {
            BucketKey::Packed(k) => k.to_le_bytes()[..m.div_ceil(8)].to_vec(),
            BucketKey::Wide(b) => b.to_vec(),
        }
    }

    pub fn from_bytes(m: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != m.div_ceil(8) {
            return Err(Error::invalid(format!(
                "bucket key for m={m} needs {} bytes, got {}",
                m.div_ceil(8),
                bytes.len()
            )));
        }
        if m <= PACKED_KEY_BITS {
            let mut buf = [0u8; 16];
            buf[..bytes.len()].copy_from_slice(bytes);
            Ok(BucketKey::Packed(u128::from_le_bytes(buf)))
        } else {
            Ok(BucketKey::Wide(bytes.into()))
        }
    }
}

/// m independent members of one family, applied together.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedHash {
    family: HashFamily,
    seed: Option<u64>,
    d: usize,
    ceiling: f64,
    components: Components,
}

impl ComposedHash {
    /// Derives `m` components of `family` from `seed` for dimension `d`.
    pub fn derive(family: HashFamily, seed: u64, m: usize, d: usize) -> Result<Self> {
        Self::derive_with_ceiling(family, seed, m, d, DEFAULT_CEILING)
    }

    pub fn derive_with_ceiling(family: HashFamily, seed: u64, m: usize, d: usize, ceiling: f64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::invalid(format!("composed hash needs m >= 1 and d >= 1 (got m={m}, d={d})")));
        }
        if !(ceiling.is_finite() && ceiling > 0.0) {
            return Err(Error::invalid(format!("quantization ceiling must be finite and positive, got {ceiling}")));
        }
        let seeds = (0..m as u64).map(|i| component_seed(seed, i));
        let components = match family {
            HashFamily::L1BitSample => {
                Components::BitSample(seeds.map(|s| BitSampleFunction::derive(s, d, ceiling)).collect())
            }
            HashFamily::CosineProjection => {
                Components::Projection(seeds.map(|s| RandomProjectionFunction::derive(s, d)).collect())
            }
        };
        Ok(Self { family, seed: Some(seed), d, ceiling, components })
    }

    /// Builds an l1 hash from explicit components. Such hashes have no seed
    /// and therefore no [`HashSpec`].
    pub fn from_bit_samples(d: usize, ceiling: f64, components: Vec<BitSampleFunction>) -> Result<Self> {
        if components.is_empty() || d == 0 {
            return Err(Error::invalid("composed hash needs at least one component and d >= 1"));
        }
        for c in &components {
            if c.coord >= d || !(0.0..ceiling).contains(&c.threshold) {
                return Err(Error::invalid(format!(
                    "bit-sample component out of range: coord={} (d={d}), threshold={} (C={ceiling})",
                    c.coord, c.threshold
                )));
            }
        }
        Ok(Self { family: HashFamily::L1BitSample, seed: None, d, ceiling, components: Components::BitSample(components) })
    }

    /// Builds a cosine hash from explicit hyperplane normals.
    pub fn from_projections(d: usize, components: Vec<RandomProjectionFunction>) -> Result<Self> {
        if components.is_empty() || d == 0 {
            return Err(Error::invalid("composed hash needs at least one component and d >= 1"));
        }
        for c in &components {
            if c.normal.len() != d || c.normal.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid("projection normal must have length d and be non-zero"));
            }
        }
        Ok(Self {
            family: HashFamily::CosineProjection,
            seed: None,
            d,
            ceiling: DEFAULT_CEILING,
            components: Components::Projection(components),
        })
    }

    pub fn family(&self) -> HashFamily {
        self.family
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn m(&self) -> usize {
        match &self.components {
            Components::BitSample(c) => c.len(),
            Components::Projection(c) => c.len(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    pub fn components(&self) -> &Components {
        &self.components
    }

    pub fn spec(&self) -> Option<HashSpec> {
        self.seed.map(|seed| HashSpec { family: self.family, seed, m: self.m(), d: self.d, ceiling: self.ceiling })
    }

    /// Hashes `x`, checking its dimension.
    pub fn hash_point(&self, x: &[f64]) -> Result<BucketKey> {
        if x.len() != self.d {
            return Err(Error::invalid(format!("point has dimension {}, hash expects {}", x.len(), self.d)));
        }
        Ok(self.key(x))
    }

    /// Hashes `x` without a dimension check. `x.len()` must equal `d`.
    #[inline]
    pub fn key(&self, x: &[f64]) -> BucketKey {
        debug_assert_eq!(x.len(), self.d);
        match &self.components {
            Components::BitSample(c) => BucketKey::from_bits(c.len(), |i| c[i].bit(x, self.ceiling)),
            Components::Projection(c) => BucketKey::from_bits(c.len(), |i| c[i].bit(x)),
        }
    }

    /// Feeds the exact bit patterns of every component into `hasher`.
    pub fn digest_into(&self, hasher: &mut Sha256) {
        hasher.update([self.family as u8]);
        hasher.update((self.d as u64).to_le_bytes());
        hasher.update(self.ceiling.to_bits().to_le_bytes());
        match &self.components {
            Components::BitSample(c) => {
                for f in c {
                    hasher.update((f.coord as u64).to_le_bytes());
                    hasher.update(f.threshold.to_bits().to_le_bytes());
                }
            }
            Components::Projection(c) => {
                for f in c {
                    for v in &f.normal {
                        hasher.update(v.to_bits().to_le_bytes());
                    }
                }
            }
        }
    }
}

/// SHA-256 (hex) over the regenerated components of `specs`, in order.
///
/// Two hosts holding equal digests hash every point identically.
pub fn spec_digest(specs: &[HashSpec]) -> Result<String> {
    let mut hasher = Sha256::new();
    for spec in specs {
        spec.regenerate()?.digest_into(&mut hasher);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Empirical single-component collision rate of `x` and `y` over `trials`
/// independently derived components (seeds `base_seed + t`).
pub fn collision_probability_estimate(
    family: HashFamily,
    x: &[f64],
    y: &[f64],
    trials: usize,
    base_seed: u64,
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", x.len(), y.len())));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let d = x.len();
    let mut hits = 0usize;
    for t in 0..trials as u64 {
        let h = ComposedHash::derive(family, base_seed.wrapping_add(t), 1, d)?;
        if h.key(x) == h.key(y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}
