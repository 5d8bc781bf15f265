//! Synthetic spot-price traces with controlled mean and volatility.
//!
//! Each market draws one uniform price per change period. With moment
//! enforcement on, the drawn sample is affinely rescaled so its mean and
//! Bessel-corrected standard deviation hit the targets exactly rather than
//! only in expectation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::VmId;
use crate::prices::{PriceError, PricePoint, PriceTrace};

/// Negative values this close to zero (relative to the mean) are clamped;
/// anything lower is an error.
const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("market {vm_id}: {message}")]
    InvalidSpec { vm_id: VmId, message: String },
    #[error("market {vm_id}: moment rescale produced price {min} < 0; use a smaller stddev or volatility scale")]
    NegativePrice { vm_id: VmId, min: f64 },
    #[error("duplicate market {0}")]
    Duplicate(VmId),
    #[error(transparent)]
    Price(#[from] PriceError),
}

fn default_change_period() -> i64 {
    60
}

fn default_duration() -> i64 {
    3600
}

fn default_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// One synthetic market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMarketSpec {
    pub vm_id: VmId,
    pub mean: f64,
    pub stddev: f64,
    #[serde(default = "default_change_period")]
    pub change_period: i64,
    #[serde(default = "default_duration")]
    pub duration: i64,
    #[serde(default = "default_scale")]
    pub volatility_scale: f64,
    #[serde(default = "default_true")]
    pub enforce_sample_moments: bool,
    /// Timestamp of the first point.
    #[serde(default)]
    pub start: i64,
}

impl SynthMarketSpec {
    pub fn new(vm_id: impl Into<VmId>, mean: f64, stddev: f64) -> Self {
        SynthMarketSpec {
            vm_id: vm_id.into(),
            mean,
            stddev,
            change_period: default_change_period(),
            duration: default_duration(),
            volatility_scale: 1.0,
            enforce_sample_moments: true,
            start: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |message: String| SynthError::InvalidSpec {
            vm_id: self.vm_id.clone(),
            message,
        };
        if !(self.mean.is_finite() && self.mean > 0.0) {
            return Err(bad(format!("mean must be > 0, got {}", self.mean)));
        }
        if !(self.stddev.is_finite() && self.stddev >= 0.0) {
            return Err(bad(format!("stddev must be >= 0, got {}", self.stddev)));
        }
        if !(self.volatility_scale.is_finite() && self.volatility_scale >= 0.0) {
            return Err(bad(format!(
                "volatility_scale must be >= 0, got {}",
                self.volatility_scale
            )));
        }
        if self.change_period <= 0 || self.duration <= 0 {
            return Err(bad("change_period and duration must be > 0".into()));
        }
        Ok(())
    }

    /// Number of price changes: one per started change period.
    pub fn points(&self) -> usize {
        ((self.duration + self.change_period - 1) / self.change_period) as usize
    }

    /// Standard deviation the generated trace aims for.
    pub fn target_stddev(&self) -> f64 {
        self.stddev * self.volatility_scale
    }
}

/// Mean and Bessel-corrected standard deviation.
pub fn sample_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Prices only, without timestamps.
pub fn generate_values(spec: &SynthMarketSpec, seed: u64) -> Result<Vec<f64>, SynthError> {
    spec.validate()?;
    let n = spec.points();
    let target = spec.target_stddev();
    let half_width = target * 3f64.sqrt();
    if half_width == 0.0 {
        return Ok(vec![spec.mean; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(spec.mean - half_width..=spec.mean + half_width))
        .collect();
    if spec.enforce_sample_moments {
        if n == 1 {
            values[0] = spec.mean;
        } else {
            let (m, s) = sample_moments(&values);
            if s == 0.0 {
                return Err(SynthError::InvalidSpec {
                    vm_id: spec.vm_id.clone(),
                    message: "degenerate sample cannot be rescaled".into(),
                });
            }
            let k = target / s;
            for v in &mut values {
                *v = spec.mean + (*v - m) * k;
            }
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -CLAMP_TOLERANCE * spec.mean {
            return Err(SynthError::NegativePrice {
                vm_id: spec.vm_id.clone(),
                min,
            });
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    Ok(values)
}

pub fn generate(spec: &SynthMarketSpec, seed: u64) -> Result<PriceTrace, SynthError> {
    let values = generate_values(spec, seed)?;
    let points = values
        .into_iter()
        .enumerate()
        .map(|(i, price)| PricePoint {
            timestamp: spec.start + i as i64 * spec.change_period,
            price,
        })
        .collect();
    Ok(PriceTrace::new(spec.vm_id.clone(), points)?)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed for one labelled sub-stream of `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label.as_bytes())))
}

/// One trace per spec, each from its own sub-seed so markets are mutually
/// independent and editing one spec never changes another's trace.
pub fn generate_market_suite(specs: &[SynthMarketSpec], seed: u64) -> Result<BTreeMap<VmId, PriceTrace>, SynthError> {
    let mut seen = std::collections::BTreeSet::new();
    for s in specs {
        if !seen.insert(&s.vm_id) {
            return Err(SynthError::Duplicate(s.vm_id.clone()));
        }
    }
    let traces: Result<Vec<PriceTrace>, SynthError> = specs
        .par_iter()
        .map(|s| generate(s, derive_seed(seed, s.vm_id.as_str())))
        .collect();
    Ok(traces?.into_iter().map(|t| (t.vm_id().clone(), t)).collect())
}

/// `later`'s points appended after `earlier`'s; `later` must start after
/// `earlier` ends.
pub fn concat(earlier: &PriceTrace, later: &PriceTrace) -> Result<PriceTrace, PriceError> {
    let mut points = earlier.points().to_vec();
    points.extend_from_slice(later.points());
    PriceTrace::new(earlier.vm_id().clone(), points)
}
