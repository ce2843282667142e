//! Communication delay models.
//!
//! Delivery delay = sampled base latency + payload size × per-byte cost.
//! The sampler draws from a caller-owned RNG stream, so an experiment can
//! hand every system under comparison the same stream and they will see
//! identical delays frame for frame.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    /// Every delivery takes exactly this long (seconds).
    Fixed { seconds: f64 },
    /// Each delivery draws uniformly from this set of latencies.
    UniformSet { choices: Vec<f64> },
    /// Uniform in a continuous interval.
    UniformRange { lo: f64, hi: f64 },
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("latency model: {msg}")));
        match self {
            LatencyModel::Fixed { seconds } => {
                if !seconds.is_finite() || *seconds < 0.0 {
                    return bad("fixed latency must be finite and nonnegative");
                }
            }
            LatencyModel::UniformSet { choices } => {
                if choices.is_empty() {
                    return bad("choice set is empty");
                }
                if choices.iter().any(|c| !c.is_finite() || *c < 0.0) {
                    return bad("choices must be finite and nonnegative");
                }
            }
            LatencyModel::UniformRange { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || *lo < 0.0 || hi < lo {
                    return bad("range must be finite with 0 <= lo <= hi");
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LatencyModel::Fixed { seconds } => *seconds,
            LatencyModel::UniformSet { choices } => choices[rng.gen_range(0..choices.len())],
            LatencyModel::UniformRange { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..*hi)
                }
            }
        }
    }
}

/// A delay model plus a serialization cost per payload byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub latency: LatencyModel,
    /// Seconds per payload byte (models link bandwidth); 0 for free links.
    pub per_byte_cost: f64,
}

impl Channel {
    pub fn fixed(seconds: f64) -> Channel {
        Channel { latency: LatencyModel::Fixed { seconds }, per_byte_cost: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.latency.validate()?;
        if !self.per_byte_cost.is_finite() || self.per_byte_cost < 0.0 {
            return Err(Error::config("per-byte cost must be finite and nonnegative".to_string()));
        }
        Ok(())
    }

    /// Total delivery delay for a message of `payload_len` bytes.
    pub fn deliver(&self, payload_len: usize, rng: &mut ChaCha8Rng) -> f64 {
        self.latency.sample(rng) + self.per_byte_cost * payload_len as f64
    }
}

/// RNG stream for one (experiment, scenario, latency setting) triple.
/// Deliberately independent of which system is listening, so paired
/// comparisons across systems see the same channel.
pub fn channel_stream(seed: u64, scenario: u64, latency_tag: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut z = seed
        .wrapping_add(scenario.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(latency_tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fixed_channel_is_exact() {
        let ch = Channel::fixed(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(ch.deliver(1000, &mut rng), 0.2);
        }
    }

    #[test]
    fn delay_grows_with_payload_size() {
        let ch = Channel { latency: LatencyModel::Fixed { seconds: 0.1 }, per_byte_cost: 1e-6 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let small = ch.deliver(100, &mut rng);
        let big = ch.deliver(10_000, &mut rng);
        assert!(big > small);
        assert!((big - 0.1 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn uniform_set_hits_every_choice_evenly() {
        let ch = Channel {
            latency: LatencyModel::UniformSet { choices: vec![0.1, 0.2, 0.3] },
            per_byte_cost: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        let n = 3000;
        for _ in 0..n {
            let d = ch.deliver(0, &mut rng);
            let idx = ((d * 10.0).round() as usize) - 1;
            counts[idx] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.05, "frequency {f} strays from uniform");
        }
    }

    #[test]
    fn same_stream_same_delays_regardless_of_listener() {
        let ch = Channel {
            latency: LatencyModel::UniformRange { lo: 0.05, hi: 0.4 },
            per_byte_cost: 0.0,
        };
        let delays_a: Vec<f64> = {
            let mut rng = channel_stream(1, 2, 300);
            (0..20).map(|_| ch.deliver(0, &mut rng)).collect()
        };
        let delays_b: Vec<f64> = {
            let mut rng = channel_stream(1, 2, 300);
            (0..20).map(|_| ch.deliver(0, &mut rng)).collect()
        };
        assert_eq!(delays_a, delays_b);
        let other: Vec<f64> = {
            let mut rng = channel_stream(1, 3, 300);
            (0..20).map(|_| ch.deliver(0, &mut rng)).collect()
        };
        assert_ne!(delays_a, other);
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(LatencyModel::Fixed { seconds: -0.1 }.validate().is_err());
        assert!(LatencyModel::UniformSet { choices: vec![] }.validate().is_err());
        assert!(LatencyModel::UniformRange { lo: 0.3, hi: 0.1 }.validate().is_err());
        assert!(Channel { latency: LatencyModel::Fixed { seconds: 0.1 }, per_byte_cost: f64::NAN }
            .validate()
            .is_err());
        assert!(Channel::fixed(0.0).validate().is_ok());
    }
}
