//! Domain types for one simulated system: physical constants, per-user
//! channel models, request traffic, and the transmit-power/reward formulas.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failure for a [`SystemConfig`].
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("{0} must be strictly positive")]
    NonPositive(&'static str),
    #[error("power levels must be non-empty, strictly positive and strictly increasing")]
    BadPowerLevels,
    #[error("zipf exponent must be non-negative")]
    NegativeZipf,
    #[error("expected one channel model per user ({expected}), got {got}")]
    ChannelCountMismatch { expected: usize, got: usize },
    #[error("channel model invalid: {0}")]
    BadChannel(String),
}

/// Marks whether a user belongs to the good- or bad-channel group. Only used
/// for reporting; the simulator itself treats users uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelTag {
    Good,
    Bad,
}

/// Per-user fading model. A fresh gain is drawn independently for every user
/// at every transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelModel {
    /// Amplitude gain drawn uniformly from a finite support.
    DiscreteUniform { support: Vec<f64> },
    /// Amplitude gain drawn exponentially with the given mean.
    Exponential { mean: f64 },
    /// Rayleigh-faded amplitude: the squared gain (the power gain entering the
    /// Shannon threshold) is exponential with mean `mean_square`.
    Rayleigh { mean_square: f64 },
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = match self {
            ChannelModel::DiscreteUniform { support } => {
                !support.is_empty() && support.iter().all(|&g| g > 0.0 && g.is_finite())
            }
            ChannelModel::Exponential { mean } => *mean > 0.0 && mean.is_finite(),
            ChannelModel::Rayleigh { mean_square } => *mean_square > 0.0 && mean_square.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ConfigError::BadChannel(format!("{self:?}")))
        }
    }

    /// One amplitude-gain draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ChannelModel::DiscreteUniform { support } => support[rng.gen_range(0..support.len())],
            ChannelModel::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("validated mean").sample(rng)
            }
            ChannelModel::Rayleigh { mean_square } => {
                Exp::new(1.0 / mean_square).expect("validated mean").sample(rng).sqrt()
            }
        }
    }

    /// 99th percentile of the amplitude-gain distribution; the default input
    /// normalisation scale for the Q-network.
    pub fn p99(&self) -> f64 {
        const LN100: f64 = 4.605170185988091; // -ln(0.01)
        match self {
            ChannelModel::DiscreteUniform { support } => {
                support.iter().cloned().fold(f64::MIN, f64::max)
            }
            ChannelModel::Exponential { mean } => mean * LN100,
            ChannelModel::Rayleigh { mean_square } => (mean_square * LN100).sqrt(),
        }
    }
}

/// Per-user channel: fading model plus its reporting tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserChannel {
    pub model: ChannelModel,
    pub tag: ChannelTag,
}

/// All physical, traffic and run-level constants for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of users L.
    pub num_users: usize,
    /// Catalog size M.
    pub catalog_size: usize,
    /// File size F in bits.
    pub file_size_bits: f64,
    /// Transmit rate R in bits/s; the service time is T = F / R.
    pub tx_rate_bps: f64,
    /// Spectral efficiency rho = C / B (dimensionless).
    pub spectral_efficiency: f64,
    /// Receiver noise power N_g in watts.
    pub noise_power_w: f64,
    /// Allowed transmit powers in watts, strictly increasing.
    pub power_levels_w: Vec<f64>,
    /// Long-run average power limit in watts.
    pub avg_power_limit_w: f64,
    /// Zipf popularity exponent (0 = uniform).
    pub zipf_exponent: f64,
    /// Total request arrival rate in requests/s, summed over files and users.
    pub arrival_rate_hz: f64,
    /// One channel entry per user.
    pub channels: Vec<UserChannel>,
    /// Number of multicast transmissions to simulate.
    pub horizon: u64,
    /// Master seed; sub-streams are derived per component.
    pub seed: u64,
}

impl SystemConfig {
    /// Service time T = F / R in seconds.
    pub fn service_time(&self) -> f64 {
        self.file_size_bits / self.tx_rate_bps
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_users < 1 {
            return Err(ConfigError::ZeroCount("num_users"));
        }
        if self.catalog_size < 1 {
            return Err(ConfigError::ZeroCount("catalog_size"));
        }
        for (v, name) in [
            (self.file_size_bits, "file_size_bits"),
            (self.tx_rate_bps, "tx_rate_bps"),
            (self.spectral_efficiency, "spectral_efficiency"),
            (self.noise_power_w, "noise_power_w"),
            (self.avg_power_limit_w, "avg_power_limit_w"),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if self.arrival_rate_hz < 0.0 || !self.arrival_rate_hz.is_finite() {
            return Err(ConfigError::NonPositive("arrival_rate_hz"));
        }
        if self.zipf_exponent < 0.0 {
            return Err(ConfigError::NegativeZipf);
        }
        let levels = &self.power_levels_w;
        if levels.is_empty()
            || levels.iter().any(|&p| !(p > 0.0) || !p.is_finite())
            || levels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ConfigError::BadPowerLevels);
        }
        if self.channels.len() != self.num_users {
            return Err(ConfigError::ChannelCountMismatch {
                expected: self.num_users,
                got: self.channels.len(),
            });
        }
        for ch in &self.channels {
            ch.model.validate()?;
        }
        Ok(())
    }

    /// The evenly spaced grid used throughout: `count` levels from `lo` to
    /// `hi` inclusive.
    pub fn power_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        assert!(count >= 2 && hi > lo);
        (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect()
    }
}

/// MDP state: per-user amplitude gains H plus the binary head-of-line request
/// vector V. Flattened to 2L numbers for the Q-network input.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    pub gains: Vec<f64>,
    pub requested: Vec<bool>,
}

impl MdpState {
    pub fn num_users(&self) -> usize {
        self.gains.len()
    }

    /// Flat 2L encoding with gains divided per-user by `scales`.
    pub fn encode(&self, scales: &[f64]) -> Vec<f64> {
        assert_eq!(self.gains.len(), scales.len());
        let mut out = Vec::with_capacity(2 * self.gains.len());
        for (g, s) in self.gains.iter().zip(scales) {
            out.push(g / s);
        }
        for &r in &self.requested {
            out.push(if r { 1.0 } else { 0.0 });
        }
        out
    }
}

/// Transmit power needed for successful reception at the given amplitude
/// gain: N_g * (2^rho - 1) / gain^2.
///
/// Panics on a non-positive gain; gains are positive by construction of every
/// channel model.
pub fn required_power(gain: f64, cfg: &SystemConfig) -> f64 {
    assert!(gain > 0.0, "required_power: non-positive gain {gain}");
    cfg.noise_power_w * (2.0_f64.powf(cfg.spectral_efficiency) - 1.0) / (gain * gain)
}

/// Number of requesting users successfully served at the chosen transmit
/// power. Success needs `power` strictly above the per-user requirement, so a
/// tie counts as failure.
pub fn reward(state: &MdpState, power: f64, cfg: &SystemConfig) -> u32 {
    state
        .gains
        .iter()
        .zip(&state.requested)
        .filter(|&(g, &req)| req && power > required_power(*g, cfg))
        .count() as u32
}

/// One fresh i.i.d. amplitude-gain draw per user.
pub fn draw_gains<R: Rng>(channels: &[UserChannel], rng: &mut R) -> Vec<f64> {
    channels.iter().map(|c| c.model.sample(rng)).collect()
}

/// Zipf popularity sampler over a catalog of M files, file i (1-based)
/// weighted by i^(-alpha); requests split uniformly across users.
#[derive(Debug, Clone)]
pub struct RequestSampler {
    cdf: Vec<f64>,
    num_users: usize,
}

impl RequestSampler {
    pub fn new(catalog_size: usize, zipf_exponent: f64, num_users: usize) -> Self {
        let weights: Vec<f64> = (1..=catalog_size)
            .map(|i| (i as f64).powf(-zipf_exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { cdf, num_users }
    }

    /// Popularity of file `i` (0-based).
    pub fn popularity(&self, i: usize) -> f64 {
        let prev = if i == 0 { 0.0 } else { self.cdf[i - 1] };
        self.cdf[i] - prev
    }

    /// Draws (file index, user index).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.gen();
        let file = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let user = rng.gen_range(0..self.num_users);
        (file, user)
    }
}

/// Convenience wrapper matching the operation-level signature.
pub fn sample_request<R: Rng>(
    zipf_exponent: f64,
    catalog_size: usize,
    num_users: usize,
    rng: &mut R,
) -> (usize, usize) {
    RequestSampler::new(catalog_size, zipf_exponent, num_users).sample(rng)
}
