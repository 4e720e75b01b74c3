//! Log-distance path-loss channel.
//!
//! `rssi = -(10 n log10(d) + A)` with `n` the path-loss exponent and `A` the
//! system loss in dB. Samples add Gaussian shadowing and occasional impulsive
//! spikes, then round to whole dBm.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("distance must be positive and finite, got {0}")]
    Distance(f64),
    #[error("invalid channel parameter {field}: {reason}")]
    Param { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Path-loss exponent `n`.
    pub path_loss_exponent: f64,
    /// System loss constant `A`, dB.
    pub system_loss_db: f64,
    /// Shadowing standard deviation, dB.
    #[serde(default = "default_sigma")]
    pub sigma_db: f64,
    #[serde(default = "default_spike_prob")]
    pub spike_prob: f64,
    #[serde(default = "default_spike_mag")]
    pub spike_mag_db: f64,
}

fn default_sigma() -> f64 {
    2.0
}

fn default_spike_prob() -> f64 {
    0.05
}

fn default_spike_mag() -> f64 {
    8.0
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            path_loss_exponent: 2.0,
            system_loss_db: 57.0,
            sigma_db: default_sigma(),
            spike_prob: default_spike_prob(),
            spike_mag_db: default_spike_mag(),
        }
    }
}

impl ChannelParams {
    pub fn noiseless(path_loss_exponent: f64, system_loss_db: f64) -> Self {
        Self {
            path_loss_exponent,
            system_loss_db,
            sigma_db: 0.0,
            spike_prob: 0.0,
            spike_mag_db: 0.0,
        }
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<ChannelError> {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, reason: &str| {
            out.push(ChannelError::Param {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.path_loss_exponent.is_finite() && self.path_loss_exponent > 0.0) {
            bad("path_loss_exponent", "must be > 0");
        }
        if !(self.system_loss_db.is_finite() && self.system_loss_db >= 0.0) {
            bad("system_loss_db", "must be >= 0");
        }
        if !(self.sigma_db.is_finite() && self.sigma_db >= 0.0) {
            bad("sigma_db", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.spike_prob) {
            bad("spike_prob", "must lie in [0, 1]");
        }
        if !(self.spike_mag_db.is_finite() && self.spike_mag_db >= 0.0) {
            bad("spike_mag_db", "must be >= 0");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        match self.problems().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Noiseless RSSI (dBm, negative) at distance `d` meters.
pub fn rssi_from_distance(d: f64, params: &ChannelParams) -> Result<f64, ChannelError> {
    if !(d.is_finite() && d > 0.0) {
        return Err(ChannelError::Distance(d));
    }
    Ok(-(10.0 * params.path_loss_exponent * d.log10() + params.system_loss_db))
}

/// Inverse of [`rssi_from_distance`].
pub fn distance_from_rssi(rssi: f64, params: &ChannelParams) -> f64 {
    10f64.powf((-rssi - params.system_loss_db) / (10.0 * params.path_loss_exponent))
}

/// One whole-dBm reading: model value plus shadowing plus an optional spike.
///
/// Draw order per call is fixed (shadowing, spike trial, spike sign) so a
/// seeded generator replays the same sequence.
pub fn sample_noisy_rssi<R: Rng + ?Sized>(
    d: f64,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<f64, ChannelError> {
    let clean = rssi_from_distance(d, params)?;
    let shadow = if params.sigma_db > 0.0 {
        let normal = Normal::new(0.0, params.sigma_db).map_err(|e| ChannelError::Param {
            field: "sigma_db",
            reason: e.to_string(),
        })?;
        normal.sample(rng)
    } else {
        0.0
    };
    let spike = if params.spike_prob > 0.0 && rng.random::<f64>() < params.spike_prob {
        if rng.random::<bool>() {
            params.spike_mag_db
        } else {
            -params.spike_mag_db
        }
    } else {
        0.0
    };
    Ok((clean + shadow + spike).round())
}
