//! Evaluation metrics: root-mean-square error and RSSI percent accuracy.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::channel::{self, ChannelParams};
use crate::config::Mode;
use crate::simnet::RoundTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need equal, non-zero lengths, got {predicted} and {observed}")]
    Shape { predicted: usize, observed: usize },
    #[error("theoretical value must be non-zero")]
    ZeroTheoretical,
    #[error("no samples left after burn-in")]
    NoSamples,
}

pub fn rmse(predicted: &[f64], observed: &[f64]) -> Result<f64, MetricsError> {
    if predicted.is_empty() || predicted.len() != observed.len() {
        return Err(MetricsError::Shape {
            predicted: predicted.len(),
            observed: observed.len(),
        });
    }
    let sum: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

/// `(1 - |(theoretical - measured) / theoretical|) * 100`, unclamped.
pub fn rssi_accuracy_raw(theoretical: f64, measured: f64) -> Result<f64, MetricsError> {
    if theoretical == 0.0 {
        return Err(MetricsError::ZeroTheoretical);
    }
    Ok((1.0 - ((theoretical - measured) / theoretical).abs()) * 100.0)
}

/// Percent accuracy clamped at zero.
pub fn rssi_accuracy(theoretical: f64, measured: f64) -> Result<f64, MetricsError> {
    rssi_accuracy_raw(theoretical, measured).map(|a| a.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMetrics {
    pub distance_m: f64,
    pub rmse_m: f64,
    pub mean_accuracy_pct: f64,
    pub mean_raw_accuracy_pct: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: Mode,
    pub per_distance: Vec<DistanceMetrics>,
    /// Mean of the per-distance RMSE values, meters.
    pub mean_rmse_m: f64,
    /// Mean clamped accuracy over every post-burn-in reading.
    pub mean_accuracy_pct: f64,
    pub mean_raw_accuracy_pct: f64,
    pub samples: usize,
}

pub const REPORT_CSV_HEADER: &str = "mode,distance_m,rmse_m,mean_accuracy_pct,samples";

impl MetricReport {
    /// One row per known distance followed by an `all` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .per_distance
            .iter()
            .map(|d| {
                format!(
                    "{},{},{},{},{}",
                    self.mode, d.distance_m, d.rmse_m, d.mean_accuracy_pct, d.samples
                )
            })
            .collect();
        rows.push(format!(
            "{},all,{},{},{}",
            self.mode, self.mean_rmse_m, self.mean_accuracy_pct, self.samples
        ));
        rows
    }
}

// Distances from the same geometry agree to far better than a micrometer.
fn distance_key(d: f64) -> i64 {
    (d * 1e6).round() as i64
}

/// Per-distance RMSE of estimated vs. true distance and mean RSSI accuracy of
/// the filtered value against the noiseless model value, skipping the first
/// `burn_in` rounds.
pub fn report(
    traces: &[RoundTrace],
    channel: &ChannelParams,
    burn_in: u64,
    mode: Mode,
) -> Result<MetricReport, MetricsError> {
    #[derive(Default)]
    struct Acc {
        est: Vec<f64>,
        truth: Vec<f64>,
        acc: f64,
        raw_acc: f64,
    }
    let mut groups: BTreeMap<i64, (f64, Acc)> = BTreeMap::new();
    for trace in traces.iter().filter(|t| t.k >= burn_in) {
        for reading in trace.edges.iter().flat_map(|e| &e.readings) {
            let (_, acc) = groups
                .entry(distance_key(reading.true_distance_m))
                .or_insert_with(|| (reading.true_distance_m, Acc::default()));
            let theoretical = channel::rssi_from_distance(reading.true_distance_m, channel)
                .expect("true distances are positive");
            acc.est.push(reading.est_distance_m);
            acc.truth.push(reading.true_distance_m);
            acc.acc += rssi_accuracy(theoretical, reading.filtered_rssi_dbm)?;
            acc.raw_acc += rssi_accuracy_raw(theoretical, reading.filtered_rssi_dbm)?;
        }
    }
    if groups.is_empty() {
        return Err(MetricsError::NoSamples);
    }

    let mut per_distance = Vec::with_capacity(groups.len());
    let (mut acc_sum, mut raw_sum, mut samples) = (0.0, 0.0, 0usize);
    for (_, (distance_m, g)) in groups {
        let n = g.est.len();
        per_distance.push(DistanceMetrics {
            distance_m,
            rmse_m: rmse(&g.est, &g.truth)?,
            mean_accuracy_pct: g.acc / n as f64,
            mean_raw_accuracy_pct: g.raw_acc / n as f64,
            samples: n,
        });
        acc_sum += g.acc;
        raw_sum += g.raw_acc;
        samples += n;
    }
    let mean_rmse_m =
        per_distance.iter().map(|d| d.rmse_m).sum::<f64>() / per_distance.len() as f64;
    Ok(MetricReport {
        mode,
        per_distance,
        mean_rmse_m,
        mean_accuracy_pct: acc_sum / samples as f64,
        mean_raw_accuracy_pct: raw_sum / samples as f64,
        samples,
    })
}

/// Pools several reports of one mode, e.g. one per known distance.
pub fn combine(mode: Mode, reports: &[MetricReport]) -> Result<MetricReport, MetricsError> {
    let per_distance: Vec<DistanceMetrics> = reports
        .iter()
        .filter(|r| r.mode == mode)
        .flat_map(|r| r.per_distance.iter().cloned())
        .collect();
    if per_distance.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let samples: usize = per_distance.iter().map(|d| d.samples).sum();
    let weighted = |f: fn(&DistanceMetrics) -> f64| {
        per_distance
            .iter()
            .map(|d| f(d) * d.samples as f64)
            .sum::<f64>()
            / samples as f64
    };
    Ok(MetricReport {
        mode,
        mean_rmse_m: per_distance.iter().map(|d| d.rmse_m).sum::<f64>() / per_distance.len() as f64,
        mean_accuracy_pct: weighted(|d| d.mean_accuracy_pct),
        mean_raw_accuracy_pct: weighted(|d| d.mean_raw_accuracy_pct),
        samples,
        per_distance,
    })
}
