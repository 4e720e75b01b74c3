//! Federated Kalman filter coordination.
//!
//! The global filter broadcasts a [`FusionShare`]: every local filter restarts
//! from the fused state, with its covariance and process noise inflated by
//! `1/β_i`. Locals then run an ordinary predict/update against their own
//! measurements and send back a [`LocalPacket`]. The global filter fuses the
//! packets in information space:
//!
//! ```text
//! P_f⁻¹ = Σ P_i⁻¹ + P_M⁻¹
//! x_f   = P_f (Σ P_i⁻¹ x_i + P_M⁻¹ x_M)
//! ```
//!
//! where the master term is included only when a master estimate is present.
//! Raw measurements never leave the local filter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{self, FilterError, KfModel, StateEstimate};

/// Tolerance on `Σ β_i = 1`.
pub const BETA_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid information-sharing weights: {0}")]
    InvalidWeights(String),
    #[error("fusion needs at least one local packet")]
    NoPackets,
    #[error("stale packet from filter {filter_id}: time index {found}, expected {expected}")]
    Stale {
        filter_id: u32,
        expected: u64,
        found: u64,
    },
    #[error("covariance of {source_name} is singular or not positive definite")]
    SingularCovariance { source_name: String },
    #[error("fused information matrix is not invertible")]
    SingularInformation,
    #[error("expected {expected} {what}, got {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Global state broadcast to the local filters at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionShare {
    pub x_f: DVector<f64>,
    pub p_f: DMatrix<f64>,
    pub betas: Vec<f64>,
    pub q_global: DMatrix<f64>,
    /// Time index of the fused estimate.
    pub k: u64,
}

/// What one local filter starts its round from.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalInit {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// Local posterior sent to the global filter. Carries no raw measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPacket {
    pub filter_id: u32,
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: u64,
}

impl LocalPacket {
    pub fn from_estimate(filter_id: u32, est: &StateEstimate) -> Self {
        Self {
            filter_id,
            x: est.x.clone(),
            p: est.p.clone(),
            k: est.k,
        }
    }

    pub fn to_estimate(&self) -> StateEstimate {
        StateEstimate {
            x: self.x.clone(),
            p: self.p.clone(),
            k: self.k,
        }
    }
}

/// Optional global-side estimate. `None` means no master term in the fusion.
pub type MasterEstimate = Option<StateEstimate>;

/// How the global filter splits information across the local filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaRule {
    Named(NamedBetaRule),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedBetaRule {
    /// `β_i = 1/N`
    Equal,
    /// `β_i ∝ 1/trace(P_i)` of the previous round's local posteriors.
    Adaptive,
}

impl Default for BetaRule {
    fn default() -> Self {
        BetaRule::Named(NamedBetaRule::Equal)
    }
}

impl BetaRule {
    pub const EQUAL: BetaRule = BetaRule::Named(NamedBetaRule::Equal);
    pub const ADAPTIVE: BetaRule = BetaRule::Named(NamedBetaRule::Adaptive);

    /// Weights for `n` locals. `previous` holds last round's packets in local
    /// order, when available; the adaptive rule falls back to equal weights
    /// without them.
    pub fn weights(
        &self,
        n: usize,
        previous: Option<&[LocalPacket]>,
    ) -> Result<Vec<f64>, FusionError> {
        if n == 0 {
            return Err(FusionError::InvalidWeights("no local filters".into()));
        }
        let betas = match self {
            BetaRule::Named(NamedBetaRule::Equal) => vec![1.0 / n as f64; n],
            BetaRule::Named(NamedBetaRule::Adaptive) => match previous {
                Some(packets) if packets.len() == n => {
                    let inv: Vec<f64> = packets.iter().map(|p| 1.0 / p.p.trace()).collect();
                    if inv.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                        vec![1.0 / n as f64; n]
                    } else {
                        let total: f64 = inv.iter().sum();
                        inv.iter().map(|v| v / total).collect()
                    }
                }
                _ => vec![1.0 / n as f64; n],
            },
            BetaRule::Explicit(list) => {
                if list.len() != n {
                    return Err(FusionError::CountMismatch {
                        what: "weights",
                        expected: n,
                        found: list.len(),
                    });
                }
                list.clone()
            }
        };
        validate_betas(&betas)?;
        Ok(betas)
    }
}

pub fn validate_betas(betas: &[f64]) -> Result<(), FusionError> {
    if betas.is_empty() {
        return Err(FusionError::InvalidWeights("empty weight list".into()));
    }
    if let Some((i, b)) = betas
        .iter()
        .enumerate()
        .find(|(_, b)| !b.is_finite() || **b <= 0.0)
    {
        return Err(FusionError::InvalidWeights(format!(
            "weight {i} is {b}, must be positive"
        )));
    }
    let sum: f64 = betas.iter().sum();
    if (sum - 1.0).abs() > BETA_SUM_TOLERANCE {
        return Err(FusionError::InvalidWeights(format!(
            "weights sum to {sum}, must sum to 1"
        )));
    }
    Ok(())
}

/// Splits the global estimate into one initialization per local filter.
pub fn share(fusion: &FusionShare) -> Result<Vec<LocalInit>, FusionError> {
    validate_betas(&fusion.betas)?;
    let n = fusion.x_f.len();
    for (name, m) in [("P_f", &fusion.p_f), ("Q", &fusion.q_global)] {
        if m.shape() != (n, n) {
            return Err(FilterError::ShapeMismatch {
                matrix: name,
                expected: (n, n),
                found: m.shape(),
            }
            .into());
        }
    }
    Ok(fusion
        .betas
        .iter()
        .map(|beta| LocalInit {
            x: fusion.x_f.clone(),
            p: &fusion.p_f / *beta,
            q: &fusion.q_global / *beta,
        })
        .collect())
}

fn spd_inverse(
    m: &DMatrix<f64>,
    source_name: impl Fn() -> String,
) -> Result<DMatrix<f64>, FusionError> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| FusionError::SingularCovariance {
            source_name: source_name(),
        })?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::SingularCovariance {
            source_name: source_name(),
        });
    }
    Ok(inv)
}

/// Information-space fusion of the local posteriors and the optional master.
pub fn fuse(
    locals: &[LocalPacket],
    master: Option<&StateEstimate>,
) -> Result<StateEstimate, FusionError> {
    let first = locals.first().ok_or(FusionError::NoPackets)?;
    let k = first.k;
    let n = first.x.len();
    for packet in locals {
        if packet.k != k {
            return Err(FusionError::Stale {
                filter_id: packet.filter_id,
                expected: k,
                found: packet.k,
            });
        }
        if packet.x.len() != n || packet.p.shape() != (n, n) {
            return Err(FilterError::ShapeMismatch {
                matrix: "P_i",
                expected: (n, n),
                found: packet.p.shape(),
            }
            .into());
        }
    }
    if let Some(m) = master {
        if m.x.len() != n || m.p.shape() != (n, n) {
            return Err(FilterError::ShapeMismatch {
                matrix: "P_M",
                expected: (n, n),
                found: m.p.shape(),
            }
            .into());
        }
    }

    // A single term is its own fusion; skip the double inversion.
    if locals.len() == 1 && master.is_none() {
        spd_inverse(&first.p, || format!("filter {}", first.filter_id))?;
        return Ok(first.to_estimate());
    }

    let mut info = DMatrix::zeros(n, n);
    let mut info_state = DVector::zeros(n);
    for packet in locals {
        let inv = spd_inverse(&packet.p, || format!("filter {}", packet.filter_id))?;
        info_state += &inv * &packet.x;
        info += inv;
    }
    if let Some(m) = master {
        let inv = spd_inverse(&m.p, || "master".to_string())?;
        info_state += &inv * &m.x;
        info += inv;
    }

    let p_f = spd_inverse(&info, || "fused information".to_string())
        .map_err(|_| FusionError::SingularInformation)?;
    let p_f = (&p_f + p_f.transpose()) * 0.5;
    let x_f = &p_f * info_state;
    Ok(StateEstimate { x: x_f, p: p_f, k })
}

/// Prediction-only step of the master filter. An absent master stays absent.
pub fn master_step(
    master: Option<&StateEstimate>,
    model: &KfModel,
) -> Result<MasterEstimate, FusionError> {
    match master {
        Some(m) => Ok(Some(filter::predict(m, model, None)?)),
        None => Ok(None),
    }
}

/// One local filter's round: restart from the shared values, predict, update.
pub fn local_step(
    filter_id: u32,
    init: &LocalInit,
    k: u64,
    model: &KfModel,
    z: &DVector<f64>,
) -> Result<LocalPacket, FusionError> {
    let local_model = model.with_process_noise(init.q.clone())?;
    let start = StateEstimate::new(init.x.clone(), init.p.clone(), k)?;
    let posterior = filter::step(&start, &local_model, z)?;
    Ok(LocalPacket::from_estimate(filter_id, &posterior))
}

/// Result of one broadcast → local update → fusion cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub share: FusionShare,
    pub packets: Vec<LocalPacket>,
    pub master: MasterEstimate,
}

/// Full federated round. `models[i]` and `measurements[i]` belong to local
/// filter `i` (reported as `filter_id = i + 1`). The returned share keeps the
/// prior weights; rebalance with [`BetaRule::weights`] if needed.
pub fn fkf_round(
    measurements: &[DVector<f64>],
    prior: &FusionShare,
    models: &[KfModel],
    master: Option<&StateEstimate>,
) -> Result<RoundOutput, FusionError> {
    let n = prior.betas.len();
    if measurements.len() != n {
        return Err(FusionError::CountMismatch {
            what: "measurements",
            expected: n,
            found: measurements.len(),
        });
    }
    if models.len() != n {
        return Err(FusionError::CountMismatch {
            what: "models",
            expected: n,
            found: models.len(),
        });
    }

    let inits = share(prior)?;
    let packets = inits
        .iter()
        .zip(models)
        .zip(measurements)
        .enumerate()
        .map(|(i, ((init, model), z))| local_step(i as u32 + 1, init, prior.k, model, z))
        .collect::<Result<Vec<_>, _>>()?;

    let global_model = models[0].with_process_noise(prior.q_global.clone())?;
    let master = master_step(master, &global_model)?;
    let fused = fuse(&packets, master.as_ref())?;

    Ok(RoundOutput {
        share: FusionShare {
            x_f: fused.x,
            p_f: fused.p,
            betas: prior.betas.clone(),
            q_global: prior.q_global.clone(),
            k: fused.k,
        },
        packets,
        master,
    })
}
