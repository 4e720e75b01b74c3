//! Lockstep simulation of the cloud / fog / edge deployment.
//!
//! Per round and per edge device:
//!
//! 1. the edge emits one noisy RSSI reading to every fog;
//! 2. each fog drops readings from devices missing from its ledger copy;
//! 3. each fog runs its local filter, starting from the cloud's share in
//!    federated mode or from its own last posterior in standalone mode;
//! 4. fogs send their posterior to the cloud as an encoded [`LocalPacket`];
//!    the cloud drops packets from fogs missing from its ledger copy;
//! 5. the cloud fuses what it received and updates its share;
//! 6. filtered RSSI is inverted to distance and trilaterated.
//!
//! Only `(filter_id, k, x, P)` ever crosses the fog → cloud link.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{self, ChannelError, ChannelParams};
use crate::config::{ConfigIssue, ExperimentConfig, Mode};
use crate::federation::{self, BetaRule, FusionError, FusionShare, LocalPacket, MasterEstimate};
use crate::filter::{self, FilterError, KfModel, StateEstimate};
use crate::ledger::{Chain, LedgerError};
use crate::localization::{self, AnchorSet, Point, PositionFix};
use crate::wire::{self, WireError};

pub const CLOUD_ID: &str = "cloud";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigIssue>),
    #[error("round {round}: every fog was rejected by the cloud for edge {edge_id}")]
    AllFogsRejected { round: u64, edge_id: String },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNode {
    pub id: String,
    pub position: Point,
    pub channel: ChannelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FogNode {
    pub id: String,
    pub filter_id: u32,
    pub anchor: Point,
    pub model: KfModel,
    pub chain: Chain,
    /// Latest local posterior, one per edge device.
    pub states: Vec<StateEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudNode {
    pub id: String,
    pub chain: Chain,
    /// Global estimate per edge device, broadcast at the next round.
    pub shares: Vec<FusionShare>,
    pub masters: Vec<MasterEstimate>,
    pub beta_rule: BetaRule,
    pub global_model: KfModel,
    /// Last packet received from each fog, per edge; feeds the adaptive rule.
    last_packets: Vec<Vec<Option<LocalPacket>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// An edge device absent from the fog's ledger copy.
    UnauthorizedEdge,
    /// A fog node absent from the cloud's ledger copy.
    UnauthorizedFog,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::UnauthorizedEdge => "unauthorized-edge",
            RejectReason::UnauthorizedFog => "unauthorized-fog",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub device_id: String,
    pub at_node: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FogReading {
    pub fog_id: String,
    pub raw_rssi_dbm: f64,
    /// The fog's working RSSI estimate: its own posterior in standalone mode,
    /// the fused global estimate it receives back in federated mode.
    pub filtered_rssi_dbm: f64,
    /// Posterior of the fog's local filter before fusion.
    pub local_rssi_dbm: f64,
    pub est_distance_m: f64,
    pub true_distance_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRound {
    pub edge_id: String,
    /// One entry per fog that passed both gates, in fog order.
    pub readings: Vec<FogReading>,
    pub fused: Option<StateEstimate>,
    pub fix: Option<PositionFix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub k: u64,
    pub edges: Vec<EdgeRound>,
    pub rejections: Vec<Rejection>,
}

/// One encoded fog → cloud message.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMessage {
    pub round: u64,
    pub fog_id: String,
    pub bytes: Vec<u8>,
}

/// Wall time spent in each phase, summed over rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    /// Local predict + update at the fogs.
    pub local: Duration,
    /// Share, master prediction and fusion at the cloud.
    pub global: Duration,
    pub rounds: u64,
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub mode: Mode,
    pub cloud: CloudNode,
    pub fogs: Vec<FogNode>,
    pub edges: Vec<EdgeNode>,
    /// Path-loss model the fogs use to turn RSSI into distance.
    pub inversion: ChannelParams,
    pub refine_fix: bool,
    /// When set, every encoded uplink message is kept in `uplink_log`.
    pub record_uplink: bool,
    pub uplink_log: Vec<UplinkMessage>,
    pub timings: PhaseTimings,
}

pub fn trusted_chain(ids: &[String]) -> Result<Chain, LedgerError> {
    let genesis = Chain::genesis(0);
    if ids.is_empty() {
        Ok(genesis)
    } else {
        genesis.append_block(ids, 1)
    }
}

pub fn build_topology(config: &ExperimentConfig, mode: Mode) -> Result<Topology, SimError> {
    let issues = config.issues();
    if !issues.is_empty() {
        return Err(SimError::Config(issues));
    }
    let chain = trusted_chain(&config.trusted_ids)?;
    let model = config.filter.model();
    let prior = StateEstimate::scalar(config.filter.x0, config.filter.p0, 0);
    let n_edges = config.edges.len();

    let fogs = config
        .fogs
        .iter()
        .enumerate()
        .map(|(i, f)| FogNode {
            id: f.id.clone(),
            filter_id: i as u32 + 1,
            anchor: f.position(),
            model: model.clone(),
            chain: chain.clone(),
            states: vec![prior.clone(); n_edges],
        })
        .collect::<Vec<_>>();

    let betas = config.betas.weights(fogs.len(), None)?;
    let share = FusionShare {
        x_f: prior.x.clone(),
        p_f: prior.p.clone(),
        betas,
        q_global: model.q.clone(),
        k: 0,
    };
    let cloud = CloudNode {
        id: CLOUD_ID.to_string(),
        chain,
        shares: vec![share; n_edges],
        masters: vec![config.master.then(|| prior.clone()); n_edges],
        beta_rule: config.betas.clone(),
        global_model: model,
        last_packets: vec![vec![None; fogs.len()]; n_edges],
    };
    let edges = config
        .edges
        .iter()
        .map(|e| EdgeNode {
            id: e.id.clone(),
            position: e.position(),
            channel: config.channel,
        })
        .collect();

    Ok(Topology {
        mode,
        cloud,
        fogs,
        edges,
        inversion: config.channel,
        refine_fix: config.refine_fix,
        record_uplink: false,
        uplink_log: Vec::new(),
        timings: PhaseTimings::default(),
    })
}

impl Topology {
    /// Ledger copies of every node, serialized, cloud first.
    pub fn chain_copies(&self) -> Vec<String> {
        std::iter::once(self.cloud.chain.to_text())
            .chain(self.fogs.iter().map(|f| f.chain.to_text()))
            .collect()
    }

    /// Information weights for the fogs the cloud accepts this round.
    fn round_betas(&self, edge: usize, accepted: &[usize]) -> Result<Vec<f64>, FusionError> {
        let n = accepted.len();
        match &self.cloud.beta_rule {
            BetaRule::Explicit(list) if n < self.fogs.len() => {
                let sub: Vec<f64> = accepted.iter().map(|&i| list[i]).collect();
                let total: f64 = sub.iter().sum();
                let sub: Vec<f64> = sub.iter().map(|b| b / total).collect();
                federation::validate_betas(&sub)?;
                Ok(sub)
            }
            BetaRule::Explicit(list) => {
                federation::validate_betas(list)?;
                Ok(list.clone())
            }
            rule => {
                let previous: Option<Vec<LocalPacket>> = accepted
                    .iter()
                    .map(|&i| self.cloud.last_packets[edge][i].clone())
                    .collect();
                rule.weights(n, previous.as_deref())
            }
        }
    }

    pub fn run_round<R: Rng + ?Sized>(
        &mut self,
        k: u64,
        rng: &mut R,
    ) -> Result<RoundTrace, SimError> {
        let mut rejections = Vec::new();

        let accepted: Vec<usize> = (0..self.fogs.len())
            .filter(|&i| self.cloud.chain.is_authorized(&self.fogs[i].id))
            .collect();
        for (i, fog) in self.fogs.iter().enumerate() {
            if !accepted.contains(&i) {
                rejections.push(Rejection {
                    device_id: fog.id.clone(),
                    at_node: self.cloud.id.clone(),
                    reason: RejectReason::UnauthorizedFog,
                });
            }
        }

        let mut edge_rounds = Vec::with_capacity(self.edges.len());
        for ei in 0..self.edges.len() {
            let edge = self.edges[ei].clone();

            // (1) one reading per fog, drawn in fog order regardless of gating
            let mut raws = Vec::with_capacity(self.fogs.len());
            for fog in &self.fogs {
                let d = edge.position.distance(&fog.anchor);
                raws.push((d, channel::sample_noisy_rssi(d, &edge.channel, rng)?));
            }

            // broadcast of the previous global estimate
            let global_start = Instant::now();
            let inits = if self.mode == Mode::Fkf && !accepted.is_empty() {
                let mut share = self.cloud.shares[ei].clone();
                share.betas = self.round_betas(ei, &accepted)?;
                let inits = federation::share(&share)?;
                let mut by_fog = vec![None; self.fogs.len()];
                for (&fi, init) in accepted.iter().zip(inits) {
                    by_fog[fi] = Some(init);
                }
                by_fog
            } else {
                vec![None; self.fogs.len()]
            };
            let share_k = self.cloud.shares[ei].k;
            let mut global_time = global_start.elapsed();

            let mut readings = Vec::new();
            let mut inbox = Vec::new();
            let mut any_reading = false;
            let mut local_time = Duration::ZERO;
            for (fi, fog) in self.fogs.iter_mut().enumerate() {
                // (2) fog-side gate
                if !fog.chain.is_authorized(&edge.id) {
                    rejections.push(Rejection {
                        device_id: edge.id.clone(),
                        at_node: fog.id.clone(),
                        reason: RejectReason::UnauthorizedEdge,
                    });
                    continue;
                }
                any_reading = true;
                let (true_d, raw) = raws[fi];
                let z = DVector::from_element(1, raw);

                // (3) local filter
                let local_start = Instant::now();
                let packet = match &inits[fi] {
                    Some(init) => {
                        federation::local_step(fog.filter_id, init, share_k, &fog.model, &z)?
                    }
                    None => {
                        let post = filter::step(&fog.states[ei], &fog.model, &z)?;
                        LocalPacket::from_estimate(fog.filter_id, &post)
                    }
                };
                local_time += local_start.elapsed();
                fog.states[ei] = packet.to_estimate();

                // (4) uplink; the cloud only listens to fogs it trusts
                let bytes = wire::encode_packet(&packet);
                if self.record_uplink {
                    self.uplink_log.push(UplinkMessage {
                        round: k,
                        fog_id: fog.id.clone(),
                        bytes: bytes.clone(),
                    });
                }
                if !accepted.contains(&fi) {
                    continue;
                }
                inbox.push((fi, bytes));

                let filtered = packet.x[0];
                readings.push(FogReading {
                    fog_id: fog.id.clone(),
                    raw_rssi_dbm: raw,
                    filtered_rssi_dbm: filtered,
                    local_rssi_dbm: filtered,
                    est_distance_m: channel::distance_from_rssi(filtered, &self.inversion),
                    true_distance_m: true_d,
                });
            }

            if any_reading && accepted.is_empty() {
                return Err(SimError::AllFogsRejected {
                    round: k,
                    edge_id: edge.id.clone(),
                });
            }

            // (5) fusion
            let global_start = Instant::now();
            let mut fused = None;
            if !inbox.is_empty() {
                let mut packets = Vec::with_capacity(inbox.len());
                for (fi, bytes) in &inbox {
                    let packet = wire::decode_packet(bytes)?;
                    self.cloud.last_packets[ei][*fi] = Some(packet.clone());
                    packets.push(packet);
                }
                let master = federation::master_step(
                    self.cloud.masters[ei].as_ref(),
                    &self.cloud.global_model,
                )?;
                let estimate = federation::fuse(&packets, master.as_ref())?;
                self.cloud.masters[ei] = master;
                let share = &mut self.cloud.shares[ei];
                share.x_f = estimate.x.clone();
                share.p_f = estimate.p.clone();
                share.k = estimate.k;
                fused = Some(estimate);
            }
            if self.mode == Mode::Fkf {
                if let Some(estimate) = &fused {
                    let global = estimate.x[0];
                    for reading in &mut readings {
                        reading.filtered_rssi_dbm = global;
                        reading.est_distance_m =
                            channel::distance_from_rssi(global, &self.inversion);
                    }
                }
            }
            global_time += global_start.elapsed();
            self.timings.local += local_time;
            self.timings.global += global_time;

            // (6) localization
            let fix = self.locate(&readings)?;
            edge_rounds.push(EdgeRound {
                edge_id: edge.id.clone(),
                readings,
                fused,
                fix,
            });
        }
        self.timings.rounds += 1;

        Ok(RoundTrace {
            k,
            edges: edge_rounds,
            rejections,
        })
    }

    fn locate(&self, readings: &[FogReading]) -> Result<Option<PositionFix>, SimError> {
        if readings.len() < 3 {
            return Ok(None);
        }
        let anchors: Vec<Point> = readings
            .iter()
            .map(|r| {
                self.fogs
                    .iter()
                    .find(|f| f.id == r.fog_id)
                    .map(|f| f.anchor)
                    .expect("reading comes from a known fog")
            })
            .collect();
        let Ok(set) = AnchorSet::new(anchors) else {
            return Ok(None);
        };
        let distances: Vec<f64> = readings.iter().map(|r| r.est_distance_m).collect();
        let fix = match localization::trilaterate(&set, &distances) {
            Ok(fix) => fix,
            Err(_) => return Ok(None),
        };
        if self.refine_fix {
            return Ok(localization::refine(&set, &distances, fix, 20).ok());
        }
        Ok(Some(fix))
    }
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs `config.rounds` rounds in one mode from the configured seed.
pub fn run_experiment(config: &ExperimentConfig, mode: Mode) -> Result<Vec<RoundTrace>, SimError> {
    let mut topology = build_topology(config, mode)?;
    run_on(&mut topology, config.rounds, config.seed)
}

/// Runs `rounds` rounds on an already built topology.
pub fn run_on(
    topology: &mut Topology,
    rounds: u64,
    seed: u64,
) -> Result<Vec<RoundTrace>, SimError> {
    let mut rng = rng_for(seed);
    (0..rounds)
        .map(|k| topology.run_round(k, &mut rng))
        .collect()
}
