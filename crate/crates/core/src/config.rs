//! Declarative experiment description, loaded from JSON.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::ChannelParams;
use crate::federation::{validate_betas, BetaRule};
use crate::filter::KfModel;
use crate::ledger::validate_id;
use crate::localization::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fkf,
    Skf,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fkf => "fkf",
            Mode::Skf => "skf",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Fkf,
    Skf,
    Both,
}

impl ModeSelection {
    pub fn modes(&self) -> Vec<Mode> {
        match self {
            ModeSelection::Fkf => vec![Mode::Fkf],
            ModeSelection::Skf => vec![Mode::Skf],
            ModeSelection::Both => vec![Mode::Fkf, Mode::Skf],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

impl NodeSpec {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Scalar random-walk model shared by every local filter, plus its prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterParams {
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub c: f64,
    pub q: f64,
    pub r: f64,
    /// Prior state, dBm.
    #[serde(default)]
    pub x0: f64,
    /// Prior variance; large means diffuse.
    #[serde(default = "default_p0")]
    pub p0: f64,
}

fn one() -> f64 {
    1.0
}

fn default_p0() -> f64 {
    1e4
}

fn default_burn_in() -> u64 {
    20
}

fn default_mode() -> ModeSelection {
    ModeSelection::Both
}

impl FilterParams {
    pub fn model(&self) -> KfModel {
        KfModel::scalar(self.a, self.c, self.q, self.r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: ModeSelection,
    pub rounds: u64,
    pub seed: u64,
    pub fogs: Vec<NodeSpec>,
    pub edges: Vec<NodeSpec>,
    pub channel: ChannelParams,
    pub filter: FilterParams,
    #[serde(default)]
    pub betas: BetaRule,
    #[serde(default = "default_burn_in")]
    pub burn_in: u64,
    pub trusted_ids: Vec<String>,
    /// Include a prediction-only master estimate in the fusion.
    #[serde(default)]
    pub master: bool,
    /// Gauss–Newton polish of each position fix.
    #[serde(default)]
    pub refine_fix: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigIssue>),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, lowercase hex.
    pub fn config_hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    /// Every validation failure, not just the first.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut push = |field: &str, message: String| {
            issues.push(ConfigIssue {
                field: field.to_string(),
                message,
            })
        };

        if self.rounds == 0 {
            push("rounds", "must be positive".into());
        }
        if self.rounds <= self.burn_in {
            push(
                "burn_in",
                format!(
                    "burn_in {} must be smaller than rounds {}",
                    self.burn_in, self.rounds
                ),
            );
        }

        if self.fogs.is_empty() {
            push("fogs", "at least one fog node is required".into());
        }
        if self.edges.is_empty() {
            push("edges", "at least one edge device is required".into());
        }
        let mut ids = HashSet::new();
        for (kind, nodes) in [("fogs", &self.fogs), ("edges", &self.edges)] {
            for (i, node) in nodes.iter().enumerate() {
                if let Err(e) = validate_id(&node.id) {
                    push(&format!("{kind}[{i}].id"), e.to_string());
                }
                if !ids.insert(node.id.as_str()) {
                    push(
                        &format!("{kind}[{i}].id"),
                        format!("duplicate node id {:?}", node.id),
                    );
                }
                if !(node.x.is_finite() && node.y.is_finite()) {
                    push(&format!("{kind}[{i}]"), "coordinates must be finite".into());
                }
            }
        }
        for (i, fog) in self.fogs.iter().enumerate() {
            if self.fogs[..i].iter().any(|o| o.x == fog.x && o.y == fog.y) {
                push(&format!("fogs[{i}]"), "duplicate anchor position".into());
            }
        }

        for problem in self.channel.problems() {
            push("channel", problem.to_string());
        }

        let f = &self.filter;
        if !(f.a.is_finite() && f.c.is_finite()) {
            push("filter", "a and c must be finite".into());
        }
        if !(f.q.is_finite() && f.q >= 0.0) {
            push("filter.q", "must be >= 0".into());
        }
        if !(f.r.is_finite() && f.r > 0.0) {
            push("filter.r", "must be > 0".into());
        }
        if !(f.p0.is_finite() && f.p0 > 0.0) {
            push("filter.p0", "must be > 0".into());
        }
        if !f.x0.is_finite() {
            push("filter.x0", "must be finite".into());
        }

        if let BetaRule::Explicit(list) = &self.betas {
            if list.len() != self.fogs.len() {
                push(
                    "betas",
                    format!("{} weights for {} fogs", list.len(), self.fogs.len()),
                );
            }
            if let Err(e) = validate_betas(list) {
                push("betas", e.to_string());
            }
        }

        let mut trusted = HashSet::new();
        for (i, id) in self.trusted_ids.iter().enumerate() {
            if let Err(e) = validate_id(id) {
                push(&format!("trusted_ids[{i}]"), e.to_string());
            }
            if !trusted.insert(id.as_str()) {
                push(&format!("trusted_ids[{i}]"), format!("duplicate id {id:?}"));
            }
        }
        issues
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}

/// Four fogs on the compass points at `radius` around one edge at the origin.
pub fn equidistant_preset(radius: f64, seed: u64) -> ExperimentConfig {
    let fogs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
        .iter()
        .enumerate()
        .map(|(i, (dx, dy))| NodeSpec {
            id: format!("fog-{}", i + 1),
            x: dx * radius,
            y: dy * radius,
        })
        .collect::<Vec<_>>();
    let mut trusted_ids: Vec<String> = fogs.iter().map(|f| f.id.clone()).collect();
    trusted_ids.push("edge-1".into());
    ExperimentConfig {
        mode: ModeSelection::Both,
        rounds: 500,
        seed,
        fogs,
        edges: vec![NodeSpec {
            id: "edge-1".into(),
            x: 0.0,
            y: 0.0,
        }],
        channel: ChannelParams::default(),
        filter: FilterParams {
            a: 1.0,
            c: 1.0,
            q: PRESET_Q,
            r: PRESET_R,
            x0: 0.0,
            p0: default_p0(),
        },
        betas: BetaRule::default(),
        burn_in: 20,
        trusted_ids,
        master: false,
        refine_fix: false,
    }
}

/// Known anchor-to-edge distances of the reference experiment, meters.
pub const PRESET_DISTANCES_M: [f64; 4] = [1.0, 1.5, 2.0, 2.5];
pub const PRESET_Q: f64 = 1.0;
pub const PRESET_R: f64 = 4.0;

/// The reference experiment: one equidistant run per known distance.
pub fn reference_preset(seed: u64) -> Vec<ExperimentConfig> {
    PRESET_DISTANCES_M
        .iter()
        .map(|d| equidistant_preset(*d, seed))
        .collect()
}
