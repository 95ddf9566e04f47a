//! Scenario files: everything a run needs, in one versioned JSON document.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::mac::RlcQueue;
use crate::model::{
    check_rate_coordination, validate_rule_set, CellConfig, Dscp, DrbId, FlowId, Micros, QueueId,
    RuleSet, SessionId, UeId,
};
use crate::path::{build_deployment_path, EncapStack, FittedConfig, PathLeg, Scenario};
use crate::session::ControlUpdate;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub ue_id: UeId,
    #[serde(default = "default_key")]
    pub key: String,
    pub rules: RuleSet,
    #[serde(default)]
    pub drb_map: BTreeMap<QueueId, DrbId>,
}

fn default_key() -> String {
    "internet".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceKindSpec {
    Cbr { rate_bps: u64, packet_bytes: u32 },
    Aimd {
        #[serde(default = "default_mss")]
        mss_bytes: u32,
        #[serde(default = "default_cwnd")]
        initial_cwnd_mss: u32,
    },
}

fn default_mss() -> u32 {
    1440
}

fn default_cwnd() -> u32 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub flow_id: FlowId,
    /// Session (by id, counted from 1 in file order) the flow is sent to.
    pub session_id: SessionId,
    pub dscp: Dscp,
    pub kind: SourceKindSpec,
    #[serde(default)]
    pub start_us: Micros,
}

/// Static legs between the traffic server and the RAN node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    /// `[name, rtt_ms, encap]` rows.
    Legs(Vec<(String, f64, String)>),
    /// A canned deployment built from the fitted configuration.
    Scenario(Scenario),
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::Legs(vec![("server to IUP".into(), 10.0, "PlainIP".into())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub duration_us: Micros,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cell: CellConfig,
    #[serde(default = "default_rlc")]
    pub rlc_capacity_packets: u32,
    /// Start of each phase excluded from its summary while flows adapt.
    #[serde(default = "default_settle")]
    pub settle_us: Micros,
    #[serde(default)]
    pub path: PathSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_paths: Option<FittedConfig>,
    pub sessions: Vec<SessionSpec>,
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub updates: Vec<ControlUpdate>,
}

fn default_rlc() -> u32 {
    RlcQueue::DEFAULT_CAPACITY
}

fn default_settle() -> Micros {
    10_000_000
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidScenario(msg.into())
}

impl ScenarioSpec {
    pub fn path_legs(&self) -> Result<Vec<PathLeg>, SimError> {
        match &self.path {
            PathSpec::Legs(rows) => Ok(rows
                .iter()
                .map(|(n, r, s)| PathLeg::new(n, *r, EncapStack::by_name(s)?))
                .collect::<Result<Vec<_>, _>>()?),
            PathSpec::Scenario(sc) => {
                let cfg = self.fitted_paths.clone().unwrap_or_else(FittedConfig::shipped);
                Ok(build_deployment_path(*sc, &cfg)?.legs)
            }
        }
    }

    /// Times at which rule updates land, deduplicated and sorted.
    pub fn phase_boundaries(&self) -> Vec<Micros> {
        let mut t: BTreeSet<Micros> = self
            .updates
            .iter()
            .map(|u| u.apply_at_us)
            .filter(|&t| t > 0 && t < self.duration_us)
            .collect();
        t.insert(0);
        t.into_iter().collect()
    }

    /// Orders updates by apply time, keeping file order among equals.
    pub fn sort_updates(&mut self) {
        self.updates.sort_by_key(|u| u.apply_at_us);
    }

    /// Full semantic check: schema, cell, every rule set in force at every
    /// point of the timeline, update authority, and source wiring.
    /// Returns advisory notes for legal but uncoordinated rule sets.
    pub fn validate(&self) -> Result<Vec<String>, SimError> {
        if self.schema != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.duration_us == 0 {
            return Err(invalid("duration_us must be positive"));
        }
        if self.rlc_capacity_packets == 0 {
            return Err(invalid("rlc_capacity_packets must be positive"));
        }
        self.cell.validate()?;
        let legs = self.path_legs()?;
        if legs.is_empty() {
            return Err(crate::error::PathError::NoLegs.into());
        }
        if self.sessions.is_empty() {
            return Err(invalid("at least one session is required"));
        }
        let mut rules: Vec<RuleSet> = Vec::new();
        for (i, s) in self.sessions.iter().enumerate() {
            let v = validate_rule_set(&s.rules);
            if !v.is_empty() {
                return Err(invalid(format!(
                    "sessions[{i}]: {}",
                    crate::error::SessionError::InvalidRules(v)
                )));
            }
            rules.push(s.rules.clone());
        }
        let mut seen = BTreeSet::new();
        for (i, src) in self.sources.iter().enumerate() {
            if !seen.insert(src.flow_id) {
                return Err(invalid(format!("sources[{i}]: duplicate {}", src.flow_id)));
            }
            if src.session_id.0 == 0 || src.session_id.0 as usize > self.sessions.len() {
                return Err(invalid(format!("sources[{i}]: unknown {}", src.session_id)));
            }
            match src.kind {
                SourceKindSpec::Cbr {
                    rate_bps,
                    packet_bytes,
                } if rate_bps == 0 || packet_bytes == 0 => {
                    return Err(invalid(format!("sources[{i}]: CBR rate and size must be positive")))
                }
                SourceKindSpec::Aimd {
                    mss_bytes,
                    initial_cwnd_mss,
                } if mss_bytes == 0 || initial_cwnd_mss == 0 => {
                    return Err(invalid(format!("sources[{i}]: AIMD MSS and cwnd must be positive")))
                }
                _ => {}
            }
        }
        let mut notes = Vec::new();
        let mut last = 0;
        for (i, u) in self.updates.iter().enumerate() {
            if u.apply_at_us < last {
                return Err(invalid(format!("updates[{i}]: not sorted by apply_at_us")));
            }
            last = u.apply_at_us;
            u.deltas
                .check_authority(u.origin)
                .map_err(|e| invalid(format!("updates[{i}]: {e}")))?;
            let idx = u.session_id.0 as usize;
            if idx == 0 || idx > rules.len() {
                return Err(invalid(format!("updates[{i}]: unknown {}", u.session_id)));
            }
            let merged = u.deltas.merged_into(&rules[idx - 1]);
            let v = validate_rule_set(&merged);
            if !v.is_empty() {
                return Err(invalid(format!(
                    "updates[{i}]: {}",
                    crate::error::SessionError::InvalidRules(v)
                )));
            }
            if let Some(over) = check_rate_coordination(&merged) {
                notes.push(format!("updates[{i}] at {} us: {over}", u.apply_at_us));
            }
            rules[idx - 1] = merged;
        }
        Ok(notes)
    }
}
