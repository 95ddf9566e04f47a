//! Session lifecycle, timed rule updates with per-origin authority, and
//! mobility forwarding plans.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::error::SessionError;
use crate::model::{
    validate_rule_set, Bar, DrbId, Dsr, Far, Micros, PacketRecord, Pdr, Psr, Qrr, QueueId,
    RuleSet, SessionId, SessionRecord, SessionState, Trr, UeId, Usr,
};
use crate::path::{EncapStack, PathLeg};
use crate::pipeline::PipelineState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Smf,
    Ric,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Smf => "smf",
            Origin::Ric => "ric",
        }
    }
}

/// Partial rule changes. List entries replace rules with the same id and
/// are appended otherwise; singleton rules are replaced outright.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleDeltas {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdrs: Option<Vec<Pdr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fars: Option<Vec<Far>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bars: Option<Vec<Bar>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qrrs: Option<Vec<Qrr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psr: Option<Psr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trr: Option<Trr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsrs: Option<Vec<Dsr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usr: Option<Usr>,
}

impl RuleDeltas {
    /// Rule kinds carried by the delta, with the origin that owns each.
    pub fn kinds(&self) -> Vec<(&'static str, Origin)> {
        let mut out = Vec::new();
        let mut add = |present: bool, name, origin| {
            if present {
                out.push((name, origin));
            }
        };
        add(self.pdrs.is_some(), "PDR", Origin::Smf);
        add(self.fars.is_some(), "FAR", Origin::Smf);
        add(self.bars.is_some(), "BAR", Origin::Smf);
        add(self.qrrs.is_some(), "QRR", Origin::Ric);
        add(self.psr.is_some(), "PSR", Origin::Ric);
        add(self.trr.is_some(), "TRR", Origin::Ric);
        add(self.dsrs.is_some(), "DSR", Origin::Ric);
        add(self.usr.is_some(), "USR", Origin::Ric);
        out
    }

    pub fn is_empty(&self) -> bool {
        self.kinds().is_empty()
    }

    /// First rule kind the origin has no authority over.
    pub fn check_authority(&self, origin: Origin) -> Result<(), SessionError> {
        match self.kinds().into_iter().find(|&(_, owner)| owner != origin) {
            Some((rule, _)) => Err(SessionError::AuthorityViolation {
                origin: origin.as_str(),
                rule,
            }),
            None => Ok(()),
        }
    }

    pub fn merged_into(&self, base: &RuleSet) -> RuleSet {
        fn merge<T: Clone, K: PartialEq>(base: &mut Vec<T>, delta: &Option<Vec<T>>, key: impl Fn(&T) -> K) {
            for item in delta.iter().flatten() {
                match base.iter_mut().find(|b| key(b) == key(item)) {
                    Some(slot) => *slot = item.clone(),
                    None => base.push(item.clone()),
                }
            }
        }
        let mut rules = base.clone();
        merge(&mut rules.pdrs, &self.pdrs, |p| p.pdr_id);
        merge(&mut rules.fars, &self.fars, |f| f.queue);
        merge(&mut rules.bars, &self.bars, |b| b.queue);
        merge(&mut rules.qrrs, &self.qrrs, |q| q.queue);
        merge(&mut rules.dsrs, &self.dsrs, |d| d.drb_id);
        if let Some(psr) = &self.psr {
            rules.psr = psr.clone();
        }
        if let Some(trr) = &self.trr {
            rules.trr = *trr;
        }
        if let Some(usr) = &self.usr {
            rules.usr = Some(usr.clone());
        }
        rules
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlUpdate {
    pub apply_at_us: Micros,
    pub origin: Origin,
    pub session_id: SessionId,
    pub deltas: RuleDeltas,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReleaseSummary {
    pub session_id: SessionId,
    pub released_ip: IpAddr,
    pub flushed: usize,
}

/// Active sessions, their pipelines and the UE address pool.
#[derive(Debug)]
pub struct SessionTable {
    sessions: BTreeMap<SessionId, SessionRecord>,
    pipelines: BTreeMap<SessionId, PipelineState>,
    pool_base: Ipv4Addr,
    pool_size: u32,
    in_use: BTreeSet<u32>,
    next_session: u32,
}

impl Default for SessionTable {
    fn default() -> Self {
        Self::new(Ipv4Addr::new(10, 45, 0, 1), 65_534)
    }
}

impl SessionTable {
    pub fn new(pool_base: Ipv4Addr, pool_size: u32) -> Self {
        SessionTable {
            sessions: BTreeMap::new(),
            pipelines: BTreeMap::new(),
            pool_base,
            pool_size,
            in_use: BTreeSet::new(),
            next_session: 1,
        }
    }

    pub fn get(&self, id: SessionId) -> Option<&SessionRecord> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn pipeline(&self, id: SessionId) -> Option<&PipelineState> {
        self.pipelines.get(&id)
    }

    pub fn pipeline_mut(&mut self, id: SessionId) -> Option<&mut PipelineState> {
        self.pipelines.get_mut(&id)
    }

    pub fn session_and_pipeline_mut(
        &mut self,
        id: SessionId,
    ) -> Option<(&SessionRecord, &mut PipelineState)> {
        Some((self.sessions.get(&id)?, self.pipelines.get_mut(&id)?))
    }

    fn allocate_ip(&mut self) -> Result<IpAddr, SessionError> {
        let offset = (0..self.pool_size)
            .find(|o| !self.in_use.contains(o))
            .ok_or(SessionError::PoolExhausted)?;
        self.in_use.insert(offset);
        Ok(IpAddr::V4(Ipv4Addr::from(u32::from(self.pool_base) + offset)))
    }

    fn release_ip(&mut self, ip: IpAddr) {
        if let IpAddr::V4(v4) = ip {
            self.in_use.remove(&(u32::from(v4).wrapping_sub(u32::from(self.pool_base))));
        }
    }

    fn check_drb_map(rules: &RuleSet, drb_map: &BTreeMap<QueueId, DrbId>) -> Result<(), SessionError> {
        if rules.dsrs.is_empty() {
            return Ok(());
        }
        let configured: BTreeSet<DrbId> = rules.dsrs.iter().map(|d| d.drb_id).collect();
        match drb_map.values().find(|d| !configured.contains(d)) {
            Some(d) => Err(SessionError::UnknownDrb(*d)),
            None => Ok(()),
        }
    }

    /// Creates a session. `drb_map` may name queues that later updates
    /// will add.
    pub fn establish_session(
        &mut self,
        ue_id: UeId,
        key: &str,
        rules: RuleSet,
        drb_map: BTreeMap<QueueId, DrbId>,
        now: Micros,
    ) -> Result<SessionRecord, SessionError> {
        let violations = validate_rule_set(&rules);
        if !violations.is_empty() {
            return Err(SessionError::InvalidRules(violations));
        }
        Self::check_drb_map(&rules, &drb_map)?;
        if self.sessions.values().any(|s| s.ue_id == ue_id && s.key == key) {
            return Err(SessionError::DuplicateSession {
                ue: ue_id.0,
                key: key.to_string(),
            });
        }
        let allocated_ip = self.allocate_ip()?;
        let session_id = SessionId(self.next_session);
        self.next_session += 1;
        let record = SessionRecord {
            session_id,
            ue_id,
            key: key.to_string(),
            allocated_ip,
            rules,
            drb_map,
            state: SessionState::Active,
            rules_version: 1,
        };
        self.pipelines.insert(session_id, PipelineState::new(&record, now));
        self.sessions.insert(session_id, record.clone());
        Ok(record)
    }

    /// Merges `deltas` into the session's rules and reinstalls them.
    /// Returns the packets of queues the new rules no longer configure.
    pub fn modify_session(
        &mut self,
        id: SessionId,
        deltas: &RuleDeltas,
        now: Micros,
    ) -> Result<(&SessionRecord, Vec<PacketRecord>), SessionError> {
        let session = self.sessions.get(&id).ok_or(SessionError::UnknownSession(id))?;
        if session.state != SessionState::Active {
            return Err(SessionError::SessionReleasing(id));
        }
        let merged = deltas.merged_into(&session.rules);
        let violations = validate_rule_set(&merged);
        if !violations.is_empty() {
            return Err(SessionError::InvalidRules(violations));
        }
        Self::check_drb_map(&merged, &session.drb_map)?;
        let session = self.sessions.get_mut(&id).expect("checked above");
        session.rules = merged;
        session.rules_version += 1;
        let flushed = self
            .pipelines
            .get_mut(&id)
            .expect("every session has a pipeline")
            .apply(session, now);
        Ok((session, flushed))
    }

    /// Tears a session down, returning its address to the pool. The
    /// flushed packets are returned alongside the summary.
    pub fn release_session(
        &mut self,
        id: SessionId,
    ) -> Result<(ReleaseSummary, Vec<PacketRecord>), SessionError> {
        let mut session = self.sessions.remove(&id).ok_or(SessionError::UnknownSession(id))?;
        session.state = SessionState::Releasing;
        let flushed = self
            .pipelines
            .remove(&id)
            .map(|mut p| p.flush_all())
            .unwrap_or_default();
        self.release_ip(session.allocated_ip);
        Ok((
            ReleaseSummary {
                session_id: id,
                released_ip: session.allocated_ip,
                flushed: flushed.len(),
            },
            flushed,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct UpdateAck {
    pub ticket: u64,
    pub session_id: SessionId,
    pub apply_at_us: Micros,
}

/// Timed updates accepted but not yet in force.
#[derive(Debug, Default)]
pub struct ControlScheduler {
    pending: BTreeMap<(Micros, u64), ControlUpdate>,
    next_ticket: u64,
}

impl ControlScheduler {
    /// Checks authority, timing and the target session, then queues the
    /// update for `apply_at_us`. Rule validity is checked again when the
    /// update lands, against the rules in force then.
    pub fn apply_control_update(
        &mut self,
        table: &SessionTable,
        update: ControlUpdate,
        now: Micros,
    ) -> Result<UpdateAck, SessionError> {
        update.deltas.check_authority(update.origin)?;
        if update.apply_at_us < now {
            return Err(SessionError::PastApplyTime {
                apply_at: update.apply_at_us,
                now,
            });
        }
        match table.get(update.session_id) {
            None => return Err(SessionError::UnknownSession(update.session_id)),
            Some(s) if s.state != SessionState::Active => {
                return Err(SessionError::SessionReleasing(update.session_id))
            }
            Some(_) => {}
        }
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        let ack = UpdateAck {
            ticket,
            session_id: update.session_id,
            apply_at_us: update.apply_at_us,
        };
        self.pending.insert((update.apply_at_us, ticket), update);
        Ok(ack)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_due(&self) -> Option<Micros> {
        self.pending.keys().next().map(|&(t, _)| t)
    }

    /// Removes and returns updates due at or before `now`, in submission
    /// order within equal times.
    pub fn take_due(&mut self, now: Micros) -> Vec<ControlUpdate> {
        let later = self.pending.split_off(&(now.saturating_add(1), 0));
        std::mem::replace(&mut self.pending, later).into_values().collect()
    }
}

/// Cross-thread submission point. Senders may live anywhere; the owner
/// drains the channel between events.
#[derive(Debug)]
pub struct ControlInbox {
    tx: mpsc::Sender<ControlUpdate>,
    rx: mpsc::Receiver<ControlUpdate>,
}

impl Default for ControlInbox {
    fn default() -> Self {
        let (tx, rx) = mpsc::channel();
        ControlInbox { tx, rx }
    }
}

impl ControlInbox {
    pub fn sender(&self) -> mpsc::Sender<ControlUpdate> {
        self.tx.clone()
    }

    pub fn receiver(&self) -> &mpsc::Receiver<ControlUpdate> {
        &self.rx
    }

    pub fn drain(
        &self,
        scheduler: &mut ControlScheduler,
        table: &SessionTable,
        now: Micros,
    ) -> Vec<Result<UpdateAck, SessionError>> {
        self.rx
            .try_iter()
            .map(|u| scheduler.apply_control_update(table, u, now))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandoverMode {
    #[serde(rename = "5g")]
    FiveGUpfRealloc,
    #[serde(rename = "iup")]
    IupPeerToPeer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Gnb,
    Upf,
    Iup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    /// UPF serving a gNB.
    pub anchor: Option<String>,
}

/// Known nodes and the round-trip time of links between them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistry {
    pub nodes: BTreeMap<String, Node>,
    pub links_ms: BTreeMap<String, f64>,
    pub default_link_ms: f64,
}

impl NodeRegistry {
    pub fn add(&mut self, name: &str, kind: NodeKind, anchor: Option<&str>) {
        self.nodes.insert(
            name.to_string(),
            Node {
                name: name.to_string(),
                kind,
                anchor: anchor.map(str::to_string),
            },
        );
    }

    fn link_key(a: &str, b: &str) -> String {
        if a <= b {
            format!("{a}|{b}")
        } else {
            format!("{b}|{a}")
        }
    }

    pub fn set_link(&mut self, a: &str, b: &str, rtt_ms: f64) {
        self.links_ms.insert(Self::link_key(a, b), rtt_ms);
    }

    pub fn link_ms(&self, a: &str, b: &str) -> f64 {
        self.links_ms
            .get(&Self::link_key(a, b))
            .copied()
            .unwrap_or(self.default_link_ms)
    }

    fn node(&self, name: &str) -> Result<&Node, SessionError> {
        self.nodes
            .get(name)
            .ok_or_else(|| SessionError::UnknownNode(name.to_string()))
    }

    /// Two gNBs sharing one UPF and two IUP nodes, used by the demos.
    pub fn sample() -> Self {
        let mut reg = NodeRegistry {
            default_link_ms: 2.0,
            ..Default::default()
        };
        reg.add("upf-1", NodeKind::Upf, None);
        reg.add("gnb-a", NodeKind::Gnb, Some("upf-1"));
        reg.add("gnb-b", NodeKind::Gnb, Some("upf-1"));
        reg.add("iup-a", NodeKind::Iup, None);
        reg.add("iup-b", NodeKind::Iup, None);
        reg.set_link("upf-1", "gnb-a", 21.205);
        reg.set_link("gnb-a", "gnb-b", 1.5);
        reg.set_link("iup-a", "iup-b", 1.5);
        reg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoverStages {
    pub preparation_us: Micros,
    pub execution_us: Micros,
    pub completion_us: Micros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandoverPlan {
    pub mode: HandoverMode,
    pub session_id: SessionId,
    /// The UE keeps its address across the move.
    pub preserved_ip: IpAddr,
    pub forwarding_legs: Vec<PathLeg>,
    pub stages: HandoverStages,
}

impl HandoverPlan {
    /// Tunnel header bytes added to each forwarded packet, per leg.
    pub fn leg_overheads(&self) -> Vec<u64> {
        self.forwarding_legs.iter().map(|l| l.encap.total_bytes()).collect()
    }

    pub fn tunnel_overhead_bytes(&self) -> u64 {
        self.leg_overheads().iter().sum()
    }
}

const PREPARATION_US: Micros = 10_000;
const EXECUTION_US: Micros = 20_000;

pub fn plan_handover(
    session: &SessionRecord,
    source: &str,
    target: &str,
    mode: HandoverMode,
    nodes: &NodeRegistry,
    now: Micros,
) -> Result<HandoverPlan, SessionError> {
    if source == target {
        return Err(SessionError::SameNode);
    }
    let src = nodes.node(source)?;
    nodes.node(target)?;
    let leg = |a: &str, b: &str, name: String, encap| PathLeg {
        name,
        rtt_contribution_ms: nodes.link_ms(a, b),
        encap,
    };
    let forwarding_legs = match mode {
        HandoverMode::FiveGUpfRealloc => {
            let upf = src
                .anchor
                .as_deref()
                .ok_or_else(|| SessionError::UnknownNode(format!("UPF anchoring {source}")))?;
            nodes.node(upf)?;
            vec![
                leg(upf, source, format!("{upf} to {source} (N3)"), EncapStack::gtp_v4()),
                leg(source, target, format!("{source} to {target} (Xn-U)"), EncapStack::gtp_v4()),
            ]
        }
        HandoverMode::IupPeerToPeer => vec![leg(
            source,
            target,
            format!("{source} to {target}"),
            EncapStack::plain_ip(),
        )],
    };
    Ok(HandoverPlan {
        mode,
        session_id: session.session_id,
        preserved_ip: session.allocated_ip,
        forwarding_legs,
        stages: HandoverStages {
            preparation_us: now,
            execution_us: now + PREPARATION_US,
            completion_us: now + PREPARATION_US + EXECUTION_US,
        },
    })
}
