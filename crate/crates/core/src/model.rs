//! Domain types shared by every stage of the user plane: packets, flows,
//! the six traffic-management rules, the two MAC scheduling rules, sessions
//! and cell configuration.
//!
//! All times are integer microseconds and all rates are bits per second.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Simulation time in microseconds.
pub type Micros = u64;

/// Sentinel for "never" (e.g. a shaper with a zero rate).
pub const NEVER: Micros = Micros::MAX;

/// Largest packet the pipeline expects to carry.
pub const MTU_BYTES: u32 = 1500;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// Identifies a traffic-management queue within one session.
    QueueId, u32, "q"
);
id_newtype!(
    /// Identifies a data radio bearer within one UE.
    DrbId, u32, "drb"
);
id_newtype!(UeId, u32, "ue");
id_newtype!(SessionId, u32, "s");
id_newtype!(PdrId, u32, "pdr");
id_newtype!(FlowId, u32, "flow");
id_newtype!(PacketId, u64, "pkt");

/// Classic IP five-tuple. Port and protocol ranges are enforced by the
/// integer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiveTuple {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

/// A six-bit differentiated services codepoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Dscp(u8);

impl Dscp {
    pub const CS1: Dscp = Dscp(8);
    pub const AF11: Dscp = Dscp(10);
    pub const AF21: Dscp = Dscp(18);

    pub fn new(codepoint: u8) -> Result<Self, ModelError> {
        if codepoint > 63 {
            return Err(ModelError::DscpOutOfRange(codepoint as u32));
        }
        Ok(Dscp(codepoint))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Dscp {
    type Error = ModelError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Dscp::new(value)
    }
}

impl From<Dscp> for u8 {
    fn from(d: Dscp) -> u8 {
        d.0
    }
}

/// Service class carried by the DSCP markings used in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceClass {
    LowPriority,
    LowLatency,
    HighThroughput,
    Unclassified,
}

/// Maps a DSCP codepoint to its service class: CS1 is low priority, AF11
/// low latency, AF21 high throughput.
pub fn dscp_service_class(codepoint: u32) -> Result<ServiceClass, ModelError> {
    match codepoint {
        8 => Ok(ServiceClass::LowPriority),
        10 => Ok(ServiceClass::LowLatency),
        18 => Ok(ServiceClass::HighThroughput),
        0..=63 => Ok(ServiceClass::Unclassified),
        _ => Err(ModelError::DscpOutOfRange(codepoint)),
    }
}

/// Points a packet passes through on its way to the UE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Created,
    Arrived,
    Enqueued,
    Released,
    Transmitted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub packet_id: PacketId,
    pub flow_id: FlowId,
    pub flow: FiveTuple,
    pub dscp: Dscp,
    pub size_bytes: u32,
    pub created_at: Micros,
    /// Transport sequence number, used by the congestion model.
    pub seq: u64,
    /// Version of the session rules that classified this packet.
    pub rule_version: u32,
    pub stage_timestamps: Vec<(Stage, Micros)>,
}

impl PacketRecord {
    pub fn new(
        packet_id: PacketId,
        flow_id: FlowId,
        flow: FiveTuple,
        dscp: Dscp,
        size_bytes: u32,
        created_at: Micros,
    ) -> Self {
        assert!(size_bytes > 0, "packets carry at least one byte");
        let mut stage_timestamps = Vec::with_capacity(5);
        stage_timestamps.push((Stage::Created, created_at));
        PacketRecord {
            packet_id,
            flow_id,
            flow,
            dscp,
            size_bytes,
            created_at,
            seq: 0,
            rule_version: 0,
            stage_timestamps,
        }
    }

    pub fn bits(&self) -> u64 {
        self.size_bytes as u64 * 8
    }

    /// Records a stage transition. Stage times never go backwards.
    pub fn stamp(&mut self, stage: Stage, at: Micros) {
        if let Some(&(_, last)) = self.stage_timestamps.last() {
            debug_assert!(at >= last, "stage {stage:?} at {at} precedes {last}");
        }
        self.stage_timestamps.push((stage, at));
    }

    pub fn stage_time(&self, stage: Stage) -> Option<Micros> {
        self.stage_timestamps
            .iter()
            .rev()
            .find(|(s, _)| *s == stage)
            .map(|&(_, t)| t)
    }
}

/// Per-field predicates over a packet. Absent fields are wildcards.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dscp: Option<Dscp>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_default: bool,
}

impl MatchSpec {
    pub fn default_match() -> Self {
        MatchSpec {
            is_default: true,
            ..Default::default()
        }
    }

    pub fn dscp(dscp: Dscp) -> Self {
        MatchSpec {
            dscp: Some(dscp),
            ..Default::default()
        }
    }

    fn has_predicate(&self) -> bool {
        self.src_ip.is_some()
            || self.dst_ip.is_some()
            || self.src_port.is_some()
            || self.dst_port.is_some()
            || self.protocol.is_some()
            || self.dscp.is_some()
    }
}

/// True iff every present predicate holds. A default spec matches anything.
pub fn matches(spec: &MatchSpec, packet: &PacketRecord) -> bool {
    if spec.is_default {
        return true;
    }
    let t = &packet.flow;
    spec.src_ip.is_none_or(|v| v == t.src_ip)
        && spec.dst_ip.is_none_or(|v| v == t.dst_ip)
        && spec.src_port.is_none_or(|v| v == t.src_port)
        && spec.dst_port.is_none_or(|v| v == t.dst_port)
        && spec.protocol.is_none_or(|v| v == t.protocol)
        && spec.dscp.is_none_or(|v| v == packet.dscp)
}

/// Packet detection rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pdr {
    pub pdr_id: PdrId,
    /// Lower value wins.
    pub precedence: u32,
    #[serde(rename = "match")]
    pub match_spec: MatchSpec,
    pub target_queue: QueueId,
}

impl Pdr {
    pub fn is_default(&self) -> bool {
        self.match_spec.is_default
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarAction {
    Forward,
    Drop,
}

/// Forwarding action rule, attached to a queue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Far {
    pub queue: QueueId,
    pub action: FarAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Discipline {
    Fifo {
        capacity_packets: u32,
    },
    #[serde(rename = "codel")]
    CoDel {
        target_us: Micros,
        interval_us: Micros,
        capacity_packets: u32,
    },
}

impl Discipline {
    pub const DEFAULT_CAPACITY: u32 = 1000;
    pub const CODEL_TARGET_US: Micros = 5_000;
    pub const CODEL_INTERVAL_US: Micros = 100_000;

    pub fn fifo() -> Self {
        Discipline::Fifo {
            capacity_packets: Self::DEFAULT_CAPACITY,
        }
    }

    pub fn codel() -> Self {
        Discipline::CoDel {
            target_us: Self::CODEL_TARGET_US,
            interval_us: Self::CODEL_INTERVAL_US,
            capacity_packets: Self::DEFAULT_CAPACITY,
        }
    }

    pub fn capacity_packets(&self) -> u32 {
        match *self {
            Discipline::Fifo { capacity_packets } => capacity_packets,
            Discipline::CoDel {
                capacity_packets, ..
            } => capacity_packets,
        }
    }

    pub fn kind(&self) -> DisciplineKind {
        match self {
            Discipline::Fifo { .. } => DisciplineKind::Fifo,
            Discipline::CoDel { .. } => DisciplineKind::CoDel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DisciplineKind {
    Fifo,
    CoDel,
}

/// Buffer action rule: the queue management discipline of one queue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bar {
    pub queue: QueueId,
    pub discipline: Discipline,
}

/// Queuing rate rule: token-bucket shaper for one queue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Qrr {
    pub queue: QueueId,
    pub rate_bps: u64,
    pub burst_bytes: u64,
}

/// Packet scheduling rule: arbitration between queues.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psr {
    #[default]
    RoundRobin,
    /// Lower value is served first.
    StrictPriority(BTreeMap<QueueId, u32>),
}

/// Transmission rate rule for the pacer in front of the RLC buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trr {
    #[default]
    None,
    FixedRate {
        rate_bps: u64,
    },
    /// Paces at the UE's maximum scheduling rate.
    BdpPacer,
}

/// UE scheduling rule for the MAC scheduler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Usr {
    pub ue_id: UeId,
    pub max_rate_bps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_us: Option<Micros>,
}

/// DRB scheduling rule: relative weight of a bearer inside its UE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dsr {
    pub drb_id: DrbId,
    pub weight: u32,
}

/// Everything that programs one session's pipeline and radio scheduling.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    #[serde(default)]
    pub pdrs: Vec<Pdr>,
    #[serde(default)]
    pub fars: Vec<Far>,
    #[serde(default)]
    pub bars: Vec<Bar>,
    #[serde(default)]
    pub qrrs: Vec<Qrr>,
    #[serde(default)]
    pub psr: Psr,
    #[serde(default)]
    pub trr: Trr,
    #[serde(default)]
    pub dsrs: Vec<Dsr>,
    /// Absent until an xApp installs one; the MAC then shares fairly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usr: Option<Usr>,
}

impl RuleSet {
    /// A single default PDR feeding a FIFO queue 0, round-robin, no pacing.
    pub fn default_fifo() -> Self {
        RuleSet {
            pdrs: vec![Pdr {
                pdr_id: PdrId(0),
                precedence: u32::MAX,
                match_spec: MatchSpec::default_match(),
                target_queue: QueueId(0),
            }],
            bars: vec![Bar {
                queue: QueueId(0),
                discipline: Discipline::fifo(),
            }],
            ..Default::default()
        }
    }

    /// Queues that exist, i.e. that carry a BAR.
    pub fn queue_ids(&self) -> BTreeSet<QueueId> {
        self.bars.iter().map(|b| b.queue).collect()
    }

    pub fn bar(&self, queue: QueueId) -> Option<&Bar> {
        self.bars.iter().find(|b| b.queue == queue)
    }

    pub fn far(&self, queue: QueueId) -> Option<&Far> {
        self.fars.iter().find(|f| f.queue == queue)
    }

    pub fn qrr(&self, queue: QueueId) -> Option<&Qrr> {
        self.qrrs.iter().find(|q| q.queue == queue)
    }

    pub fn dsr_weight(&self, drb: DrbId) -> u32 {
        self.dsrs
            .iter()
            .find(|d| d.drb_id == drb)
            .map_or(1, |d| d.weight)
    }
}

/// One invariant violation found by [`validate_rule_set`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicatePdrId { pdr: PdrId },
    EmptyMatch { pdr: PdrId },
    MultipleDefaultPdrs { pdrs: Vec<PdrId> },
    PdrDanglingQueue { pdr: PdrId, queue: QueueId },
    DuplicateFar { queue: QueueId },
    FarDanglingQueue { queue: QueueId },
    DuplicateBar { queue: QueueId },
    ZeroCapacity { queue: QueueId },
    CodelTargetNotBelowInterval { queue: QueueId },
    DuplicateQrr { queue: QueueId },
    QrrDanglingQueue { queue: QueueId },
    BurstBelowMtu { queue: QueueId, burst_bytes: u64 },
    PriorityMissingQueue { queue: QueueId },
    PriorityUnknownQueue { queue: QueueId },
    ZeroPacerRate,
    ZeroUsrRate,
    ZeroDeadline,
    ZeroDsrWeight { drb: DrbId },
    DuplicateDsr { drb: DrbId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicatePdrId { pdr } => write!(f, "{pdr}: duplicate PDR id"),
            EmptyMatch { pdr } => write!(f, "{pdr}: match has no predicate and is not default"),
            MultipleDefaultPdrs { pdrs } => {
                let ids: Vec<String> = pdrs.iter().map(ToString::to_string).collect();
                write!(f, "more than one default PDR: {}", ids.join(", "))
            }
            PdrDanglingQueue { pdr, queue } => write!(f, "{pdr}: target {queue} has no BAR"),
            DuplicateFar { queue } => write!(f, "{queue}: more than one FAR"),
            FarDanglingQueue { queue } => write!(f, "FAR references unknown {queue}"),
            DuplicateBar { queue } => write!(f, "{queue}: more than one BAR"),
            ZeroCapacity { queue } => write!(f, "{queue}: capacity must be at least one packet"),
            CodelTargetNotBelowInterval { queue } => {
                write!(f, "{queue}: CoDel target must be below interval")
            }
            DuplicateQrr { queue } => write!(f, "{queue}: more than one QRR"),
            QrrDanglingQueue { queue } => write!(f, "QRR references unknown {queue}"),
            BurstBelowMtu { queue, burst_bytes } => {
                write!(f, "{queue}: burst {burst_bytes} B is below one MTU")
            }
            PriorityMissingQueue { queue } => write!(f, "strict priority map misses {queue}"),
            PriorityUnknownQueue { queue } => write!(f, "strict priority map names unknown {queue}"),
            ZeroPacerRate => write!(f, "fixed-rate TRR needs a positive rate"),
            ZeroUsrRate => write!(f, "USR max rate must be positive"),
            ZeroDeadline => write!(f, "USR deadline must be positive"),
            ZeroDsrWeight { drb } => write!(f, "{drb}: DSR weight must be at least 1"),
            DuplicateDsr { drb } => write!(f, "{drb}: more than one DSR"),
        }
    }
}

/// Checks every structural invariant of a rule set. An empty result means
/// the rules are valid. Violations are grouped by rule kind and ordered by
/// rule id within each kind.
pub fn validate_rule_set(rules: &RuleSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let queues = rules.queue_ids();

    let mut pdrs: Vec<&Pdr> = rules.pdrs.iter().collect();
    pdrs.sort_by_key(|p| p.pdr_id);
    let mut seen = BTreeSet::new();
    for p in &pdrs {
        if !seen.insert(p.pdr_id) {
            out.push(Violation::DuplicatePdrId { pdr: p.pdr_id });
        }
        if !p.is_default() && !p.match_spec.has_predicate() {
            out.push(Violation::EmptyMatch { pdr: p.pdr_id });
        }
        if !queues.contains(&p.target_queue) {
            out.push(Violation::PdrDanglingQueue {
                pdr: p.pdr_id,
                queue: p.target_queue,
            });
        }
    }
    let defaults: Vec<PdrId> = pdrs.iter().filter(|p| p.is_default()).map(|p| p.pdr_id).collect();
    if defaults.len() > 1 {
        out.push(Violation::MultipleDefaultPdrs { pdrs: defaults });
    }

    let mut fars: Vec<&Far> = rules.fars.iter().collect();
    fars.sort_by_key(|f| f.queue);
    let mut seen = BTreeSet::new();
    for f in fars {
        if !seen.insert(f.queue) {
            out.push(Violation::DuplicateFar { queue: f.queue });
        }
        if !queues.contains(&f.queue) {
            out.push(Violation::FarDanglingQueue { queue: f.queue });
        }
    }

    let mut bars: Vec<&Bar> = rules.bars.iter().collect();
    bars.sort_by_key(|b| b.queue);
    let mut seen = BTreeSet::new();
    for b in bars {
        if !seen.insert(b.queue) {
            out.push(Violation::DuplicateBar { queue: b.queue });
        }
        if b.discipline.capacity_packets() == 0 {
            out.push(Violation::ZeroCapacity { queue: b.queue });
        }
        if let Discipline::CoDel {
            target_us,
            interval_us,
            ..
        } = b.discipline
        {
            if target_us >= interval_us {
                out.push(Violation::CodelTargetNotBelowInterval { queue: b.queue });
            }
        }
    }

    let mut qrrs: Vec<&Qrr> = rules.qrrs.iter().collect();
    qrrs.sort_by_key(|q| q.queue);
    let mut seen = BTreeSet::new();
    for q in qrrs {
        if !seen.insert(q.queue) {
            out.push(Violation::DuplicateQrr { queue: q.queue });
        }
        if !queues.contains(&q.queue) {
            out.push(Violation::QrrDanglingQueue { queue: q.queue });
        }
        if q.rate_bps > 0 && q.burst_bytes < MTU_BYTES as u64 {
            out.push(Violation::BurstBelowMtu {
                queue: q.queue,
                burst_bytes: q.burst_bytes,
            });
        }
    }

    if let Psr::StrictPriority(map) = &rules.psr {
        for q in &queues {
            if !map.contains_key(q) {
                out.push(Violation::PriorityMissingQueue { queue: *q });
            }
        }
        for q in map.keys() {
            if !queues.contains(q) {
                out.push(Violation::PriorityUnknownQueue { queue: *q });
            }
        }
    }

    if let Trr::FixedRate { rate_bps: 0 } = rules.trr {
        out.push(Violation::ZeroPacerRate);
    }

    if let Some(usr) = &rules.usr {
        if usr.max_rate_bps == 0 {
            out.push(Violation::ZeroUsrRate);
        }
        if usr.deadline_us == Some(0) {
            out.push(Violation::ZeroDeadline);
        }
    }

    let mut dsrs: Vec<&Dsr> = rules.dsrs.iter().collect();
    dsrs.sort_by_key(|d| d.drb_id);
    let mut seen = BTreeSet::new();
    for d in dsrs {
        if !seen.insert(d.drb_id) {
            out.push(Violation::DuplicateDsr { drb: d.drb_id });
        }
        if d.weight == 0 {
            out.push(Violation::ZeroDsrWeight { drb: d.drb_id });
        }
    }

    out
}

/// The queues of a UE together ask for more egress than the MAC will ever
/// grant it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RateOversubscription {
    pub ue_id: UeId,
    pub qrr_sum_bps: u64,
    pub usr_max_rate_bps: u64,
}

impl fmt::Display for RateOversubscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: queue rates sum to {} bps, above the {} bps scheduling rate",
            self.ue_id, self.qrr_sum_bps, self.usr_max_rate_bps
        )
    }
}

/// Cross-layer coordination check between the shapers and the MAC rate
/// cap. This is advisory: oversubscribed rules are legal, they just move
/// the bottleneck from the shaper into the pacer and RLC buffer.
pub fn check_rate_coordination(rules: &RuleSet) -> Option<RateOversubscription> {
    let usr = rules.usr.as_ref()?;
    if rules.qrrs.is_empty() {
        return None;
    }
    let sum: u64 = rules.qrrs.iter().map(|q| q.rate_bps).sum();
    (sum > usr.max_rate_bps).then_some(RateOversubscription {
        ue_id: usr.ue_id,
        qrr_sum_bps: sum,
        usr_max_rate_bps: usr.max_rate_bps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Releasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub ue_id: UeId,
    pub key: String,
    pub allocated_ip: IpAddr,
    pub rules: RuleSet,
    /// Explicit queue to bearer assignments.
    pub drb_map: BTreeMap<QueueId, DrbId>,
    pub state: SessionState,
    /// Bumped on every accepted rule change.
    pub rules_version: u32,
}

/// Radio cell parameters. Defaults describe a 40 MHz, 30 kHz SCS carrier
/// with a 7D2U TDD pattern and one MIMO layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    pub bandwidth_mhz: u32,
    pub scs_khz: u32,
    pub tdd_dl_slots: u32,
    pub tdd_ul_slots: u32,
    pub prb_count: u32,
    /// Calibrated so the default downlink capacity is about 160 Mbps.
    pub bits_per_rb_per_slot: u32,
    pub mimo_layers: u32,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            bandwidth_mhz: 40,
            scs_khz: 30,
            tdd_dl_slots: 7,
            tdd_ul_slots: 2,
            prb_count: 106,
            bits_per_rb_per_slot: 970,
            mimo_layers: 1,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.prb_count == 0 {
            return Err(ModelError::InvalidCell("prb_count must be positive".into()));
        }
        if self.tdd_dl_slots == 0 {
            return Err(ModelError::InvalidCell(
                "TDD pattern needs at least one downlink slot".into(),
            ));
        }
        if self.scs_khz < 15 || !self.scs_khz.is_multiple_of(15) || !(self.scs_khz / 15).is_power_of_two() {
            return Err(ModelError::InvalidCell(format!(
                "unsupported subcarrier spacing {} kHz",
                self.scs_khz
            )));
        }
        if self.bits_per_rb_per_slot == 0 || self.mimo_layers == 0 {
            return Err(ModelError::InvalidCell(
                "bits per RB and MIMO layers must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn tdd_period(&self) -> u32 {
        self.tdd_dl_slots + self.tdd_ul_slots
    }

    pub fn slots_per_second(&self) -> u32 {
        1000 * self.scs_khz / 15
    }

    pub fn slot_duration_us(&self) -> Micros {
        1_000_000 / self.slots_per_second() as Micros
    }
}
