//! The event loop. Packets flow server -> static legs -> pipeline -> RLC ->
//! MAC slot -> UE, and acks return over the next uplink slot and the legs.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BinaryHeap};
use std::hash::Hasher;
use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::SimError;
use crate::mac::{scheduling_mode, slot_direction, DrbKey, MacScheduler, SchedulingMode, SlotDirection};
use crate::model::{
    Dscp, FiveTuple, FlowId, Micros, PacketId, PacketRecord, SessionId, Stage, UeId, Usr,
};
use crate::pipeline::{DropCause, IngressOutcome};
use crate::session::{ControlInbox, ControlScheduler, ControlUpdate, SessionTable};

use super::metrics::{FlowCounters, MetricsSlice, MetricsStore, WindowRow, WINDOW_US};
use super::scenario::{ScenarioSpec, SourceKindSpec};
use super::source::{source_on_event, SourceEvent, SourceState};

const SERVER_IP: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 10);
const START_JITTER_US: Micros = 1_000;
/// Spread of uplink grant timing applied to each ack.
const ACK_JITTER_US: Micros = 500;

/// Shaper and pacer wake-ups share one kind: both re-run the session's
/// egress pipe.
#[derive(Debug)]
pub enum EventKind {
    SourceTick(FlowId),
    Arrival(Box<PacketRecord>),
    EgressWake(SessionId),
    SlotTick(u64),
    ControlApply,
    AckDelivery { flow: FlowId, seq: u64 },
    LossNotify { flow: FlowId, seq: u64 },
    MeasureTick,
    /// No-op marker; it only shows up in the trace.
    Probe(u64),
}

impl EventKind {
    fn tag(&self) -> u8 {
        match self {
            EventKind::SourceTick(_) => 0,
            EventKind::Arrival(_) => 1,
            EventKind::EgressWake(_) => 2,
            EventKind::SlotTick(_) => 3,
            EventKind::ControlApply => 4,
            EventKind::AckDelivery { .. } => 5,
            EventKind::LossNotify { .. } => 6,
            EventKind::MeasureTick => 7,
            EventKind::Probe(_) => 8,
        }
    }
}

#[derive(Debug)]
struct Event {
    at: Micros,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Flow {
    session: SessionId,
    ue: UeId,
    tuple: FiveTuple,
    dscp: Dscp,
    state: SourceState,
    in_transit: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowTotals {
    #[serde(flatten)]
    pub counters: FlowCounters,
    pub in_transit: u64,
    pub in_pipeline: u64,
    pub in_rlc: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub index: usize,
    pub start_us: Micros,
    pub end_us: Micros,
    pub scheduling: SchedulingMode,
    pub metrics: MetricsSlice,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub duration_us: Micros,
    pub cell_capacity_bps: f64,
    pub events: u64,
    pub trace_digest: String,
    pub conservation_ok: bool,
    pub advisories: Vec<String>,
    pub flows: BTreeMap<FlowId, FlowTotals>,
    pub phases: Vec<PhaseSummary>,
    #[serde(skip)]
    pub windows: Vec<WindowRow>,
}

pub struct Engine {
    now: Micros,
    seq: u64,
    heap: BinaryHeap<Event>,
    horizon: Micros,
    spec: ScenarioSpec,
    one_way_us: Micros,
    table: SessionTable,
    control: ControlScheduler,
    inbox: ControlInbox,
    mac: MacScheduler,
    usrs: BTreeMap<UeId, Usr>,
    weights: BTreeMap<DrbKey, u32>,
    flows: BTreeMap<FlowId, Flow>,
    egress_pending: BTreeMap<SessionId, Micros>,
    next_packet: u64,
    metrics: MetricsStore,
    phase_modes: Vec<(Micros, SchedulingMode)>,
    advisories: Vec<String>,
    events: u64,
    digest: DefaultHasher,
    trace: Option<Vec<(Micros, u64)>>,
    rng: ChaCha8Rng,
}

impl Engine {
    /// Validates the scenario, establishes its sessions, and queues the
    /// first source ticks, slot tick, measurement tick and rule updates.
    pub fn new(spec: &ScenarioSpec) -> Result<Self, SimError> {
        let mut spec = spec.clone();
        spec.sort_updates();
        let advisories = spec.validate()?;
        let one_way_us = spec.path_legs()?.iter().map(|l| l.one_way_us()).sum();
        let mut engine = Engine {
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            horizon: spec.duration_us,
            one_way_us,
            table: SessionTable::default(),
            control: ControlScheduler::default(),
            inbox: ControlInbox::default(),
            mac: MacScheduler::new(spec.cell.clone(), spec.rlc_capacity_packets),
            usrs: BTreeMap::new(),
            weights: BTreeMap::new(),
            flows: BTreeMap::new(),
            egress_pending: BTreeMap::new(),
            next_packet: 0,
            metrics: MetricsStore::new(WINDOW_US),
            phase_modes: Vec::new(),
            advisories,
            events: 0,
            digest: DefaultHasher::new(),
            trace: None,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
        };
        for s in engine.spec.sessions.clone() {
            let rec = engine.table.establish_session(s.ue_id, &s.key, s.rules, s.drb_map, 0)?;
            engine.refresh_session(rec.session_id);
        }
        engine.phase_modes.push((0, scheduling_mode(engine.usrs.values())));

        for src in engine.spec.sources.clone() {
            let session = engine
                .table
                .get(src.session_id)
                .expect("validated source session");
            let start = src.start_us + engine.rng.gen_range(0..=START_JITTER_US);
            let (state, protocol) = match src.kind {
                SourceKindSpec::Cbr {
                    rate_bps,
                    packet_bytes,
                } => (SourceState::cbr(rate_bps, packet_bytes, start), 17),
                SourceKindSpec::Aimd {
                    mss_bytes,
                    initial_cwnd_mss,
                } => (SourceState::aimd(mss_bytes, initial_cwnd_mss), 6),
            };
            let tuple = FiveTuple {
                src_ip: IpAddr::V4(SERVER_IP),
                dst_ip: session.allocated_ip,
                src_port: 5000u16.wrapping_add(src.flow_id.0 as u16),
                dst_port: 40000u16.wrapping_add(src.flow_id.0 as u16),
                protocol,
            };
            engine.metrics.register_flow(src.flow_id, session.ue_id);
            engine.flows.insert(
                src.flow_id,
                Flow {
                    session: src.session_id,
                    ue: session.ue_id,
                    tuple,
                    dscp: src.dscp,
                    state,
                    in_transit: 0,
                },
            );
            engine.schedule(start, EventKind::SourceTick(src.flow_id))?;
        }
        engine.schedule(0, EventKind::SlotTick(0))?;
        engine.schedule(WINDOW_US.min(engine.horizon), EventKind::MeasureTick)?;
        for u in engine.spec.updates.clone() {
            engine.submit(u)?;
        }
        Ok(engine)
    }

    /// Records `(time, sequence)` of every processed event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> &[(Micros, u64)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn metrics(&self) -> &MetricsStore {
        &self.metrics
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.table
    }

    /// Channel for rule updates from other threads. Updates are picked up
    /// between events.
    pub fn control_sender(&self) -> std::sync::mpsc::Sender<ControlUpdate> {
        self.inbox.sender()
    }

    pub fn schedule(&mut self, at: Micros, kind: EventKind) -> Result<u64, SimError> {
        if at < self.now {
            return Err(SimError::CausalityViolation { at, now: self.now });
        }
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Event { at, seq, kind });
        Ok(seq)
    }

    fn submit(&mut self, update: ControlUpdate) -> Result<(), SimError> {
        let ack = self.control.apply_control_update(&self.table, update, self.now)?;
        self.schedule(ack.apply_at_us, EventKind::ControlApply)?;
        Ok(())
    }

    /// Processes every event at or before `t_end` in (time, sequence)
    /// order. The clock ends at `t_end`.
    pub fn run_until(&mut self, t_end: Micros) -> Result<(), SimError> {
        loop {
            let pending: Vec<ControlUpdate> = self.inbox_drain();
            for u in pending {
                self.submit(u)?;
            }
            match self.heap.peek() {
                Some(e) if e.at <= t_end => {}
                _ => break,
            }
            let event = self.heap.pop().expect("peeked");
            self.now = event.at;
            self.events += 1;
            self.digest.write_u64(event.at);
            self.digest.write_u64(event.seq);
            self.digest.write_u8(event.kind.tag());
            if let Some(t) = self.trace.as_mut() {
                t.push((event.at, event.seq));
            }
            self.dispatch(event.kind)?;
        }
        self.now = self.now.max(t_end.min(self.horizon.max(self.now)));
        Ok(())
    }

    fn inbox_drain(&mut self) -> Vec<ControlUpdate> {
        let rx = self.inbox.receiver();
        rx.try_iter().collect()
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::SourceTick(flow) => self.on_source(flow, SourceEvent::Tick),
            EventKind::AckDelivery { flow, seq } => self.on_source(flow, SourceEvent::Ack { seq }),
            EventKind::LossNotify { flow, seq } => self.on_source(flow, SourceEvent::Loss { seq }),
            EventKind::Arrival(packet) => self.on_arrival(*packet),
            EventKind::EgressWake(session) => {
                if self.egress_pending.get(&session) == Some(&self.now) {
                    self.egress_pending.remove(&session);
                }
                self.run_egress(session)
            }
            EventKind::SlotTick(slot) => self.on_slot(slot),
            EventKind::ControlApply => self.on_control(),
            EventKind::MeasureTick => self.on_measure(),
            EventKind::Probe(_) => Ok(()),
        }
    }

    fn on_source(&mut self, flow_id: FlowId, event: SourceEvent) -> Result<(), SimError> {
        let now = self.now;
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return Ok(());
        };
        let out = source_on_event(&mut flow.state, event, now);
        let (tuple, dscp) = (flow.tuple, flow.dscp);
        flow.in_transit += out.emitted.len() as u64;
        let arrive = now + self.one_way_us;
        for e in out.emitted {
            let mut packet = PacketRecord::new(
                PacketId(self.next_packet),
                flow_id,
                tuple,
                dscp,
                e.size_bytes,
                now,
            );
            packet.seq = e.seq;
            self.next_packet += 1;
            self.metrics.record_emit(flow_id);
            self.schedule(arrive, EventKind::Arrival(Box::new(packet)))?;
        }
        if let Some(t) = out.next_tick.filter(|&t| t <= self.horizon) {
            self.schedule(t, EventKind::SourceTick(flow_id))?;
        }
        Ok(())
    }

    fn drop_packet(&mut self, packet: &PacketRecord, cause: DropCause) -> Result<(), SimError> {
        self.metrics.record_drop(packet.flow_id, cause);
        let aimd = matches!(
            self.flows.get(&packet.flow_id).map(|f| &f.state),
            Some(SourceState::Aimd(_))
        );
        if aimd {
            // The sender notices the gap about one round trip later.
            self.schedule(
                self.now + 2 * self.one_way_us,
                EventKind::LossNotify {
                    flow: packet.flow_id,
                    seq: packet.seq,
                },
            )?;
        }
        Ok(())
    }

    fn on_arrival(&mut self, mut packet: PacketRecord) -> Result<(), SimError> {
        let now = self.now;
        let Some(flow) = self.flows.get_mut(&packet.flow_id) else {
            return Ok(());
        };
        flow.in_transit -= 1;
        let sid = flow.session;
        packet.stamp(Stage::Arrived, now);
        let Some((session, pipe)) = self.table.session_and_pipeline_mut(sid) else {
            return self.drop_packet(&packet, DropCause::Flushed);
        };
        let version = session.rules_version;
        match pipe.ingress(packet, version, now) {
            IngressOutcome::Enqueued(_) => self.run_egress(sid),
            IngressOutcome::Dropped(cause, p) => self.drop_packet(&p, cause),
        }
    }

    fn run_egress(&mut self, sid: SessionId) -> Result<(), SimError> {
        let now = self.now;
        let Some((session, pipe)) = self.table.session_and_pipeline_mut(sid) else {
            return Ok(());
        };
        let ue = session.ue_id;
        let out = pipe.egress(now, session.rules.usr.as_ref());
        for p in out.codel_drops {
            self.drop_packet(&p, DropCause::Codel)?;
        }
        for r in out.released {
            let key = DrbKey { ue, drb: r.drb };
            if let Err(p) = self.mac.enqueue(key, r.packet, r.at) {
                self.drop_packet(&p, DropCause::RlcFull)?;
            }
        }
        if let Some(wake) = out.next_wake {
            let pending = self.egress_pending.get(&sid).copied();
            if pending.is_none_or(|p| wake < p || p < now) {
                self.egress_pending.insert(sid, wake);
                self.schedule(wake, EventKind::EgressWake(sid))?;
            }
        }
        Ok(())
    }

    /// End of the first uplink slot that starts at or after `t`.
    fn next_uplink_end(&self, t: Micros) -> Micros {
        let dur = self.mac.budget.slot_duration_us;
        let mut slot = t.div_ceil(dur);
        while slot_direction(slot, &self.mac.cell) != SlotDirection::Ul {
            slot += 1;
        }
        (slot + 1) * dur
    }

    fn on_slot(&mut self, slot: u64) -> Result<(), SimError> {
        let now = self.now;
        let outcome = self.mac.run_slot(slot, &self.usrs, &self.weights);
        if let Some(alloc) = &outcome.allocation {
            self.metrics.record_slot(now, alloc);
            let ues: Vec<UeId> = self.usrs_and_ues();
            for ue in ues {
                let bytes = self.mac.ue_rlc_bytes(ue);
                self.metrics.sample_rlc(now, ue, bytes);
            }
        }
        for (_, p) in outcome.expired {
            self.drop_packet(&p, DropCause::Expired)?;
        }
        for (_, p) in outcome.transmitted {
            let at = p.stage_time(Stage::Transmitted).unwrap_or(now);
            self.metrics
                .record_delivery(p.flow_id, p.size_bytes, at - p.created_at, at);
            let ack_at = self.next_uplink_end(at)
                + self.one_way_us
                + self.rng.gen_range(0..ACK_JITTER_US);
            self.schedule(
                ack_at,
                EventKind::AckDelivery {
                    flow: p.flow_id,
                    seq: p.seq,
                },
            )?;
        }
        let next = (slot + 1) * self.mac.budget.slot_duration_us;
        if next <= self.horizon {
            self.schedule(next, EventKind::SlotTick(slot + 1))?;
        }
        Ok(())
    }

    fn usrs_and_ues(&self) -> Vec<UeId> {
        let mut ues: Vec<UeId> = self.table.sessions().map(|s| s.ue_id).collect();
        ues.dedup();
        ues
    }

    fn refresh_session(&mut self, sid: SessionId) {
        let Some(session) = self.table.get(sid) else { return };
        let ue = session.ue_id;
        if let Some(usr) = &session.rules.usr {
            self.usrs.insert(ue, usr.clone());
        } else {
            self.usrs.remove(&ue);
        }
        let drbs = self.table.pipeline(sid).map(|p| p.drbs()).unwrap_or_default();
        for drb in drbs {
            let key = DrbKey { ue, drb };
            self.mac.ensure_bearer(key);
            self.weights.insert(key, session.rules.dsr_weight(drb));
        }
    }

    fn on_control(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let due = self.control.take_due(now);
        if due.is_empty() {
            return Ok(());
        }
        let mut touched = Vec::new();
        for u in due {
            let (_, flushed) = self.table.modify_session(u.session_id, &u.deltas, now)?;
            for p in flushed {
                self.drop_packet(&p, DropCause::Flushed)?;
            }
            touched.push(u.session_id);
        }
        touched.dedup();
        for sid in touched {
            self.refresh_session(sid);
            self.run_egress(sid)?;
        }
        self.phase_modes.push((now, scheduling_mode(self.usrs.values())));
        Ok(())
    }

    /// Per-flow packet counts held in the pipelines and RLC buffers.
    fn buffered_by_flow(&self) -> (BTreeMap<FlowId, u64>, BTreeMap<FlowId, u64>) {
        let mut pipe = BTreeMap::new();
        for s in self.table.sessions() {
            if let Some(p) = self.table.pipeline(s.session_id) {
                for q in p.queues.values() {
                    for pkt in q.packets() {
                        *pipe.entry(pkt.flow_id).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut rlc = BTreeMap::new();
        for q in self.mac.rlc.values() {
            for pkt in q.packets() {
                *rlc.entry(pkt.flow_id).or_insert(0) += 1;
            }
        }
        (pipe, rlc)
    }

    /// Checks emitted = delivered + dropped + in transit + buffered for
    /// every flow.
    pub fn audit_conservation(&self) -> Vec<String> {
        let (pipe, rlc) = self.buffered_by_flow();
        let mut bad = Vec::new();
        for (id, c) in &self.metrics.counters {
            let transit = self.flows.get(id).map_or(0, |f| f.in_transit);
            let held = transit + pipe.get(id).copied().unwrap_or(0) + rlc.get(id).copied().unwrap_or(0);
            if c.emitted != c.delivered + c.dropped() + held {
                bad.push(format!(
                    "{id} at {} us: emitted {} != delivered {} + dropped {} + held {held}",
                    self.now,
                    c.emitted,
                    c.delivered,
                    c.dropped()
                ));
            }
        }
        bad
    }

    fn on_measure(&mut self) -> Result<(), SimError> {
        let bad = self.audit_conservation();
        self.metrics.audits += 1;
        self.metrics.conservation_failures.extend(bad);
        let next = self.now + WINDOW_US;
        if next <= self.horizon {
            self.schedule(next, EventKind::MeasureTick)?;
        }
        Ok(())
    }

    pub fn snapshot_metrics(&self, start: Micros, end: Micros) -> MetricsSlice {
        self.metrics.snapshot(start, end)
    }

    pub fn report(&self) -> Report {
        let end = self.now.min(self.horizon);
        let bounds = self.spec.phase_boundaries();
        let mut phases = Vec::new();
        for (i, &start) in bounds.iter().enumerate() {
            let stop = bounds.get(i + 1).copied().unwrap_or(self.horizon).min(end);
            if stop <= start {
                continue;
            }
            let from = (start + self.spec.settle_us).min(stop);
            let scheduling = self
                .phase_modes
                .iter()
                .rev()
                .find(|(t, _)| *t <= start)
                .map_or(SchedulingMode::FairShare, |&(_, m)| m);
            phases.push(PhaseSummary {
                index: i,
                start_us: start,
                end_us: stop,
                scheduling,
                metrics: self.metrics.snapshot(from, stop),
            });
        }
        let (pipe, rlc) = self.buffered_by_flow();
        let flows = self
            .metrics
            .counters
            .iter()
            .map(|(id, c)| {
                (
                    *id,
                    FlowTotals {
                        counters: c.clone(),
                        in_transit: self.flows.get(id).map_or(0, |f| f.in_transit),
                        in_pipeline: pipe.get(id).copied().unwrap_or(0),
                        in_rlc: rlc.get(id).copied().unwrap_or(0),
                    },
                )
            })
            .collect();
        Report {
            name: self.spec.name.clone(),
            seed: self.spec.seed,
            duration_us: self.horizon,
            cell_capacity_bps: self.mac.budget.cell_capacity_bps,
            events: self.events,
            trace_digest: format!("{:016x}", self.digest.finish()),
            conservation_ok: self.metrics.conservation_failures.is_empty()
                && self.audit_conservation().is_empty(),
            advisories: self.advisories.clone(),
            flows,
            phases,
            windows: self.metrics.rows(end),
        }
    }

    pub fn flow_ue(&self, flow: FlowId) -> Option<UeId> {
        self.flows.get(&flow).map(|f| f.ue)
    }
}

/// Builds an engine, runs it to the scenario's end and reports.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<Report, SimError> {
    let mut engine = Engine::new(spec)?;
    engine.run_until(spec.duration_us)?;
    Ok(engine.report())
}
