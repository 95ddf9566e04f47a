//! The traffic-management pipeline of the integrated data flow control
//! sublayer.
//!
//! Packets pass an ingress pipe (classifier and policer), wait in per-queue
//! buffers managed by FIFO or CoDel, and leave through an egress pipe of
//! per-queue token-bucket shapers, an inter-queue scheduler and a per-bearer
//! pacer in front of the RLC buffer.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::model::{
    matches, Discipline, DisciplineKind, DrbId, FarAction, Micros, PacketRecord, Pdr, Psr, Qrr,
    QueueId, RuleSet, SessionRecord, SessionState, Stage, Trr, Usr, MTU_BYTES, NEVER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    Queue(QueueId),
    Discard,
}

/// Picks the matching non-default PDR with the lowest precedence (ties go
/// to the lowest PDR id), falling back to the default PDR. Without a match
/// and without a default the packet is discarded.
pub fn classify(packet: &PacketRecord, pdrs: &[Pdr]) -> Classification {
    let best = pdrs
        .iter()
        .filter(|p| !p.is_default() && matches(&p.match_spec, packet))
        .min_by_key(|p| (p.precedence, p.pdr_id));
    if let Some(p) = best {
        return Classification::Queue(p.target_queue);
    }
    pdrs.iter()
        .filter(|p| p.is_default())
        .min_by_key(|p| p.pdr_id)
        .map_or(Classification::Discard, |p| Classification::Queue(p.target_queue))
}

/// Without a FAR the packet goes straight to its queue.
pub fn police(far: Option<&crate::model::Far>) -> FarAction {
    far.map_or(FarAction::Forward, |f| f.action)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub dequeued: u64,
    pub dropped: u64,
}

/// RFC 8289 CoDel controller state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodelState {
    /// Time at which sojourn has been above target for a full interval, or
    /// zero when it is not currently above target.
    pub first_above_time: Micros,
    pub drop_next: Micros,
    pub drop_count: u32,
    pub last_count: u32,
    pub dropping: bool,
}

/// Next drop time: `t + interval / sqrt(count)`.
pub fn control_law(t: Micros, interval_us: Micros, count: u32) -> Micros {
    t + (interval_us as f64 / (count.max(1) as f64).sqrt()) as Micros
}

/// Token bucket in front of one queue.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBucket {
    pub tokens_bytes: f64,
    pub last_refill: Micros,
}

impl TokenBucket {
    // Absorbs rounding when the release time was rounded up to whole µs.
    const EPSILON: f64 = 1e-6;

    pub fn full(qrr: &Qrr, now: Micros) -> Self {
        TokenBucket {
            tokens_bytes: qrr.burst_bytes as f64,
            last_refill: now,
        }
    }

    pub fn refill(&mut self, qrr: &Qrr, now: Micros) {
        if now > self.last_refill {
            let added = qrr.rate_bps as f64 * (now - self.last_refill) as f64 / 8e6;
            self.tokens_bytes = (self.tokens_bytes + added).min(qrr.burst_bytes as f64);
            self.last_refill = now;
        }
    }

    pub fn conforms(&self, size_bytes: u32) -> bool {
        self.tokens_bytes + Self::EPSILON >= size_bytes as f64
    }

    pub fn consume(&mut self, size_bytes: u32) {
        self.tokens_bytes -= size_bytes as f64;
    }
}

/// Earliest time the head of a shaped queue may leave. Unshaped queues may
/// always send; a zero-rate shaper blocks forever.
pub fn shaper_release_time(
    bucket: Option<&mut TokenBucket>,
    qrr: Option<&Qrr>,
    head_size_bytes: u32,
    now: Micros,
) -> Micros {
    let (Some(bucket), Some(qrr)) = (bucket, qrr) else {
        return now;
    };
    if qrr.rate_bps == 0 {
        return NEVER;
    }
    bucket.refill(qrr, now);
    if bucket.conforms(head_size_bytes) {
        return now;
    }
    let deficit = head_size_bytes as f64 - bucket.tokens_bytes;
    now + (deficit * 8e6 / qrr.rate_bps as f64).ceil() as Micros
}

/// One buffered queue of the pipeline.
#[derive(Clone, Debug)]
pub struct TmQueue {
    pub queue_id: QueueId,
    pub discipline: Discipline,
    buffered: VecDeque<(PacketRecord, Micros)>,
    bytes: u64,
    pub codel: CodelState,
    pub shaper: Option<TokenBucket>,
    pub stats: QueueStats,
}

/// Result of one dequeue attempt.
#[derive(Debug, Default)]
pub struct Dequeued {
    pub delivered: Option<PacketRecord>,
    pub codel_drops: Vec<PacketRecord>,
}

impl TmQueue {
    pub fn new(queue_id: QueueId, discipline: Discipline) -> Self {
        TmQueue {
            queue_id,
            discipline,
            buffered: VecDeque::new(),
            bytes: 0,
            codel: CodelState::default(),
            shaper: None,
            stats: QueueStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.buffered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffered.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn head(&self) -> Option<&PacketRecord> {
        self.buffered.front().map(|(p, _)| p)
    }

    pub fn packets(&self) -> impl Iterator<Item = &PacketRecord> + '_ {
        self.buffered.iter().map(|(p, _)| p)
    }

    pub fn head_enqueue_time(&self) -> Option<Micros> {
        self.buffered.front().map(|&(_, t)| t)
    }

    /// Offers a packet to the queue. Tail-dropped packets count as both
    /// enqueued and dropped so the conservation identity stays exact.
    pub fn enqueue(&mut self, mut packet: PacketRecord, now: Micros) -> Result<(), PacketRecord> {
        self.stats.enqueued += 1;
        if self.buffered.len() >= self.discipline.capacity_packets() as usize {
            self.stats.dropped += 1;
            return Err(packet);
        }
        packet.stamp(Stage::Enqueued, now);
        self.bytes += packet.size_bytes as u64;
        self.buffered.push_back((packet, now));
        Ok(())
    }

    /// Puts a dequeued packet back at the head, keeping its original
    /// enqueue time. Used when the shaper refuses a packet that CoDel let
    /// through.
    pub fn requeue_front(&mut self, packet: PacketRecord, enqueued_at: Micros) {
        self.bytes += packet.size_bytes as u64;
        self.buffered.push_front((packet, enqueued_at));
        self.stats.dequeued -= 1;
    }

    fn pop(&mut self) -> Option<(PacketRecord, Micros)> {
        let item = self.buffered.pop_front()?;
        self.bytes -= item.0.size_bytes as u64;
        Some(item)
    }

    /// Removes every buffered packet, counting them as dropped.
    pub fn flush(&mut self) -> Vec<PacketRecord> {
        let out: Vec<PacketRecord> = self.buffered.drain(..).map(|(p, _)| p).collect();
        self.bytes = 0;
        self.stats.dropped += out.len() as u64;
        out
    }

    /// Dequeues the next packet. FIFO returns the head. CoDel runs the
    /// RFC 8289 state machine on the head's sojourn time and may drop heads
    /// before delivering the first survivor.
    pub fn dequeue(&mut self, now: Micros) -> Dequeued {
        let out = match self.discipline {
            Discipline::Fifo { .. } => Dequeued {
                delivered: self.pop().map(|(p, _)| p),
                codel_drops: Vec::new(),
            },
            Discipline::CoDel {
                target_us,
                interval_us,
                ..
            } => self.codel_dequeue(now, target_us, interval_us),
        };
        self.stats.dropped += out.codel_drops.len() as u64;
        if out.delivered.is_some() {
            self.stats.dequeued += 1;
        }
        out
    }

    fn codel_do_dequeue(
        &mut self,
        now: Micros,
        target: Micros,
        interval: Micros,
    ) -> (Option<PacketRecord>, bool) {
        let Some((packet, enqueued_at)) = self.pop() else {
            self.codel.first_above_time = 0;
            return (None, false);
        };
        let sojourn = now.saturating_sub(enqueued_at);
        let mut ok_to_drop = false;
        if sojourn < target || self.bytes <= MTU_BYTES as u64 {
            self.codel.first_above_time = 0;
        } else if self.codel.first_above_time == 0 {
            self.codel.first_above_time = now + interval;
        } else if now >= self.codel.first_above_time {
            ok_to_drop = true;
        }
        (Some(packet), ok_to_drop)
    }

    fn codel_dequeue(&mut self, now: Micros, target: Micros, interval: Micros) -> Dequeued {
        let mut drops = Vec::new();
        let (mut packet, mut ok_to_drop) = self.codel_do_dequeue(now, target, interval);
        if packet.is_none() {
            self.codel.dropping = false;
            return Dequeued::default();
        }
        let st = &mut self.codel;
        if st.dropping {
            if !ok_to_drop {
                st.dropping = false;
            }
            while now >= self.codel.drop_next && self.codel.dropping {
                drops.extend(packet.take());
                self.codel.drop_count += 1;
                (packet, ok_to_drop) = self.codel_do_dequeue(now, target, interval);
                if !ok_to_drop {
                    self.codel.dropping = false;
                } else {
                    self.codel.drop_next =
                        control_law(self.codel.drop_next, interval, self.codel.drop_count);
                }
            }
        } else if ok_to_drop {
            drops.extend(packet.take());
            (packet, _) = self.codel_do_dequeue(now, target, interval);
            let st = &mut self.codel;
            st.dropping = true;
            let delta = st.drop_count.wrapping_sub(st.last_count);
            st.drop_count = 1;
            if delta > 1 && delta < u32::MAX / 2 && now.saturating_sub(st.drop_next) < 16 * interval
            {
                st.drop_count = delta;
            }
            st.drop_next = control_law(now, interval, st.drop_count);
            st.last_count = st.drop_count;
        }
        Dequeued {
            delivered: packet,
            codel_drops: drops,
        }
    }

    /// Applies a new discipline. Buffered packets stay; CoDel restarts from
    /// a clean state when the discipline kind changes.
    pub fn set_discipline(&mut self, discipline: Discipline) {
        if discipline.kind() != self.discipline.kind() {
            self.codel = CodelState::default();
        }
        self.discipline = discipline;
    }

    /// enqueued = dequeued + dropped + buffered.
    pub fn conserves(&self) -> bool {
        self.stats.enqueued == self.stats.dequeued + self.stats.dropped + self.buffered.len() as u64
    }
}

/// Picks the next queue to serve. Round-robin takes the first eligible
/// queue at or after the cursor in id order and moves the cursor to the
/// next configured queue; strict priority takes the lowest priority value
/// (ties to the lowest id) and leaves the cursor alone.
pub fn select_queue(
    psr: &Psr,
    configured: &BTreeSet<QueueId>,
    eligible: &BTreeSet<QueueId>,
    rr_cursor: QueueId,
) -> Result<(QueueId, QueueId), PipelineError> {
    if eligible.is_empty() {
        return Err(PipelineError::NoEligibleQueue);
    }
    match psr {
        Psr::RoundRobin => {
            let chosen = eligible
                .range(rr_cursor..)
                .next()
                .or_else(|| eligible.iter().next())
                .copied()
                .expect("eligible is not empty");
            let next = configured
                .range((std::ops::Bound::Excluded(chosen), std::ops::Bound::Unbounded))
                .next()
                .or_else(|| configured.iter().next())
                .copied()
                .unwrap_or(chosen);
            Ok((chosen, next))
        }
        Psr::StrictPriority(prio) => {
            let chosen = eligible
                .iter()
                .min_by_key(|q| (prio.get(q).copied().unwrap_or(u32::MAX), **q))
                .copied()
                .expect("eligible is not empty");
            Ok((chosen, rr_cursor))
        }
    }
}

/// Pacer state: next permitted release per bearer, in nanoseconds so that
/// fractional inter-packet gaps do not accumulate rounding error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PacerState {
    next_release_ns: BTreeMap<DrbId, u128>,
}

impl PacerState {
    /// Time in µs before which the bearer may not release another packet.
    pub fn next_release(&self, drb: DrbId) -> Micros {
        self.next_release_ns
            .get(&drb)
            .map_or(0, |&ns| ns.div_ceil(1000) as Micros)
    }
}

fn pacer_rate(trr: &Trr, usr: Option<&Usr>) -> Option<u64> {
    match *trr {
        Trr::None => None,
        Trr::FixedRate { rate_bps } => Some(rate_bps),
        Trr::BdpPacer => usr.map(|u| u.max_rate_bps),
    }
}

/// Release time for a packet the scheduler picked, advancing the bearer's
/// pacing clock by the packet's serialization time at the pacing rate.
pub fn pace_release(
    trr: &Trr,
    packet_size_bytes: u32,
    drb: DrbId,
    usr: Option<&Usr>,
    now: Micros,
    pacer: &mut PacerState,
) -> Micros {
    let Some(rate) = pacer_rate(trr, usr).filter(|&r| r > 0) else {
        return now;
    };
    let now_ns = now as u128 * 1000;
    let slot = pacer.next_release_ns.entry(drb).or_insert(0);
    let release_ns = (*slot).max(now_ns);
    *slot = release_ns + packet_size_bytes as u128 * 8 * 1_000_000_000 / rate as u128;
    release_ns.div_ceil(1000) as Micros
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingPolicy {
    /// Explicit `drb_map` entries win; other queues are grouped.
    #[default]
    Explicit,
    /// Ignore `drb_map` and group queues with similar rules.
    Grouped,
}

type GroupKey = (DisciplineKind, Option<u32>);

fn group_key(rules: &RuleSet, queue: QueueId) -> Option<GroupKey> {
    let kind = rules.bar(queue)?.discipline.kind();
    let class = match &rules.psr {
        Psr::RoundRobin => None,
        Psr::StrictPriority(map) => map.get(&queue).copied(),
    };
    Some((kind, class))
}

/// Resolves the bearer for every configured queue of a session.
pub fn drb_assignment(
    session: &SessionRecord,
    policy: MappingPolicy,
) -> BTreeMap<QueueId, DrbId> {
    let mut out = BTreeMap::new();
    let mut groups: BTreeMap<GroupKey, DrbId> = BTreeMap::new();
    let explicit = policy == MappingPolicy::Explicit;
    let mut next = if explicit {
        session.drb_map.values().map(|d| d.0 + 1).max().unwrap_or(1)
    } else {
        1
    };
    for q in session.rules.queue_ids() {
        if explicit {
            if let Some(&d) = session.drb_map.get(&q) {
                out.insert(q, d);
                continue;
            }
        }
        let key = group_key(&session.rules, q).expect("configured queues carry a BAR");
        let drb = *groups.entry(key).or_insert_with(|| {
            let d = DrbId(next);
            next += 1;
            d
        });
        out.insert(q, drb);
    }
    out
}

/// Bearer for one queue of an active session.
pub fn map_flow_to_drb(
    session: &SessionRecord,
    queue: QueueId,
    policy: MappingPolicy,
) -> Result<DrbId, PipelineError> {
    if session.state != SessionState::Active {
        return Err(PipelineError::SessionReleasing);
    }
    drb_assignment(session, policy)
        .get(&queue)
        .copied()
        .ok_or(PipelineError::UnknownQueue(queue))
}

/// Why a packet left the pipeline without reaching the RLC buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    Classifier,
    Policer,
    QueueFull,
    Codel,
    RlcFull,
    /// Missed its scheduling deadline while waiting in the RLC buffer.
    Expired,
    Flushed,
}

#[derive(Debug, PartialEq)]
pub enum IngressOutcome {
    Enqueued(QueueId),
    Dropped(DropCause, Box<PacketRecord>),
}

/// A packet handed from the pacer to a bearer's RLC buffer.
#[derive(Debug)]
pub struct Release {
    pub packet: PacketRecord,
    pub drb: DrbId,
    pub at: Micros,
}

#[derive(Debug, Default)]
pub struct EgressOutput {
    pub released: Vec<Release>,
    pub codel_drops: Vec<PacketRecord>,
    /// Next time the egress pipe could make progress, if anything is
    /// buffered.
    pub next_wake: Option<Micros>,
}

/// Per-session pipeline: queues, rules, scheduler cursor and pacer.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub queues: BTreeMap<QueueId, TmQueue>,
    pub rules: RuleSet,
    pub rr_cursor: QueueId,
    pub pacer: PacerState,
    drb_of: BTreeMap<QueueId, DrbId>,
}

impl PipelineState {
    pub fn new(session: &SessionRecord, now: Micros) -> Self {
        let mut state = PipelineState {
            queues: BTreeMap::new(),
            rules: RuleSet::default(),
            rr_cursor: QueueId(0),
            pacer: PacerState::default(),
            drb_of: BTreeMap::new(),
        };
        state.apply(session, now);
        state
    }

    /// Installs a session's current rules. New queues start empty, queues
    /// that lost their BAR are flushed and returned, surviving queues keep
    /// their packets.
    pub fn apply(&mut self, session: &SessionRecord, now: Micros) -> Vec<PacketRecord> {
        let rules = &session.rules;
        let mut flushed = Vec::new();
        let configured = rules.queue_ids();
        let removed: Vec<QueueId> = self
            .queues
            .keys()
            .filter(|q| !configured.contains(q))
            .copied()
            .collect();
        for q in removed {
            if let Some(mut queue) = self.queues.remove(&q) {
                flushed.extend(queue.flush());
            }
        }
        for bar in &rules.bars {
            let queue = self
                .queues
                .entry(bar.queue)
                .or_insert_with(|| TmQueue::new(bar.queue, bar.discipline));
            queue.set_discipline(bar.discipline);
            match rules.qrr(bar.queue) {
                Some(qrr) => match &mut queue.shaper {
                    Some(bucket) => {
                        bucket.refill(qrr, now);
                        bucket.tokens_bytes = bucket.tokens_bytes.min(qrr.burst_bytes as f64);
                    }
                    None => queue.shaper = Some(TokenBucket::full(qrr, now)),
                },
                None => queue.shaper = None,
            }
        }
        self.rules = rules.clone();
        self.drb_of = drb_assignment(session, MappingPolicy::Explicit);
        if !configured.contains(&self.rr_cursor) {
            self.rr_cursor = configured
                .range(self.rr_cursor..)
                .next()
                .or_else(|| configured.iter().next())
                .copied()
                .unwrap_or(QueueId(0));
        }
        flushed
    }

    pub fn drb_of(&self, queue: QueueId) -> Option<DrbId> {
        self.drb_of.get(&queue).copied()
    }

    pub fn drbs(&self) -> BTreeSet<DrbId> {
        self.drb_of.values().copied().collect()
    }

    pub fn buffered_packets(&self) -> usize {
        self.queues.values().map(TmQueue::len).sum()
    }

    /// Ingress pipe: classifier, policer, then the queue's admission check.
    pub fn ingress(&mut self, mut packet: PacketRecord, version: u32, now: Micros) -> IngressOutcome {
        packet.rule_version = version;
        let queue_id = match classify(&packet, &self.rules.pdrs) {
            Classification::Queue(q) => q,
            Classification::Discard => {
                return IngressOutcome::Dropped(DropCause::Classifier, Box::new(packet))
            }
        };
        if police(self.rules.far(queue_id)) == FarAction::Drop {
            return IngressOutcome::Dropped(DropCause::Policer, Box::new(packet));
        }
        let queue = self
            .queues
            .get_mut(&queue_id)
            .expect("validated rules give every PDR target a queue");
        match queue.enqueue(packet, now) {
            Ok(()) => IngressOutcome::Enqueued(queue_id),
            Err(packet) => IngressOutcome::Dropped(DropCause::QueueFull, Box::new(packet)),
        }
    }

    /// Egress pipe at time `now`: repeatedly lets the scheduler choose among
    /// queues whose head conforms to its shaper and whose bearer's pacer is
    /// open, until nothing more can leave at this instant.
    pub fn egress(&mut self, now: Micros, usr: Option<&Usr>) -> EgressOutput {
        let mut out = EgressOutput::default();
        let configured: BTreeSet<QueueId> = self.queues.keys().copied().collect();
        loop {
            let mut eligible = BTreeSet::new();
            let mut wake = NEVER;
            for (id, queue) in self.queues.iter_mut() {
                let Some(head) = queue.head() else { continue };
                let size = head.size_bytes;
                let drb = self.drb_of.get(id).copied().unwrap_or(DrbId(1));
                let shaper_at =
                    shaper_release_time(queue.shaper.as_mut(), self.rules.qrr(*id), size, now);
                let pacer_at = self.pacer.next_release(drb);
                let at = shaper_at.max(pacer_at);
                if at <= now {
                    eligible.insert(*id);
                } else {
                    wake = wake.min(at);
                }
            }
            if eligible.is_empty() {
                out.next_wake = (wake != NEVER).then_some(wake);
                return out;
            }
            let (chosen, cursor) = select_queue(&self.rules.psr, &configured, &eligible, self.rr_cursor)
                .expect("eligible set is not empty");
            self.rr_cursor = cursor;
            let drb = self.drb_of.get(&chosen).copied().unwrap_or(DrbId(1));
            let queue = self.queues.get_mut(&chosen).expect("chosen queue exists");
            let enqueued_at = queue.head_enqueue_time();
            let step = queue.dequeue(now);
            out.codel_drops.extend(step.codel_drops);
            let Some(mut packet) = step.delivered else { continue };
            if let (Some(bucket), Some(qrr)) = (queue.shaper.as_mut(), self.rules.qrr(chosen)) {
                bucket.refill(qrr, now);
                if !bucket.conforms(packet.size_bytes) {
                    // CoDel dropped the conformant head; the survivor is
                    // larger than the tokens on hand.
                    let at = enqueue_time_of(&packet).or(enqueued_at).unwrap_or(now);
                    queue.requeue_front(packet, at);
                    continue;
                }
                bucket.consume(packet.size_bytes);
            }
            let at = pace_release(&self.rules.trr, packet.size_bytes, drb, usr, now, &mut self.pacer);
            packet.stamp(Stage::Released, at);
            out.released.push(Release { packet, drb, at });
        }
    }

    /// Drops everything buffered, e.g. on session release.
    pub fn flush_all(&mut self) -> Vec<PacketRecord> {
        self.queues.values_mut().flat_map(TmQueue::flush).collect()
    }
}

fn enqueue_time_of(packet: &PacketRecord) -> Option<Micros> {
    packet.stage_time(Stage::Enqueued)
}
