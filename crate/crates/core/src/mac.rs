//! Slot-based downlink radio resource scheduler.
//!
//! Each downlink slot the scheduler splits the cell's resource blocks
//! between UEs according to one of three policies:
//!
//! * fair share, used until any UE carries a scheduling rule,
//! * proportional to the UEs' maximum scheduling rates,
//! * earliest deadline first, when scheduling rules carry deadlines.
//!
//! Within a UE, bits are split across bearers by DSR weight. Bearers drain
//! their RLC buffers packet by packet, carrying partial-packet credit to
//! the next slot.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{CellConfig, DrbId, Micros, PacketRecord, Stage, UeId, Usr, MTU_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotDirection {
    Dl,
    Ul,
}

/// Strict TDD repetition: the first `tdd_dl_slots` of every period are
/// downlink.
pub fn slot_direction(slot_index: u64, cell: &CellConfig) -> SlotDirection {
    if slot_index % cell.tdd_period() as u64 > (cell.tdd_dl_slots as u64).saturating_sub(1) {
        SlotDirection::Ul
    } else {
        SlotDirection::Dl
    }
}

/// Number of downlink slots among indices `0..n`.
pub fn dl_slots_before(n: u64, cell: &CellConfig) -> u64 {
    let period = cell.tdd_period() as u64;
    let dl = cell.tdd_dl_slots as u64;
    (n / period) * dl + (n % period).min(dl)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbBudget {
    pub prbs_per_dl_slot: u32,
    pub bits_per_rb: u32,
    pub dl_slots_per_second: f64,
    pub cell_capacity_bps: f64,
    pub slot_duration_us: Micros,
}

impl RbBudget {
    pub fn slot_bits(&self) -> u64 {
        self.prbs_per_dl_slot as u64 * self.bits_per_rb as u64
    }

    /// Bits a rate entitles a UE to in one downlink slot.
    pub fn quantum_bits(&self, rate_bps: u64) -> f64 {
        rate_bps as f64 / self.dl_slots_per_second
    }
}

pub fn rb_budget(cell: &CellConfig) -> RbBudget {
    let slots = cell.slots_per_second() as f64;
    let dl_slots_per_second = slots * cell.tdd_dl_slots as f64 / cell.tdd_period() as f64;
    let bits_per_rb = cell.bits_per_rb_per_slot * cell.mimo_layers;
    RbBudget {
        prbs_per_dl_slot: cell.prb_count,
        bits_per_rb,
        dl_slots_per_second,
        cell_capacity_bps: dl_slots_per_second * cell.prb_count as f64 * bits_per_rb as f64,
        slot_duration_us: cell.slot_duration_us(),
    }
}

/// RLC buffer of one bearer.
#[derive(Clone, Debug)]
pub struct RlcQueue {
    pub drb_id: DrbId,
    buffered: VecDeque<(PacketRecord, Micros)>,
    pub bytes_buffered: u64,
    /// Bits granted in earlier slots that were not enough for a whole
    /// packet.
    pub credit_bits: u64,
    pub capacity_packets: u32,
}

impl RlcQueue {
    pub const DEFAULT_CAPACITY: u32 = 300;

    pub fn new(drb_id: DrbId, capacity_packets: u32) -> Self {
        RlcQueue {
            drb_id,
            buffered: VecDeque::new(),
            bytes_buffered: 0,
            credit_bits: 0,
            capacity_packets,
        }
    }

    pub fn len(&self) -> usize {
        self.buffered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffered.is_empty()
    }

    pub fn enqueue(&mut self, packet: PacketRecord, now: Micros) -> Result<(), PacketRecord> {
        if self.buffered.len() >= self.capacity_packets as usize {
            return Err(packet);
        }
        self.bytes_buffered += packet.size_bytes as u64;
        self.buffered.push_back((packet, now));
        Ok(())
    }

    /// Bits still owed, net of banked credit.
    pub fn backlog_bits(&self) -> u64 {
        (self.bytes_buffered * 8).saturating_sub(self.credit_bits)
    }

    pub fn packets(&self) -> impl Iterator<Item = &PacketRecord> + '_ {
        self.buffered.iter().map(|(p, _)| p)
    }

    /// Discards head packets that arrived before `cutoff`. Any credit
    /// banked toward a discarded head is forfeited.
    pub fn drop_arrived_before(&mut self, cutoff: Micros) -> Vec<PacketRecord> {
        let mut out = Vec::new();
        while self.buffered.front().is_some_and(|&(_, t)| t < cutoff) {
            let (p, _) = self.buffered.pop_front().expect("head exists");
            self.bytes_buffered -= p.size_bytes as u64;
            out.push(p);
        }
        if !out.is_empty() {
            self.credit_bits = 0;
        }
        out
    }

    pub fn head_arrival(&self) -> Option<Micros> {
        self.buffered.front().map(|&(_, t)| t)
    }

    /// `(arrival time, bits)` of every buffered packet, oldest first.
    pub fn arrivals(&self) -> impl Iterator<Item = (Micros, u64)> + '_ {
        self.buffered.iter().map(|(p, t)| (*t, p.bits()))
    }

    /// Sends whole head packets while granted bits plus credit cover them.
    /// Leftover bits are banked as credit, capped at one packet's worth;
    /// an emptied buffer forfeits its credit.
    pub fn drain(&mut self, allocated_bits: u64, now: Micros) -> Vec<PacketRecord> {
        let mut avail = self.credit_bits + allocated_bits;
        let mut sent = Vec::new();
        while let Some((head, _)) = self.buffered.front() {
            let bits = head.bits();
            if bits > avail {
                break;
            }
            avail -= bits;
            let (mut packet, _) = self.buffered.pop_front().expect("head exists");
            self.bytes_buffered -= packet.size_bytes as u64;
            packet.stamp(Stage::Transmitted, now);
            sent.push(packet);
        }
        self.credit_bits = match self.buffered.front() {
            Some((head, _)) => avail.min(head.bits()),
            None => 0,
        };
        sent
    }

    pub fn flush(&mut self) -> Vec<PacketRecord> {
        self.bytes_buffered = 0;
        self.credit_bits = 0;
        self.buffered.drain(..).map(|(p, _)| p).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingMode {
    FairShare,
    Proportional,
    Edf,
}

/// Policy implied by the installed UE scheduling rules: none means fair
/// share, any deadline means EDF, otherwise proportional.
pub fn scheduling_mode<'a>(usrs: impl IntoIterator<Item = &'a Usr>) -> SchedulingMode {
    let mut mode = SchedulingMode::FairShare;
    for usr in usrs {
        if usr.deadline_us.is_some() {
            return SchedulingMode::Edf;
        }
        mode = SchedulingMode::Proportional;
    }
    mode
}

/// A bearer's share of the slot and its backlog.
#[derive(Clone, Debug, PartialEq)]
pub struct DrbDemand {
    pub drb_id: DrbId,
    pub weight: u32,
    pub backlog_bits: u64,
}

/// What the scheduler knows about one UE at the start of a slot.
#[derive(Clone, Debug, PartialEq)]
pub struct UeDemand {
    pub ue_id: UeId,
    pub drbs: Vec<DrbDemand>,
    /// USR rate converted to bits per downlink slot.
    pub quantum_bits: Option<u64>,
    /// Rate-cap ceiling on this slot's grant.
    pub max_rbs: Option<u32>,
    /// Absolute deadline and size of each buffered packet, in service order.
    /// Only consulted in EDF mode.
    pub deadlines: Vec<(Micros, u64)>,
}

impl UeDemand {
    pub fn backlog_bits(&self) -> u64 {
        self.drbs.iter().map(|d| d.backlog_bits).sum()
    }
}

/// Where the slot sits in time; EDF needs it to count future slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotClock {
    pub slot_index: u64,
    pub slot_duration_us: Micros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DrbKey {
    pub ue: UeId,
    pub drb: DrbId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocationMap {
    pub slot_index: u64,
    pub per_ue: BTreeMap<UeId, u32>,
    pub per_drb: BTreeMap<DrbKey, u64>,
    pub unused_rbs: u32,
}

impl AllocationMap {
    pub fn allocated_rbs(&self) -> u32 {
        self.per_ue.values().sum()
    }
}

/// Hamilton apportionment of `total` units by integer weights. Remainders
/// are compared exactly; ties go to the earlier entry.
pub fn largest_remainder(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u64> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = total as u128 * w as u128;
        out.push((num / sum) as u64);
        rems.push((num % sum, i));
    }
    let given: u64 = out.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take((total - given) as usize) {
        out[i] += 1;
    }
    out
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// EDF plans each packet to leave this long before its deadline, leaving
/// room for arrivals that land on an already crowded slot.
pub const EDF_PLANNING_MARGIN_US: Micros = 2_000;

/// Index (0 = current) of the last downlink slot that finishes by
/// `deadline`. Packets already late are due in the current slot.
fn due_slot(deadline: Micros, clock: SlotClock, cell: &CellConfig) -> u64 {
    let t = clock.slot_duration_us;
    let last_fitting = match (deadline / t).checked_sub(1) {
        Some(n) if n >= clock.slot_index => n,
        _ => return 0,
    };
    let count = dl_slots_before(last_fitting + 1, cell) - dl_slots_before(clock.slot_index, cell);
    count.saturating_sub(1)
}

/// Smallest service this slot that still lets every packet meet its
/// deadline when each future downlink slot offers `capacity` bits:
/// `max_k (due by slot k) - k * capacity`.
fn lazy_minimum(due: &[(u64, u64)], capacity: u64, total: u64) -> u64 {
    let mut cumulative = 0u64;
    let mut need = 0u64;
    for &(k, bits) in due {
        cumulative += bits;
        need = need.max(cumulative.saturating_sub(k.saturating_mul(capacity)));
        if k.saturating_mul(capacity) >= total {
            break;
        }
    }
    need
}

fn split_across_drbs(ue: &UeDemand, bits: u64) -> Vec<(DrbId, u64)> {
    let active: Vec<&DrbDemand> = ue.drbs.iter().filter(|d| d.backlog_bits > 0).collect();
    if active.is_empty() {
        return Vec::new();
    }
    let weights: Vec<u64> = active.iter().map(|d| d.weight.max(1) as u64).collect();
    let shares = largest_remainder(bits, &weights);
    active.iter().zip(shares).map(|(d, b)| (d.drb_id, b)).collect()
}

/// Hands out up to `budget` RBs by weight, capping each UE at `caps` and
/// re-apportioning what capped UEs leave behind.
fn water_fill(budget: u64, weights: &[u64], caps: &[u64]) -> Vec<u64> {
    let mut given = vec![0u64; weights.len()];
    let mut remaining = budget;
    loop {
        let open: Vec<usize> = (0..weights.len())
            .filter(|&i| given[i] < caps[i] && weights[i] > 0)
            .collect();
        if remaining == 0 || open.is_empty() {
            return given;
        }
        let w: Vec<u64> = open.iter().map(|&i| weights[i]).collect();
        let shares = largest_remainder(remaining, &w);
        let mut progress = 0;
        for (&i, share) in open.iter().zip(shares) {
            let take = share.min(caps[i] - given[i]);
            given[i] += take;
            progress += take;
        }
        remaining -= progress;
        if progress == 0 {
            return given;
        }
    }
}

/// Splits one downlink slot's resource blocks between UEs.
///
/// * Fair share: backlogged UEs split RBs equally, capped by demand, with
///   leftovers re-apportioned.
/// * Proportional: weights are `min(USR quantum, backlog)`; same capping
///   and re-apportioning, plus the rate cap in `max_rbs`.
/// * EDF: each UE gets only the RBs needed so that none of its packets
///   will miss its deadline given its rate quantum in future slots, served
///   in order of earliest head deadline. UEs without a deadline take what
///   is left. Anything else stays unused.
pub fn allocate_slot(
    mode: SchedulingMode,
    ues: &[UeDemand],
    budget: &RbBudget,
    clock: SlotClock,
    cell: &CellConfig,
) -> AllocationMap {
    let bpr = budget.bits_per_rb as u64;
    let total = budget.prbs_per_dl_slot as u64;
    let mut ues: Vec<&UeDemand> = ues.iter().collect();
    ues.sort_by_key(|u| u.ue_id);

    let demand_rbs: Vec<u64> = ues.iter().map(|u| ceil_div(u.backlog_bits(), bpr)).collect();
    let caps: Vec<u64> = ues
        .iter()
        .zip(&demand_rbs)
        .map(|(u, &d)| u.max_rbs.map_or(d, |m| d.min(m as u64)))
        .collect();

    let rbs: Vec<u64> = match mode {
        SchedulingMode::FairShare => {
            let weights: Vec<u64> = ues.iter().map(|u| (u.backlog_bits() > 0) as u64).collect();
            water_fill(total, &weights, &caps)
        }
        SchedulingMode::Proportional => {
            let slot_bits = budget.slot_bits();
            let weights: Vec<u64> = ues
                .iter()
                .map(|u| u.quantum_bits.unwrap_or(slot_bits).min(u.backlog_bits()))
                .collect();
            water_fill(total, &weights, &caps)
        }
        SchedulingMode::Edf => edf_grants(&ues, &caps, total, bpr, budget.slot_bits(), clock, cell),
    };

    let mut map = AllocationMap {
        slot_index: clock.slot_index,
        ..Default::default()
    };
    for (ue, &n) in ues.iter().zip(&rbs) {
        map.per_ue.insert(ue.ue_id, n as u32);
        for (drb, bits) in split_across_drbs(ue, n * bpr) {
            map.per_drb.insert(DrbKey { ue: ue.ue_id, drb }, bits);
        }
    }
    map.unused_rbs = (total - rbs.iter().sum::<u64>()) as u32;
    map
}

fn edf_grants(
    ues: &[&UeDemand],
    caps: &[u64],
    total_rbs: u64,
    bpr: u64,
    slot_bits: u64,
    clock: SlotClock,
    cell: &CellConfig,
) -> Vec<u64> {
    // Per UE: due-slot profile and the lazy minimum against its own rate.
    let mut needed = vec![0u64; ues.len()];
    let mut pooled: BTreeMap<u64, u64> = BTreeMap::new();
    // Owed packets of every UE as (true deadline, ue id, index, bits).
    let mut owed_packets: Vec<(Micros, UeId, usize, u64)> = Vec::new();
    for (i, ue) in ues.iter().enumerate() {
        if ue.deadlines.is_empty() {
            continue;
        }
        // Credit already banked reduces what is owed, oldest packet first.
        let mut credit = ue.deadlines.iter().map(|d| d.1).sum::<u64>() - ue.backlog_bits().min(
            ue.deadlines.iter().map(|d| d.1).sum::<u64>(),
        );
        let mut due = Vec::with_capacity(ue.deadlines.len());
        for &(deadline, bits) in &ue.deadlines {
            let owed = bits.saturating_sub(credit);
            credit -= bits - owed;
            if owed == 0 {
                continue;
            }
            owed_packets.push((deadline, ue.ue_id, i, owed));
            due.push((due_slot(deadline.saturating_sub(EDF_PLANNING_MARGIN_US), clock, cell), owed));
        }
        // Whole RBs only, so the plan never counts on a partial block.
        let capacity = ue.quantum_bits.unwrap_or(slot_bits).min(slot_bits) / bpr * bpr;
        let backlog: u64 = due.iter().map(|d| d.1).sum();
        needed[i] = lazy_minimum(&due, capacity, backlog);
        for (k, bits) in due {
            *pooled.entry(k).or_default() += bits;
        }
    }

    // Shared-cell check: the UEs together may need more now than their
    // individual minima when future slots are oversubscribed.
    let pooled: Vec<(u64, u64)> = pooled.into_iter().collect();
    let pooled_total: u64 = pooled.iter().map(|d| d.1).sum();
    // Each UE may lose up to one RB to rounding in every slot.
    let deadline_ues = ues.iter().filter(|u| !u.deadlines.is_empty()).count() as u64;
    let cell_capacity = total_rbs.saturating_sub(deadline_ues) * bpr;
    let mut extra = lazy_minimum(&pooled, cell_capacity, pooled_total)
        .saturating_sub(needed.iter().sum::<u64>());

    // Serve the planned bits packet by packet in deadline order, so a
    // crowded slot goes to the most urgent packets whatever UE owns them.
    owed_packets.sort_by_key(|p| (p.0, p.1));
    let mut grants = vec![0u64; ues.len()];
    let mut planned = vec![0u64; ues.len()];
    let mut remaining = total_rbs;
    for (_, _, i, bits) in owed_packets {
        if remaining == 0 {
            break;
        }
        let from_own = bits.min(needed[i]);
        needed[i] -= from_own;
        let from_pool = (bits - from_own).min(extra);
        extra -= from_pool;
        if from_own + from_pool == 0 {
            continue;
        }
        planned[i] += from_own + from_pool;
        let want = ceil_div(planned[i], bpr).min(caps[i]);
        let n = want.saturating_sub(grants[i]).min(remaining);
        grants[i] += n;
        remaining -= n;
    }
    let mut order: Vec<usize> = (0..ues.len()).collect();
    order.sort_by_key(|&i| ues[i].ue_id);
    // Best effort for UEs without a deadline.
    for &i in &order {
        if !ues[i].deadlines.is_empty() || remaining == 0 {
            continue;
        }
        let n = caps[i].min(remaining);
        grants[i] = n;
        remaining -= n;
    }
    grants
}

/// RB usage and RLC occupancy aggregated over a measurement window.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UsageStats {
    pub window_start_us: Micros,
    pub window_end_us: Micros,
    pub dl_slots: u64,
    pub per_ue_rbs: BTreeMap<UeId, u64>,
    pub unused_rbs: u64,
    /// Sum and count of per-slot RLC byte samples, per bearer.
    pub rlc_bytes: BTreeMap<DrbKey, (u64, u64)>,
}

impl UsageStats {
    pub fn new(window_start_us: Micros, window_end_us: Micros) -> Self {
        UsageStats {
            window_start_us,
            window_end_us,
            ..Default::default()
        }
    }

    pub fn record(&mut self, alloc: &AllocationMap) {
        self.dl_slots += 1;
        for (ue, &n) in &alloc.per_ue {
            *self.per_ue_rbs.entry(*ue).or_default() += n as u64;
        }
        self.unused_rbs += alloc.unused_rbs as u64;
    }

    pub fn sample_rlc(&mut self, key: DrbKey, bytes: u64) {
        let e = self.rlc_bytes.entry(key).or_default();
        e.0 += bytes;
        e.1 += 1;
    }

    pub fn mean_unused_per_slot(&self) -> f64 {
        if self.dl_slots == 0 {
            0.0
        } else {
            self.unused_rbs as f64 / self.dl_slots as f64
        }
    }

    pub fn mean_rlc_bytes(&self, key: DrbKey) -> f64 {
        self.rlc_bytes
            .get(&key)
            .map_or(0.0, |&(sum, n)| if n == 0 { 0.0 } else { sum as f64 / n as f64 })
    }

    pub fn merge(&mut self, other: &UsageStats) {
        self.window_start_us = self.window_start_us.min(other.window_start_us);
        self.window_end_us = self.window_end_us.max(other.window_end_us);
        self.dl_slots += other.dl_slots;
        self.unused_rbs += other.unused_rbs;
        for (ue, n) in &other.per_ue_rbs {
            *self.per_ue_rbs.entry(*ue).or_default() += n;
        }
        for (k, (s, n)) in &other.rlc_bytes {
            let e = self.rlc_bytes.entry(*k).or_default();
            e.0 += s;
            e.1 += n;
        }
    }
}

/// Folds a window's allocations into usage statistics. A window with no
/// allocations at all reports every downlink RB of its slots as unused.
pub fn usage_stats(
    window_start_us: Micros,
    window_end_us: Micros,
    allocations: &[AllocationMap],
) -> UsageStats {
    let mut stats = UsageStats::new(window_start_us, window_end_us);
    for alloc in allocations {
        stats.record(alloc);
    }
    stats
}

#[derive(Debug, Default)]
pub struct SlotOutcome {
    pub allocation: Option<AllocationMap>,
    pub transmitted: Vec<(DrbKey, PacketRecord)>,
    /// Packets discarded because their deadline passed before this slot
    /// could deliver them.
    pub expired: Vec<(DrbKey, PacketRecord)>,
}

/// Stateful per-cell scheduler: RLC buffers, rate-cap allowances and the
/// slot loop.
#[derive(Clone, Debug)]
pub struct MacScheduler {
    pub cell: CellConfig,
    pub budget: RbBudget,
    pub rlc: BTreeMap<DrbKey, RlcQueue>,
    allowance_bits: BTreeMap<UeId, f64>,
    rlc_capacity: u32,
}

impl MacScheduler {
    pub fn new(cell: CellConfig, rlc_capacity: u32) -> Self {
        let budget = rb_budget(&cell);
        MacScheduler {
            cell,
            budget,
            rlc: BTreeMap::new(),
            allowance_bits: BTreeMap::new(),
            rlc_capacity,
        }
    }

    pub fn ensure_bearer(&mut self, key: DrbKey) {
        let cap = self.rlc_capacity;
        self.rlc.entry(key).or_insert_with(|| RlcQueue::new(key.drb, cap));
    }

    pub fn enqueue(&mut self, key: DrbKey, packet: PacketRecord, now: Micros) -> Result<(), PacketRecord> {
        self.ensure_bearer(key);
        self.rlc.get_mut(&key).expect("bearer exists").enqueue(packet, now)
    }

    pub fn ue_rlc_bytes(&self, ue: UeId) -> u64 {
        self.rlc
            .iter()
            .filter(|(k, _)| k.ue == ue)
            .map(|(_, q)| q.bytes_buffered)
            .sum()
    }

    pub fn buffered_packets(&self) -> usize {
        self.rlc.values().map(RlcQueue::len).sum()
    }

    /// Largest allowance a UE may carry between slots. It keeps the
    /// delivered bits over any window within one slot of the USR rate.
    fn carry_cap(&self, quantum: f64) -> f64 {
        let slack = self.budget.slot_bits() as f64 - quantum - (MTU_BYTES as f64 * 8.0);
        slack.max(self.budget.bits_per_rb as f64)
    }

    /// Runs one slot. Uplink slots carry no downlink data. `usrs` holds
    /// the installed UE rules and `weights` the DSR weight of each bearer.
    pub fn run_slot(
        &mut self,
        slot_index: u64,
        usrs: &BTreeMap<UeId, Usr>,
        weights: &BTreeMap<DrbKey, u32>,
    ) -> SlotOutcome {
        if slot_direction(slot_index, &self.cell) == SlotDirection::Ul {
            return SlotOutcome::default();
        }
        let clock = SlotClock {
            slot_index,
            slot_duration_us: self.budget.slot_duration_us,
        };
        let now = slot_index * clock.slot_duration_us;
        let tx_time = now + clock.slot_duration_us;
        let mode = scheduling_mode(usrs.values());
        let bpr = self.budget.bits_per_rb as f64;

        let mut expired = Vec::new();
        if mode == SchedulingMode::Edf {
            for (key, q) in self.rlc.iter_mut() {
                if let Some(d) = usrs.get(&key.ue).and_then(|u| u.deadline_us) {
                    let cutoff = tx_time.saturating_sub(d);
                    expired.extend(q.drop_arrived_before(cutoff).into_iter().map(|p| (*key, p)));
                }
            }
        }

        let mut by_ue: BTreeMap<UeId, UeDemand> = BTreeMap::new();
        for (key, q) in &self.rlc {
            let ue = by_ue.entry(key.ue).or_insert_with(|| UeDemand {
                ue_id: key.ue,
                drbs: Vec::new(),
                quantum_bits: None,
                max_rbs: None,
                deadlines: Vec::new(),
            });
            ue.drbs.push(DrbDemand {
                drb_id: key.drb,
                weight: weights.get(key).copied().unwrap_or(1),
                backlog_bits: q.backlog_bits(),
            });
            if mode == SchedulingMode::Edf {
                if let Some(d) = usrs.get(&key.ue).and_then(|u| u.deadline_us) {
                    ue.deadlines.extend(q.arrivals().map(|(t, bits)| (t + d, bits)));
                }
            }
        }
        for (ue_id, ue) in by_ue.iter_mut() {
            if ue.deadlines.len() > 1 && ue.drbs.len() > 1 {
                ue.deadlines.sort_by_key(|d| d.0);
            }
            if mode == SchedulingMode::FairShare {
                continue;
            }
            if let Some(usr) = usrs.get(ue_id) {
                let quantum = self.budget.quantum_bits(usr.max_rate_bps);
                let carry = self.carry_cap(quantum);
                let allowance = self.allowance_bits.entry(*ue_id).or_insert(0.0);
                *allowance = allowance.min(carry) + quantum;
                ue.quantum_bits = Some(quantum.round() as u64);
                ue.max_rbs = Some((*allowance / bpr).floor() as u32);
            }
        }

        let demands: Vec<UeDemand> = by_ue.into_values().collect();
        let allocation = allocate_slot(mode, &demands, &self.budget, clock, &self.cell);

        for (ue, &n) in &allocation.per_ue {
            if let Some(a) = self.allowance_bits.get_mut(ue) {
                if usrs.contains_key(ue) {
                    *a -= n as f64 * bpr;
                }
            }
        }

        let mut transmitted = Vec::new();
        for (key, q) in self.rlc.iter_mut() {
            let bits = allocation.per_drb.get(key).copied().unwrap_or(0);
            for p in q.drain(bits, tx_time) {
                transmitted.push((*key, p));
            }
        }
        SlotOutcome {
            allocation: Some(allocation),
            transmitted,
            expired,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dscp, FiveTuple, FlowId, PacketId};
    use std::net::{IpAddr, Ipv4Addr};

    fn pkt(size: u32) -> PacketRecord {
        let flow = FiveTuple {
            src_ip: IpAddr::V4(Ipv4Addr::LOCALHOST),
            dst_ip: IpAddr::V4(Ipv4Addr::LOCALHOST),
            src_port: 1,
            dst_port: 2,
            protocol: 6,
        };
        PacketRecord::new(PacketId(0), FlowId(1), flow, Dscp::new(0).unwrap(), size, 0)
    }

    #[test]
    fn tdd_pattern() {
        let cell = CellConfig::default();
        assert_eq!(slot_direction(0, &cell), SlotDirection::Dl);
        assert_eq!(slot_direction(6, &cell), SlotDirection::Dl);
        assert_eq!(slot_direction(7, &cell), SlotDirection::Ul);
        assert_eq!(slot_direction(8, &cell), SlotDirection::Ul);
        assert_eq!(slot_direction(9, &cell), SlotDirection::Dl);
        assert_eq!(dl_slots_before(9, &cell), 7);
        assert_eq!(dl_slots_before(11, &cell), 9);
    }

    #[test]
    fn default_budget() {
        let b = rb_budget(&CellConfig::default());
        assert_eq!(b.prbs_per_dl_slot, 106);
        assert!((b.dl_slots_per_second - 1555.5556).abs() < 1e-3);
        assert!((b.cell_capacity_bps - 160e6).abs() / 160e6 < 0.001);
    }

    #[test]
    fn drain_cases() {
        let mut q = RlcQueue::new(DrbId(1), 10);
        q.enqueue(pkt(1500), 0).unwrap();
        q.enqueue(pkt(1500), 0).unwrap();
        assert_eq!(q.drain(12_000, 5).len(), 1);
        assert_eq!(q.credit_bits, 0);
        assert_eq!(q.drain(6_000, 6).len(), 0);
        assert_eq!(q.credit_bits, 6_000);
        assert_eq!(q.drain(6_000, 7).len(), 1);
        assert_eq!(q.bytes_buffered, 0);
        q.credit_bits = 500;
        assert!(q.drain(1_000, 8).is_empty());
        assert_eq!(q.credit_bits, 0);
    }

    #[test]
    fn leftover_bits_become_credit() {
        let mut q = RlcQueue::new(DrbId(1), 10);
        q.enqueue(pkt(1500), 0).unwrap();
        q.enqueue(pkt(100), 0).unwrap();
        q.enqueue(pkt(1500), 0).unwrap();
        let sent = q.drain(12_000 + 800 + 11_000, 1);
        assert_eq!(sent.len(), 2);
        assert_eq!(q.credit_bits, 11_000);
    }

    #[test]
    fn rlc_capacity() {
        let mut q = RlcQueue::new(DrbId(1), 1);
        q.enqueue(pkt(100), 0).unwrap();
        assert!(q.enqueue(pkt(100), 0).is_err());
    }

    #[test]
    fn largest_remainder_basic() {
        assert_eq!(largest_remainder(100, &[50, 110]), vec![31, 69]);
        assert_eq!(largest_remainder(10, &[1, 1, 1]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(5, &[0, 0]), vec![0, 0]);
    }

    fn demand(ue: u32, backlog: u64, quantum: Option<u64>) -> UeDemand {
        UeDemand {
            ue_id: UeId(ue),
            drbs: vec![DrbDemand {
                drb_id: DrbId(1),
                weight: 1,
                backlog_bits: backlog,
            }],
            quantum_bits: quantum,
            max_rbs: None,
            deadlines: Vec::new(),
        }
    }

    fn test_budget(prbs: u32) -> RbBudget {
        RbBudget {
            prbs_per_dl_slot: prbs,
            bits_per_rb: 1000,
            dl_slots_per_second: 1000.0,
            cell_capacity_bps: prbs as f64 * 1e6,
            slot_duration_us: 1000,
        }
    }

    fn clock() -> SlotClock {
        SlotClock {
            slot_index: 0,
            slot_duration_us: 1000,
        }
    }

    #[test]
    fn proportional_split() {
        let budget = test_budget(100);
        let cell = CellConfig::default();
        let ues = [demand(1, u64::MAX / 4, Some(50_000)), demand(2, u64::MAX / 4, Some(110_000))];
        let a = allocate_slot(SchedulingMode::Proportional, &ues, &budget, clock(), &cell);
        assert_eq!(a.per_ue[&UeId(1)], 31);
        assert_eq!(a.per_ue[&UeId(2)], 69);
        assert_eq!(a.unused_rbs, 0);
    }

    #[test]
    fn fair_share_single_backlogged() {
        let budget = test_budget(100);
        let cell = CellConfig::default();
        let ues = [demand(1, 10_000_000, None), demand(2, 0, None)];
        let a = allocate_slot(SchedulingMode::FairShare, &ues, &budget, clock(), &cell);
        assert_eq!(a.per_ue[&UeId(1)], 100);
        assert_eq!(a.per_ue[&UeId(2)], 0);
    }

    #[test]
    fn fair_share_redistributes_demand_cap() {
        let budget = test_budget(100);
        let cell = CellConfig::default();
        let ues = [demand(1, 10_000, None), demand(2, 10_000_000, None)];
        let a = allocate_slot(SchedulingMode::FairShare, &ues, &budget, clock(), &cell);
        assert_eq!(a.per_ue[&UeId(1)], 10);
        assert_eq!(a.per_ue[&UeId(2)], 90);
    }

    #[test]
    fn edf_serves_only_what_deadlines_require() {
        let budget = test_budget(10);
        let cell = CellConfig {
            tdd_dl_slots: 9,
            tdd_ul_slots: 0,
            ..CellConfig::default()
        };
        // Two 1000-bit packets, both due at the end of slot 4: with one RB
        // per slot of rate, nothing is needed yet at slot 0.
        let mut ue = demand(1, 2_000, Some(1_000));
        ue.deadlines = vec![(5_000, 1_000), (5_000, 1_000)];
        let a = allocate_slot(SchedulingMode::Edf, &[ue.clone()], &budget, clock(), &cell);
        assert_eq!(a.per_ue[&UeId(1)], 0);
        assert_eq!(a.unused_rbs, 10);
        // Due at the end of slot 0: both must go now.
        ue.deadlines = vec![(1_000, 1_000), (1_000, 1_000)];
        let a = allocate_slot(SchedulingMode::Edf, &[ue], &budget, clock(), &cell);
        assert_eq!(a.per_ue[&UeId(1)], 2);
    }

    #[test]
    fn edf_crowded_slot_goes_to_earliest_deadlines() {
        let budget = test_budget(2);
        let cell = CellConfig::default();
        // UE 1's second packet falls inside the planning margin but can
        // still wait a slot; UE 2's cannot.
        let mut a1 = demand(1, 2_000, Some(2_000));
        a1.deadlines = vec![(1_000, 1_000), (2_500, 1_000)];
        let mut a2 = demand(2, 1_000, Some(2_000));
        a2.deadlines = vec![(1_000, 1_000)];
        let a = allocate_slot(SchedulingMode::Edf, &[a1, a2], &budget, clock(), &cell);
        assert_eq!(a.per_ue[&UeId(1)], 1);
        assert_eq!(a.per_ue[&UeId(2)], 1);
    }

    #[test]
    fn scheduler_mode_from_rules() {
        let p = Usr {
            ue_id: UeId(1),
            max_rate_bps: 1,
            deadline_us: None,
        };
        let e = Usr {
            deadline_us: Some(10),
            ..p.clone()
        };
        assert_eq!(scheduling_mode([]), SchedulingMode::FairShare);
        assert_eq!(scheduling_mode([&p]), SchedulingMode::Proportional);
        assert_eq!(scheduling_mode([&p, &e]), SchedulingMode::Edf);
    }

    #[test]
    fn usage_windows() {
        let full = AllocationMap {
            slot_index: 0,
            per_ue: BTreeMap::from([(UeId(1), 106)]),
            per_drb: BTreeMap::new(),
            unused_rbs: 0,
        };
        let stats = usage_stats(0, 1000, &[full.clone(), full]);
        assert_eq!(stats.unused_rbs, 0);
        assert_eq!(stats.per_ue_rbs[&UeId(1)], 212);

        let mut mac = MacScheduler::new(CellConfig::default(), 100);
        mac.ensure_bearer(DrbKey {
            ue: UeId(1),
            drb: DrbId(1),
        });
        let allocs: Vec<AllocationMap> = (0..9)
            .filter_map(|s| mac.run_slot(s, &BTreeMap::new(), &BTreeMap::new()).allocation)
            .collect();
        let idle = usage_stats(0, 4500, &allocs);
        assert_eq!(idle.per_ue_rbs[&UeId(1)], 0);
        assert_eq!(idle.unused_rbs, 7 * 106);
    }
}
