//! Randomized property suites shared by the core integration tests and the
//! acceptance runner. Each suite runs its own `TestRunner` and reports the
//! minimal failing case as a string.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestError, TestRunner};

use iup_core::mac::{
    allocate_slot, largest_remainder, rb_budget, slot_direction, DrbKey, MacScheduler,
    SchedulingMode, SlotClock, SlotDirection, UeDemand, DrbDemand,
};
use iup_core::model::{
    CellConfig, Discipline, Dscp, DrbId, FiveTuple, FlowId, Micros, PacketId, PacketRecord, Qrr,
    QueueId, RuleSet, Usr, UeId,
};
use iup_core::path::{build_deployment_path, compare_paths, FittedConfig, Scenario};
use iup_core::pipeline::{control_law, PipelineState, TmQueue};
use iup_core::session::{plan_handover, HandoverMode, NodeRegistry, SessionTable};
use iup_core::sim::{run_scenario, Engine, ScenarioSpec};

pub type Suite = fn(u32) -> Result<(), String>;

/// Name, case count and entry point of every suite.
pub const SUITES: [(&str, u32, Suite); 8] = [
    ("token bucket conformance", 256, token_bucket),
    ("codel no drop below target", 256, codel_below_target),
    ("codel drop spacing", 128, codel_spacing),
    ("edf matches brute-force feasibility", 2048, edf_feasibility),
    ("largest remainder matches exhaustive rounding", 1024, largest_remainder_oracle),
    ("packet conservation", 48, conservation),
    ("determinism", 16, determinism),
    ("iup never adds tunnel legs or bytes", 256, mobility_deltas),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn report<T: std::fmt::Debug>(r: Result<(), TestError<T>>) -> Result<(), String> {
    r.map_err(|e| match e {
        TestError::Fail(why, input) => format!("{why} for {input:?}"),
        TestError::Abort(why) => format!("aborted: {why}"),
    })
}

fn packet(id: u64, size: u32, created: Micros) -> PacketRecord {
    let flow = FiveTuple {
        src_ip: IpAddr::V4(Ipv4Addr::new(203, 0, 113, 10)),
        dst_ip: IpAddr::V4(Ipv4Addr::new(10, 45, 0, 1)),
        src_port: 5001,
        dst_port: 40001,
        protocol: 6,
    };
    PacketRecord::new(PacketId(id), FlowId(1), flow, Dscp::CS1, size, created)
}

// ---- token bucket ----

/// Shaped queue fed at random times; every window of releases must fit in
/// `burst + rate * span`.
pub fn token_bucket(cases: u32) -> Result<(), String> {
    let strat = (
        1_000_000u64..200_000_000,
        1_500u64..30_000,
        prop::collection::vec((0u64..2_000, 64u32..=1500), 1..120),
    );
    report(runner(cases).run(&strat, |(rate, burst, arrivals)| {
        let mut rules = RuleSet::default_fifo();
        rules.qrrs = vec![Qrr {
            queue: QueueId(0),
            rate_bps: rate,
            burst_bytes: burst,
        }];
        let mut table = SessionTable::default();
        let rec = table
            .establish_session(UeId(1), "internet", rules, BTreeMap::new(), 0)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut pipe = PipelineState::new(&rec, 0);

        let mut releases: Vec<(Micros, u32)> = Vec::new();
        let mut wake: Option<Micros> = None;
        let mut t = 0;
        let mut pending = arrivals.iter().enumerate().peekable();
        loop {
            let next_arrival = pending.peek().map(|(_, (gap, _))| t + gap);
            let now = match (next_arrival, wake) {
                (Some(a), Some(w)) => a.min(w),
                (Some(a), None) => a,
                (None, Some(w)) => w,
                (None, None) => break,
            };
            if next_arrival == Some(now) {
                let (i, &(_, size)) = pending.next().expect("peeked");
                pipe.ingress(packet(i as u64, size, now), rec.rules_version, now);
                t = now;
            }
            let out = pipe.egress(now, None);
            releases.extend(out.released.iter().map(|r| (r.at, r.packet.size_bytes)));
            wake = out.next_wake;
        }
        prop_assert_eq!(releases.len(), arrivals.len());
        for i in 0..releases.len() {
            let mut bytes = 0u64;
            for j in i..releases.len() {
                bytes += releases[j].1 as u64;
                let span = releases[j].0 - releases[i].0;
                let allowed = burst as f64 + rate as f64 * span as f64 / 8e6 + 1e-3;
                prop_assert!(
                    bytes as f64 <= allowed,
                    "{} bytes released in {} us, allowed {}",
                    bytes,
                    span,
                    allowed
                );
            }
        }
        Ok(())
    }))
}

// ---- CoDel ----

fn codel_queue(target: Micros, interval: Micros) -> TmQueue {
    TmQueue::new(
        QueueId(0),
        Discipline::CoDel {
            target_us: target,
            interval_us: interval,
            capacity_packets: 100_000,
        },
    )
}

/// Packets whose sojourn stays under target are never dropped.
pub fn codel_below_target(cases: u32) -> Result<(), String> {
    let strat = (
        1_000u64..20_000,
        prop::collection::vec((0u64..5_000, 0u64..1_000_000, 64u32..=1500), 1..300),
    );
    report(runner(cases).run(&strat, |(target, ops)| {
        let mut q = codel_queue(target, 100_000);
        let mut t = 0;
        let mut out_at = 0;
        for (i, &(gap, sojourn_frac, size)) in ops.iter().enumerate() {
            t += gap;
            q.enqueue(packet(i as u64, size, t), t)
                .map_err(|_| TestCaseError::fail("queue full"))?;
            let sojourn = sojourn_frac * (target - 1) / 1_000_000;
            out_at = out_at.max(t + sojourn);
            let step = q.dequeue(out_at);
            prop_assert!(step.codel_drops.is_empty(), "drop at sojourn {}", sojourn);
            prop_assert!(step.delivered.is_some());
        }
        Ok(())
    }))
}

/// Under a standing queue, the k-th drop of an episode lands on the first
/// dequeue at or after `s_k`, where `s_1` is the first drop and
/// `s_{k+1} = s_k + interval / sqrt(k)`.
pub fn codel_spacing(cases: u32) -> Result<(), String> {
    let strat = (2_000u64..10_000, 20_000u64..200_000, 50u64..2_000);
    report(runner(cases).run(&strat, |(target, interval, step_us)| {
        let mut q = codel_queue(target, interval);
        for i in 0..20_000 {
            q.enqueue(packet(i, 1500, 0), 0)
                .map_err(|_| TestCaseError::fail("queue full"))?;
        }
        let mut drops: Vec<Micros> = Vec::new();
        let mut now = 0;
        while drops.len() < 40 && !q.is_empty() {
            now += step_us;
            let out = q.dequeue(now);
            drops.extend(std::iter::repeat_n(now, out.codel_drops.len()));
        }
        prop_assert!(drops.len() >= 2, "standing queue produced {} drops", drops.len());
        // No drop before sojourn has stayed above target for an interval.
        prop_assert!(drops[0] >= target + interval);
        let mut scheduled = drops[0] as f64;
        for (k, &d) in drops.iter().enumerate().skip(1) {
            scheduled += interval as f64 / (k as f64).sqrt();
            let slack = k as f64;
            prop_assert!(
                d as f64 >= scheduled - slack && (d as f64) < scheduled + step_us as f64 + slack,
                "drop {} at {} but scheduled {}",
                k + 1,
                d,
                scheduled
            );
        }
        // The law itself, checked directly.
        prop_assert_eq!(control_law(0, interval, 4), interval / 2);
        Ok(())
    }))
}

// ---- EDF ----

#[derive(Clone, Debug)]
struct EdfCase {
    per_slot: u32,
    /// Per-UE deadline in µs.
    deadlines: Vec<Micros>,
    /// `(ue index, arrival)` of each packet.
    packets: Vec<(usize, Micros)>,
}

const EDF_PACKET_BITS: u32 = 12_000;
const EDF_START_SLOT: u64 = 18;

fn edf_case() -> impl Strategy<Value = EdfCase> {
    (1u32..=2, prop::collection::vec(500u64..7_000, 1..=3)).prop_flat_map(|(per_slot, deadlines)| {
        let ues = deadlines.len();
        prop::collection::vec((0..ues, 0u64..3_000), 1..=8).prop_map(move |packets| EdfCase {
            per_slot,
            deadlines: deadlines.clone(),
            packets,
        })
    })
}

/// Downlink slot indices from `start` on, as many as asked.
fn dl_slots(cell: &CellConfig, start: u64, n: usize) -> Vec<u64> {
    (start..)
        .filter(|&s| slot_direction(s, cell) == SlotDirection::Dl)
        .take(n)
        .collect()
}

/// Tries every order of the packets, `per_slot` to a downlink slot.
fn brute_force_feasible(absolute: &[Micros], per_slot: u32, slots: &[u64], slot_us: Micros) -> bool {
    fn go(
        left: &mut Vec<Micros>,
        placed: usize,
        per_slot: usize,
        slots: &[u64],
        slot_us: Micros,
    ) -> bool {
        if left.is_empty() {
            return true;
        }
        let end = (slots[placed / per_slot] + 1) * slot_us;
        for i in 0..left.len() {
            if left[i] < end {
                continue;
            }
            let d = left.swap_remove(i);
            let ok = go(left, placed + 1, per_slot, slots, slot_us);
            left.push(d);
            let last = left.len() - 1;
            left.swap(i, last);
            if ok {
                return true;
            }
        }
        false
    }
    let mut left = absolute.to_vec();
    go(&mut left, 0, per_slot as usize, slots, slot_us)
}

pub fn edf_feasibility(cases: u32) -> Result<(), String> {
    let seen = std::cell::Cell::new((0u32, 0u32));
    report(runner(cases).run(&edf_case(), |case| {
        let cell = CellConfig {
            prb_count: case.per_slot,
            bits_per_rb_per_slot: EDF_PACKET_BITS,
            ..CellConfig::default()
        };
        let slot_us = cell.slot_duration_us();
        let start_us = EDF_START_SLOT * slot_us;
        let mut mac = MacScheduler::new(cell.clone(), 100);
        let mut usrs = BTreeMap::new();
        for (i, &d) in case.deadlines.iter().enumerate() {
            let ue = UeId(i as u32 + 1);
            usrs.insert(
                ue,
                Usr {
                    ue_id: ue,
                    max_rate_bps: 10_000_000_000,
                    deadline_us: Some(d),
                },
            );
        }
        let mut arrivals: Vec<(usize, Micros)> = case
            .packets
            .iter()
            .map(|&(ue, back)| (ue, start_us - back))
            .collect();
        arrivals.sort_by_key(|a| a.1);
        for (i, &(ue, at)) in arrivals.iter().enumerate() {
            let key = DrbKey {
                ue: UeId(ue as u32 + 1),
                drb: DrbId(1),
            };
            mac.enqueue(key, packet(i as u64, EDF_PACKET_BITS / 8, at), at)
                .map_err(|_| TestCaseError::fail("rlc full"))?;
        }
        let mut missed = 0;
        let mut slot = EDF_START_SLOT;
        while mac.buffered_packets() > 0 && slot < EDF_START_SLOT + 200 {
            let out = mac.run_slot(slot, &usrs, &BTreeMap::new());
            missed += out.expired.len();
            slot += 1;
        }
        let absolute: Vec<Micros> = arrivals
            .iter()
            .map(|&(ue, at)| at + case.deadlines[ue])
            .collect();
        let slots = dl_slots(&cell, EDF_START_SLOT, absolute.len());
        let feasible = brute_force_feasible(&absolute, case.per_slot, &slots, slot_us);
        prop_assert_eq!(missed == 0, feasible, "missed {} deadlines", missed);
        let (f, i) = seen.get();
        seen.set(if feasible { (f + 1, i) } else { (f, i + 1) });
        Ok(())
    }))?;
    let (f, i) = seen.get();
    if cases >= 64 && (f == 0 || i == 0) {
        return Err(format!("generator too narrow: {f} feasible, {i} infeasible"));
    }
    Ok(())
}

// ---- largest remainder ----

/// Among all non-negative integer vectors summing to `total`, the one
/// closest to the exact quotas in squared distance; ties go to the
/// lexicographically largest vector.
fn exhaustive_rounding(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: i128 = weights.iter().map(|&w| w as i128).sum();
    let mut best: Option<(i128, Vec<u64>)> = None;
    let mut cur = vec![0u64; weights.len()];
    fn rec(
        i: usize,
        left: u64,
        cur: &mut Vec<u64>,
        weights: &[u64],
        total: u64,
        sum: i128,
        best: &mut Option<(i128, Vec<u64>)>,
    ) {
        if i + 1 == weights.len() {
            cur[i] = left;
            let dist: i128 = cur
                .iter()
                .zip(weights)
                .map(|(&x, &w)| {
                    let d = x as i128 * sum - total as i128 * w as i128;
                    d * d
                })
                .sum();
            let better = match best {
                None => true,
                Some((bd, bv)) => dist < *bd || (dist == *bd && cur.as_slice() > bv.as_slice()),
            };
            if better {
                *best = Some((dist, cur.clone()));
            }
            return;
        }
        for x in 0..=left {
            cur[i] = x;
            rec(i + 1, left - x, cur, weights, total, sum, best);
        }
    }
    rec(0, total, &mut cur, weights, total, sum, &mut best);
    best.expect("at least one vector").1
}

pub fn largest_remainder_oracle(cases: u32) -> Result<(), String> {
    let strat = (
        0u64..=20,
        prop::collection::vec(0u64..200, 1..=4).prop_filter("positive total weight", |w| {
            w.iter().sum::<u64>() > 0
        }),
    );
    report(runner(cases).run(&strat, |(total, weights)| {
        let expected = exhaustive_rounding(total, &weights);
        prop_assert_eq!(largest_remainder(total, &weights), expected.clone());

        // Proportional slots with every UE backlogged split the same way.
        if weights.iter().all(|&w| w > 0) {
            let cell = CellConfig {
                prb_count: total.max(1) as u32,
                ..CellConfig::default()
            };
            let budget = rb_budget(&cell);
            let ues: Vec<UeDemand> = weights
                .iter()
                .enumerate()
                .map(|(i, &w)| UeDemand {
                    ue_id: UeId(i as u32 + 1),
                    drbs: vec![DrbDemand {
                        drb_id: DrbId(1),
                        weight: 1,
                        backlog_bits: u64::MAX / 8,
                    }],
                    quantum_bits: Some(w),
                    max_rbs: None,
                    deadlines: Vec::new(),
                })
                .collect();
            let clock = SlotClock {
                slot_index: 0,
                slot_duration_us: budget.slot_duration_us,
            };
            let a = allocate_slot(SchedulingMode::Proportional, &ues, &budget, clock, &cell);
            let got: Vec<u64> = ues.iter().map(|u| a.per_ue[&u.ue_id] as u64).collect();
            let expected = exhaustive_rounding(total.max(1), &weights);
            prop_assert_eq!(got, expected);
        }
        Ok(())
    }))
}

// ---- whole-engine properties ----

fn random_scenario() -> impl Strategy<Value = ScenarioSpec> {
    let source = (
        1u64..=2,
        prop_oneof![Just(8u8), Just(10), Just(18)],
        prop_oneof![
            (1_000_000u64..60_000_000, 200u32..=1500).prop_map(|(r, b)| serde_json::json!({
                "cbr": { "rate_bps": r, "packet_bytes": b }
            })),
            (1u32..=20).prop_map(|w| serde_json::json!({ "aimd": { "initial_cwnd_mss": w } })),
        ],
        0u64..200_000,
    );
    let update = (
        100_000u64..1_500_000,
        1u64..=2,
        prop_oneof![
            (5_000_000u64..150_000_000).prop_map(|r| serde_json::json!({ "qrrs": [{ "queue": 0, "rate_bps": r, "burst_bytes": 3000 }] })),
            (10_000_000u64..150_000_000, prop::option::of(1_000u64..20_000)).prop_map(|(r, d)| {
                let mut usr = serde_json::json!({ "max_rate_bps": r });
                if let Some(d) = d {
                    usr["deadline_us"] = d.into();
                }
                serde_json::json!({ "usr": usr })
            }),
            Just(serde_json::json!({ "trr": "bdp_pacer" })),
        ],
    );
    (
        any::<u64>(),
        500_000u64..2_000_000,
        prop::collection::vec(source, 1..=3),
        prop::collection::vec(update, 0..=3),
        prop::bool::ANY,
        10u32..400,
    )
        .prop_map(|(seed, duration, sources, updates, codel, cap)| {
            let discipline = if codel {
                serde_json::json!({ "codel": { "target_us": 5000, "interval_us": 100000, "capacity_packets": cap } })
            } else {
                serde_json::json!({ "fifo": { "capacity_packets": cap } })
            };
            let session = |ue: u64| {
                serde_json::json!({
                    "ue_id": ue,
                    "rules": {
                        "pdrs": [{ "pdr_id": 0, "precedence": 10, "match": { "is_default": true }, "target_queue": 0 }],
                        "bars": [{ "queue": 0, "discipline": discipline }]
                    }
                })
            };
            let sources: Vec<_> = sources
                .into_iter()
                .enumerate()
                .map(|(i, (sid, dscp, kind, start))| {
                    serde_json::json!({ "flow_id": i + 1, "session_id": sid, "dscp": dscp, "kind": kind, "start_us": start })
                })
                .collect();
            let updates: Vec<_> = updates
                .into_iter()
                .map(|(at, sid, mut deltas)| {
                    if let Some(usr) = deltas.get_mut("usr") {
                        usr["ue_id"] = sid.into();
                    }
                    serde_json::json!({ "apply_at_us": at, "origin": "ric", "session_id": sid, "deltas": deltas })
                })
                .collect();
            let doc = serde_json::json!({
                "schema": 1,
                "name": "random",
                "duration_us": duration,
                "seed": seed,
                "rlc_capacity_packets": cap,
                "settle_us": 0,
                "sessions": [session(1), session(2)],
                "sources": sources,
                "updates": updates,
            });
            let mut spec: ScenarioSpec = serde_json::from_value(doc).expect("generated scenario parses");
            spec.sort_updates();
            spec
        })
}

/// emitted = delivered + dropped + in flight, per flow, at every audit and
/// at the end.
pub fn conservation(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&random_scenario(), |spec| {
        let mut engine = Engine::new(&spec).map_err(|e| TestCaseError::fail(e.to_string()))?;
        engine
            .run_until(spec.duration_us)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(engine.audit_conservation().is_empty(), "{:?}", engine.audit_conservation());
        let report = engine.report();
        prop_assert!(report.conservation_ok);
        for (flow, t) in &report.flows {
            let c = &t.counters;
            prop_assert_eq!(
                c.emitted,
                c.delivered + c.dropped() + t.in_transit + t.in_pipeline + t.in_rlc,
                "flow {:?}",
                flow
            );
        }
        Ok(())
    }))
}

/// Two runs of one scenario produce byte-identical reports.
pub fn determinism(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&random_scenario(), |spec| {
        let a = run_scenario(&spec).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = run_scenario(&spec).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let ja = serde_json::to_string(&a).expect("serializes");
        let jb = serde_json::to_string(&b).expect("serializes");
        prop_assert_eq!(&a.trace_digest, &b.trace_digest);
        prop_assert!(ja == jb, "reports differ");
        prop_assert_eq!(&a.windows, &b.windows);
        Ok(())
    }))
}

// ---- mobility ----

fn perturbed(scale: &[f64]) -> FittedConfig {
    let mut cfg = FittedConfig::shipped();
    let mut k = 0;
    for rows in cfg.0.values_mut() {
        for row in rows.iter_mut() {
            row.1 *= scale[k % scale.len()];
            k += 1;
        }
    }
    cfg
}

/// For every 5G/IUP pair and any leg delays, the IUP path has no more GTP
/// legs and no more header bytes; the same holds for handover.
pub fn mobility_deltas(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(0.1f64..3.0, 1..12), 0u64..9000);
    report(runner(cases).run(&strat, |(scale, payload)| {
        let cfg = perturbed(&scale);
        for (five_g, iup) in Scenario::PAIRS {
            let a = build_deployment_path(iup, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let b = build_deployment_path(five_g, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let c = compare_paths(&a, &b, payload);
            prop_assert!(c.gtp_leg_delta <= 0, "{:?} vs {:?}", iup, five_g);
            prop_assert!(c.overhead_delta_bytes <= 0);
            prop_assert!(c.wire_bytes_a <= c.wire_bytes_b);
        }
        let mut table = SessionTable::default();
        let rec = table
            .establish_session(UeId(1), "internet", RuleSet::default_fifo(), BTreeMap::new(), 0)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let nodes = NodeRegistry::sample();
        let g = plan_handover(&rec, "gnb-a", "gnb-b", HandoverMode::FiveGUpfRealloc, &nodes, 0)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let i = plan_handover(&rec, "iup-a", "iup-b", HandoverMode::IupPeerToPeer, &nodes, 0)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let gtp = |legs: &[iup_core::path::PathLeg]| legs.iter().filter(|l| l.encap.is_tunnel()).count();
        prop_assert!(gtp(&i.forwarding_legs) <= gtp(&g.forwarding_legs));
        prop_assert!(i.tunnel_overhead_bytes() <= g.tunnel_overhead_bytes());
        prop_assert_eq!(i.preserved_ip, rec.allocated_ip);
        Ok(())
    }))
}

