//! Windowed measurement of throughput, latency, radio usage and buffers.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::mac::AllocationMap;
use crate::model::{FlowId, Micros, UeId};
use crate::pipeline::DropCause;

pub const WINDOW_US: Micros = 1_000_000;

/// Nearest-rank percentile of sorted samples; `None` when empty.
pub fn percentile(sorted: &[Micros], q: f64) -> Option<Micros> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlowCounters {
    pub emitted: u64,
    pub delivered: u64,
    pub delivered_bytes: u64,
    pub drops: BTreeMap<DropCause, u64>,
}

impl FlowCounters {
    pub fn dropped(&self) -> u64 {
        self.drops.values().sum()
    }
}

#[derive(Clone, Debug, Default)]
struct FlowWindow {
    delivered_bits: u64,
    latencies_us: Vec<Micros>,
}

#[derive(Clone, Debug, Default)]
struct UeWindow {
    rbs: u64,
    rlc_bytes_sum: u64,
    rlc_samples: u64,
}

#[derive(Clone, Debug, Default)]
struct Window {
    flows: BTreeMap<FlowId, FlowWindow>,
    ues: BTreeMap<UeId, UeWindow>,
    dl_slots: u64,
    unused_rbs: u64,
}

#[derive(Clone, Debug)]
pub struct MetricsStore {
    pub window_us: Micros,
    windows: Vec<Window>,
    pub counters: BTreeMap<FlowId, FlowCounters>,
    pub flow_ue: BTreeMap<FlowId, UeId>,
    pub conservation_failures: Vec<String>,
    pub audits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowSlice {
    pub throughput_bps: f64,
    pub delivered_packets: u64,
    pub p50_latency_ms: Option<f64>,
    pub p99_latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UeSlice {
    pub rbs_per_slot: f64,
    pub rlc_bytes: f64,
}

/// Aggregates over a time range made of whole windows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSlice {
    pub start_us: Micros,
    pub end_us: Micros,
    pub dl_slots: u64,
    pub unused_rbs_per_slot: f64,
    pub flows: BTreeMap<FlowId, FlowSlice>,
    pub ues: BTreeMap<UeId, UeSlice>,
}

/// One CSV row: a flow in a window, with its UE's radio figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowRow {
    pub t_s: u64,
    pub flow_id: FlowId,
    pub throughput_bps: f64,
    pub p50_latency_ms: Option<f64>,
    pub p99_latency_ms: Option<f64>,
    pub ue_id: UeId,
    pub rbs_used: u64,
    pub rbs_unused: u64,
    pub rlc_bytes: f64,
}

fn ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

impl MetricsStore {
    pub fn new(window_us: Micros) -> Self {
        MetricsStore {
            window_us,
            windows: Vec::new(),
            counters: BTreeMap::new(),
            flow_ue: BTreeMap::new(),
            conservation_failures: Vec::new(),
            audits: 0,
        }
    }

    pub fn register_flow(&mut self, flow: FlowId, ue: UeId) {
        self.flow_ue.insert(flow, ue);
        self.counters.entry(flow).or_default();
    }

    fn window(&mut self, t: Micros) -> &mut Window {
        let i = (t / self.window_us) as usize;
        if self.windows.len() <= i {
            self.windows.resize_with(i + 1, Window::default);
        }
        &mut self.windows[i]
    }

    pub fn record_emit(&mut self, flow: FlowId) {
        self.counters.entry(flow).or_default().emitted += 1;
    }

    pub fn record_drop(&mut self, flow: FlowId, cause: DropCause) {
        *self
            .counters
            .entry(flow)
            .or_default()
            .drops
            .entry(cause)
            .or_default() += 1;
    }

    pub fn record_delivery(&mut self, flow: FlowId, bytes: u32, latency_us: Micros, at: Micros) {
        let c = self.counters.entry(flow).or_default();
        c.delivered += 1;
        c.delivered_bytes += bytes as u64;
        let w = self.window(at).flows.entry(flow).or_default();
        w.delivered_bits += bytes as u64 * 8;
        w.latencies_us.push(latency_us);
    }

    pub fn record_slot(&mut self, at: Micros, alloc: &AllocationMap) {
        let w = self.window(at);
        w.dl_slots += 1;
        w.unused_rbs += alloc.unused_rbs as u64;
        for (ue, &n) in &alloc.per_ue {
            w.ues.entry(*ue).or_default().rbs += n as u64;
        }
    }

    pub fn sample_rlc(&mut self, at: Micros, ue: UeId, bytes: u64) {
        let u = self.window(at).ues.entry(ue).or_default();
        u.rlc_bytes_sum += bytes;
        u.rlc_samples += 1;
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    /// Aggregates windows that lie entirely inside `[start, end)`.
    pub fn snapshot(&self, start: Micros, end: Micros) -> MetricsSlice {
        let first = start.div_ceil(self.window_us) as usize;
        let last = ((end / self.window_us) as usize).min(self.windows.len());
        let span = self.windows.get(first..last).unwrap_or(&[]);
        let span_s = (last.saturating_sub(first) as u64 * self.window_us) as f64 / 1e6;

        let mut flows = BTreeMap::new();
        for &flow in self.flow_ue.keys() {
            let mut bits = 0;
            let mut lat: Vec<Micros> = Vec::new();
            for w in span {
                if let Some(f) = w.flows.get(&flow) {
                    bits += f.delivered_bits;
                    lat.extend_from_slice(&f.latencies_us);
                }
            }
            lat.sort_unstable();
            flows.insert(
                flow,
                FlowSlice {
                    throughput_bps: if span_s > 0.0 { bits as f64 / span_s } else { 0.0 },
                    delivered_packets: lat.len() as u64,
                    p50_latency_ms: percentile(&lat, 50.0).map(ms),
                    p99_latency_ms: percentile(&lat, 99.0).map(ms),
                },
            );
        }
        let dl_slots: u64 = span.iter().map(|w| w.dl_slots).sum();
        let mut ues = BTreeMap::new();
        for &ue in self.flow_ue.values() {
            let (rbs, sum, n) = span.iter().filter_map(|w| w.ues.get(&ue)).fold((0, 0, 0), |a, u| {
                (a.0 + u.rbs, a.1 + u.rlc_bytes_sum, a.2 + u.rlc_samples)
            });
            ues.insert(
                ue,
                UeSlice {
                    rbs_per_slot: if dl_slots > 0 { rbs as f64 / dl_slots as f64 } else { 0.0 },
                    rlc_bytes: if n > 0 { sum as f64 / n as f64 } else { 0.0 },
                },
            );
        }
        let unused: u64 = span.iter().map(|w| w.unused_rbs).sum();
        MetricsSlice {
            start_us: first as Micros * self.window_us,
            end_us: last as Micros * self.window_us,
            dl_slots,
            unused_rbs_per_slot: if dl_slots > 0 { unused as f64 / dl_slots as f64 } else { 0.0 },
            flows,
            ues,
        }
    }

    /// Per-window rows for every registered flow, up to `end`.
    pub fn rows(&self, end: Micros) -> Vec<WindowRow> {
        let n = ((end / self.window_us) as usize).min(self.windows.len());
        let secs = self.window_us as f64 / 1e6;
        let mut rows = Vec::new();
        for (i, w) in self.windows.iter().take(n).enumerate() {
            for (&flow, &ue) in &self.flow_ue {
                let (bits, mut lat) = w
                    .flows
                    .get(&flow)
                    .map_or((0, Vec::new()), |f| (f.delivered_bits, f.latencies_us.clone()));
                lat.sort_unstable();
                let u = w.ues.get(&ue);
                rows.push(WindowRow {
                    t_s: i as u64 * self.window_us / 1_000_000,
                    flow_id: flow,
                    throughput_bps: bits as f64 / secs,
                    p50_latency_ms: percentile(&lat, 50.0).map(ms),
                    p99_latency_ms: percentile(&lat, 99.0).map(ms),
                    ue_id: ue,
                    rbs_used: u.map_or(0, |u| u.rbs),
                    rbs_unused: w.unused_rbs,
                    rlc_bytes: u.map_or(0.0, |u| {
                        if u.rlc_samples > 0 {
                            u.rlc_bytes_sum as f64 / u.rlc_samples as f64
                        } else {
                            0.0
                        }
                    }),
                });
            }
        }
        rows
    }
}
