//! Traffic sources: constant bit rate and a window-based AIMD sender.

use serde::Serialize;

use crate::model::Micros;

/// Header bytes added to an AIMD segment on the wire.
pub const TCP_IP_HEADER_BYTES: u32 = 60;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CbrState {
    pub rate_bps: u64,
    pub packet_bytes: u32,
    pub sent: u64,
    next_ns: u128,
}

/// Reno-style congestion avoidance with no slow start. Window and flight
/// size are counted in payload bytes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AimdState {
    pub mss_bytes: u32,
    pub cwnd_bytes: f64,
    pub in_flight_bytes: u64,
    pub next_seq: u64,
    /// Losses of segments up to this sequence belong to a window that has
    /// already been halved.
    recover_seq: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SourceState {
    Cbr(CbrState),
    Aimd(AimdState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceEvent {
    Tick,
    Ack { seq: u64 },
    Loss { seq: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    pub seq: u64,
    pub size_bytes: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SourceOutput {
    pub emitted: Vec<Emission>,
    /// When the source wants its next tick.
    pub next_tick: Option<Micros>,
}

impl SourceState {
    pub fn cbr(rate_bps: u64, packet_bytes: u32, start: Micros) -> Self {
        SourceState::Cbr(CbrState {
            rate_bps,
            packet_bytes,
            sent: 0,
            next_ns: start as u128 * 1000,
        })
    }

    pub fn aimd(mss_bytes: u32, initial_cwnd_mss: u32) -> Self {
        SourceState::Aimd(AimdState {
            mss_bytes,
            cwnd_bytes: (mss_bytes * initial_cwnd_mss) as f64,
            in_flight_bytes: 0,
            next_seq: 0,
            recover_seq: None,
        })
    }

    pub fn wire_bytes(&self) -> u32 {
        match self {
            SourceState::Cbr(c) => c.packet_bytes,
            SourceState::Aimd(a) => a.mss_bytes + TCP_IP_HEADER_BYTES,
        }
    }
}

impl AimdState {
    pub fn on_ack(&mut self) {
        let mss = self.mss_bytes as f64;
        self.cwnd_bytes += mss * mss / self.cwnd_bytes;
    }

    /// Halves the window once per window of data.
    pub fn on_loss(&mut self, seq: u64) {
        if self.recover_seq.is_some_and(|r| seq <= r) {
            return;
        }
        self.cwnd_bytes = (self.cwnd_bytes / 2.0).max(self.mss_bytes as f64);
        self.recover_seq = Some(self.next_seq.saturating_sub(1));
    }

    fn fill_window(&mut self, out: &mut Vec<Emission>) {
        let mss = self.mss_bytes as u64;
        while (self.in_flight_bytes + mss) as f64 <= self.cwnd_bytes + 1e-9 {
            out.push(Emission {
                seq: self.next_seq,
                size_bytes: self.mss_bytes + TCP_IP_HEADER_BYTES,
            });
            self.next_seq += 1;
            self.in_flight_bytes += mss;
        }
    }
}

/// Advances a source by one event and returns what it sends in response.
pub fn source_on_event(state: &mut SourceState, event: SourceEvent, now: Micros) -> SourceOutput {
    let mut out = SourceOutput::default();
    match state {
        SourceState::Cbr(c) => {
            if event == SourceEvent::Tick {
                out.emitted.push(Emission {
                    seq: c.sent,
                    size_bytes: c.packet_bytes,
                });
                c.sent += 1;
                let gap_ns = c.packet_bytes as u128 * 8 * 1_000_000_000 / c.rate_bps as u128;
                c.next_ns = c.next_ns.max(now as u128 * 1000) + gap_ns;
                out.next_tick = Some(c.next_ns.div_ceil(1000) as Micros);
            }
        }
        SourceState::Aimd(a) => {
            let mss = a.mss_bytes as u64;
            match event {
                SourceEvent::Tick => {}
                SourceEvent::Ack { .. } => {
                    a.in_flight_bytes = a.in_flight_bytes.saturating_sub(mss);
                    a.on_ack();
                }
                SourceEvent::Loss { seq } => {
                    a.in_flight_bytes = a.in_flight_bytes.saturating_sub(mss);
                    a.on_loss(seq);
                }
            }
            a.fill_window(&mut out.emitted);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aimd(state: &SourceState) -> &AimdState {
        match state {
            SourceState::Aimd(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn aimd_initial_window_and_growth() {
        let mut s = SourceState::aimd(1440, 10);
        let out = source_on_event(&mut s, SourceEvent::Tick, 0);
        assert_eq!(out.emitted.len(), 10);
        assert_eq!(out.emitted[0].size_bytes, 1500);
        let out = source_on_event(&mut s, SourceEvent::Ack { seq: 0 }, 1);
        assert!((aimd(&s).cwnd_bytes / 1440.0 - 10.1).abs() < 1e-9);
        assert_eq!(out.emitted.len(), 1);
    }

    #[test]
    fn aimd_halves_once_per_window() {
        let mut s = SourceState::aimd(1440, 20);
        source_on_event(&mut s, SourceEvent::Tick, 0);
        source_on_event(&mut s, SourceEvent::Loss { seq: 3 }, 1);
        assert!((aimd(&s).cwnd_bytes / 1440.0 - 10.0).abs() < 1e-9);
        source_on_event(&mut s, SourceEvent::Loss { seq: 5 }, 2);
        assert!((aimd(&s).cwnd_bytes / 1440.0 - 10.0).abs() < 1e-9);
        source_on_event(&mut s, SourceEvent::Loss { seq: 20 }, 3);
        assert!((aimd(&s).cwnd_bytes / 1440.0 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn aimd_floor_is_one_mss() {
        let mut s = SourceState::aimd(1440, 1);
        source_on_event(&mut s, SourceEvent::Tick, 0);
        source_on_event(&mut s, SourceEvent::Loss { seq: 0 }, 1);
        assert_eq!(aimd(&s).cwnd_bytes, 1440.0);
    }

    #[test]
    fn cbr_spacing() {
        let mut s = SourceState::cbr(8_000_000, 1000, 0);
        let out = source_on_event(&mut s, SourceEvent::Tick, 0);
        assert_eq!(out.emitted.len(), 1);
        assert_eq!(out.next_tick, Some(1000));
        let out = source_on_event(&mut s, SourceEvent::Tick, 1000);
        assert_eq!(out.next_tick, Some(2000));
    }
}
