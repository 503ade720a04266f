//! Cross-traffic packet generation: constant bit rate and gated on/off.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{round_half_up, Packet, SourceKind, TrafficSourceSpec};

/// Alternating on/off windows with exponentially distributed durations.
/// The source emits on its CBR grid only while inside an ON window, so a
/// zero off time reproduces plain CBR exactly.
struct OnOffGate {
    rng: ChaCha8Rng,
    on_mean_ms: f64,
    off_mean_ms: f64,
    on_start: u64,
    on_end: u64,
}

impl OnOffGate {
    fn new(spec: &TrafficSourceSpec, extra_seed: u64) -> Self {
        let mut gate = Self {
            rng: ChaCha8Rng::seed_from_u64(spec.phase_seed.wrapping_add(extra_seed)),
            on_mean_ms: spec.on_ms,
            off_mean_ms: spec.off_ms,
            on_start: spec.start_us,
            on_end: spec.start_us,
        };
        gate.on_end = gate.on_start + gate.draw_us(gate.on_mean_ms);
        gate
    }

    fn draw_us(&mut self, mean_ms: f64) -> u64 {
        if mean_ms == 0.0 {
            return 0;
        }
        let exp = Exp::new(1.0 / mean_ms).expect("positive finite mean");
        round_half_up(exp.sample(&mut self.rng) * 1_000.0)
    }

    fn admits(&mut self, t: u64) -> bool {
        while t >= self.on_end {
            let off = self.draw_us(self.off_mean_ms);
            // Both draws rounding to zero would stall the window; keep at
            // least 1 us of progress per phase pair.
            let on = self.draw_us(self.on_mean_ms).max(u64::from(off == 0));
            self.on_start = self.on_end + off;
            self.on_end = self.on_start + on;
        }
        t >= self.on_start
    }
}

/// Lazily yields a source's packets in inject order. Used both by the
/// standalone generators and by the channel simulation, so the two always
/// agree packet-for-packet.
pub(crate) struct SourceStream {
    flow_id: u32,
    size_bytes: u32,
    interval_us: u64,
    start_us: u64,
    stop_us: u64,
    grid_k: u64,
    seq: u64,
    gate: Option<OnOffGate>,
}

impl SourceStream {
    pub(crate) fn new(spec: &TrafficSourceSpec, flow_id: u32, extra_seed: u64) -> Self {
        let gate = match spec.kind {
            SourceKind::Cbr => None,
            SourceKind::OnOff => Some(OnOffGate::new(spec, extra_seed)),
        };
        Self {
            flow_id,
            size_bytes: spec.size_bytes,
            interval_us: round_half_up(1e6 / spec.rate_pps).max(1),
            start_us: spec.start_us,
            stop_us: spec.stop_us,
            grid_k: 0,
            seq: 0,
            gate,
        }
    }
}

impl Iterator for SourceStream {
    type Item = Packet;

    fn next(&mut self) -> Option<Packet> {
        loop {
            let t = self
                .start_us
                .checked_add(self.grid_k.checked_mul(self.interval_us)?)?;
            if t >= self.stop_us {
                return None;
            }
            self.grid_k += 1;
            if let Some(gate) = &mut self.gate {
                if !gate.admits(t) {
                    continue;
                }
            }
            let seq = self.seq;
            self.seq += 1;
            return Some(Packet {
                flow_id: self.flow_id,
                seq,
                size_bytes: self.size_bytes,
                inject_us: t,
                payload_ref: None,
            });
        }
    }
}

/// All packets of a CBR source up to `min(stop_us, horizon_us)`.
pub fn generate_cbr(spec: &TrafficSourceSpec, flow_id: u32, horizon_us: u64) -> Vec<Packet> {
    assert_eq!(spec.kind, SourceKind::Cbr, "generate_cbr requires a CBR spec");
    let mut bounded = spec.clone();
    bounded.stop_us = bounded.stop_us.min(horizon_us);
    SourceStream::new(&bounded, flow_id, 0).collect()
}

/// All packets of an on/off source up to `min(stop_us, horizon_us)`,
/// deterministic for the spec's phase seed.
pub fn generate_onoff(spec: &TrafficSourceSpec, flow_id: u32, horizon_us: u64) -> Vec<Packet> {
    assert_eq!(spec.kind, SourceKind::OnOff, "generate_onoff requires an on/off spec");
    let mut bounded = spec.clone();
    bounded.stop_us = bounded.stop_us.min(horizon_us);
    SourceStream::new(&bounded, flow_id, 0).collect()
}
