//! Deterministic discrete-event simulation of a single bottleneck link with
//! a drop-tail FIFO queue, competing traffic sources, and a reliable
//! in-order transport for the keystroke flow.
//!
//! The keystroke flow is flow 0. Dropped keystroke packets are retransmitted
//! after an RTO that doubles per retry; the receiver releases keystroke
//! packets to the application strictly in sequence order, so a retransmitted
//! packet head-of-line blocks its successors. Cross-traffic drops are final.
//!
//! Everything is integer microseconds. A run is fully deterministic for a
//! fixed config and input; simultaneous events process in (time, kind,
//! flow, seq) order with departures first.

mod channel;
mod sources;

pub use channel::{run_channel, run_channel_with_log, KEYSTROKE_FLOW};
pub use sources::{generate_cbr, generate_onoff};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One packet offered to the channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub flow_id: u32,
    pub seq: u64,
    pub size_bytes: u32,
    /// Creation time; retransmissions keep the original.
    pub inject_us: u64,
    /// Index into the keystroke event list; cross-traffic packets carry none.
    pub payload_ref: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Cbr,
    OnOff,
}

/// A constant-rate or bursty on/off traffic source.
///
/// CBR sources emit `size_bytes` packets every `10^6 / rate_pps`
/// microseconds (rounded half up) from `start_us` until `stop_us`.
/// On/off sources gate the same packet grid by alternating phases with
/// exponentially distributed durations (means `on_ms` / `off_ms`), drawn
/// from `phase_seed`; with `off_ms = 0` the source degenerates to CBR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSourceSpec {
    pub kind: SourceKind,
    pub rate_pps: f64,
    pub size_bytes: u32,
    #[serde(default)]
    pub on_ms: f64,
    #[serde(default)]
    pub off_ms: f64,
    #[serde(default)]
    pub start_us: u64,
    #[serde(default = "default_stop_us")]
    pub stop_us: u64,
    #[serde(default)]
    pub phase_seed: u64,
}

fn default_stop_us() -> u64 {
    30_000_000
}

impl TrafficSourceSpec {
    pub fn validate(&self) -> Result<(), NetsimError> {
        if !self.rate_pps.is_finite() || self.rate_pps <= 0.0 {
            return Err(NetsimError::InvalidConfig("rate_pps must be > 0".into()));
        }
        if self.size_bytes < 1 {
            return Err(NetsimError::InvalidConfig("size_bytes must be >= 1".into()));
        }
        if self.kind == SourceKind::OnOff {
            if !self.on_ms.is_finite() || self.on_ms <= 0.0 {
                return Err(NetsimError::InvalidConfig("on_ms must be > 0".into()));
            }
            if !self.off_ms.is_finite() || self.off_ms < 0.0 {
                return Err(NetsimError::InvalidConfig("off_ms must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Nominal offered bitrate while emitting, in bits per second.
    pub fn peak_bps(&self) -> f64 {
        self.rate_pps * self.size_bytes as f64 * 8.0
    }
}

/// Bottleneck link and reliable-flow parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub bottleneck_bps: u64,
    /// Drop-tail buffer, counted in waiting packets (the one in service
    /// is excluded).
    pub queue_capacity_pkts: usize,
    pub base_propagation_us: u64,
    #[serde(default)]
    pub sources: Vec<TrafficSourceSpec>,
    #[serde(default = "default_rto_initial_us")]
    pub rto_initial_us: u64,
    #[serde(default = "default_rto_max_us")]
    pub rto_max_us: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rto_initial_us() -> u64 {
    200_000
}

fn default_rto_max_us() -> u64 {
    2_000_000
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            bottleneck_bps: 1_000_000,
            queue_capacity_pkts: 50,
            base_propagation_us: 100,
            sources: Vec::new(),
            rto_initial_us: default_rto_initial_us(),
            rto_max_us: default_rto_max_us(),
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), NetsimError> {
        if self.bottleneck_bps == 0 {
            return Err(NetsimError::InvalidConfig("bottleneck_bps must be > 0".into()));
        }
        if self.queue_capacity_pkts < 1 {
            return Err(NetsimError::InvalidConfig(
                "queue_capacity_pkts must be >= 1".into(),
            ));
        }
        if self.rto_initial_us == 0 {
            return Err(NetsimError::InvalidConfig("rto_initial_us must be > 0".into()));
        }
        if self.rto_max_us < self.rto_initial_us {
            return Err(NetsimError::InvalidConfig(
                "rto_max_us must be >= rto_initial_us".into(),
            ));
        }
        for s in &self.sources {
            s.validate()?;
        }
        Ok(())
    }
}

/// In-order release of one keystroke packet to the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub seq: u64,
    pub deliver_us: u64,
    pub link_delay_us: u64,
    pub retransmitted: bool,
}

/// Aggregate channel measurements for one run. Delay and jitter cover the
/// keystroke flow only; loss counts link-layer drops across all flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub avg_delay_us: f64,
    pub sd_delay_us: f64,
    /// Mean absolute difference of consecutive keystroke delays.
    pub jitter_us: f64,
    pub link_loss_pct: f64,
    pub utilization: f64,
    pub per_flow_offered_bps: BTreeMap<u32, f64>,
    pub offered_packets: u64,
    pub dropped_packets: u64,
    pub retransmitted_packets: u64,
    pub active_duration_us: u64,
}

/// Raw link-layer counters accumulated during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkTally {
    pub offered_packets: u64,
    pub dropped_packets: u64,
    pub delivered_bits: u64,
    pub per_flow_offered_bits: BTreeMap<u32, u64>,
    pub first_inject_us: Option<u64>,
    pub last_depart_us: u64,
}

/// Compute run statistics from deliveries and link counters.
pub fn channel_stats(
    deliveries: &[Delivery],
    tally: &LinkTally,
    config: &ChannelConfig,
) -> ChannelStats {
    let delays: Vec<f64> = deliveries.iter().map(|d| d.link_delay_us as f64).collect();
    let avg = if delays.is_empty() {
        0.0
    } else {
        delays.iter().sum::<f64>() / delays.len() as f64
    };
    let sd = if delays.is_empty() {
        0.0
    } else {
        (delays.iter().map(|d| (d - avg) * (d - avg)).sum::<f64>() / delays.len() as f64).sqrt()
    };
    let jitter = if delays.len() < 2 {
        0.0
    } else {
        delays.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (delays.len() - 1) as f64
    };
    let loss_pct = if tally.offered_packets == 0 {
        0.0
    } else {
        tally.dropped_packets as f64 / tally.offered_packets as f64 * 100.0
    };
    let active_us = tally
        .last_depart_us
        .saturating_sub(tally.first_inject_us.unwrap_or(0));
    let utilization = if active_us == 0 {
        0.0
    } else {
        tally.delivered_bits as f64 / (config.bottleneck_bps as f64 * active_us as f64 / 1e6)
    };
    let per_flow_offered_bps = tally
        .per_flow_offered_bits
        .iter()
        .map(|(&flow, &bits)| {
            let bps = if active_us == 0 {
                0.0
            } else {
                bits as f64 * 1e6 / active_us as f64
            };
            (flow, bps)
        })
        .collect();
    ChannelStats {
        avg_delay_us: avg,
        sd_delay_us: sd,
        jitter_us: jitter,
        link_loss_pct: loss_pct,
        utilization,
        per_flow_offered_bps,
        offered_packets: tally.offered_packets,
        dropped_packets: tally.dropped_packets,
        retransmitted_packets: deliveries.iter().filter(|d| d.retransmitted).count() as u64,
        active_duration_us: active_us,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogEvent {
    Inject,
    Enqueue,
    Drop,
    Depart,
    Deliver,
    Retransmit,
}

impl LogEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            LogEvent::Inject => "inject",
            LogEvent::Enqueue => "enqueue",
            LogEvent::Drop => "drop",
            LogEvent::Depart => "depart",
            LogEvent::Deliver => "deliver",
            LogEvent::Retransmit => "retransmit",
        }
    }
}

/// One row of the optional event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_us: u64,
    pub event: LogEvent,
    pub flow_id: u32,
    pub seq: u64,
    pub queue_len: usize,
}

pub fn write_event_log_csv(entries: &[LogEntry]) -> String {
    let mut out = String::from("time_us,event,flow_id,seq,queue_len\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.time_us,
            e.event.as_str(),
            e.flow_id,
            e.seq,
            e.queue_len
        ));
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum NetsimError {
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),
    #[error("keystroke packets must be ordered by inject time with strictly increasing seq")]
    UnorderedKeystrokes,
}

/// Transmission time of one packet on the bottleneck, in microseconds,
/// rounded half up with a 1 us floor.
pub(crate) fn service_us(size_bytes: u32, bps: u64) -> u64 {
    let n = size_bytes as u128 * 8 * 1_000_000;
    let b = bps as u128;
    let q = n / b;
    let r = n % b;
    ((q + u128::from(r * 2 >= b)) as u64).max(1)
}

pub(crate) fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn service_time_arithmetic() {
        assert_eq!(service_us(100, 1_000_000), 800);
        assert_eq!(service_us(1024, 1_000_000), 8192);
        assert_eq!(service_us(1460, 100_000_000), 117); // 116.8 rounds up
        assert_eq!(service_us(1, 100_000_000), 1); // floored at 1 us
    }

    #[test]
    fn stats_jitter_definition() {
        let deliveries = vec![
            Delivery {
                seq: 0,
                deliver_us: 1_000,
                link_delay_us: 1_000,
                retransmitted: false,
            },
            Delivery {
                seq: 1,
                deliver_us: 4_000,
                link_delay_us: 3_000,
                retransmitted: false,
            },
            Delivery {
                seq: 2,
                deliver_us: 6_000,
                link_delay_us: 2_000,
                retransmitted: false,
            },
        ];
        let stats = channel_stats(&deliveries, &LinkTally::default(), &ChannelConfig::default());
        assert!((stats.jitter_us - 1_500.0).abs() < 1e-9);
        assert!((stats.avg_delay_us - 2_000.0).abs() < 1e-9);
    }

    #[test]
    fn stats_loss_percentage_arithmetic() {
        let tally = LinkTally {
            offered_packets: 1_000,
            dropped_packets: 36,
            ..Default::default()
        };
        let stats = channel_stats(&[], &tally, &ChannelConfig::default());
        assert!((stats.link_loss_pct - 3.6).abs() < 1e-12);
    }

    #[test]
    fn stats_constant_delays_have_zero_spread() {
        let deliveries: Vec<Delivery> = (0..10)
            .map(|i| Delivery {
                seq: i,
                deliver_us: i * 10_000 + 900,
                link_delay_us: 900,
                retransmitted: false,
            })
            .collect();
        let stats = channel_stats(&deliveries, &LinkTally::default(), &ChannelConfig::default());
        assert_eq!(stats.sd_delay_us, 0.0);
        assert_eq!(stats.jitter_us, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ChannelConfig::default();
        assert!(c.validate().is_ok());
        c.queue_capacity_pkts = 0;
        assert!(c.validate().is_err());
        c = ChannelConfig {
            bottleneck_bps: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = ChannelConfig::default();
        c.sources.push(TrafficSourceSpec {
            kind: SourceKind::OnOff,
            rate_pps: 10.0,
            size_bytes: 100,
            on_ms: 0.0,
            off_ms: 10.0,
            start_us: 0,
            stop_us: 1_000_000,
            phase_seed: 0,
        });
        assert!(c.validate().is_err());
    }
}
