//! Event-driven bottleneck channel with a reliable in-order keystroke flow.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use super::sources::SourceStream;
use super::{
    channel_stats, service_us, ChannelConfig, ChannelStats, Delivery, LinkTally, LogEntry,
    LogEvent, NetsimError, Packet,
};

/// Flow id reserved for the keystroke flow.
pub const KEYSTROKE_FLOW: u32 = 0;

// Simultaneous events process departures first (a freed slot is usable by
// an arrival at the same instant), then scheduled offers ordered by
// (flow, seq), then retransmissions.
const RANK_DEPART: u8 = 0;
const RANK_OFFER: u8 = 1;
const RANK_RETRANSMIT: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct EvKey {
    time: u64,
    rank: u8,
    flow: u32,
    seq: u64,
    counter: u64,
}

#[derive(Debug)]
enum EvKind {
    Depart,
    Offer(SimPkt),
    Retransmit(SimPkt),
}

#[derive(Debug)]
struct Ev {
    key: EvKey,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

#[derive(Debug, Clone)]
struct SimPkt {
    flow: u32,
    seq: u64,
    size_bytes: u32,
    /// Slot in the keystroke packet list, for recording the link arrival.
    slot: Option<usize>,
    /// Position in `sources` for pulling the follow-up packet.
    source_idx: Option<usize>,
    retries: u32,
}

struct Sim<'a> {
    config: &'a ChannelConfig,
    heap: BinaryHeap<Reverse<Ev>>,
    counter: u64,
    waiting: VecDeque<SimPkt>,
    in_service: Option<SimPkt>,
    sources: Vec<SourceStream>,
    tally: LinkTally,
    /// Per keystroke slot: (link arrival at the receiver, was retransmitted).
    arrivals: Vec<Option<(u64, bool)>>,
    remaining_keystrokes: usize,
    log: Option<Vec<LogEntry>>,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: u64, rank: u8, flow: u32, seq: u64, kind: EvKind) {
        let counter = self.counter;
        self.counter += 1;
        self.heap.push(Reverse(Ev {
            key: EvKey {
                time,
                rank,
                flow,
                seq,
                counter,
            },
            kind,
        }));
    }

    fn record(&mut self, time_us: u64, event: LogEvent, pkt: &SimPkt) {
        if let Some(log) = &mut self.log {
            log.push(LogEntry {
                time_us,
                event,
                flow_id: pkt.flow,
                seq: pkt.seq,
                queue_len: self.waiting.len(),
            });
        }
    }

    fn start_service(&mut self, pkt: SimPkt, now: u64) {
        let depart = now + service_us(pkt.size_bytes, self.config.bottleneck_bps);
        self.push(depart, RANK_DEPART, pkt.flow, pkt.seq, EvKind::Depart);
        self.in_service = Some(pkt);
    }

    fn rto_us(&self, retries: u32) -> u64 {
        self.config
            .rto_initial_us
            .checked_shl(retries)
            .unwrap_or(u64::MAX)
            .min(self.config.rto_max_us)
    }

    fn offer(&mut self, pkt: SimPkt, now: u64, retransmission: bool) {
        self.tally.offered_packets += 1;
        *self.tally.per_flow_offered_bits.entry(pkt.flow).or_insert(0) +=
            pkt.size_bytes as u64 * 8;
        if self.tally.first_inject_us.is_none() {
            self.tally.first_inject_us = Some(now);
        }
        self.record(
            now,
            if retransmission { LogEvent::Retransmit } else { LogEvent::Inject },
            &pkt,
        );
        if self.in_service.is_none() {
            self.record(now, LogEvent::Enqueue, &pkt);
            self.start_service(pkt, now);
        } else if self.waiting.len() < self.config.queue_capacity_pkts {
            self.waiting.push_back(pkt.clone());
            self.record(now, LogEvent::Enqueue, &pkt);
        } else {
            self.tally.dropped_packets += 1;
            self.record(now, LogEvent::Drop, &pkt);
            if pkt.flow == KEYSTROKE_FLOW {
                let mut retry = pkt;
                let rto = self.rto_us(retry.retries);
                retry.retries += 1;
                let (seq, flow) = (retry.seq, retry.flow);
                self.push(now + rto, RANK_RETRANSMIT, flow, seq, EvKind::Retransmit(retry));
            }
        }
    }

    fn depart(&mut self, now: u64) {
        let pkt = self.in_service.take().expect("depart without service");
        self.tally.delivered_bits += pkt.size_bytes as u64 * 8;
        self.tally.last_depart_us = now;
        self.record(now, LogEvent::Depart, &pkt);
        if pkt.flow == KEYSTROKE_FLOW {
            let slot = pkt.slot.expect("keystroke packet without slot");
            let arrival = now + self.config.base_propagation_us;
            debug_assert!(self.arrivals[slot].is_none(), "duplicate link delivery");
            self.arrivals[slot] = Some((arrival, pkt.retries > 0));
            self.remaining_keystrokes -= 1;
        }
        if let Some(next) = self.waiting.pop_front() {
            self.start_service(next, now);
        }
    }

    fn pull_source(&mut self, idx: usize) {
        if let Some(p) = self.sources[idx].next() {
            let pkt = SimPkt {
                flow: p.flow_id,
                seq: p.seq,
                size_bytes: p.size_bytes,
                slot: None,
                source_idx: Some(idx),
                retries: 0,
            };
            self.push(p.inject_us, RANK_OFFER, pkt.flow, pkt.seq, EvKind::Offer(pkt));
        }
    }

    fn run(&mut self, keystroke_packets: &[Packet]) {
        for (slot, p) in keystroke_packets.iter().enumerate() {
            let pkt = SimPkt {
                flow: KEYSTROKE_FLOW,
                seq: p.seq,
                size_bytes: p.size_bytes,
                slot: Some(slot),
                source_idx: None,
                retries: 0,
            };
            self.push(p.inject_us, RANK_OFFER, KEYSTROKE_FLOW, p.seq, EvKind::Offer(pkt));
        }
        for idx in 0..self.sources.len() {
            self.pull_source(idx);
        }
        while let Some(Reverse(ev)) = self.heap.pop() {
            let now = ev.key.time;
            match ev.kind {
                EvKind::Depart => self.depart(now),
                EvKind::Offer(pkt) => {
                    let source_idx = pkt.source_idx;
                    self.offer(pkt, now, false);
                    if let Some(idx) = source_idx {
                        self.pull_source(idx);
                    }
                }
                EvKind::Retransmit(pkt) => self.offer(pkt, now, true),
            }
            // A run ends once the keystroke flow is fully delivered; with no
            // keystroke flow it drains every scheduled packet instead.
            if !keystroke_packets.is_empty() && self.remaining_keystrokes == 0 {
                break;
            }
        }
    }
}

fn check_keystroke_packets(packets: &[Packet]) -> Result<(), NetsimError> {
    for w in packets.windows(2) {
        if w[1].inject_us < w[0].inject_us || w[1].seq <= w[0].seq {
            return Err(NetsimError::UnorderedKeystrokes);
        }
    }
    if packets.iter().any(|p| p.flow_id != KEYSTROKE_FLOW) {
        return Err(NetsimError::UnorderedKeystrokes);
    }
    Ok(())
}

fn execute(
    config: &ChannelConfig,
    keystroke_packets: &[Packet],
    with_log: bool,
) -> Result<(Vec<Delivery>, ChannelStats, Vec<LogEntry>), NetsimError> {
    config.validate()?;
    check_keystroke_packets(keystroke_packets)?;
    let sources = config
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| SourceStream::new(s, i as u32 + 1, config.seed))
        .collect();
    let mut sim = Sim {
        config,
        heap: BinaryHeap::new(),
        counter: 0,
        waiting: VecDeque::new(),
        in_service: None,
        sources,
        tally: LinkTally::default(),
        arrivals: vec![None; keystroke_packets.len()],
        remaining_keystrokes: keystroke_packets.len(),
        log: with_log.then(Vec::new),
    };
    sim.run(keystroke_packets);

    let mut deliveries = Vec::with_capacity(keystroke_packets.len());
    let mut prev_deliver: Option<u64> = None;
    for (slot, p) in keystroke_packets.iter().enumerate() {
        let (arrival, retransmitted) =
            sim.arrivals[slot].expect("reliable flow delivers every packet");
        // In-order release: a packet never overtakes its predecessors, and
        // releases are strictly increasing (1 us receiver quantum).
        let deliver_us = match prev_deliver {
            None => arrival,
            Some(prev) => arrival.max(prev + 1),
        };
        prev_deliver = Some(deliver_us);
        deliveries.push(Delivery {
            seq: p.seq,
            deliver_us,
            link_delay_us: deliver_us - p.inject_us,
            retransmitted,
        });
    }
    let stats = channel_stats(&deliveries, &sim.tally, config);
    let mut log = sim.log.unwrap_or_default();
    if with_log {
        for d in &deliveries {
            log.push(LogEntry {
                time_us: d.deliver_us,
                event: LogEvent::Deliver,
                flow_id: KEYSTROKE_FLOW,
                seq: d.seq,
                queue_len: 0,
            });
        }
        log.sort_by_key(|e| e.time_us); // stable: same-time entries keep order
    }
    Ok((deliveries, stats, log))
}

/// Simulate one channel pass. Returns one delivery per keystroke packet,
/// in sequence order, plus statistics over the whole run.
pub fn run_channel(
    config: &ChannelConfig,
    keystroke_packets: &[Packet],
) -> Result<(Vec<Delivery>, ChannelStats), NetsimError> {
    let (deliveries, stats, _) = execute(config, keystroke_packets, false)?;
    Ok((deliveries, stats))
}

/// Like [`run_channel`], also returning the event log.
pub fn run_channel_with_log(
    config: &ChannelConfig,
    keystroke_packets: &[Packet],
) -> Result<(Vec<Delivery>, ChannelStats, Vec<LogEntry>), NetsimError> {
    execute(config, keystroke_packets, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{SourceKind, TrafficSourceSpec};

    fn key_packets(times_us: &[u64], size: u32) -> Vec<Packet> {
        times_us
            .iter()
            .enumerate()
            .map(|(i, &t)| Packet {
                flow_id: KEYSTROKE_FLOW,
                seq: i as u64,
                size_bytes: size,
                inject_us: t,
                payload_ref: Some(i),
            })
            .collect()
    }

    fn idle_config() -> ChannelConfig {
        ChannelConfig {
            bottleneck_bps: 1_000_000,
            queue_capacity_pkts: 50,
            base_propagation_us: 0,
            sources: Vec::new(),
            rto_initial_us: 200_000,
            rto_max_us: 2_000_000,
            seed: 0,
        }
    }

    #[test]
    fn single_packet_serialization_delay() {
        let (deliveries, stats) = run_channel(&idle_config(), &key_packets(&[0], 100)).unwrap();
        assert_eq!(deliveries.len(), 1);
        assert_eq!(deliveries[0].link_delay_us, 800);
        assert_eq!(stats.dropped_packets, 0);
        assert_eq!(stats.link_loss_pct, 0.0);
    }

    #[test]
    fn simultaneous_packets_queue_fifo() {
        let (deliveries, _) = run_channel(&idle_config(), &key_packets(&[0, 0], 100)).unwrap();
        assert_eq!(deliveries[0].link_delay_us, 800);
        assert_eq!(deliveries[1].link_delay_us, 1_600);
    }

    #[test]
    fn constant_delay_channel_is_exact() {
        let mut config = idle_config();
        config.base_propagation_us = 2_500;
        let times: Vec<u64> = (0..40).map(|i| i * 5_000).collect();
        let (deliveries, stats) = run_channel(&config, &key_packets(&times, 100)).unwrap();
        for d in &deliveries {
            assert_eq!(d.link_delay_us, 800 + 2_500);
        }
        assert_eq!(stats.sd_delay_us, 0.0);
        assert_eq!(stats.jitter_us, 0.0);
        assert!((stats.avg_delay_us - 3_300.0).abs() < 1e-9);
    }

    #[test]
    fn cbr_offered_bitrate_matches_nominal_load() {
        let mut config = idle_config();
        config.sources.push(TrafficSourceSpec {
            kind: SourceKind::Cbr,
            rate_pps: 110.0,
            size_bytes: 1024,
            on_ms: 0.0,
            off_ms: 0.0,
            start_us: 0,
            stop_us: 10_000_000,
            phase_seed: 0,
        });
        let (_, stats) = run_channel(&config, &key_packets(&[0, 9_999_000], 100)).unwrap();
        let offered = stats.per_flow_offered_bps[&1];
        let nominal = 110.0 * 1024.0 * 8.0; // 901,120 b/s
        assert!(
            (offered - nominal).abs() / nominal < 0.01,
            "offered {offered} b/s vs nominal {nominal} b/s"
        );
    }

    #[test]
    fn under_capacity_cbr_never_drops() {
        let mut config = idle_config();
        config.queue_capacity_pkts = 2;
        // 85% of 1 Mbps, two equal streams.
        for _ in 0..2 {
            config.sources.push(TrafficSourceSpec {
                kind: SourceKind::Cbr,
                rate_pps: 51.88,
                size_bytes: 1024,
                on_ms: 0.0,
                off_ms: 0.0,
                start_us: 0,
                stop_us: 10_000_000,
                phase_seed: 0,
            });
        }
        let times: Vec<u64> = (0..50).map(|i| i * 150_000).collect();
        let (_, stats) = run_channel(&config, &key_packets(&times, 100)).unwrap();
        assert_eq!(stats.dropped_packets, 0);
    }

    #[test]
    fn forced_drops_retransmit_and_deliver_in_order() {
        let mut config = idle_config();
        config.queue_capacity_pkts = 1;
        config.rto_initial_us = 5_000;
        config.rto_max_us = 40_000;
        config.sources.push(TrafficSourceSpec {
            kind: SourceKind::Cbr,
            rate_pps: 400.0, // 1460 B at 400 pps = 4.7 Mb/s, far over capacity
            size_bytes: 1460,
            on_ms: 0.0,
            off_ms: 0.0,
            start_us: 0,
            stop_us: 300_000,
            phase_seed: 0,
        });
        let times: Vec<u64> = (0..30).map(|i| i * 10_000).collect();
        let (deliveries, stats) = run_channel(&config, &key_packets(&times, 100)).unwrap();
        assert_eq!(deliveries.len(), 30);
        assert!(stats.dropped_packets > 0);
        assert!(deliveries.iter().any(|d| d.retransmitted));
        for w in deliveries.windows(2) {
            assert!(w[1].deliver_us > w[0].deliver_us);
            assert!(w[1].seq > w[0].seq);
        }
        for d in &deliveries {
            assert!(d.deliver_us >= times[d.seq as usize]);
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let mut config = idle_config();
        config.queue_capacity_pkts = 3;
        config.sources.push(TrafficSourceSpec {
            kind: SourceKind::OnOff,
            rate_pps: 300.0,
            size_bytes: 1024,
            on_ms: 20.0,
            off_ms: 20.0,
            start_us: 0,
            stop_us: 2_000_000,
            phase_seed: 11,
        });
        let times: Vec<u64> = (0..100).map(|i| i * 17_000).collect();
        let pkts = key_packets(&times, 100);
        let (d1, s1, l1) = run_channel_with_log(&config, &pkts).unwrap();
        let (d2, s2, l2) = run_channel_with_log(&config, &pkts).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn work_conservation_audit() {
        let mut config = idle_config();
        config.queue_capacity_pkts = 10;
        config.sources.push(TrafficSourceSpec {
            kind: SourceKind::Cbr,
            rate_pps: 100.0,
            size_bytes: 1024,
            on_ms: 0.0,
            off_ms: 0.0,
            start_us: 0,
            stop_us: 1_000_000,
            phase_seed: 0,
        });
        let times: Vec<u64> = (0..20).map(|i| i * 9_000).collect();
        let (_, _, log) = run_channel_with_log(&config, &key_packets(&times, 100)).unwrap();
        // Whenever a departure leaves the queue non-empty, the next
        // departure follows after exactly one service time.
        let svc = |flow: u32| if flow == KEYSTROKE_FLOW { 800 } else { 8_192 };
        let departs: Vec<&LogEntry> = log
            .iter()
            .filter(|e| e.event == LogEvent::Depart)
            .collect();
        assert!(!departs.is_empty());
        for w in departs.windows(2) {
            if w[0].queue_len > 0 {
                assert_eq!(
                    w[1].time_us - w[0].time_us,
                    svc(w[1].flow_id),
                    "link idle while queue non-empty around t={}",
                    w[0].time_us
                );
            }
        }
    }

    #[test]
    fn event_log_csv_shape() {
        let (_, _, log) = run_channel_with_log(&idle_config(), &key_packets(&[0], 100)).unwrap();
        let csv = super::super::write_event_log_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("time_us,event,flow_id,seq,queue_len"));
        let kinds: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(kinds, vec!["inject", "enqueue", "depart", "deliver"]);
    }

    #[test]
    fn rejects_unordered_keystroke_packets() {
        let mut pkts = key_packets(&[0, 10_000], 100);
        pkts.swap(0, 1);
        assert!(run_channel(&idle_config(), &pkts).is_err());
    }
}
