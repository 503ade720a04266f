//! Conversion between keystroke traces and channel packets.
//!
//! Remote-desktop input events carry no timestamps, so the receiving side
//! can only timestamp them on arrival. `events_to_packets` maps each event
//! to one packet injected at the event's time; `reconstruct_trace` rebuilds
//! the trace the receiver observes, with arrival times in place of the
//! origin times. Channel delay variation thereby becomes timing noise in
//! the biometric sample.

use crate::netsim::{Delivery, Packet, KEYSTROKE_FLOW};
use crate::trace::{KeyEvent, KeystrokeTrace};

/// Default bytes on the wire per input event.
pub const DEFAULT_EVENT_SIZE_BYTES: u32 = 100;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("delivery count {deliveries} does not match event count {events}")]
    CountMismatch { deliveries: usize, events: usize },
}

/// One packet per key event, injected at the event timestamp. Sequence
/// numbers and payload references are the event indices.
pub fn events_to_packets(trace: &KeystrokeTrace, event_size_bytes: u32) -> Vec<Packet> {
    trace
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| Packet {
            flow_id: KEYSTROKE_FLOW,
            seq: i as u64,
            size_bytes: event_size_bytes,
            inject_us: e.timestamp_us,
            payload_ref: Some(i),
        })
        .collect()
}

/// Rebuild the received trace: original key codes and states, arrival
/// timestamps. Deliveries must cover every original event, in order.
pub fn reconstruct_trace(
    deliveries: &[Delivery],
    original: &KeystrokeTrace,
) -> Result<KeystrokeTrace, ReplayError> {
    if deliveries.len() != original.events.len() {
        return Err(ReplayError::CountMismatch {
            deliveries: deliveries.len(),
            events: original.events.len(),
        });
    }
    let events = deliveries
        .iter()
        .zip(&original.events)
        .map(|(d, e)| KeyEvent {
            user_id: e.user_id,
            key_state: e.key_state,
            key_code: e.key_code,
            timestamp_us: d.deliver_us,
        })
        .collect();
    Ok(KeystrokeTrace {
        user_id: original.user_id,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_template, euclidean_distance, extract_digraph_features, KeyboardMap};
    use crate::netsim::{run_channel, ChannelConfig, SourceKind, TrafficSourceSpec};
    use crate::trace::{pair_events, synth_trace, validate_trace, TypistProfile};

    fn profile(seed: u64) -> TypistProfile {
        TypistProfile {
            user_id: 4,
            mean_hold_us: 80_000.0,
            sd_hold_us: 4_000.0,
            mean_gap_us_by_class: [140_000.0, 155_000.0, 170_000.0, 185_000.0, 205_000.0],
            sd_gap_us_by_class: [8_000.0; 5],
            seed,
        }
    }

    fn sample_trace() -> KeystrokeTrace {
        let text: Vec<u32> = "THE QUICK BROWN FOX JUMPS OVER THE LAZY DOG"
            .chars()
            .map(|c| c as u32)
            .collect();
        synth_trace(&profile(3), &text, 1).unwrap()
    }

    #[test]
    fn one_packet_per_event() {
        let t = sample_trace();
        let pkts = events_to_packets(&t, DEFAULT_EVENT_SIZE_BYTES);
        assert_eq!(pkts.len(), t.events.len());
        for (i, p) in pkts.iter().enumerate() {
            assert_eq!(p.seq, i as u64);
            assert_eq!(p.payload_ref, Some(i));
            assert_eq!(p.inject_us, t.events[i].timestamp_us);
            assert_eq!(p.size_bytes, 100);
        }
    }

    #[test]
    fn constant_delay_preserves_digraph_features() {
        let t = sample_trace();
        let pkts = events_to_packets(&t, DEFAULT_EVENT_SIZE_BYTES);
        let config = ChannelConfig {
            bottleneck_bps: 100_000_000,
            base_propagation_us: 7_000,
            ..Default::default()
        };
        let (deliveries, stats) = run_channel(&config, &pkts).unwrap();
        assert_eq!(stats.link_loss_pct, 0.0);
        let received = reconstruct_trace(&deliveries, &t).unwrap();
        assert!(validate_trace(&received).is_empty());

        let map = KeyboardMap::qwerty();
        let orig =
            build_template(&extract_digraph_features(&pair_events(&t).unwrap(), &map).unwrap(), 4, 1)
                .unwrap();
        let recv = build_template(
            &extract_digraph_features(&pair_events(&received).unwrap(), &map).unwrap(),
            4,
            1,
        )
        .unwrap();
        assert_eq!(orig.values, recv.values);
        assert_eq!(euclidean_distance(&orig, &recv), 0.0);
    }

    #[test]
    fn queueing_shifts_press_press_interval() {
        // Two events 100 ms apart on an idle 1 Mbps link: delays 0.8 ms and
        // 0.8 ms. Injected simultaneously they become 0.8 / 1.6 ms and the
        // received gap changes by +0.8 ms.
        let t = KeystrokeTrace {
            user_id: 1,
            events: vec![
                KeyEvent {
                    user_id: 1,
                    key_state: crate::trace::KeyState::Pressed,
                    key_code: 65,
                    timestamp_us: 0,
                },
                KeyEvent {
                    user_id: 1,
                    key_state: crate::trace::KeyState::Pressed,
                    key_code: 66,
                    timestamp_us: 0,
                },
            ],
        };
        let pkts = events_to_packets(&t, 100);
        let config = ChannelConfig {
            base_propagation_us: 0,
            ..Default::default()
        };
        let (deliveries, _) = run_channel(&config, &pkts).unwrap();
        let received = reconstruct_trace(&deliveries, &t).unwrap();
        let gap = received.events[1].timestamp_us - received.events[0].timestamp_us;
        assert_eq!(gap, 800); // was 0 at the sender
    }

    #[test]
    fn congested_run_still_reconstructs_a_valid_trace() {
        let t = sample_trace();
        let pkts = events_to_packets(&t, DEFAULT_EVENT_SIZE_BYTES);
        let mut config = ChannelConfig {
            queue_capacity_pkts: 2,
            rto_initial_us: 10_000,
            rto_max_us: 100_000,
            ..Default::default()
        };
        config.sources.push(TrafficSourceSpec {
            kind: SourceKind::OnOff,
            rate_pps: 250.0,
            size_bytes: 1460,
            on_ms: 40.0,
            off_ms: 20.0,
            start_us: 0,
            stop_us: 20_000_000,
            phase_seed: 5,
        });
        let (deliveries, stats) = run_channel(&config, &pkts).unwrap();
        assert!(stats.dropped_packets > 0, "scenario should force drops");
        let received = reconstruct_trace(&deliveries, &t).unwrap();
        assert!(validate_trace(&received).is_empty());
        assert_eq!(received.events.len(), t.events.len());
        for (r, o) in received.events.iter().zip(&t.events) {
            assert_eq!(r.key_code, o.key_code);
            assert_eq!(r.key_state, o.key_state);
        }
        for w in received.events.windows(2) {
            assert!(w[1].timestamp_us >= w[0].timestamp_us);
        }
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let t = sample_trace();
        assert!(matches!(
            reconstruct_trace(&[], &t),
            Err(ReplayError::CountMismatch { .. })
        ));
    }
}
