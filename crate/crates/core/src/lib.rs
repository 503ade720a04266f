//! Toolkit for studying how a congested remote-desktop-style channel
//! distorts keystroke-timing biometrics.
//!
//! The pipeline: a keystroke trace is sampled ([`trace`]), its digraph
//! timing features are summarized into a 20-value template ([`features`]),
//! the events are replayed as packets over a simulated bottleneck link with
//! cross traffic ([`netsim`], [`replay`]), and the received template's
//! Euclidean distance from the reference quantifies the distortion. The
//! [`harness`] runs whole experiment matrices with seeded repetitions.

pub mod features;
pub mod harness;
pub mod netsim;
pub mod replay;
pub mod trace;

pub use features::{
    adjacency_class, build_template, euclidean_distance, extract_digraph_features,
    DigraphFeatures, KeyboardMap, Template,
};
pub use netsim::{
    channel_stats, generate_cbr, generate_onoff, run_channel, run_channel_with_log, ChannelConfig,
    ChannelStats, Delivery, Packet, SourceKind, TrafficSourceSpec, KEYSTROKE_FLOW,
};
pub use replay::{events_to_packets, reconstruct_trace};
pub use trace::{
    pair_events, parse_trace, select_sample, synth_trace, validate_trace, KeyEvent, KeyState,
    Keystroke, KeystrokeTrace, TypistProfile,
};
