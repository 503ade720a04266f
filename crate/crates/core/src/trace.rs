//! Keystroke event traces: parsing, validation, press/release pairing,
//! synthetic generation, and contiguous sampling.
//!
//! The on-disk record format is one event per line,
//! `user_id,key_state,key_code,timestamp_ms`, LF terminated, no header.
//! Timestamps are stored internally as integer microseconds; the decimal
//! milliseconds of the file format are converted exactly on I/O.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::{adjacency_class, KeyboardMap};

/// Minimum duration for synthesized hold times and press-to-press gaps.
pub const MIN_SYNTH_DURATION_US: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyState {
    Pressed,
    Released,
}

impl KeyState {
    pub fn as_u8(self) -> u8 {
        match self {
            KeyState::Pressed => 0,
            KeyState::Released => 1,
        }
    }
}

/// One raw press or release event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub user_id: u32,
    pub key_state: KeyState,
    pub key_code: u32,
    pub timestamp_us: u64,
}

/// An ordered sequence of key events for one user session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeystrokeTrace {
    pub user_id: u32,
    pub events: Vec<KeyEvent>,
}

/// A paired press/release of one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Keystroke {
    pub key_code: u32,
    pub press_us: u64,
    pub release_us: u64,
}

impl Keystroke {
    pub fn hold_us(&self) -> u64 {
        self.release_us - self.press_us
    }
}

/// Statistics describing a synthetic typist. Gap statistics are indexed by
/// key-pair adjacency class (1..=5, stored at index class-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypistProfile {
    pub user_id: u32,
    pub mean_hold_us: f64,
    pub sd_hold_us: f64,
    pub mean_gap_us_by_class: [f64; 5],
    pub sd_gap_us_by_class: [f64; 5],
    pub seed: u64,
}

impl TypistProfile {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.mean_hold_us.is_nan() || self.mean_hold_us <= 0.0 {
            return Err(TraceError::InvalidProfile("mean_hold_us must be > 0".into()));
        }
        if self.sd_hold_us.is_nan() || self.sd_hold_us < 0.0 {
            return Err(TraceError::InvalidProfile("sd_hold_us must be >= 0".into()));
        }
        for (i, (&m, &sd)) in self
            .mean_gap_us_by_class
            .iter()
            .zip(&self.sd_gap_us_by_class)
            .enumerate()
        {
            if m.is_nan() || m <= 0.0 {
                return Err(TraceError::InvalidProfile(format!(
                    "mean_gap_us_by_class[{i}] must be > 0"
                )));
            }
            if sd.is_nan() || sd < 0.0 {
                return Err(TraceError::InvalidProfile(format!(
                    "sd_gap_us_by_class[{i}] must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    UnmatchedPress,
    UnmatchedRelease,
    NonMonotone,
}

/// A structural defect found by [`validate_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub event_index: usize,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            ViolationKind::UnmatchedPress => "unmatched press",
            ViolationKind::UnmatchedRelease => "unmatched release",
            ViolationKind::NonMonotone => "non-monotone timestamp",
        };
        write!(f, "{kind} at event {}", self.event_index)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{reason}, line {line}")]
    ParseLine { line: usize, reason: String },
    #[error("mixed user_ids in one file, line {line}")]
    MixedUserIds { line: usize },
    #[error("unmatched press at event {event_index}")]
    UnmatchedPress { event_index: usize },
    #[error("unmatched release at event {event_index}")]
    UnmatchedRelease { event_index: usize },
    #[error("trace too short: {available} keystrokes available, {requested} requested")]
    SampleTooShort { available: usize, requested: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("invalid typist profile: {0}")]
    InvalidProfile(String),
    #[error("empty key-code sequence")]
    EmptyText,
}

/// Convert a non-negative decimal milliseconds string to integer microseconds,
/// rounding half away from zero. Exact decimal arithmetic, no floats.
fn parse_ms_to_us(s: &str) -> Option<u64> {
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut us: u64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse::<u64>().ok()?.checked_mul(1_000)?
    };
    let mut scale = 100u64;
    for (i, b) in frac_part.bytes().enumerate() {
        let d = (b - b'0') as u64;
        if i < 3 {
            us = us.checked_add(d * scale)?;
            scale /= 10;
        } else {
            // Fourth fractional digit decides the rounding of the last
            // microsecond; further digits cannot flip it.
            if d >= 5 {
                us = us.checked_add(1)?;
            }
            break;
        }
    }
    Some(us)
}

/// Format integer microseconds as decimal milliseconds with no trailing zeros.
pub(crate) fn format_us_as_ms(us: u64) -> String {
    let int = us / 1_000;
    let frac = us % 1_000;
    if frac == 0 {
        format!("{int}")
    } else {
        let s = format!("{frac:03}");
        format!("{int}.{}", s.trim_end_matches('0'))
    }
}

/// Parse the line-oriented trace format. Events keep file order for equal
/// timestamps; the result is stably sorted by timestamp.
pub fn parse_trace(text: &str) -> Result<KeystrokeTrace, TraceError> {
    let mut events: Vec<KeyEvent> = Vec::new();
    let mut user_id: Option<u32> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(TraceError::ParseLine {
                line,
                reason: format!("expected 4 comma-separated fields, found {}", fields.len()),
            });
        }
        let uid: u32 = fields[0].parse().map_err(|_| TraceError::ParseLine {
            line,
            reason: format!("user_id is not a non-negative integer: {:?}", fields[0]),
        })?;
        let key_state = match fields[1] {
            "0" => KeyState::Pressed,
            "1" => KeyState::Released,
            _ => {
                return Err(TraceError::ParseLine {
                    line,
                    reason: "key_state must be 0 or 1".into(),
                })
            }
        };
        let key_code: u32 = fields[2].parse().map_err(|_| TraceError::ParseLine {
            line,
            reason: format!("key_code is not a non-negative integer: {:?}", fields[2]),
        })?;
        let timestamp_us = parse_ms_to_us(fields[3]).ok_or_else(|| TraceError::ParseLine {
            line,
            reason: format!("timestamp_ms is not a non-negative decimal: {:?}", fields[3]),
        })?;
        match user_id {
            None => user_id = Some(uid),
            Some(u) if u != uid => return Err(TraceError::MixedUserIds { line }),
            _ => {}
        }
        events.push(KeyEvent {
            user_id: uid,
            key_state,
            key_code,
            timestamp_us,
        });
    }
    events.sort_by_key(|e| e.timestamp_us); // stable: ties keep file order
    Ok(KeystrokeTrace {
        user_id: user_id.unwrap_or(0),
        events,
    })
}

/// Serialize a trace back to the line format. `parse_trace(format_trace(t)) == t`
/// for any valid trace.
pub fn format_trace(trace: &KeystrokeTrace) -> String {
    let mut out = String::new();
    for e in &trace.events {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.user_id,
            e.key_state.as_u8(),
            e.key_code,
            format_us_as_ms(e.timestamp_us)
        ));
    }
    out
}

/// Check pairing and timestamp monotonicity. Returns one record per defect,
/// sorted by event index; an empty list means the trace is valid.
pub fn validate_trace(trace: &KeystrokeTrace) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut open: std::collections::HashMap<u32, std::collections::VecDeque<usize>> =
        std::collections::HashMap::new();
    let mut prev_ts: Option<u64> = None;
    for (i, e) in trace.events.iter().enumerate() {
        if let Some(p) = prev_ts {
            if e.timestamp_us < p {
                violations.push(Violation {
                    kind: ViolationKind::NonMonotone,
                    event_index: i,
                });
            }
        }
        prev_ts = Some(e.timestamp_us);
        match e.key_state {
            KeyState::Pressed => open.entry(e.key_code).or_default().push_back(i),
            KeyState::Released => {
                if open.get_mut(&e.key_code).and_then(|q| q.pop_front()).is_none() {
                    violations.push(Violation {
                        kind: ViolationKind::UnmatchedRelease,
                        event_index: i,
                    });
                }
            }
        }
    }
    for queue in open.values() {
        for &i in queue {
            violations.push(Violation {
                kind: ViolationKind::UnmatchedPress,
                event_index: i,
            });
        }
    }
    violations.sort_by_key(|v| v.event_index);
    violations
}

/// Pairing that also reports which event indices form each keystroke.
/// Matching is per key code: each press takes the earliest subsequent
/// release of the same code, so rollover typing pairs correctly.
pub(crate) fn pair_events_indexed(
    trace: &KeystrokeTrace,
) -> Result<Vec<(Keystroke, usize, usize)>, TraceError> {
    let mut open: std::collections::HashMap<u32, std::collections::VecDeque<usize>> =
        std::collections::HashMap::new();
    let mut paired: Vec<(Keystroke, usize, usize)> = Vec::new();
    for (i, e) in trace.events.iter().enumerate() {
        match e.key_state {
            KeyState::Pressed => open.entry(e.key_code).or_default().push_back(i),
            KeyState::Released => {
                let press_idx = open
                    .get_mut(&e.key_code)
                    .and_then(|q| q.pop_front())
                    .ok_or(TraceError::UnmatchedRelease { event_index: i })?;
                paired.push((
                    Keystroke {
                        key_code: e.key_code,
                        press_us: trace.events[press_idx].timestamp_us,
                        release_us: e.timestamp_us,
                    },
                    press_idx,
                    i,
                ));
            }
        }
    }
    for queue in open.values() {
        if let Some(&i) = queue.front() {
            return Err(TraceError::UnmatchedPress { event_index: i });
        }
    }
    // Order by press; ties keep press event order.
    paired.sort_by_key(|(k, press_idx, _)| (k.press_us, *press_idx));
    Ok(paired)
}

/// Pair presses with releases, ordered by press time.
pub fn pair_events(trace: &KeystrokeTrace) -> Result<Vec<Keystroke>, TraceError> {
    Ok(pair_events_indexed(trace)?.into_iter().map(|(k, _, _)| k).collect())
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

fn sample_duration(rng: &mut ChaCha8Rng, mean_us: f64, sd_us: f64) -> u64 {
    let normal = Normal::new(mean_us, sd_us).expect("validated profile");
    round_half_up(normal.sample(rng)).max(MIN_SYNTH_DURATION_US)
}

/// Generate a synthetic trace for a key-code sequence. Hold times are
/// normal around the profile's hold statistics; press-to-press gaps are
/// normal around the per-adjacency-class gap statistics. Both are floored
/// at 1 ms. Deterministic for a given (profile, text, seed).
pub fn synth_trace(
    profile: &TypistProfile,
    text: &[u32],
    seed: u64,
) -> Result<KeystrokeTrace, TraceError> {
    profile.validate()?;
    if text.is_empty() {
        return Err(TraceError::EmptyText);
    }
    let map = KeyboardMap::qwerty();
    let mut rng = ChaCha8Rng::seed_from_u64(
        profile.seed.wrapping_add(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let mut events = Vec::with_capacity(text.len() * 2);
    let mut press_us: u64 = 0;
    for (i, &code) in text.iter().enumerate() {
        let hold = sample_duration(&mut rng, profile.mean_hold_us, profile.sd_hold_us);
        events.push(KeyEvent {
            user_id: profile.user_id,
            key_state: KeyState::Pressed,
            key_code: code,
            timestamp_us: press_us,
        });
        events.push(KeyEvent {
            user_id: profile.user_id,
            key_state: KeyState::Released,
            key_code: code,
            timestamp_us: press_us + hold,
        });
        if let Some(&next) = text.get(i + 1) {
            let class = adjacency_class(&map, code, next) as usize - 1;
            let gap = sample_duration(
                &mut rng,
                profile.mean_gap_us_by_class[class],
                profile.sd_gap_us_by_class[class],
            );
            press_us += gap;
        }
    }
    events.sort_by_key(|e| e.timestamp_us); // stable: rollover keeps generation order
    Ok(KeystrokeTrace {
        user_id: profile.user_id,
        events,
    })
}

/// Select a contiguous run of `n` keystrokes (with all their press/release
/// events), chosen by a seeded uniform draw of the start index, re-based so
/// the first event is at 0.
pub fn select_sample(
    trace: &KeystrokeTrace,
    n: usize,
    seed: u64,
) -> Result<KeystrokeTrace, TraceError> {
    if n == 0 {
        return Err(TraceError::EmptySample);
    }
    let paired = pair_events_indexed(trace)?;
    if paired.len() < n {
        return Err(TraceError::SampleTooShort {
            available: paired.len(),
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=(paired.len() - n));
    let mut indices: Vec<usize> = paired[start..start + n]
        .iter()
        .flat_map(|&(_, p, r)| [p, r])
        .collect();
    indices.sort_unstable(); // restores original event order
    let t0 = trace.events[indices[0]].timestamp_us;
    let events = indices
        .into_iter()
        .map(|i| {
            let mut e = trace.events[i];
            e.timestamp_us -= t0;
            e
        })
        .collect();
    Ok(KeystrokeTrace {
        user_id: trace.user_id,
        events,
    })
}
