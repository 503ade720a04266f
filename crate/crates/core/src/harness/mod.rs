//! Experiment harness: run impairment scenarios repeatedly with varied
//! seeds, aggregate distances and channel statistics, and relate them to an
//! inter-user baseline distance.
//!
//! One experiment repetition is the full pipeline: draw a contiguous
//! keystroke sample, build its reference template, push the events through
//! the simulated channel, rebuild the received trace from arrival times,
//! build the received template, and measure the Euclidean distance between
//! the two. Distances are reported both raw (milliseconds) and z-score
//! normalized against a baseline population of templates.

pub mod config;
pub mod report;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{
    build_template, euclidean_distance, extract_digraph_features, vector_distance, KeyboardMap,
    Template, TEMPLATE_DIMS,
};
use crate::netsim::{
    run_channel, ChannelConfig, ChannelStats, NetsimError, SourceKind, TrafficSourceSpec,
};
use crate::replay::{events_to_packets, reconstruct_trace, ReplayError, DEFAULT_EVENT_SIZE_BYTES};
use crate::trace::{pair_events, select_sample, KeystrokeTrace, TraceError, TypistProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    None,
    #[default]
    Zscore,
}

/// Per-dimension mean and standard deviation of a template population,
/// used for z-score normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub means: [f64; TEMPLATE_DIMS],
    pub sds: [f64; TEMPLATE_DIMS],
}

impl PopulationStats {
    pub fn from_templates(templates: &[Template]) -> Self {
        let n = templates.len().max(1) as f64;
        let vectors: Vec<[f64; TEMPLATE_DIMS]> = templates.iter().map(|t| t.flatten()).collect();
        let mut means = [0.0; TEMPLATE_DIMS];
        for v in &vectors {
            for (m, x) in means.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut sds = [0.0; TEMPLATE_DIMS];
        for v in &vectors {
            for ((s, x), m) in sds.iter_mut().zip(v).zip(&means) {
                *s += (x - m) * (x - m) / n;
            }
        }
        for s in sds.iter_mut() {
            *s = s.sqrt();
        }
        Self { means, sds }
    }

    fn scale(&self, dim: usize) -> f64 {
        // A dimension with zero spread keeps its raw offset.
        if self.sds[dim] == 0.0 {
            1.0
        } else {
            self.sds[dim]
        }
    }

    pub fn normalize(&self, v: &[f64; TEMPLATE_DIMS]) -> [f64; TEMPLATE_DIMS] {
        std::array::from_fn(|d| (v[d] - self.means[d]) / self.scale(d))
    }
}

/// Produce the comparable 20-vectors for a reference/received template pair.
/// Mode `none` returns the raw millisecond vectors; `zscore` shifts and
/// scales both by the population statistics.
pub fn normalize_templates(
    reference: &Template,
    received: &Template,
    mode: NormalizationMode,
    population: Option<&PopulationStats>,
) -> Result<([f64; TEMPLATE_DIMS], [f64; TEMPLATE_DIMS]), HarnessError> {
    match mode {
        NormalizationMode::None => Ok((reference.flatten(), received.flatten())),
        NormalizationMode::Zscore => {
            let pop = population.ok_or(HarnessError::ZscoreWithoutPopulation)?;
            Ok((pop.normalize(&reference.flatten()), pop.normalize(&received.flatten())))
        }
    }
}

/// Table-style cross-traffic load: total packet rate C split across two
/// equal CBR streams of `size_bytes` packets. Several `pps` entries make a
/// sweep whose sub-runs are averaged into one result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitgLoad {
    pub pps: Vec<f64>,
    pub size_bytes: u32,
    #[serde(default)]
    pub start_us: u64,
    #[serde(default = "default_traffic_stop_us")]
    pub stop_us: u64,
}

fn default_traffic_stop_us() -> u64 {
    30_000_000
}

/// One experiment definition: a channel, its competing traffic, and the
/// repetition policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: u32,
    #[serde(default)]
    pub label: String,
    pub channel: ChannelConfig,
    #[serde(default)]
    pub cross_traffic: Vec<TrafficSourceSpec>,
    #[serde(default)]
    pub ditg: Option<DitgLoad>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default)]
    pub normalization: NormalizationMode,
    /// Reuse one sample for every repetition instead of re-drawing.
    #[serde(default)]
    pub fixed_sample: bool,
    #[serde(default = "default_event_size_bytes")]
    pub event_size_bytes: u32,
}

fn default_repetitions() -> u32 {
    40
}

fn default_sample_size() -> usize {
    122
}

fn default_event_size_bytes() -> u32 {
    DEFAULT_EVENT_SIZE_BYTES
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions < 1 {
            return Err(HarnessError::Config("repetitions must be >= 1".into()));
        }
        if self.sample_size < 2 {
            return Err(HarnessError::Config("sample_size must be >= 2".into()));
        }
        if let Some(ditg) = &self.ditg {
            if ditg.pps.is_empty() {
                return Err(HarnessError::Config("ditg.pps must not be empty".into()));
            }
            if ditg.pps.iter().any(|&c| !c.is_finite() || c <= 0.0) {
                return Err(HarnessError::Config("ditg.pps entries must be > 0".into()));
            }
            if ditg.size_bytes < 1 {
                return Err(HarnessError::Config("ditg.size_bytes must be >= 1".into()));
            }
        }
        self.channel.validate()?;
        for s in &self.cross_traffic {
            s.validate()?;
        }
        Ok(())
    }

    /// The traffic sources active for one sub-run at total rate `c_pps`:
    /// the expanded table load (two equal CBR streams of `c_pps / 2`),
    /// the configured cross traffic, and any channel-level sources.
    pub fn effective_sources(&self, c_pps: Option<f64>) -> Vec<TrafficSourceSpec> {
        let mut sources = Vec::new();
        if let (Some(ditg), Some(c)) = (&self.ditg, c_pps) {
            for stream in 0..2u64 {
                sources.push(TrafficSourceSpec {
                    kind: SourceKind::Cbr,
                    rate_pps: c / 2.0,
                    size_bytes: ditg.size_bytes,
                    on_ms: 0.0,
                    off_ms: 0.0,
                    start_us: ditg.start_us,
                    stop_us: ditg.stop_us,
                    phase_seed: stream,
                });
            }
        }
        sources.extend(self.cross_traffic.iter().cloned());
        sources.extend(self.channel.sources.iter().cloned());
        sources
    }
}

/// One repetition's measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub seed: u64,
    /// Total cross-traffic rate for sweep sub-runs.
    pub c_pps: Option<f64>,
    /// Distance in the experiment's normalization mode.
    pub distance: f64,
    /// Distance in mode `none` (milliseconds), always computed alongside.
    pub distance_raw_ms: f64,
    pub loss_pct: f64,
    pub delay_ms: f64,
    pub jitter_ms: f64,
    pub retransmitted_packets: u64,
}

/// Aggregate of one sweep sub-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRunSummary {
    pub c_pps: f64,
    pub avg_distance: f64,
    pub avg_distance_raw_ms: f64,
    pub avg_loss_pct: f64,
    pub avg_delay_ms: f64,
    pub avg_jitter_ms: f64,
}

/// Aggregated result of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub id: u32,
    pub label: String,
    pub avg_distance: f64,
    pub sd_distance: f64,
    pub avg_distance_raw_ms: f64,
    pub avg_loss_pct: f64,
    pub avg_delay_ms: f64,
    pub avg_jitter_ms: f64,
    /// `avg_distance / inter-user baseline x 100`; filled by [`run_suite`].
    pub distortion_pct: f64,
    pub sub_runs: Vec<SubRunSummary>,
    pub per_repetition: Vec<Repetition>,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("zscore normalization requested with no baseline population loaded")]
    ZscoreWithoutPopulation,
    #[error("degenerate baseline")]
    DegenerateBaseline,
    #[error("inter-user baseline needs at least 2 distinct users")]
    TooFewUsers,
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("{path}: {err}")]
    Io { path: String, err: std::io::Error },
}

fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

fn population_sd(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

struct PipelineOutput {
    reference: Template,
    received: Template,
    stats: ChannelStats,
}

/// One repetition of the replay pipeline over a configured channel.
fn run_pipeline(
    spec: &ExperimentSpec,
    reference_trace: &KeystrokeTrace,
    sample_seed: u64,
    channel_seed: u64,
    sources: &[TrafficSourceSpec],
    sample_id: u32,
) -> Result<PipelineOutput, HarnessError> {
    let map = KeyboardMap::qwerty();
    let sample = select_sample(reference_trace, spec.sample_size, sample_seed)?;
    let keystrokes = pair_events(&sample)?;
    let reference = build_template(
        &extract_digraph_features(&keystrokes, &map)?,
        sample.user_id,
        sample_id,
    )?;
    let packets = events_to_packets(&sample, spec.event_size_bytes);
    let mut channel = spec.channel.clone();
    channel.sources = sources.to_vec();
    channel.seed = channel_seed;
    let (deliveries, stats) = run_channel(&channel, &packets)?;
    let received_trace = reconstruct_trace(&deliveries, &sample)?;
    let received_keystrokes = pair_events(&received_trace)?;
    let received = build_template(
        &extract_digraph_features(&received_keystrokes, &map)?,
        sample.user_id,
        sample_id,
    )?;
    Ok(PipelineOutput {
        reference,
        received,
        stats,
    })
}

/// Run an experiment's repetitions (and sweep sub-runs, if any) and
/// aggregate the results. Repetition r uses seed `base_seed + r`; sweep
/// sub-runs reuse the same seeds so load levels are compared on identical
/// samples.
pub fn run_experiment(
    spec: &ExperimentSpec,
    reference_trace: &KeystrokeTrace,
    base_seed: u64,
    population: Option<&PopulationStats>,
) -> Result<ExperimentResult, HarnessError> {
    spec.validate()?;
    if spec.normalization == NormalizationMode::Zscore && population.is_none() {
        return Err(HarnessError::ZscoreWithoutPopulation);
    }
    let loads: Vec<Option<f64>> = match &spec.ditg {
        Some(ditg) => ditg.pps.iter().map(|&c| Some(c)).collect(),
        None => vec![None],
    };
    let mut per_repetition = Vec::new();
    let mut sub_runs = Vec::new();
    for load in &loads {
        let sources = spec.effective_sources(*load);
        let mut sub_reps = Vec::new();
        for r in 1..=spec.repetitions as u64 {
            let seed = base_seed + r;
            let sample_seed = if spec.fixed_sample { base_seed } else { seed };
            let out = run_pipeline(spec, reference_trace, sample_seed, seed, &sources, r as u32)?;
            let (ref_vec, recv_vec) =
                normalize_templates(&out.reference, &out.received, spec.normalization, population)?;
            let rep = Repetition {
                seed,
                c_pps: *load,
                distance: vector_distance(&ref_vec, &recv_vec),
                distance_raw_ms: euclidean_distance(&out.reference, &out.received),
                loss_pct: out.stats.link_loss_pct,
                delay_ms: out.stats.avg_delay_us / 1_000.0,
                jitter_ms: out.stats.jitter_us / 1_000.0,
                retransmitted_packets: out.stats.retransmitted_packets,
            };
            sub_reps.push(rep);
        }
        if let Some(c) = load {
            sub_runs.push(SubRunSummary {
                c_pps: *c,
                avg_distance: mean(sub_reps.iter().map(|r| r.distance)),
                avg_distance_raw_ms: mean(sub_reps.iter().map(|r| r.distance_raw_ms)),
                avg_loss_pct: mean(sub_reps.iter().map(|r| r.loss_pct)),
                avg_delay_ms: mean(sub_reps.iter().map(|r| r.delay_ms)),
                avg_jitter_ms: mean(sub_reps.iter().map(|r| r.jitter_ms)),
            });
        }
        per_repetition.extend(sub_reps);
    }
    let distances: Vec<f64> = per_repetition.iter().map(|r| r.distance).collect();
    Ok(ExperimentResult {
        id: spec.id,
        label: if spec.label.is_empty() {
            format!("exp-{}", spec.id)
        } else {
            spec.label.clone()
        },
        avg_distance: mean(per_repetition.iter().map(|r| r.distance)),
        sd_distance: population_sd(&distances),
        avg_distance_raw_ms: mean(per_repetition.iter().map(|r| r.distance_raw_ms)),
        avg_loss_pct: mean(per_repetition.iter().map(|r| r.loss_pct)),
        avg_delay_ms: mean(per_repetition.iter().map(|r| r.delay_ms)),
        avg_jitter_ms: mean(per_repetition.iter().map(|r| r.jitter_ms)),
        distortion_pct: 0.0,
        sub_runs,
        per_repetition,
    })
}

/// Received templates from one full experiment pass, used as the z-score
/// population. Normalization mode is ignored here; the templates themselves
/// are raw.
pub fn collect_population(
    spec: &ExperimentSpec,
    reference_trace: &KeystrokeTrace,
    base_seed: u64,
) -> Result<Vec<Template>, HarnessError> {
    spec.validate()?;
    let loads: Vec<Option<f64>> = match &spec.ditg {
        Some(ditg) => ditg.pps.iter().map(|&c| Some(c)).collect(),
        None => vec![None],
    };
    let mut templates = Vec::new();
    for load in &loads {
        let sources = spec.effective_sources(*load);
        for r in 1..=spec.repetitions as u64 {
            let seed = base_seed + r;
            let sample_seed = if spec.fixed_sample { base_seed } else { seed };
            let out = run_pipeline(spec, reference_trace, sample_seed, seed, &sources, r as u32)?;
            templates.push(out.received);
        }
    }
    Ok(templates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub mean_distance: f64,
    pub sd_distance: f64,
    pub pairs: u32,
}

/// Mean template distance over seeded random pairs of distinct users,
/// built from clean (unimpaired) samples.
pub fn inter_user_baseline(
    traces: &[KeystrokeTrace],
    sample_size: usize,
    pairs: u32,
    seed: u64,
    mode: NormalizationMode,
    population: Option<&PopulationStats>,
) -> Result<BaselineResult, HarnessError> {
    let mut distinct: Vec<u32> = traces.iter().map(|t| t.user_id).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(HarnessError::TooFewUsers);
    }
    if mode == NormalizationMode::Zscore && population.is_none() {
        return Err(HarnessError::ZscoreWithoutPopulation);
    }
    let map = KeyboardMap::qwerty();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distances = Vec::with_capacity(pairs as usize);
    for p in 0..pairs {
        let a = rng.random_range(0..traces.len());
        let b = loop {
            let b = rng.random_range(0..traces.len());
            if traces[b].user_id != traces[a].user_id {
                break b;
            }
        };
        // One sample seed per pair: identical traces yield distance zero.
        let pair_seed: u64 = rng.random();
        let template_for = |idx: usize| -> Result<Template, HarnessError> {
            let sample = select_sample(&traces[idx], sample_size, pair_seed)?;
            Ok(build_template(
                &extract_digraph_features(&pair_events(&sample)?, &map)?,
                traces[idx].user_id,
                p,
            )?)
        };
        let ta = template_for(a)?;
        let tb = template_for(b)?;
        let (va, vb) = normalize_templates(&ta, &tb, mode, population)?;
        distances.push(vector_distance(&va, &vb));
    }
    Ok(BaselineResult {
        mean_distance: mean(distances.iter().copied()),
        sd_distance: population_sd(&distances),
        pairs,
    })
}

/// Ratio of an experiment's average distance to the inter-user baseline,
/// as a percentage.
pub fn distortion_pct(avg_distance: f64, baseline: f64) -> Result<f64, HarnessError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(HarnessError::DegenerateBaseline);
    }
    Ok(avg_distance / baseline * 100.0)
}

/// Full suite output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub base_seed: u64,
    pub baseline: BaselineResult,
    pub experiments: Vec<ExperimentResult>,
    /// The normalization population (received templates of the baseline
    /// experiment), exported so distances can be reproduced offline.
    pub population: Vec<Template>,
}

/// Run every experiment plus the inter-user baseline.
///
/// The z-score population is collected from the experiment with id 1 (or
/// the first spec, if none has id 1). Each experiment's distortion is the
/// ratio of its average distance to the baseline computed in the same
/// normalization mode.
pub fn run_suite(
    specs: &[ExperimentSpec],
    reference_trace: &KeystrokeTrace,
    users: &[KeystrokeTrace],
    base_seed: u64,
) -> Result<SuiteReport, HarnessError> {
    if specs.is_empty() {
        return Err(HarnessError::Config("no experiment specs given".into()));
    }
    let baseline_spec = specs.iter().find(|s| s.id == 1).unwrap_or(&specs[0]);
    let needs_population = specs
        .iter()
        .any(|s| s.normalization == NormalizationMode::Zscore);
    let population_templates = if needs_population {
        collect_population(baseline_spec, reference_trace, base_seed)?
    } else {
        Vec::new()
    };
    let population_stats = if needs_population {
        Some(PopulationStats::from_templates(&population_templates))
    } else {
        None
    };

    let baseline_pairs = baseline_spec.repetitions;
    let baseline_none = inter_user_baseline(
        users,
        baseline_spec.sample_size,
        baseline_pairs,
        base_seed,
        NormalizationMode::None,
        None,
    )?;
    let baseline_zscore = if needs_population {
        Some(inter_user_baseline(
            users,
            baseline_spec.sample_size,
            baseline_pairs,
            base_seed,
            NormalizationMode::Zscore,
            population_stats.as_ref(),
        )?)
    } else {
        None
    };
    let baseline_for = |mode: NormalizationMode| -> &BaselineResult {
        match mode {
            NormalizationMode::None => &baseline_none,
            NormalizationMode::Zscore => baseline_zscore.as_ref().expect("computed above"),
        }
    };

    let mut experiments = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut result = run_experiment(spec, reference_trace, base_seed, population_stats.as_ref())?;
        result.distortion_pct =
            distortion_pct(result.avg_distance, baseline_for(spec.normalization).mean_distance)?;
        experiments.push(result);
    }
    // The report's baseline row follows the first experiment's mode.
    let report_baseline = baseline_for(specs[0].normalization).clone();
    Ok(SuiteReport {
        base_seed,
        baseline: report_baseline,
        experiments,
        population: population_templates,
    })
}

/// Built-in synthetic typist standing in for a dataset user.
pub fn builtin_profile_alpha() -> TypistProfile {
    TypistProfile {
        user_id: 1,
        mean_hold_us: 80_000.0,
        sd_hold_us: 6_000.0,
        mean_gap_us_by_class: [125_000.0, 140_000.0, 155_000.0, 170_000.0, 190_000.0],
        sd_gap_us_by_class: [10_000.0, 10_000.0, 12_000.0, 12_000.0, 14_000.0],
        seed: 101,
    }
}

/// Second built-in typist, separated from alpha in both hold and gap means.
pub fn builtin_profile_beta() -> TypistProfile {
    TypistProfile {
        user_id: 2,
        mean_hold_us: 104_000.0,
        sd_hold_us: 7_000.0,
        mean_gap_us_by_class: [168_000.0, 188_000.0, 208_000.0, 228_000.0, 254_000.0],
        sd_gap_us_by_class: [11_000.0, 11_000.0, 13_000.0, 13_000.0, 15_000.0],
        seed: 202,
    }
}

/// A key-code sequence of at least `min_keystrokes` keys, cycling a pangram
/// so every adjacency class occurs.
pub fn pangram_text(min_keystrokes: usize) -> Vec<u32> {
    const PANGRAM: &str = "THE QUICK BROWN FOX JUMPS OVER THE LAZY DOG ";
    PANGRAM
        .chars()
        .cycle()
        .take(min_keystrokes.max(PANGRAM.len()))
        .map(|c| c as u32)
        .collect()
}
