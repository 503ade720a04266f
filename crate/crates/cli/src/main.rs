//! `kcs` — command-line front end for the keystroke-channel toolkit.
//!
//! Subcommands mirror the pipeline stages: `synth` generates traces,
//! `extract` turns a trace into a template, `distance` compares templates,
//! `simulate` runs one channel pass, and `suite` reproduces the full
//! experiment matrix.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kcs_core::features::{
    build_template, euclidean_distance, extract_digraph_features, parse_template_csv,
    parse_templates_csv, vector_distance, write_template_csv, write_templates_csv, KeyboardMap,
};
use kcs_core::harness::config::{load_experiment_config, load_profile_config};
use kcs_core::harness::report::{report_csv, report_json};
use kcs_core::harness::{
    builtin_profile_alpha, builtin_profile_beta, normalize_templates, pangram_text, run_suite,
    ExperimentSpec, NormalizationMode, PopulationStats,
};
use kcs_core::netsim::{run_channel, run_channel_with_log, write_event_log_csv};
use kcs_core::replay::{events_to_packets, reconstruct_trace};
use kcs_core::trace::{
    format_trace, pair_events, parse_trace, select_sample, synth_trace, validate_trace,
    KeystrokeTrace,
};

#[derive(Parser)]
#[command(name = "kcs", version, about = "Keystroke timing over a simulated remote-desktop channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a trace, extract digraph features, write the template CSV.
    Extract {
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Select a contiguous sample of this many keystrokes first.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, env = "KCS_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Print the Euclidean distance between two template CSVs.
    Distance {
        template_a: PathBuf,
        template_b: PathBuf,
        /// Z-score both templates against this population CSV first.
        #[arg(long, value_name = "POPULATION_CSV")]
        zscore: Option<PathBuf>,
    },
    /// Run one channel pass over a trace; write the received trace and stats.
    Simulate {
        config: PathBuf,
        trace: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Also write the channel event log.
        #[arg(long)]
        event_log: bool,
        #[arg(long, env = "KCS_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Run every experiment config in a directory plus the inter-user
    /// baseline; write report.csv / report.json / population.csv.
    Suite {
        config_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "KCS_SEED", default_value_t = 0)]
        seed: u64,
        /// Override the repetition count of every experiment.
        #[arg(long)]
        reps: Option<u32>,
    },
    /// Generate a synthetic trace from a typist profile and a text file.
    Synth {
        profile: PathBuf,
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "KCS_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_valid_trace(path: &Path) -> Result<KeystrokeTrace> {
    let trace = parse_trace(&read_to_string(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let violations = validate_trace(&trace);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{}: {v}", path.display());
        }
        bail!("{}: {} validation violation(s)", path.display(), violations.len());
    }
    Ok(trace)
}

fn cmd_extract(trace_path: &Path, out: &Path, sample: Option<usize>, seed: u64) -> Result<()> {
    let mut trace = load_valid_trace(trace_path)?;
    if let Some(n) = sample {
        trace = select_sample(&trace, n, seed)?;
    }
    let keystrokes = pair_events(&trace)?;
    let map = KeyboardMap::qwerty();
    let features = extract_digraph_features(&keystrokes, &map)?;
    let template = build_template(&features, trace.user_id, 1)?;
    write_file(out, &write_template_csv(&template))
}

fn cmd_distance(a: &Path, b: &Path, zscore: Option<&Path>) -> Result<()> {
    let ta = parse_template_csv(&read_to_string(a)?)
        .with_context(|| format!("parsing {}", a.display()))?;
    let tb = parse_template_csv(&read_to_string(b)?)
        .with_context(|| format!("parsing {}", b.display()))?;
    let distance = match zscore {
        None => euclidean_distance(&ta, &tb),
        Some(pop_path) => {
            let population = parse_templates_csv(&read_to_string(pop_path)?)
                .with_context(|| format!("parsing {}", pop_path.display()))?;
            let stats = PopulationStats::from_templates(&population);
            let (va, vb) =
                normalize_templates(&ta, &tb, NormalizationMode::Zscore, Some(&stats))?;
            vector_distance(&va, &vb)
        }
    };
    println!("{distance}");
    Ok(())
}

fn cmd_simulate(
    config_path: &Path,
    trace_path: &Path,
    out: &Path,
    event_log: bool,
    seed: u64,
) -> Result<()> {
    let spec = load_experiment_config(config_path)?;
    let trace = load_valid_trace(trace_path)?;
    let mut channel = spec.channel.clone();
    channel.sources = simulate_sources(&spec);
    channel.seed = seed;
    let packets = events_to_packets(&trace, spec.event_size_bytes);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (deliveries, stats) = if event_log {
        let (d, s, log) = run_channel_with_log(&channel, &packets)?;
        write_file(&out.join("events.csv"), &write_event_log_csv(&log))?;
        (d, s)
    } else {
        run_channel(&channel, &packets)?
    };
    let received = reconstruct_trace(&deliveries, &trace)?;
    write_file(&out.join("received.trace"), &format_trace(&received))?;
    let stats_json =
        serde_json::to_string_pretty(&stats).context("serializing channel stats")?;
    write_file(&out.join("stats.json"), &(stats_json + "\n"))
}

/// The sources a single channel pass uses: the first sweep load, if any,
/// plus the configured cross traffic.
fn simulate_sources(spec: &ExperimentSpec) -> Vec<kcs_core::netsim::TrafficSourceSpec> {
    let first_load = spec.ditg.as_ref().and_then(|d| d.pps.first().copied());
    spec.effective_sources(first_load)
}

fn cmd_suite(config_dir: &Path, out: &Path, seed: u64, reps: Option<u32>) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(config_dir)
        .with_context(|| format!("reading {}", config_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .cfg files in {}", config_dir.display());
    }
    let mut specs = Vec::with_capacity(paths.len());
    for p in &paths {
        let mut spec = load_experiment_config(p)?;
        if let Some(r) = reps {
            spec.repetitions = r;
        }
        specs.push(spec);
    }
    let needed: usize = specs.iter().map(|s| s.sample_size).max().unwrap_or(122) * 3;
    let text = pangram_text(needed.max(400));
    let alpha = builtin_profile_alpha();
    let beta = builtin_profile_beta();
    let reference = synth_trace(&alpha, &text, seed)?;
    let users = vec![reference.clone(), synth_trace(&beta, &text, seed + 1)?];
    let report = run_suite(&specs, &reference, &users, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("report.csv"), &report_csv(&report))?;
    write_file(&out.join("report.json"), &(report_json(&report)? + "\n"))?;
    write_file(&out.join("population.csv"), &write_templates_csv(&report.population))
}

fn cmd_synth(profile_path: &Path, text_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let profile = load_profile_config(profile_path)?;
    let text: Vec<u32> = read_to_string(text_path)?
        .chars()
        .filter(|c| *c != '\n' && *c != '\r')
        .map(|c| c.to_ascii_uppercase() as u32)
        .collect();
    if text.is_empty() {
        bail!("{}: no key codes in text file", text_path.display());
    }
    let trace = synth_trace(&profile, &text, seed)?;
    write_file(out, &format_trace(&trace))
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Extract {
            trace,
            out,
            sample,
            seed,
        } => cmd_extract(trace, out, *sample, *seed),
        Command::Distance {
            template_a,
            template_b,
            zscore,
        } => cmd_distance(template_a, template_b, zscore.as_deref()),
        Command::Simulate {
            config,
            trace,
            out,
            event_log,
            seed,
        } => cmd_simulate(config, trace, out, *event_log, *seed),
        Command::Suite {
            config_dir,
            out,
            seed,
            reps,
        } => cmd_suite(config_dir, out, *seed, *reps),
        Command::Synth {
            profile,
            text,
            out,
            seed,
        } => cmd_synth(profile, text, out, *seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
