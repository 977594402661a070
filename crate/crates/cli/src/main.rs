//! Batch runner: simulates episodes, writes metrics, traces and the headway
//! series.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use merge_shield::harness::{emit_headway_series, TraceWriter};
use merge_shield::{run_batch_with, BatchSpec, Density, PolicyKind, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "merge-shield", version, about = "Run shielded on-ramp merging episodes")]
struct Args {
    /// Scenario file (TOML). Defaults apply to absent keys.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// random, keep_lane_cruise, aggressive_merger or shy_merger.
    #[arg(long, default_value = "random")]
    policy: PolicyKind,
    /// light or moderate.
    #[arg(long, default_value = "moderate")]
    density: Density,
    /// Episodes per seed.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "on")]
    shield: Switch,
    /// Newline-delimited JSON step traces.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Aggregate metrics as CSV.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Per-epoch minimum headway with the envelope over seeds, as CSV.
    #[arg(long)]
    headway_out: Option<PathBuf>,
    /// Episodes per seed grouped into one headway epoch.
    #[arg(long, default_value_t = 10)]
    episodes_per_epoch: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn run(args: Args) -> Result<()> {
    let scenario = match &args.scenario {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    anyhow::ensure!(!args.seeds.is_empty(), "at least one seed is required");
    anyhow::ensure!(args.episodes_per_epoch > 0, "--episodes-per-epoch must be at least 1");
    let spec = BatchSpec {
        scenario,
        shield: args.shield == Switch::On,
        ..BatchSpec::new(args.policy, args.density, args.episodes, args.seeds.clone())
    };

    let mut traces = match &args.trace_out {
        Some(path) => Some(TraceWriter::new(create(path)?)?),
        None => None,
    };
    let result = run_batch_with(&spec, traces.is_some(), |run| {
        if let Some(w) = traces.as_mut() {
            for t in &run.traces {
                w.write(t)?;
            }
        }
        Ok(())
    })?;
    if let Some(w) = traces {
        w.finish()?;
    }

    let report = &result.report;
    if let Some(path) = &args.metrics_out {
        let mut out = create(path)?;
        report.write_csv(&mut out)?;
        out.flush()?;
    }
    if let Some(path) = &args.headway_out {
        let mut out = create(path)?;
        emit_headway_series(&mut out, &result.summaries, args.episodes_per_epoch)?;
        out.flush()?;
    }

    let headway = report
        .min_headway
        .map_or_else(|| "n/a".to_owned(), |h| format!("{h:.4} s"));
    println!(
        "policy={} density={} shield={} episodes={} crash_episodes={} crash_count={:.4} \
         average_speed={:.3} m/s min_headway={} intervention_rate={:.4} failed_merges={}",
        spec.policy,
        spec.density,
        if spec.shield { "on" } else { "off" },
        report.episodes,
        report.crash_episodes,
        report.crash_count(),
        report.average_speed(),
        headway,
        report.intervention_rate(),
        report.failed_merges,
    );
    Ok(())
}

fn main() -> Result<()> {
    run(Args::parse())
}
