//! Batch runner, metrics aggregation, trace export and audits.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{BehaviouralAction, PolicyKind};
use crate::config::{Density, EpisodeConfig, ScenarioConfig};
use crate::env::{Environment, StepOutcome, StepTrace};
use crate::error::{EnvError, HarnessError};
use crate::road::VehicleId;
use crate::shield::safe_distance;

pub const TRACE_SCHEMA: &str = "merge-shield.step-trace";
pub const TRACE_VERSION: u32 = 1;

/// Episodes simulated in parallel before results are handed on in order.
const CHUNK: usize = 128;

/// Seed of episode `episode` in the batch seeded by `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub scenario: ScenarioConfig,
    pub policy: PolicyKind,
    pub density: Density,
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub shield: bool,
}

impl BatchSpec {
    pub fn new(policy: PolicyKind, density: Density, episodes: usize, seeds: Vec<u64>) -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            policy,
            density,
            episodes,
            seeds,
            shield: true,
        }
    }

    fn jobs(&self) -> Vec<(usize, u64, usize)> {
        self.seeds
            .iter()
            .enumerate()
            .flat_map(|(k, &seed)| (0..self.episodes).map(move |e| (k, seed, e)))
            .collect()
    }
}

/// Joint actions of one episode, sufficient to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLog {
    pub seed: u64,
    pub density: Density,
    pub shield: bool,
    /// Per behavioural step, one action index per active vehicle.
    pub steps: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub episode: usize,
    pub vehicles: usize,
    pub steps: usize,
    pub crashed: bool,
    pub crash_pairs: usize,
    pub failed_merges: usize,
    pub vehicle_substeps: usize,
    pub speed_sum: f64,
    pub min_headway: Option<f64>,
    pub interventions: usize,
    pub slack_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub summary: EpisodeSummary,
    pub traces: Vec<StepTrace>,
    pub actions: ActionLog,
}

fn episode_error(seed: u64, episode: usize) -> impl Fn(EnvError) -> HarnessError {
    move |source| HarnessError::Episode {
        seed,
        episode,
        source,
    }
}

/// Run one episode of the batch. `episode_id` is stamped on trace records.
pub fn run_episode(
    spec: &BatchSpec,
    seed: u64,
    episode: usize,
    episode_id: u64,
    record: bool,
) -> Result<EpisodeRun, HarnessError> {
    let wrap = episode_error(seed, episode);
    let mut env = Environment::new(spec.scenario)?;
    env.set_shield(spec.shield);
    env.set_recording(record);
    env.set_episode_id(episode_id);
    let ep_seed = episode_seed(seed, episode);
    env.reset(EpisodeConfig {
        density: spec.density,
        seed: ep_seed,
        ..spec.scenario.episode
    })
    .map_err(&wrap)?;

    let mut policies: HashMap<VehicleId, _> = env
        .vehicles()
        .iter()
        .map(|v| (v.id, spec.policy.build(ep_seed, v.id)))
        .collect();
    let mut log = ActionLog {
        seed: ep_seed,
        density: spec.density,
        shield: spec.shield,
        steps: Vec::new(),
    };
    let mut traces = Vec::new();
    while !env.is_done() {
        let actions: Vec<BehaviouralAction> = env
            .policy_views()
            .iter()
            .map(|view| {
                policies
                    .get_mut(&view.id)
                    .expect("policy per vehicle")
                    .act(view)
            })
            .collect();
        log.steps.push(actions.iter().map(|a| a.index()).collect());
        let out = env.step(&actions).map_err(&wrap)?;
        traces.extend(out.info.traces);
    }

    let s = env.stats();
    Ok(EpisodeRun {
        summary: EpisodeSummary {
            seed,
            episode,
            vehicles: env.vehicles().len(),
            steps: s.steps,
            crashed: s.crash_pairs > 0,
            crash_pairs: s.crash_pairs,
            failed_merges: s.failed_merges,
            vehicle_substeps: s.vehicle_substeps,
            speed_sum: s.speed_sum,
            min_headway: s.min_headway,
            interventions: s.interventions,
            slack_events: s.slack_events,
        },
        traces,
        actions: log,
    })
}

/// Re-drive an environment with a recorded action log.
pub fn replay(
    scenario: &ScenarioConfig,
    log: &ActionLog,
    record: bool,
) -> Result<Vec<StepOutcome>, EnvError> {
    let mut env = Environment::new(*scenario)?;
    env.set_shield(log.shield);
    env.set_recording(record);
    env.reset(EpisodeConfig {
        density: log.density,
        seed: log.seed,
        ..scenario.episode
    })?;
    log.steps
        .iter()
        .map(|step| {
            let actions = step
                .iter()
                .map(|&a| BehaviouralAction::try_from(a))
                .collect::<Result<Vec<_>, _>>()?;
            env.step(&actions)
        })
        .collect()
}

/// Aggregated batch metrics. All fields are sums, counts or extrema, so
/// reports over disjoint episode sets merge exactly up to float addition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub crash_episodes: usize,
    pub crash_pairs: usize,
    pub failed_merges: usize,
    pub vehicle_substeps: usize,
    pub speed_sum: f64,
    pub min_headway: Option<f64>,
    pub interventions: usize,
    pub slack_events: usize,
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

impl MetricsReport {
    pub fn from_summary(s: &EpisodeSummary) -> Self {
        Self {
            episodes: 1,
            crash_episodes: usize::from(s.crashed),
            crash_pairs: s.crash_pairs,
            failed_merges: s.failed_merges,
            vehicle_substeps: s.vehicle_substeps,
            speed_sum: s.speed_sum,
            min_headway: s.min_headway,
            interventions: s.interventions,
            slack_events: s.slack_events,
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            episodes: self.episodes + other.episodes,
            crash_episodes: self.crash_episodes + other.crash_episodes,
            crash_pairs: self.crash_pairs + other.crash_pairs,
            failed_merges: self.failed_merges + other.failed_merges,
            vehicle_substeps: self.vehicle_substeps + other.vehicle_substeps,
            speed_sum: self.speed_sum + other.speed_sum,
            min_headway: min_opt(self.min_headway, other.min_headway),
            interventions: self.interventions + other.interventions,
            slack_events: self.slack_events + other.slack_events,
        }
    }

    pub fn from_summaries<'a>(summaries: impl IntoIterator<Item = &'a EpisodeSummary>) -> Self {
        summaries
            .into_iter()
            .fold(Self::default(), |acc, s| acc.merge(&Self::from_summary(s)))
    }

    /// Mean crash count per episode.
    pub fn crash_count(&self) -> f64 {
        ratio(self.crash_pairs as f64, self.episodes)
    }

    pub fn crash_episode_fraction(&self) -> f64 {
        ratio(self.crash_episodes as f64, self.episodes)
    }

    pub fn average_speed(&self) -> f64 {
        ratio(self.speed_sum, self.vehicle_substeps)
    }

    /// Fraction of vehicle motion steps where the shield changed the control.
    pub fn intervention_rate(&self) -> f64 {
        ratio(self.interventions as f64, self.vehicle_substeps)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(MetricsRow::from(self)).map_err(csv_error)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(input);
        let row: MetricsRow = r
            .deserialize()
            .next()
            .ok_or_else(|| HarnessError::TraceFormat {
                line: 2,
                message: "missing metrics row".into(),
            })?
            .map_err(csv_error)?;
        Ok(row.into())
    }
}

fn ratio(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

fn csv_error(e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::Io(io),
        other => HarnessError::TraceFormat {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Flat CSV row: the mergeable totals followed by the derived rates.
#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    episodes: usize,
    crash_episodes: usize,
    crash_count: usize,
    crash_count_mean: f64,
    average_speed: f64,
    min_headway: Option<f64>,
    failed_merges: usize,
    intervention_rate: f64,
    interventions: usize,
    slack_events: usize,
    vehicle_substeps: usize,
    speed_sum: f64,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            episodes: r.episodes,
            crash_episodes: r.crash_episodes,
            crash_count: r.crash_pairs,
            crash_count_mean: r.crash_count(),
            average_speed: r.average_speed(),
            min_headway: r.min_headway,
            failed_merges: r.failed_merges,
            intervention_rate: r.intervention_rate(),
            interventions: r.interventions,
            slack_events: r.slack_events,
            vehicle_substeps: r.vehicle_substeps,
            speed_sum: r.speed_sum,
        }
    }
}

impl From<MetricsRow> for MetricsReport {
    fn from(r: MetricsRow) -> Self {
        Self {
            episodes: r.episodes,
            crash_episodes: r.crash_episodes,
            crash_pairs: r.crash_count,
            failed_merges: r.failed_merges,
            vehicle_substeps: r.vehicle_substeps,
            speed_sum: r.speed_sum,
            min_headway: r.min_headway,
            interventions: r.interventions,
            slack_events: r.slack_events,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub report: MetricsReport,
    /// Ordered by seed position, then episode.
    pub summaries: Vec<EpisodeSummary>,
}

/// Run the batch, handing every episode to `on_episode` in (seed, episode)
/// order. Episodes are simulated in parallel.
pub fn run_batch_with(
    spec: &BatchSpec,
    record: bool,
    mut on_episode: impl FnMut(&EpisodeRun) -> Result<(), HarnessError>,
) -> Result<BatchResult, HarnessError> {
    if spec.episodes == 0 {
        return Err(crate::error::ConfigError::NonPositive {
            field: "episodes",
            value: 0.0,
        }
        .into());
    }
    spec.scenario.validate()?;
    let jobs = spec.jobs();
    let mut summaries = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(CHUNK) {
        let runs: Vec<Result<EpisodeRun, HarnessError>> = chunk
            .par_iter()
            .map(|&(k, seed, e)| {
                let id = (k * spec.episodes + e) as u64;
                run_episode(spec, seed, e, id, record)
            })
            .collect();
        for run in runs {
            let run = run?;
            on_episode(&run)?;
            summaries.push(run.summary);
        }
    }
    Ok(BatchResult {
        report: MetricsReport::from_summaries(&summaries),
        summaries,
    })
}

pub fn run_batch(spec: &BatchSpec) -> Result<BatchResult, HarnessError> {
    run_batch_with(spec, false, |_| Ok(()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    schema: String,
    version: u32,
}

/// Newline-delimited JSON trace writer. The first line is a schema header.
pub struct TraceWriter<W: Write> {
    out: W,
    records: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self, HarnessError> {
        let header = TraceHeader {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(Self { out, records: 0 })
    }

    pub fn write(&mut self, record: &StepTrace) -> Result<(), HarnessError> {
        serde_json::to_writer(&mut self.out, record).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn finish(mut self) -> Result<W, HarnessError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn export_traces<W: Write>(out: W, traces: &[StepTrace]) -> Result<W, HarnessError> {
    let mut w = TraceWriter::new(out)?;
    for t in traces {
        w.write(t)?;
    }
    w.finish()
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<StepTrace>, HarnessError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| HarnessError::TraceFormat {
        line: 1,
        message: "missing header".into(),
    })??;
    let header: TraceHeader =
        serde_json::from_str(&header).map_err(|e| HarnessError::TraceFormat {
            line: 1,
            message: e.to_string(),
        })?;
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(HarnessError::TraceFormat {
            line: 1,
            message: format!("unsupported schema {} v{}", header.schema, header.version),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| HarnessError::TraceFormat {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Minimum headway per evaluation epoch, with the envelope across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadwayRow {
    pub epoch: usize,
    /// Mean over seeds of each seed's epoch minimum.
    pub min_headway: f64,
    pub seed_min: f64,
    pub seed_max: f64,
    pub seeds: usize,
}

/// Group each seed's episodes into epochs of `episodes_per_epoch` and report
/// the per-epoch minimum headway across seeds. Epochs with no recorded
/// headway are omitted.
pub fn headway_series(summaries: &[EpisodeSummary], episodes_per_epoch: usize) -> Vec<HeadwayRow> {
    let per = episodes_per_epoch.max(1);
    let mut minima: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    for s in summaries {
        if let Some(h) = s.min_headway {
            let slot = minima.entry(s.episode / per).or_default().entry(s.seed).or_insert(h);
            *slot = slot.min(h);
        }
    }
    minima
        .into_iter()
        .map(|(epoch, by_seed)| {
            let values: Vec<f64> = by_seed.into_values().collect();
            HeadwayRow {
                epoch,
                min_headway: values.iter().sum::<f64>() / values.len() as f64,
                seed_min: values.iter().cloned().fold(f64::INFINITY, f64::min),
                seed_max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                seeds: values.len(),
            }
        })
        .collect()
}

pub fn write_headway_series<W: Write>(out: W, rows: &[HeadwayRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["epoch", "min_headway", "seed_min", "seed_max", "seeds"])
            .map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_headway_series<W: Write>(
    out: W,
    summaries: &[EpisodeSummary],
    episodes_per_epoch: usize,
) -> Result<Vec<HeadwayRow>, HarnessError> {
    let rows = headway_series(summaries, episodes_per_epoch);
    write_headway_series(out, &rows)?;
    Ok(rows)
}

/// Minimum headway over trace records.
pub fn min_trace_headway<'a>(traces: impl IntoIterator<Item = &'a StepTrace>) -> Option<f64> {
    traces
        .into_iter()
        .filter_map(|t| t.headway)
        .min_by(f64::total_cmp)
}

/// Result of checking `h(x') + (eta - 1) h(x) >= 0` across consecutive records.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InvarianceAudit {
    pub transitions: usize,
    /// Smallest residual seen; `+inf` when nothing was checked.
    pub worst_residual: f64,
    /// Smallest barrier value seen among constrained pairs.
    pub min_barrier: f64,
}

/// Recompute the barrier of every recorded constraint at the next motion
/// step from the recorded states and check the discrete invariance condition.
pub fn audit_invariance(traces: &[StepTrace], scenario: &ScenarioConfig) -> InvarianceAudit {
    let substeps = scenario.episode.substeps;
    let index = |t: &StepTrace| (t.episode, t.step * substeps + t.substep);
    let mut by_time: HashMap<(u64, usize), HashMap<VehicleId, &StepTrace>> = HashMap::new();
    for t in traces {
        by_time.entry(index(t)).or_default().insert(t.vehicle, t);
    }
    let length = scenario.vehicle.length;
    let cfg = &scenario.shield;
    let mut audit = InvarianceAudit {
        transitions: 0,
        worst_residual: f64::INFINITY,
        min_barrier: f64::INFINITY,
    };
    for t in traces {
        let (ep, k) = index(t);
        let Some(next) = by_time.get(&(ep, k + 1)) else {
            continue;
        };
        for c in &t.constraints {
            audit.min_barrier = audit.min_barrier.min(c.h);
            let (Some(e1), Some(l1)) = (next.get(&t.vehicle), next.get(&c.leader)) else {
                continue;
            };
            let gap = l1.state.x - e1.state.x - length;
            let h1 = gap - safe_distance(e1.state.speed, cfg).x_safe;
            audit.worst_residual = audit.worst_residual.min(h1 + (cfg.eta - 1.0) * c.h);
            audit.min_barrier = audit.min_barrier.min(h1);
            audit.transitions += 1;
        }
    }
    audit
}
