use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cloudindex::catalog::{filter_candidates, Catalog, CompositionScope, ResourceRequirement, VmId};
use cloudindex::index::{compare_indices, index_series, IndexOptions, MissingPolicy};
use cloudindex::policies::BalancedParams;
use cloudindex::presets;
use cloudindex::prices::{
    ingest_traces, read_trace_path, write_traces_csv, PriceTrace, TraceKeySchema, UnknownVmPolicy,
};
use cloudindex::simulator::{run_trials, JobSpec, MigrationModel, SimConfig, SimEvent};
use cloudindex::synth::{generate_market_suite, SynthMarketSpec};
use serde::{Deserialize, Serialize};

use crate::config::{Echo, Envelope};
use crate::report::{write_trial_rows, TrialRow};
use crate::{IndexArgs, IngestArgs, SimulateArgs, SynthArgs};

/// Buffered writer to `path`, or stdout.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(std::io::stdout().lock()))),
    }
}

pub fn write_json<T: Serialize>(w: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

fn load_catalog(path: &Path) -> Result<Catalog> {
    Catalog::load(path).with_context(|| format!("loading catalog {}", path.display()))
}

fn parse<T: std::str::FromStr<Err = String>>(text: &str) -> Result<T> {
    text.parse().map_err(|e: String| anyhow!(e))
}

fn missing_policy(text: &str) -> MissingPolicy {
    if text == "skip" {
        MissingPolicy::Skip
    } else {
        MissingPolicy::Error
    }
}

fn load_traces(paths: &[PathBuf], schema: TraceKeySchema, catalog: &Catalog) -> Result<BTreeMap<VmId, PriceTrace>> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_trace_path(p, schema).with_context(|| format!("reading traces {}", p.display()))?);
    }
    let ingested = ingest_traces(records, catalog, UnknownVmPolicy::Skip)?;
    Ok(ingested.traces)
}

/// Catalog members in `scope` meeting `req` that also have a trace.
fn composition(
    catalog: &Catalog,
    traces: &BTreeMap<VmId, PriceTrace>,
    scope: &CompositionScope,
    req: &ResourceRequirement,
) -> Result<Vec<VmId>> {
    let ids: Vec<VmId> = filter_candidates(catalog, req, scope)
        .into_iter()
        .filter(|s| traces.contains_key(&s.id))
        .map(|s| s.id.clone())
        .collect();
    if ids.is_empty() {
        bail!("no priced catalog entries in scope `{scope}`");
    }
    Ok(ids)
}

/// Earliest instant at which every member has a price.
fn common_start<'a>(traces: &BTreeMap<VmId, PriceTrace>, ids: impl IntoIterator<Item = &'a VmId>) -> i64 {
    ids.into_iter()
        .map(|id| traces[id].first_timestamp())
        .max()
        .unwrap_or(0)
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let schema: TraceKeySchema = parse(&a.schema)?;
    let mut records = Vec::new();
    for p in &a.traces {
        records.extend(read_trace_path(p, schema).with_context(|| format!("reading traces {}", p.display()))?);
    }
    let unknown = if a.unknown == "error" {
        UnknownVmPolicy::Error
    } else {
        UnknownVmPolicy::Skip
    };
    let ingested = ingest_traces(records, &catalog, unknown)?;
    let points: usize = ingested.traces.values().map(|t| t.points().len()).sum();
    log::info!(
        "{} vm(s), {points} price change(s), {} unknown row(s) skipped, {} duplicate timestamp(s)",
        ingested.traces.len(),
        ingested.skipped_unknown,
        ingested.duplicate_timestamps
    );
    let mut w = open_output(a.out.as_deref())?;
    writeln!(w, "{}", Echo::new("ingest", a.seed, a).comment())?;
    write_traces_csv(&mut w, ingested.traces.values())?;
    w.flush()?;
    Ok(())
}

impl IndexArgs {
    fn scope(&self) -> Result<CompositionScope> {
        let scope = if let Some(s) = &self.scope {
            parse(s)?
        } else if let Some(z) = &self.zone {
            CompositionScope::Zone(z.clone())
        } else if let Some(r) = &self.region {
            CompositionScope::Region(r.clone())
        } else if let Some(f) = &self.family {
            CompositionScope::Family(parse(f)?)
        } else {
            CompositionScope::Global
        };
        Ok(scope)
    }
}

#[derive(Serialize)]
struct IndexComparison {
    scope: String,
    vs: String,
    series: cloudindex::index::IndexSeries,
    vs_series: cloudindex::index::IndexSeries,
    comparison: cloudindex::index::ComparisonReport,
}

pub fn index(a: &IndexArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let traces = load_traces(&a.traces, parse(&a.schema)?, &catalog)?;
    let req = ResourceRequirement::new(a.min_cpu, a.min_mem).map_err(|e| anyhow!(e))?;
    let scope = a.scope()?;
    let ids = composition(&catalog, &traces, &scope, &req)?;
    let vs = match &a.vs {
        Some(text) => {
            let s: CompositionScope = parse(text)?;
            let vs_ids = composition(&catalog, &traces, &s, &req)?;
            Some((s, vs_ids))
        }
        None => None,
    };
    let all_ids = ids.iter().chain(vs.iter().flat_map(|(_, v)| v.iter()));
    let start = a.start.unwrap_or_else(|| common_start(&traces, all_ids.clone()));
    let end = a
        .end
        .unwrap_or_else(|| all_ids.map(|id| traces[id].last_timestamp()).max().unwrap_or(start) + 1);
    let opts = IndexOptions {
        missing: missing_policy(&a.missing),
        ..Default::default()
    };
    let series = index_series(&traces, &catalog, &ids, start, end, a.period, &opts)?;
    let echo = Echo::new("index", a.seed, a);
    let mut w = open_output(a.out.as_deref())?;
    if let Some((vs_scope, vs_ids)) = vs {
        let vs_series = index_series(&traces, &catalog, &vs_ids, start, end, a.period, &opts)?;
        let comparison = compare_indices(&series, &vs_series)?;
        let result = IndexComparison {
            scope: scope.to_string(),
            vs: vs_scope.to_string(),
            series,
            vs_series,
            comparison,
        };
        write_json(&mut w, &Envelope { echo, result })?;
    } else if a.format == "json" {
        write_json(&mut w, &Envelope { echo, result: series })?;
    } else {
        writeln!(w, "{}", echo.comment())?;
        series.write_csv(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    List(Vec<SynthMarketSpec>),
    Wrapped { markets: Vec<SynthMarketSpec> },
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let echo = Echo::new("synth", a.seed, a);
    let traces = if a.preset.is_some() {
        let traces = presets::traces(a.seed, a.scale)?;
        let mut w = open_output(Some(&a.out.join("catalog.csv")))?;
        writeln!(w, "{}", echo.comment())?;
        presets::catalog().write_csv(&mut w)?;
        w.flush()?;
        #[derive(Serialize)]
        struct JobFile<'a, T: Serialize> {
            #[serde(flatten)]
            echo: &'a Echo<'a, T>,
            #[serde(flatten)]
            job: &'a JobSpec,
        }
        for job in presets::job_variants() {
            let mut w = open_output(Some(&a.out.join("jobs").join(format!("{}.json", job.name))))?;
            write_json(&mut w, &JobFile { echo: &echo, job: &job })?;
            w.flush()?;
        }
        traces
    } else {
        let path = a.spec.as_ref().context("either --spec or --preset is required")?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let specs = match serde_json::from_str::<SpecFile>(&text)
            .with_context(|| format!("parsing market specs {}", path.display()))?
        {
            SpecFile::List(v) | SpecFile::Wrapped { markets: v } => v,
        };
        let specs: Vec<SynthMarketSpec> = specs
            .into_iter()
            .map(|s| SynthMarketSpec {
                volatility_scale: s.volatility_scale * a.scale,
                ..s
            })
            .collect();
        generate_market_suite(&specs, a.seed)?
    };
    let mut w = open_output(Some(&a.out.join("traces.csv")))?;
    writeln!(w, "{}", echo.comment())?;
    write_traces_csv(&mut w, traces.values())?;
    w.flush()?;
    Ok(())
}

impl SimulateArgs {
    fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            policy: parse(&self.policy)?,
            epoch: self.epoch,
            start: 0,
            sigma_window: self.sigma_window,
            sigma_sample: self.sigma_sample,
            static_lookback: self.static_lookback,
            horizon: self.horizon,
            balanced: BalancedParams {
                sufficiency: parse(&self.sufficiency)?,
                target: parse(&self.balanced_target)?,
                ..Default::default()
            },
            sharpe_index: parse(&self.sharpe_index)?,
            migration: MigrationModel {
                rate: self.migration_rate,
                fixed_floor: self.migration_floor,
                revocation_restart: self.restart,
                pinned: self.migration_pinned,
            },
            capped_as_revocation: self.capped_as_revocation,
            index: IndexOptions {
                missing: missing_policy(&self.missing),
                ..Default::default()
            },
            forced: Vec::new(),
            max_wallclock: self.max_wallclock,
            seed: self.seed,
        })
    }
}

#[derive(Serialize)]
struct TrialEvent<'a> {
    trial: usize,
    #[serde(flatten)]
    event: &'a SimEvent,
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.job).with_context(|| format!("reading job {}", a.job.display()))?;
    let job: JobSpec = serde_json::from_str(&text).with_context(|| format!("parsing job {}", a.job.display()))?;
    let catalog = load_catalog(&a.catalog)?;
    let schema: TraceKeySchema = parse(&a.schema)?;
    let trace_sets = a
        .traces
        .iter()
        .map(|p| load_traces(std::slice::from_ref(p), schema, &catalog))
        .collect::<Result<Vec<_>>>()?;
    let scope: CompositionScope = parse(&a.composition)?;
    let ids = composition(&catalog, &trace_sets[0], &scope, &ResourceRequirement::default())?;
    let mut config = a.sim_config()?;
    config.start = a.start.unwrap_or_else(|| common_start(&trace_sets[0], &ids));

    let aggregate = run_trials(&job, &trace_sets, &catalog, &ids, &config)?;
    let echo = Echo::new("simulate", a.seed, a);

    if let Some(path) = &a.events {
        let mut w = open_output(Some(path))?;
        serde_json::to_writer(&mut w, &echo)?;
        writeln!(w)?;
        for (trial, report) in aggregate.trials.iter().enumerate() {
            for event in &report.events {
                serde_json::to_writer(&mut w, &TrialEvent { trial, event })?;
                writeln!(w)?;
            }
        }
        w.flush()?;
    }
    if let Some(path) = &a.summary {
        let rows: Vec<TrialRow> = aggregate
            .trials
            .iter()
            .enumerate()
            .map(|(i, r)| TrialRow::new(None, i, r))
            .collect();
        let mut w = open_output(Some(path))?;
        writeln!(w, "{}", echo.comment())?;
        write_trial_rows(&mut w, &rows)?;
        w.flush()?;
    }
    let mut w = open_output(a.out.as_deref())?;
    write_json(
        &mut w,
        &Envelope {
            echo,
            result: &aggregate,
        },
    )?;
    w.flush()?;
    Ok(())
}
