//! Discrete-time simulation of jobs on spot VMs under a migration policy.
//!
//! Time advances on a one-second billing grid. Each second runs, in order:
//! completion of migrations and restarts due at that second, revocation
//! checks on every held VM, policy decisions (every `epoch` seconds, plus
//! forced moves when the current VM cannot host the running phase), billing
//! of every held VM, and finally progress for tasks that are not stalled.
//!
//! Billing is recorded as closed intervals carrying the sum of per-second
//! prices, so the total cost can be rebuilt from the interval log alone.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ResourceRequirement, VmId, VmSpec};
use crate::index::{normalize, IndexCurve, IndexError, IndexOptions};
use crate::policies::{
    policy_availability_aware, policy_balanced, policy_cost_centric, policy_static, sample_std,
    select_availability_aware, select_balanced, select_cost_centric, utilized_price_on, Action, BalancedParams,
    CandidateQuote, PolicyError, PolicyKind, StaticQuote, UtilizationSample,
};
use crate::prices::{is_capped, PriceError, PriceTrace};
use crate::tracking::{should_migrate, LedgerEntry, TrackingLedger};

pub const DEFAULT_EPOCH: i64 = 300;
pub const DEFAULT_SUPERSTEP: i64 = 300;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("price trace coverage: {0}")]
    Coverage(#[from] PriceError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("no candidate VM at t={t}")]
    NoCandidates { t: i64 },
    #[error("policy error at t={t}: {source}")]
    Policy {
        t: i64,
        #[source]
        source: PolicyError,
    },
    #[error("job did not finish by t={t}")]
    Stalled { t: i64 },
    #[error("no trace sets given")]
    NoTrials,
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<SimError>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    LongRunning,
    Bsp,
}

/// A stretch of constant resource usage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Seconds of work.
    pub duration: i64,
    pub cpu_used: f64,
    pub mem_used: f64,
}

impl Phase {
    pub fn new(duration: i64, cpu_used: f64, mem_used: f64) -> Self {
        Phase {
            duration,
            cpu_used,
            mem_used,
        }
    }
}

fn one() -> usize {
    1
}

fn default_superstep() -> i64 {
    DEFAULT_SUPERSTEP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub name: String,
    pub kind: JobKind,
    #[serde(default = "one")]
    pub tasks: usize,
    /// Phases shared by every task unless `task_phases` is given.
    pub phases: Vec<Phase>,
    /// Per-task phases; when nonempty it must have one entry per task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task_phases: Vec<Vec<Phase>>,
    pub requirement: ResourceRequirement,
    /// GB moved by a stop-and-copy migration.
    pub mem_footprint: f64,
    /// Revocation threshold; defaults to the cheapest on-demand price that
    /// satisfies `requirement`.
    #[serde(default)]
    pub max_price: Option<f64>,
    /// `(cpu, mem)` the index cost is denormalized to; defaults to the
    /// requirement.
    #[serde(default)]
    pub reference_capacity: Option<(f64, f64)>,
    /// Synchronization interval for bsp jobs, seconds of work.
    #[serde(default = "default_superstep")]
    pub superstep: i64,
}

impl JobSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidJob(format!("{}: {m}", self.name)));
        if self.tasks == 0 {
            return bad("tasks must be positive".into());
        }
        if self.kind == JobKind::LongRunning && self.tasks != 1 {
            return bad("long_running jobs have exactly one task".into());
        }
        if !self.task_phases.is_empty() && self.task_phases.len() != self.tasks {
            return bad(format!(
                "{} task phase lists for {} tasks",
                self.task_phases.len(),
                self.tasks
            ));
        }
        if let Err(e) = self.requirement.validate() {
            return bad(e);
        }
        if !(self.mem_footprint.is_finite() && self.mem_footprint > 0.0) {
            return bad("mem_footprint must be > 0".into());
        }
        if self.superstep <= 0 {
            return bad("superstep must be > 0".into());
        }
        if let Some(p) = self.max_price {
            if !(p.is_finite() && p > 0.0) {
                return bad("max_price must be > 0".into());
            }
        }
        let work = self.work(0);
        for task in 0..self.tasks {
            let phases = self.phases_for(task);
            if phases.is_empty() {
                return bad(format!("task {task} has no phases"));
            }
            for p in phases {
                if p.duration <= 0 {
                    return bad("phase durations must be > 0".into());
                }
                if !(p.cpu_used.is_finite() && p.cpu_used >= 0.0 && p.mem_used.is_finite() && p.mem_used >= 0.0) {
                    return bad("phase utilization must be finite and >= 0".into());
                }
            }
            if self.work(task) != work {
                return bad("all tasks must carry the same amount of work".into());
            }
        }
        Ok(())
    }

    pub fn phases_for(&self, task: usize) -> &[Phase] {
        if self.task_phases.is_empty() {
            &self.phases
        } else {
            &self.task_phases[task]
        }
    }

    /// Seconds of work per task.
    pub fn work(&self, task: usize) -> i64 {
        self.phases_for(task).iter().map(|p| p.duration).sum()
    }

    /// Phase running once `progress` seconds of work are done.
    pub fn phase_at(&self, task: usize, progress: i64) -> &Phase {
        let phases = self.phases_for(task);
        let mut end = 0;
        for p in phases {
            end += p.duration;
            if progress < end {
                return p;
            }
        }
        &phases[phases.len() - 1]
    }

    fn at_phase_boundary(&self, task: usize, progress: i64) -> bool {
        let mut end = 0;
        for p in self.phases_for(task) {
            end += p.duration;
            if end == progress {
                return true;
            }
        }
        false
    }

    /// Largest cpu and memory use of any phase of any task.
    pub fn peak_utilization(&self) -> (f64, f64) {
        (0..self.tasks)
            .flat_map(|t| self.phases_for(t).iter())
            .fold((0.0, 0.0), |(c, m), p| {
                (f64::max(c, p.cpu_used), f64::max(m, p.mem_used))
            })
    }

    /// Duration-weighted mean utilization over all tasks.
    pub fn mean_utilization(&self) -> (f64, f64) {
        let (mut c, mut m, mut d) = (0.0, 0.0, 0.0);
        for t in 0..self.tasks {
            for p in self.phases_for(t) {
                c += p.cpu_used * p.duration as f64;
                m += p.mem_used * p.duration as f64;
                d += p.duration as f64;
            }
        }
        (c / d, m / d)
    }

    /// Requirement raised to cover `(cpu, mem)`.
    pub fn need(&self, cpu: f64, mem: f64) -> ResourceRequirement {
        ResourceRequirement {
            min_cpu: self.requirement.min_cpu.max(cpu),
            min_mem: self.requirement.min_mem.max(mem),
        }
    }
}

/// Stop-and-copy migration and revocation timing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationModel {
    /// Seconds per GB of memory footprint.
    pub rate: f64,
    pub fixed_floor: f64,
    /// Seconds from a revocation until the task runs again.
    pub revocation_restart: i64,
    /// Overrides the rate model when set.
    pub pinned: Option<f64>,
}

impl Default for MigrationModel {
    fn default() -> Self {
        MigrationModel {
            rate: 1.0,
            fixed_floor: 0.0,
            revocation_restart: 90,
            pinned: None,
        }
    }
}

impl MigrationModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.rate) && ok(self.fixed_floor) && self.revocation_restart >= 0 && self.pinned.is_none_or(ok)) {
            return Err(SimError::InvalidConfig("migration model values must be >= 0".into()));
        }
        Ok(())
    }

    /// Migration time in seconds before rounding.
    pub fn duration(&self, mem_footprint: f64) -> f64 {
        self.pinned
            .unwrap_or_else(|| (self.rate * mem_footprint).max(self.fixed_floor))
    }

    /// Whole billing seconds a migration takes; at least one.
    pub fn seconds(&self, mem_footprint: f64) -> i64 {
        (self.duration(mem_footprint).ceil() as i64).max(1)
    }
}

/// Index level fed into the Sharpe score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharpeIndexMode {
    /// The capacity-normalized index as is.
    Raw,
    /// The index denormalized to the reference capacity and re-expressed per
    /// unit of the running phase's utilization, matching the units of the
    /// utilized price.
    #[default]
    UtilizationScaled,
}

impl std::str::FromStr for SharpeIndexMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(SharpeIndexMode::Raw),
            "utilization-scaled" => Ok(SharpeIndexMode::UtilizationScaled),
            _ => Err(format!("unknown sharpe index mode `{s}` (raw, utilization-scaled)")),
        }
    }
}

/// A migration injected at a fixed time, regardless of policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcedMigration {
    pub task: usize,
    /// Applied at the first second >= `time` the task is running.
    pub time: i64,
    pub target: VmId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub policy: PolicyKind,
    pub epoch: i64,
    /// Job start time.
    pub start: i64,
    /// Trailing window for sigma and the mean utilized price.
    pub sigma_window: i64,
    /// Sampling step inside the window.
    pub sigma_sample: i64,
    /// Lookback for the static policy's average price.
    pub static_lookback: i64,
    /// Seconds over which cost-centric savings must repay a migration.
    pub horizon: f64,
    pub balanced: BalancedParams,
    pub sharpe_index: SharpeIndexMode,
    pub migration: MigrationModel,
    /// Treat a price sitting on the on-demand cap as a revocation.
    pub capped_as_revocation: bool,
    pub index: IndexOptions,
    pub forced: Vec<ForcedMigration>,
    /// Give up if the job is still running this many seconds after start.
    pub max_wallclock: Option<i64>,
    /// Recorded in the report; the simulation itself draws no randomness.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            policy: PolicyKind::Balanced,
            epoch: DEFAULT_EPOCH,
            start: 0,
            sigma_window: 3600,
            sigma_sample: 300,
            static_lookback: 3600,
            horizon: 3600.0,
            balanced: BalancedParams::default(),
            sharpe_index: SharpeIndexMode::default(),
            migration: MigrationModel::default(),
            capped_as_revocation: false,
            index: IndexOptions::default(),
            forced: Vec::new(),
            max_wallclock: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.epoch <= 0 || self.sigma_window <= 0 || self.sigma_sample <= 0 || self.static_lookback <= 0 {
            return Err(SimError::InvalidConfig(
                "epoch, sigma_window, sigma_sample and static_lookback must be > 0".into(),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(SimError::InvalidConfig("horizon must be >= 0".into()));
        }
        self.migration.validate()
    }
}

/// One VM held by one task over `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BillingInterval {
    pub task: usize,
    pub vm_id: VmId,
    pub start: i64,
    pub end: i64,
    /// Sum of the hourly price over each second held.
    pub price_sum: f64,
    /// `price_sum / 3600`.
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Place,
    MigrateBegin,
    MigrateEnd,
    Revoke,
    RestartEnd,
    Finish,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: i64,
    pub task: usize,
    pub kind: EventKind,
    pub vm_id: VmId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<VmId>,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Running,
    Paused,
    Migrating,
    Restarting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineSegment {
    pub start: i64,
    pub end: i64,
    pub vm_id: VmId,
    pub state: TaskState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub job: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub start: i64,
    pub end: i64,
    pub wallclock: i64,
    pub downtime: i64,
    pub availability: f64,
    pub total_cost: f64,
    pub baseline_on_demand_cost: f64,
    /// Index price for the reference capacity over the job's nominal work.
    pub index_cost: f64,
    /// Index price for the capacity actually held, each second one VM was held.
    pub tracked_index_cost: f64,
    pub cost_vs_on_demand: f64,
    pub cost_vs_index: f64,
    pub migrations: usize,
    pub revocations: usize,
    /// Policy-initiated migrations that failed the sufficiency test.
    pub sufficiency_violations: usize,
    pub ledger_gain: f64,
    pub ledger_loss: f64,
    pub ledger_net: f64,
    pub billing: Vec<BillingInterval>,
    pub events: Vec<SimEvent>,
    pub ledgers: Vec<Vec<LedgerEntry>>,
    pub timelines: Vec<Vec<TimelineSegment>>,
}

/// Cost of an interval log, summed in log order.
pub fn billed_cost(intervals: &[BillingInterval]) -> f64 {
    intervals.iter().fold(0.0, |acc, b| acc + b.cost)
}

/// Fills the cost ratios against the on-demand baseline and the index cost.
pub fn normalize_report(mut report: SimReport, baseline_on_demand_cost: f64, index_cost: f64) -> SimReport {
    report.baseline_on_demand_cost = baseline_on_demand_cost;
    report.index_cost = index_cost;
    report.cost_vs_on_demand = report.total_cost / baseline_on_demand_cost;
    report.cost_vs_index = report.total_cost / index_cost;
    report
}

#[derive(Clone, Debug, PartialEq)]
enum Status {
    Running,
    Migrating { to: VmId, until: i64 },
    Restarting { until: i64 },
}

#[derive(Clone, Debug)]
struct OpenInterval {
    vm_id: VmId,
    start: i64,
    price_sum: f64,
}

#[derive(Clone, Debug)]
struct Task {
    vm: VmId,
    status: Status,
    progress: i64,
    checkpoint: i64,
    open: Vec<OpenInterval>,
    ledger: TrackingLedger,
    timeline: Vec<TimelineSegment>,
}

impl Task {
    fn record(&mut self, t: i64, state: TaskState) {
        if let Some(last) = self.timeline.last_mut() {
            if last.end == t && last.state == state && last.vm_id == self.vm {
                last.end = t + 1;
                return;
            }
        }
        self.timeline.push(TimelineSegment {
            start: t,
            end: t + 1,
            vm_id: self.vm.clone(),
            state,
        });
    }
}

struct Market<'a> {
    spec: &'a VmSpec,
    trace: &'a PriceTrace,
}

struct Sim<'a> {
    job: &'a JobSpec,
    config: &'a SimConfig,
    markets: BTreeMap<VmId, Market<'a>>,
    index: IndexCurve,
    max_price: f64,
    migration_secs: i64,
    reference_scale: f64,
}

impl<'a> Sim<'a> {
    fn market(&self, id: &VmId) -> Result<&Market<'a>, SimError> {
        self.markets
            .get(id)
            .ok_or_else(|| SimError::InvalidConfig(format!("vm {id} has no trace or catalog entry")))
    }

    fn price(&self, id: &VmId, t: i64) -> Result<f64, SimError> {
        Ok(self.market(id)?.trace.price_at(t)?)
    }

    fn index(&self, t: i64) -> Result<f64, SimError> {
        Ok(self.index.sample_at(t)?.value)
    }

    fn revoked(&self, spec: &VmSpec, price: f64) -> bool {
        price > self.max_price
            || (self.config.capped_as_revocation && is_capped(price, spec, self.config.index.cap_epsilon))
    }

    fn sharpe_index(&self, index: f64, util: &UtilizationSample) -> f64 {
        match self.config.sharpe_index {
            SharpeIndexMode::Raw => index,
            SharpeIndexMode::UtilizationScaled => {
                let (cpu, mem) = util.floored(self.job.reference_capacity().0);
                index * self.reference_scale / (cpu * mem).sqrt()
            }
        }
    }

    /// Window sample instants `t, t - step, ...` that the trace covers.
    fn window(&self, trace: &PriceTrace, t: i64, length: i64) -> impl Iterator<Item = i64> {
        let step = self.config.sigma_sample;
        let n = (length / step).max(1);
        let first = trace.first_timestamp();
        (0..n).map(move |k| t - k * step).filter(move |s| *s >= first)
    }

    fn quotes(&self, t: i64, util: &UtilizationSample) -> Result<Vec<CandidateQuote>, SimError> {
        let need = self.job.need(util.cpu_used, util.mem_used);
        let mut out = Vec::new();
        for (id, m) in &self.markets {
            if !need.admits(m.spec) {
                continue;
            }
            let price = m.trace.price_at(t)?;
            if self.revoked(m.spec, price) {
                continue;
            }
            let history: Vec<f64> = self
                .window(m.trace, t, self.config.sigma_window)
                .map(|s| m.trace.price_at(s).map(|p| utilized_price_on(m.spec, p, util)))
                .collect::<Result<_, _>>()?;
            let mean = history.iter().sum::<f64>() / history.len() as f64;
            out.push(CandidateQuote {
                vm_id: id.clone(),
                price,
                p_hat: normalize(m.spec, price),
                p_breve: utilized_price_on(m.spec, price, util),
                p_breve_mean: mean,
                sigma: sample_std(&history),
            });
        }
        Ok(out)
    }

    fn static_choice(&self, t: i64) -> Result<VmId, SimError> {
        let (peak_cpu, peak_mem) = self.job.peak_utilization();
        let need = self.job.need(peak_cpu, peak_mem);
        let (cpu, mem) = self.job.mean_utilization();
        let util = UtilizationSample {
            timestamp: t,
            cpu_used: cpu,
            mem_used: mem,
        };
        let mut quotes = Vec::new();
        for (id, m) in &self.markets {
            if !need.admits(m.spec) || self.revoked(m.spec, m.trace.price_at(t)?) {
                continue;
            }
            let prices: Vec<f64> = self
                .window(m.trace, t, self.config.static_lookback)
                .map(|s| m.trace.price_at(s).map(|p| utilized_price_on(m.spec, p, &util)))
                .collect::<Result<_, _>>()?;
            quotes.push(StaticQuote {
                vm_id: id.clone(),
                mean_utilized_price: prices.iter().sum::<f64>() / prices.len() as f64,
            });
        }
        policy_static(&quotes).map_err(|source| policy_error(t, source))
    }

    /// Placement when the task must (re)start somewhere.
    fn select(&self, t: i64, util: &UtilizationSample) -> Result<VmId, SimError> {
        if self.config.policy == PolicyKind::Static {
            return self.static_choice(t);
        }
        let quotes = self.quotes(t, util)?;
        let index = self.index(t)?;
        let chosen = match self.config.policy {
            PolicyKind::Static => unreachable!(),
            PolicyKind::CostCentric => select_cost_centric(&quotes),
            PolicyKind::AvailabilityAware => select_availability_aware(&quotes, index),
            PolicyKind::Balanced => select_balanced(&quotes, self.sharpe_index(index, util)),
        };
        chosen.map_err(|source| policy_error(t, source))
    }

    /// Epoch decision for a running task; `None` means stay.
    fn decide(&self, t: i64, current: &VmId, util: &UtilizationSample) -> Result<Option<(VmId, String)>, SimError> {
        if self.config.policy == PolicyKind::Static {
            return Ok(None);
        }
        let quotes = self.quotes(t, util)?;
        if quotes.is_empty() {
            return Ok(None);
        }
        let index = self.index(t)?;
        let decision = match self.config.policy {
            PolicyKind::Static => unreachable!(),
            PolicyKind::CostCentric => {
                policy_cost_centric(current, &quotes, self.config.horizon, self.migration_secs as f64)
            }
            PolicyKind::AvailabilityAware => policy_availability_aware(current, &quotes, index),
            PolicyKind::Balanced => policy_balanced(
                current,
                &quotes,
                self.sharpe_index(index, util),
                index,
                &self.config.balanced,
            ),
        }
        .map_err(|source| policy_error(t, source))?;
        Ok(match decision.action {
            Action::Stay => None,
            Action::Migrate(target) => Some((target, decision.reason)),
        })
    }

    fn util(&self, task: usize, progress: i64, t: i64) -> UtilizationSample {
        let p = self.job.phase_at(task, progress);
        UtilizationSample {
            timestamp: t,
            cpu_used: p.cpu_used,
            mem_used: p.mem_used,
        }
    }
}

impl JobSpec {
    pub fn reference_capacity(&self) -> (f64, f64) {
        self.reference_capacity
            .unwrap_or((self.requirement.min_cpu, self.requirement.min_mem))
    }
}

fn policy_error(t: i64, source: PolicyError) -> SimError {
    match source {
        PolicyError::NoCandidates => SimError::NoCandidates { t },
        source => SimError::Policy { t, source },
    }
}

/// Cheapest on-demand price able to host `need`.
fn on_demand_for(catalog: &Catalog, need: &ResourceRequirement) -> Option<f64> {
    catalog
        .cheapest_on_demand(need.min_cpu, need.min_mem)
        .map(|s| s.on_demand_price)
}

/// Runs one job to completion.
///
/// Candidates are the catalog VMs that have a trace; the index is computed
/// over `composition`.
#[allow(clippy::needless_range_loop)]
pub fn run_simulation(
    job: &JobSpec,
    traces: &BTreeMap<VmId, PriceTrace>,
    catalog: &Catalog,
    composition: &[VmId],
    config: &SimConfig,
) -> Result<SimReport, SimError> {
    job.validate()?;
    config.validate()?;
    let markets: BTreeMap<VmId, Market> = traces
        .iter()
        .filter_map(|(id, trace)| catalog.get(id).map(|spec| (id.clone(), Market { spec, trace })))
        .collect();
    if markets.is_empty() {
        return Err(SimError::NoCandidates { t: config.start });
    }
    let max_price = match job.max_price {
        Some(p) => p,
        None => on_demand_for(catalog, &job.requirement)
            .ok_or_else(|| SimError::InvalidJob(format!("{}: no VM satisfies the requirement", job.name)))?,
    };
    let (ref_cpu, ref_mem) = job.reference_capacity();
    let sim = Sim {
        job,
        config,
        markets,
        index: IndexCurve::build(traces, catalog, composition, &config.index)?,
        max_price,
        migration_secs: config.migration.seconds(job.mem_footprint),
        reference_scale: (ref_cpu * ref_mem).sqrt(),
    };
    for f in &config.forced {
        if f.task >= job.tasks {
            return Err(SimError::InvalidConfig(format!(
                "forced migration for missing task {}",
                f.task
            )));
        }
        sim.market(&f.target)?;
    }
    let work = job.work(0);
    let limit = config.start + config.max_wallclock.unwrap_or(10 * work + 86_400);
    let restart = config.migration.revocation_restart;

    let mut events = Vec::new();
    let mut billing = Vec::new();
    let mut forced: Vec<Option<&ForcedMigration>> = config.forced.iter().map(Some).collect();
    let (mut migrations, mut revocations, mut sufficiency_violations) = (0usize, 0usize, 0usize);
    let (mut downtime, mut tracked_index_cost) = (0i64, 0.0f64);

    let mut t = config.start;
    let index0 = sim.index(t)?;
    let mut tasks = Vec::with_capacity(job.tasks);
    for task in 0..job.tasks {
        let vm = sim.select(t, &sim.util(task, 0, t))?;
        let price = sim.price(&vm, t)?;
        let mut ledger = TrackingLedger::new(composition_label(sim.index.composition()));
        ledger.hold(vm.clone(), t, price, Some(index0));
        events.push(SimEvent {
            t,
            task,
            kind: EventKind::Place,
            vm_id: vm.clone(),
            from: None,
            reason: "initial placement".into(),
        });
        tasks.push(Task {
            vm: vm.clone(),
            status: Status::Running,
            progress: 0,
            checkpoint: 0,
            open: vec![OpenInterval {
                vm_id: vm,
                start: t,
                price_sum: 0.0,
            }],
            ledger,
            timeline: Vec::new(),
        });
    }

    let close = |task: usize, iv: OpenInterval, end: i64, billing: &mut Vec<BillingInterval>| {
        if end > iv.start {
            billing.push(BillingInterval {
                task,
                vm_id: iv.vm_id,
                start: iv.start,
                end,
                price_sum: iv.price_sum,
                cost: iv.price_sum / 3600.0,
            });
        }
    };

    loop {
        if t >= limit {
            return Err(SimError::Stalled { t });
        }
        let index_now = sim.index(t)?;

        // Migrations and restarts that complete now.
        for (i, task) in tasks.iter_mut().enumerate() {
            match task.status.clone() {
                Status::Migrating { to, until } if until == t => {
                    let pos = task
                        .open
                        .iter()
                        .position(|o| o.vm_id == task.vm)
                        .expect("source interval");
                    let iv = task.open.remove(pos);
                    close(i, iv, t, &mut billing);
                    let from = std::mem::replace(&mut task.vm, to.clone());
                    task.status = Status::Running;
                    task.ledger
                        .end_migration(t, to.clone(), sim.price(&to, t)?, Some(index_now));
                    events.push(SimEvent {
                        t,
                        task: i,
                        kind: EventKind::MigrateEnd,
                        vm_id: to,
                        from: Some(from),
                        reason: String::new(),
                    });
                }
                Status::Restarting { until } if until == t => {
                    task.status = Status::Running;
                    events.push(SimEvent {
                        t,
                        task: i,
                        kind: EventKind::RestartEnd,
                        vm_id: task.vm.clone(),
                        from: None,
                        reason: String::new(),
                    });
                }
                _ => {}
            }
        }

        // Revocations of any held VM.
        for i in 0..tasks.len() {
            let held: Vec<VmId> = tasks[i].open.iter().map(|o| o.vm_id.clone()).collect();
            let mut hit = None;
            for vm in held {
                let m = sim.market(&vm)?;
                let price = m.trace.price_at(t)?;
                if sim.revoked(m.spec, price) {
                    hit = Some((vm, price));
                    break;
                }
            }
            let Some((vm, price)) = hit else { continue };
            revocations += 1;
            let task = &mut tasks[i];
            task.ledger.revoke(t, vm.clone(), price, Some(index_now));
            for iv in std::mem::take(&mut task.open) {
                close(i, iv, t, &mut billing);
            }
            events.push(SimEvent {
                t,
                task: i,
                kind: EventKind::Revoke,
                vm_id: vm,
                from: None,
                reason: format!("price {price} above max price {}", sim.max_price),
            });
            task.progress = task.checkpoint;
            let util = sim.util(i, task.progress, t);
            let next = sim.select(t, &util)?;
            let task = &mut tasks[i];
            task.ledger.hold(next.clone(), t, sim.price(&next, t)?, Some(index_now));
            task.open.push(OpenInterval {
                vm_id: next.clone(),
                start: t,
                price_sum: 0.0,
            });
            task.vm = next.clone();
            task.status = if restart > 0 {
                Status::Restarting { until: t + restart }
            } else {
                Status::Running
            };
            events.push(SimEvent {
                t,
                task: i,
                kind: EventKind::Place,
                vm_id: next,
                from: None,
                reason: "restart after revocation".into(),
            });
        }

        // Decisions.
        let epoch_tick = t > config.start && (t - config.start) % config.epoch == 0;
        for i in 0..tasks.len() {
            if tasks[i].status != Status::Running || tasks[i].progress >= work {
                continue;
            }
            let current = tasks[i].vm.clone();
            let util = sim.util(i, tasks[i].progress, t);
            let mut choice: Option<(VmId, String, bool)> = None;
            if let Some(slot) = forced
                .iter_mut()
                .find(|f| f.is_some_and(|f| f.task == i && f.time <= t))
            {
                let f = slot.take().expect("pending forced migration");
                if f.target != current {
                    choice = Some((f.target.clone(), "forced".into(), false));
                }
            }
            if choice.is_none() {
                let spec = sim.market(&current)?.spec;
                if !job.need(util.cpu_used, util.mem_used).admits(spec) {
                    let target = sim.select(t, &util)?;
                    choice = Some((target, "current vm cannot host the running phase".into(), false));
                } else if epoch_tick {
                    tasks[i].ledger.tick(t, sim.price(&current, t)?, Some(index_now));
                    if let Some((target, reason)) = sim.decide(t, &current, &util)? {
                        choice = Some((target, reason, true));
                    }
                }
            }
            let Some((target, reason, by_policy)) = choice else {
                continue;
            };
            if target == current {
                continue;
            }
            let (ps, pd) = (sim.price(&current, t)?, sim.price(&target, t)?);
            let sufficient = should_migrate(
                index_now,
                normalize(sim.market(&current)?.spec, ps),
                normalize(sim.market(&target)?.spec, pd),
            );
            if by_policy && !sufficient {
                sufficiency_violations += 1;
            }
            migrations += 1;
            let task = &mut tasks[i];
            task.ledger
                .begin_migration(t, target.clone(), (ps, pd), Some(index_now), Some(sufficient));
            task.open.push(OpenInterval {
                vm_id: target.clone(),
                start: t,
                price_sum: 0.0,
            });
            task.status = Status::Migrating {
                to: target.clone(),
                until: t + sim.migration_secs,
            };
            events.push(SimEvent {
                t,
                task: i,
                kind: EventKind::MigrateBegin,
                vm_id: target,
                from: Some(current),
                reason,
            });
        }

        // Billing for [t, t + 1).
        for task in tasks.iter_mut() {
            let mut prices = Vec::with_capacity(2);
            for iv in task.open.iter_mut() {
                let p = sim.price(&iv.vm_id, t)?;
                iv.price_sum += p;
                prices.push(p);
            }
            match (&task.status, prices.as_slice()) {
                (Status::Migrating { .. }, [ps, pd]) => task.ledger.accrue_migration(*ps, *pd, 1.0),
                (_, [p]) => {
                    let spec = sim.market(&task.vm)?.spec;
                    task.ledger.accrue_hold(index_now, spec, *p, 1.0);
                    tracked_index_cost += index_now * spec.resource_scale() / 3600.0;
                }
                _ => unreachable!("task holds {} vms", prices.len()),
            }
        }

        // Progress.
        let stalled = tasks.iter().any(|k| k.status != Status::Running);
        if stalled {
            downtime += 1;
            for task in tasks.iter_mut() {
                let state = match task.status {
                    Status::Running => TaskState::Paused,
                    Status::Migrating { .. } => TaskState::Migrating,
                    Status::Restarting { .. } => TaskState::Restarting,
                };
                task.record(t, state);
            }
        } else {
            let low = tasks.iter().map(|k| k.progress).min().unwrap_or(work);
            let mut catching_up = false;
            for (i, task) in tasks.iter_mut().enumerate() {
                if task.progress == low && task.progress < work {
                    task.progress += 1;
                    let boundary = match job.kind {
                        JobKind::LongRunning => job.at_phase_boundary(i, task.progress),
                        JobKind::Bsp => task.progress % job.superstep == 0 || task.progress == work,
                    };
                    if boundary {
                        task.checkpoint = task.progress;
                    }
                    task.record(t, TaskState::Running);
                } else {
                    if task.progress < work {
                        catching_up = true;
                    }
                    task.record(t, TaskState::Paused);
                }
            }
            if catching_up {
                downtime += 1;
            }
        }

        t += 1;
        if tasks.iter().all(|k| k.progress >= work) {
            break;
        }
    }

    let end = t;
    let mut ledgers = Vec::with_capacity(tasks.len());
    let (mut gain, mut loss) = (0.0, 0.0);
    for (i, task) in tasks.into_iter().enumerate() {
        for iv in task.open {
            close(i, iv, end, &mut billing);
        }
        let mut ledger = task.ledger;
        ledger.finish(end);
        gain += ledger.accrued_gain;
        loss += ledger.accrued_loss;
        events.push(SimEvent {
            t: end,
            task: i,
            kind: EventKind::Finish,
            vm_id: task.vm,
            from: None,
            reason: String::new(),
        });
        ledgers.push((ledger.entries, task.timeline));
    }
    let total_cost = billed_cost(&billing);

    let (peak_cpu, peak_mem) = job.peak_utilization();
    let baseline_rate = on_demand_for(catalog, &job.need(peak_cpu, peak_mem))
        .ok_or_else(|| SimError::InvalidJob(format!("{}: no on-demand VM hosts the peak utilization", job.name)))?;
    let baseline = baseline_rate * work as f64 * job.tasks as f64 / 3600.0;
    let mut index_cost = 0.0;
    for s in config.start..config.start + work {
        index_cost += sim.index(s)? * sim.reference_scale / 3600.0;
    }
    index_cost *= job.tasks as f64;

    let wallclock = end - config.start;
    let (ledgers, timelines) = ledgers.into_iter().unzip();
    let report = SimReport {
        job: job.name.clone(),
        policy: config.policy,
        seed: config.seed,
        start: config.start,
        end,
        wallclock,
        downtime,
        availability: 1.0 - downtime as f64 / wallclock as f64,
        total_cost,
        baseline_on_demand_cost: 0.0,
        index_cost: 0.0,
        tracked_index_cost,
        cost_vs_on_demand: 0.0,
        cost_vs_index: 0.0,
        migrations,
        revocations,
        sufficiency_violations,
        ledger_gain: gain,
        ledger_loss: loss,
        ledger_net: gain - loss,
        billing,
        events,
        ledgers,
        timelines,
    };
    Ok(normalize_report(report, baseline, index_cost))
}

fn composition_label(ids: &[VmId]) -> String {
    ids.iter().map(VmId::as_str).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        Summary {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub trials: Vec<SimReport>,
    pub cost: Summary,
    pub availability: Summary,
    pub cost_vs_on_demand: Summary,
    pub cost_vs_index: Summary,
    pub migrations: Summary,
    pub revocations: Summary,
}

impl AggregateReport {
    pub fn from_trials(trials: Vec<SimReport>) -> AggregateReport {
        AggregateReport {
            cost: Summary::of(trials.iter().map(|r| r.total_cost)),
            availability: Summary::of(trials.iter().map(|r| r.availability)),
            cost_vs_on_demand: Summary::of(trials.iter().map(|r| r.cost_vs_on_demand)),
            cost_vs_index: Summary::of(trials.iter().map(|r| r.cost_vs_index)),
            migrations: Summary::of(trials.iter().map(|r| r.migrations as f64)),
            revocations: Summary::of(trials.iter().map(|r| r.revocations as f64)),
            trials,
        }
    }
}

/// One simulation per trace set, in parallel; results keep input order.
pub fn run_trials(
    job: &JobSpec,
    trace_sets: &[BTreeMap<VmId, PriceTrace>],
    catalog: &Catalog,
    composition: &[VmId],
    config: &SimConfig,
) -> Result<AggregateReport, SimError> {
    if trace_sets.is_empty() {
        return Err(SimError::NoTrials);
    }
    let trials = trace_sets
        .par_iter()
        .enumerate()
        .map(|(trial, traces)| {
            run_simulation(job, traces, catalog, composition, config).map_err(|e| SimError::Trial {
                trial,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AggregateReport::from_trials(trials))
}
