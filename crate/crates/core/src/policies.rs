//! VM selection and migration triggers.
//!
//! Four policies share one vocabulary: a [`CandidateQuote`] per hosting
//! candidate carries its spot price, capacity-normalized price `p_hat`,
//! utilization-normalized price `p_breve` (now and averaged over the
//! volatility window) and the window standard deviation `sigma` of `p_breve`.
//! Every argmin/argmax breaks exact ties by the lexicographically smallest
//! vm id.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{VmId, VmSpec};
use crate::tracking::{migration_loss, should_migrate};

/// Idle phases are floored to this share of the VM's CPU capacity.
pub const CPU_FLOOR_FRACTION: f64 = 0.05;
/// Idle phases are floored to this much memory, GB.
pub const MEM_FLOOR_GB: f64 = 0.05;
/// Lower bound on sigma in the Sharpe denominator.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("no candidate VMs")]
    NoCandidates,
    #[error("index violation at index {index}: no candidate priced below the index (candidate set differs from the index composition?)")]
    IndexViolation { index: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    pub timestamp: i64,
    pub cpu_used: f64,
    pub mem_used: f64,
}

impl UtilizationSample {
    /// Utilization with the idle floors applied for a VM of `cpu_capacity`.
    pub fn floored(&self, cpu_capacity: f64) -> (f64, f64) {
        (
            self.cpu_used.max(CPU_FLOOR_FRACTION * cpu_capacity),
            self.mem_used.max(MEM_FLOOR_GB),
        )
    }
}

/// Price per unit of `sqrt(cpu_used * mem_used)` actually consumed.
pub fn utilized_price(price: f64, cpu_used: f64, mem_used: f64) -> f64 {
    price / (cpu_used * mem_used).sqrt()
}

/// [`utilized_price`] after applying the idle floors for `spec`.
pub fn utilized_price_on(spec: &VmSpec, price: f64, util: &UtilizationSample) -> f64 {
    let (cpu, mem) = util.floored(spec.cpu_capacity);
    utilized_price(price, cpu, mem)
}

/// Bessel-corrected standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolatilityEstimate {
    pub vm_id: VmId,
    pub window: i64,
    pub sigma: f64,
}

/// Modified Sharpe ratio: excess of the index over the utilized price, per
/// unit of that price's volatility.
pub fn sharpe_score(index: f64, p_breve: f64, sigma: f64) -> f64 {
    (index - p_breve) / sigma.max(SIGMA_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpeScore {
    pub vm_id: VmId,
    pub timestamp: i64,
    pub value: f64,
}

/// Per-candidate inputs to a decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateQuote {
    pub vm_id: VmId,
    pub price: f64,
    pub p_hat: f64,
    pub p_breve: f64,
    /// Mean of `p_breve` over the volatility window.
    pub p_breve_mean: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "target")]
pub enum Action {
    Stay,
    Migrate(VmId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub action: Action,
    pub reason: String,
    pub scores: BTreeMap<VmId, f64>,
}

impl PolicyDecision {
    fn stay(reason: impl Into<String>, scores: BTreeMap<VmId, f64>) -> Self {
        PolicyDecision {
            action: Action::Stay,
            reason: reason.into(),
            scores,
        }
    }

    fn migrate(target: VmId, reason: impl Into<String>, scores: BTreeMap<VmId, f64>) -> Self {
        PolicyDecision {
            action: Action::Migrate(target),
            reason: reason.into(),
            scores,
        }
    }

    pub fn target(&self) -> Option<&VmId> {
        match &self.action {
            Action::Migrate(t) => Some(t),
            Action::Stay => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "static")]
    Static,
    #[serde(rename = "cost")]
    CostCentric,
    #[serde(rename = "avail")]
    AvailabilityAware,
    #[serde(rename = "balanced")]
    Balanced,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Static,
        PolicyKind::CostCentric,
        PolicyKind::AvailabilityAware,
        PolicyKind::Balanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Static => "static",
            PolicyKind::CostCentric => "cost",
            PolicyKind::AvailabilityAware => "avail",
            PolicyKind::Balanced => "balanced",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(PolicyKind::Static),
            "cost" | "cost-centric" => Ok(PolicyKind::CostCentric),
            "avail" | "availability-aware" => Ok(PolicyKind::AvailabilityAware),
            "balanced" => Ok(PolicyKind::Balanced),
            _ => Err(format!("unknown policy `{s}` (static, cost, avail, balanced)")),
        }
    }
}

/// Whether the balanced policy gates migrations on the sufficiency test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sufficiency {
    #[default]
    Strict,
    Off,
}

impl FromStr for Sufficiency {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(Sufficiency::Strict),
            "off" => Ok(Sufficiency::Off),
            _ => Err(format!("unknown sufficiency mode `{s}` (strict, off)")),
        }
    }
}

/// Which candidate the balanced policy moves to once the current VM loses
/// the top ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalancedTarget {
    /// Only the argmax; stay if it fails the sufficiency test.
    #[default]
    ArgmaxSharpe,
    /// Best-ranked candidate above the current one that passes the test.
    BestSufficient,
}

impl FromStr for BalancedTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "argmax-sharpe" => Ok(BalancedTarget::ArgmaxSharpe),
            "best-sufficient" => Ok(BalancedTarget::BestSufficient),
            _ => Err(format!(
                "unknown balanced target `{s}` (argmax-sharpe, best-sufficient)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedParams {
    pub sufficiency: Sufficiency,
    pub target: BalancedTarget,
    /// Relative tolerance under which the current VM still counts as the max.
    pub tolerance: f64,
}

impl Default for BalancedParams {
    fn default() -> Self {
        BalancedParams {
            sufficiency: Sufficiency::Strict,
            target: BalancedTarget::ArgmaxSharpe,
            tolerance: 1e-9,
        }
    }
}

/// Index of the best element under `key`, where `better(a, b)` says `a`
/// strictly beats `b`; exact ties go to the smaller vm id.
fn best_by<T>(
    items: &[T],
    id: impl Fn(&T) -> &VmId,
    key: impl Fn(&T) -> f64,
    better: impl Fn(f64, f64) -> bool,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, item) in items.iter().enumerate() {
        best = Some(match best {
            None => i,
            Some(b) => {
                let (ki, kb) = (key(item), key(&items[b]));
                if better(ki, kb) || (ki == kb && id(item) < id(&items[b])) {
                    i
                } else {
                    b
                }
            }
        });
    }
    best
}

fn lower(a: f64, b: f64) -> bool {
    a < b
}

fn higher(a: f64, b: f64) -> bool {
    a > b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticQuote {
    pub vm_id: VmId,
    /// Mean utilized price over the lookback window.
    pub mean_utilized_price: f64,
}

/// Cheapest candidate by mean utilized price over the lookback.
pub fn policy_static(quotes: &[StaticQuote]) -> Result<VmId, PolicyError> {
    best_by(quotes, |q| &q.vm_id, |q| q.mean_utilized_price, lower)
        .map(|i| quotes[i].vm_id.clone())
        .ok_or(PolicyError::NoCandidates)
}

fn scores_of(quotes: &[CandidateQuote], f: impl Fn(&CandidateQuote) -> f64) -> BTreeMap<VmId, f64> {
    quotes.iter().map(|q| (q.vm_id.clone(), f(q))).collect()
}

/// Candidate with the lowest current utilized price.
pub fn select_cost_centric(quotes: &[CandidateQuote]) -> Result<VmId, PolicyError> {
    best_by(quotes, |q| &q.vm_id, |q| q.p_breve, lower)
        .map(|i| quotes[i].vm_id.clone())
        .ok_or(PolicyError::NoCandidates)
}

/// Greedy: move to the cheapest utilized price whenever the savings over
/// `horizon_secs` outweigh the double-pay of a `migration_secs` migration.
/// Ignores the index entirely.
pub fn policy_cost_centric(
    current: &VmId,
    quotes: &[CandidateQuote],
    horizon_secs: f64,
    migration_secs: f64,
) -> Result<PolicyDecision, PolicyError> {
    let scores = scores_of(quotes, |q| q.p_breve);
    let best = best_by(quotes, |q| &q.vm_id, |q| q.p_breve, lower).ok_or(PolicyError::NoCandidates)?;
    let best = &quotes[best];
    let Some(cur) = quotes.iter().find(|q| &q.vm_id == current) else {
        return Ok(PolicyDecision::migrate(
            best.vm_id.clone(),
            "current vm not eligible",
            scores,
        ));
    };
    if best.vm_id == *current {
        return Ok(PolicyDecision::stay("current vm is cheapest", scores));
    }
    let savings = (cur.price - best.price) * horizon_secs / 3600.0;
    let loss = migration_loss(cur.price, best.price, migration_secs);
    if savings > loss {
        Ok(PolicyDecision::migrate(
            best.vm_id.clone(),
            format!("savings {savings:.6} over horizon exceed migration loss {loss:.6}"),
            scores,
        ))
    } else {
        Ok(PolicyDecision::stay(
            format!("savings {savings:.6} do not cover migration loss {loss:.6}"),
            scores,
        ))
    }
}

/// Most stable candidate (lowest sigma) among those priced below the index.
pub fn select_availability_aware(quotes: &[CandidateQuote], index_now: f64) -> Result<VmId, PolicyError> {
    if quotes.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    let below: Vec<&CandidateQuote> = quotes.iter().filter(|q| q.p_hat < index_now).collect();
    best_by(&below, |q| &q.vm_id, |q| q.sigma, lower)
        .map(|i| below[i].vm_id.clone())
        .ok_or(PolicyError::IndexViolation { index: index_now })
}

/// Stays put until the current VM's normalized price rises above the index,
/// then moves to the lowest-sigma candidate below the index.
pub fn policy_availability_aware(
    current: &VmId,
    quotes: &[CandidateQuote],
    index_now: f64,
) -> Result<PolicyDecision, PolicyError> {
    let scores = scores_of(quotes, |q| q.sigma);
    if let Some(cur) = quotes.iter().find(|q| &q.vm_id == current) {
        if cur.p_hat <= index_now {
            return Ok(PolicyDecision::stay("current vm at or below index", scores));
        }
    }
    let target = select_availability_aware(quotes, index_now)?;
    if &target == current {
        return Ok(PolicyDecision::stay("current vm is the most stable option", scores));
    }
    Ok(PolicyDecision::migrate(target, "current vm above index", scores))
}

fn sharpe_of(q: &CandidateQuote, sharpe_index: f64) -> f64 {
    sharpe_score(sharpe_index, q.p_breve_mean, q.sigma)
}

/// Candidate with the highest modified Sharpe ratio.
pub fn select_balanced(quotes: &[CandidateQuote], sharpe_index: f64) -> Result<VmId, PolicyError> {
    best_by(quotes, |q| &q.vm_id, |q| sharpe_of(q, sharpe_index), higher)
        .map(|i| quotes[i].vm_id.clone())
        .ok_or(PolicyError::NoCandidates)
}

/// Moves only when the current VM no longer has the (tie-tolerant) highest
/// Sharpe ratio and, under [`Sufficiency::Strict`], the move passes
/// [`should_migrate`] against `index_now` with capacity-normalized prices.
///
/// `sharpe_index` is the index level expressed in the same units as
/// `p_breve`; `index_now` is the capacity-normalized index.
pub fn policy_balanced(
    current: &VmId,
    quotes: &[CandidateQuote],
    sharpe_index: f64,
    index_now: f64,
    params: &BalancedParams,
) -> Result<PolicyDecision, PolicyError> {
    let scores = scores_of(quotes, |q| sharpe_of(q, sharpe_index));
    let best =
        best_by(quotes, |q| &q.vm_id, |q| sharpe_of(q, sharpe_index), higher).ok_or(PolicyError::NoCandidates)?;
    let best_score = sharpe_of(&quotes[best], sharpe_index);
    let Some(cur) = quotes.iter().find(|q| &q.vm_id == current) else {
        return Ok(PolicyDecision::migrate(
            quotes[best].vm_id.clone(),
            "current vm not eligible",
            scores,
        ));
    };
    let cur_score = sharpe_of(cur, sharpe_index);
    if cur_score >= best_score - params.tolerance * best_score.abs().max(1.0) {
        return Ok(PolicyDecision::stay("current vm has the highest ratio", scores));
    }
    let passes = |q: &CandidateQuote| match params.sufficiency {
        Sufficiency::Strict => should_migrate(index_now, cur.p_hat, q.p_hat),
        Sufficiency::Off => true,
    };
    match params.target {
        BalancedTarget::ArgmaxSharpe => {
            let target = &quotes[best];
            if passes(target) {
                Ok(PolicyDecision::migrate(
                    target.vm_id.clone(),
                    "higher ratio available",
                    scores,
                ))
            } else {
                Ok(PolicyDecision::stay("sufficiency condition", scores))
            }
        }
        BalancedTarget::BestSufficient => {
            let mut ranked: Vec<&CandidateQuote> = quotes
                .iter()
                .filter(|q| q.vm_id != *current && sharpe_of(q, sharpe_index) > cur_score)
                .collect();
            ranked.sort_by(|a, b| {
                sharpe_of(b, sharpe_index)
                    .total_cmp(&sharpe_of(a, sharpe_index))
                    .then_with(|| a.vm_id.cmp(&b.vm_id))
            });
            match ranked.into_iter().find(|q| passes(q)) {
                Some(q) => Ok(PolicyDecision::migrate(
                    q.vm_id.clone(),
                    "higher ratio available",
                    scores,
                )),
                None => Ok(PolicyDecision::stay("sufficiency condition", scores)),
            }
        }
    }
}
