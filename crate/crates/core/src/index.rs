//! Capacity-normalized prices and the equal-weighted cloud index built on them.
//!
//! A member's normalized price is its spot price divided by `sqrt(C * M)`.
//! The index at time `t` is the arithmetic mean of the normalized prices of
//! every member that has a price at `t` and is not sitting on the 10x
//! on-demand cap. Capped members leave both the sum and the count for that
//! instant only, so the index keeps meaning "average per-unit price" when
//! membership changes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, VmId, VmSpec};
use crate::prices::{is_capped, PriceError, PriceTrace, DEFAULT_CAP_EPSILON};

/// Sampling period matching the five-minute control loop.
pub const DEFAULT_PERIOD: i64 = 300;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("composition is empty")]
    EmptyComposition,
    #[error("vm `{0}` is not in the catalog")]
    UnknownVm(VmId),
    #[error("vm `{0}` has no price trace")]
    MissingTrace(VmId),
    #[error("vm `{vm_id}` has no price at t={t}")]
    MissingPrice { vm_id: VmId, t: i64 },
    #[error("index undefined at t={t}: no uncapped member has a price")]
    Gap { t: i64 },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("index series do not share any sample timestamps")]
    NoOverlap,
}

/// What to do with a member that has no price at the queried instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    Skip,
    #[default]
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexOptions {
    pub cap_epsilon: f64,
    pub missing: MissingPolicy,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            cap_epsilon: DEFAULT_CAP_EPSILON,
            missing: MissingPolicy::Error,
        }
    }
}

/// Price per unit of `sqrt(cpu * mem)` capacity.
pub fn normalize(spec: &VmSpec, price: f64) -> f64 {
    price / spec.resource_scale()
}

/// `a / b - 1`, e.g. 0.57 for "57% higher".
pub fn differential(a: f64, b: f64) -> f64 {
    a / b - 1.0
}

/// Index value with its spread at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSample {
    pub timestamp: i64,
    pub value: f64,
    pub min: f64,
    pub max: f64,
    pub n_effective: usize,
}

/// Resolved composition members in id order.
struct Members<'a> {
    members: Vec<(&'a VmSpec, &'a PriceTrace)>,
}

impl<'a> Members<'a> {
    fn resolve(
        traces: &'a BTreeMap<VmId, PriceTrace>,
        catalog: &'a Catalog,
        composition: &[VmId],
        missing: MissingPolicy,
    ) -> Result<Self, IndexError> {
        let ids: BTreeSet<&VmId> = composition.iter().collect();
        if ids.is_empty() {
            return Err(IndexError::EmptyComposition);
        }
        let mut members = Vec::with_capacity(ids.len());
        for id in ids {
            let spec = catalog.get(id).ok_or_else(|| IndexError::UnknownVm(id.clone()))?;
            match traces.get(id) {
                Some(trace) => members.push((spec, trace)),
                None if missing == MissingPolicy::Skip => {}
                None => return Err(IndexError::MissingTrace(id.clone())),
            }
        }
        Ok(Members { members })
    }
}

fn aggregate<'a>(
    t: i64,
    prices: impl Iterator<Item = (&'a VmSpec, Result<f64, PriceError>)>,
    opts: &IndexOptions,
) -> Result<IndexSample, IndexError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (spec, price) in prices {
        let price = match price {
            Ok(p) => p,
            Err(_) if opts.missing == MissingPolicy::Skip => continue,
            Err(_) => {
                return Err(IndexError::MissingPrice {
                    vm_id: spec.id.clone(),
                    t,
                })
            }
        };
        if is_capped(price, spec, opts.cap_epsilon) {
            continue;
        }
        let p_hat = normalize(spec, price);
        sum += p_hat;
        n += 1;
        min = min.min(p_hat);
        max = max.max(p_hat);
    }
    if n == 0 {
        return Err(IndexError::Gap { t });
    }
    Ok(IndexSample {
        timestamp: t,
        value: sum / n as f64,
        min,
        max,
        n_effective: n,
    })
}

/// Index value (with spread) of `composition` at `t`.
pub fn index_at(
    traces: &BTreeMap<VmId, PriceTrace>,
    catalog: &Catalog,
    composition: &[VmId],
    t: i64,
    opts: &IndexOptions,
) -> Result<IndexSample, IndexError> {
    let members = Members::resolve(traces, catalog, composition, opts.missing)?;
    aggregate(t, members.members.iter().map(|(s, tr)| (*s, tr.price_at(t))), opts)
}

/// Anything that can answer "what was the index at t".
pub trait IndexLookup {
    fn index_value(&self, t: i64) -> Option<f64>;
}

/// The index as a step function, evaluated at every member price change.
#[derive(Clone, Debug)]
pub struct IndexCurve {
    composition: Vec<VmId>,
    /// `None` marks an instant from which the index is undefined.
    points: Vec<(i64, Option<IndexSample>)>,
}

impl IndexCurve {
    pub fn build(
        traces: &BTreeMap<VmId, PriceTrace>,
        catalog: &Catalog,
        composition: &[VmId],
        opts: &IndexOptions,
    ) -> Result<Self, IndexError> {
        let members = Members::resolve(traces, catalog, composition, opts.missing)?;
        let times: BTreeSet<i64> = members
            .members
            .iter()
            .flat_map(|(_, tr)| tr.points().iter().map(|p| p.timestamp))
            .collect();
        let mut cursors: Vec<_> = members.members.iter().map(|(s, tr)| (*s, tr.cursor())).collect();
        let mut points = Vec::with_capacity(times.len());
        for t in times {
            let sample = aggregate(t, cursors.iter_mut().map(|(s, c)| (*s, c.price_at(t))), opts);
            match sample {
                Ok(s) => points.push((t, Some(s))),
                Err(IndexError::Gap { .. }) | Err(IndexError::MissingPrice { .. }) => points.push((t, None)),
                Err(e) => return Err(e),
            }
        }
        let mut composition: Vec<VmId> = members.members.iter().map(|(s, _)| s.id.clone()).collect();
        composition.dedup();
        Ok(IndexCurve { composition, points })
    }

    pub fn composition(&self) -> &[VmId] {
        &self.composition
    }

    pub fn sample_at(&self, t: i64) -> Result<IndexSample, IndexError> {
        let idx = self.points.partition_point(|(ts, _)| *ts <= t);
        if idx == 0 {
            return Err(IndexError::Gap { t });
        }
        match self.points[idx - 1].1 {
            Some(s) => Ok(IndexSample { timestamp: t, ..s }),
            None => Err(IndexError::Gap { t }),
        }
    }

    /// Change instants of the curve, for cursors that walk it forward.
    pub fn points(&self) -> &[(i64, Option<IndexSample>)] {
        &self.points
    }
}

impl IndexLookup for IndexCurve {
    fn index_value(&self, t: i64) -> Option<f64> {
        self.sample_at(t).ok().map(|s| s.value)
    }
}

/// Regularly sampled index with spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSeries {
    pub composition: Vec<VmId>,
    pub period: i64,
    pub samples: Vec<IndexSample>,
    /// Grid instants at which every member was capped.
    pub gaps: Vec<i64>,
    /// On-demand index of the same composition, when known.
    pub on_demand: Option<f64>,
}

impl IndexSeries {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn sample(&self, t: i64) -> Option<&IndexSample> {
        self.samples
            .binary_search_by_key(&t, |s| s.timestamp)
            .ok()
            .map(|i| &self.samples[i])
    }

    /// `timestamp,value,min,max,n_effective`; gaps appear with empty values
    /// and `n_effective = 0`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "timestamp,value,min,max,n_effective")?;
        let mut gaps = self.gaps.iter().peekable();
        for s in &self.samples {
            while let Some(&&g) = gaps.peek() {
                if g >= s.timestamp {
                    break;
                }
                writeln!(w, "{g},,,,0")?;
                gaps.next();
            }
            writeln!(w, "{},{},{},{},{}", s.timestamp, s.value, s.min, s.max, s.n_effective)?;
        }
        for g in gaps {
            writeln!(w, "{g},,,,0")?;
        }
        Ok(())
    }
}

impl IndexLookup for IndexSeries {
    fn index_value(&self, t: i64) -> Option<f64> {
        self.sample(t).map(|s| s.value)
    }
}

/// Samples the index on `[t_start, t_end)` every `period` seconds.
pub fn index_series(
    traces: &BTreeMap<VmId, PriceTrace>,
    catalog: &Catalog,
    composition: &[VmId],
    t_start: i64,
    t_end: i64,
    period: i64,
    opts: &IndexOptions,
) -> Result<IndexSeries, IndexError> {
    if period <= 0 {
        return Err(IndexError::InvalidWindow(format!("period must be > 0, got {period}")));
    }
    if t_end <= t_start {
        return Err(IndexError::InvalidWindow(format!("end {t_end} <= start {t_start}")));
    }
    let members = Members::resolve(traces, catalog, composition, opts.missing)?;
    let mut samples = Vec::new();
    let mut gaps = Vec::new();
    let mut t = t_start;
    while t < t_end {
        match aggregate(t, members.members.iter().map(|(s, tr)| (*s, tr.price_at(t))), opts) {
            Ok(s) => samples.push(s),
            Err(IndexError::Gap { t }) => gaps.push(t),
            Err(e) => return Err(e),
        }
        t += period;
    }
    let ids: Vec<VmId> = members.members.iter().map(|(s, _)| s.id.clone()).collect();
    let on_demand = on_demand_index(catalog, &ids).ok();
    Ok(IndexSeries {
        composition: ids,
        period,
        samples,
        gaps,
        on_demand,
    })
}

/// The same equal-weighted mean applied to (time-invariant) on-demand prices.
pub fn on_demand_index(catalog: &Catalog, composition: &[VmId]) -> Result<f64, IndexError> {
    let ids: BTreeSet<&VmId> = composition.iter().collect();
    if ids.is_empty() {
        return Err(IndexError::EmptyComposition);
    }
    let mut sum = 0.0;
    for id in &ids {
        let spec = catalog.get(id).ok_or_else(|| IndexError::UnknownVm((*id).clone()))?;
        sum += normalize(spec, spec.on_demand_price);
    }
    Ok(sum / ids.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub overlap: usize,
    /// Mean of `a / b` over shared samples.
    pub mean_ratio: f64,
    /// `1 - mean_ratio`; 0.4 reads as "a is 40% cheaper than b".
    pub discount: f64,
    /// Sign of `a - b` per shared sample.
    pub signs: Vec<(i64, i8)>,
    /// Sign of `on_demand(a) - on_demand(b)` when both are known.
    pub on_demand_sign: Option<i8>,
    /// Runs of shared samples where the spot ordering disagrees with the
    /// on-demand ordering.
    pub inversions: Vec<Interval>,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

pub fn compare_indices(a: &IndexSeries, b: &IndexSeries) -> Result<ComparisonReport, IndexError> {
    let b_by_t: BTreeMap<i64, &IndexSample> = b.samples.iter().map(|s| (s.timestamp, s)).collect();
    let shared: Vec<(&IndexSample, &IndexSample)> = a
        .samples
        .iter()
        .filter_map(|sa| b_by_t.get(&sa.timestamp).map(|sb| (sa, *sb)))
        .collect();
    if shared.is_empty() {
        return Err(IndexError::NoOverlap);
    }
    let ratios: Vec<f64> = shared
        .iter()
        .filter(|(_, sb)| sb.value > 0.0)
        .map(|(sa, sb)| sa.value / sb.value)
        .collect();
    let mean_ratio = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let signs: Vec<(i64, i8)> = shared
        .iter()
        .map(|(sa, sb)| (sa.timestamp, sign(sa.value - sb.value)))
        .collect();
    let on_demand_sign = match (a.on_demand, b.on_demand) {
        (Some(x), Some(y)) => Some(sign(x - y)),
        _ => None,
    };
    let mut inversions = Vec::new();
    if let Some(od) = on_demand_sign.filter(|s| *s != 0) {
        let mut open: Option<Interval> = None;
        for &(t, s) in &signs {
            if s != 0 && s != od {
                match open.as_mut() {
                    Some(iv) => iv.end = t,
                    None => open = Some(Interval { start: t, end: t }),
                }
            } else if let Some(iv) = open.take() {
                inversions.push(iv);
            }
        }
        inversions.extend(open);
    }
    Ok(ComparisonReport {
        overlap: shared.len(),
        mean_ratio,
        discount: 1.0 - mean_ratio,
        signs,
        on_demand_sign,
        inversions,
    })
}
