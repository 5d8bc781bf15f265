//! Brute-force reimplementations used as oracles, plus experiment helpers.
//! Nothing here calls the library's arithmetic.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cloudindex::catalog::VmId;
use cloudindex::policies::PolicyKind;
use cloudindex::presets;
use cloudindex::prices::PriceTrace;
use cloudindex::simulator::{run_simulation, SimReport};

/// Last price at or before `t`, by linear scan.
pub fn price_at(points: &[(i64, f64)], t: i64) -> Option<f64> {
    let mut found = None;
    for &(ts, p) in points {
        if ts <= t {
            found = Some(p);
        } else {
            break;
        }
    }
    found
}

pub fn normalize(price: f64, cpu: f64, mem: f64) -> f64 {
    price * (cpu * mem).powf(-0.5)
}

pub struct Member {
    pub cpu: f64,
    pub mem: f64,
    pub on_demand: f64,
    pub points: Vec<(i64, f64)>,
}

/// Equal-weighted mean of normalized prices, skipping capped members.
pub fn index_at(members: &[Member], t: i64) -> Option<f64> {
    let mut values = Vec::new();
    for m in members {
        let p = price_at(&m.points, t)?;
        let cap = 10.0 * m.on_demand;
        if (p - cap).abs() <= 1e-9 * cap {
            continue;
        }
        values.push(normalize(p, m.cpu, m.mem));
    }
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Riemann sum of `(I - P_hat) * sqrt(C M)` over `[t1, t2)`, in hours.
pub fn gain(index: impl Fn(i64) -> f64, m: &Member, t1: i64, t2: i64, period: i64) -> f64 {
    let scale = (m.cpu * m.mem).sqrt();
    (t1..t2)
        .step_by(period as usize)
        .map(|t| {
            let p = price_at(&m.points, t).unwrap();
            (index(t) * scale - p) * period as f64 / 3600.0
        })
        .sum()
}

pub fn migration_loss(a: f64, b: f64, seconds: f64) -> f64 {
    a * seconds / 3600.0 + b * seconds / 3600.0
}

// Phrased as the negation of the stay condition; inputs are always finite.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn should_migrate(index: f64, src: f64, dst: f64) -> bool {
    !(index <= src + dst * 2.0)
}

pub fn utilized_price(price: f64, cpu: f64, mem: f64) -> f64 {
    price * (cpu * mem).powf(-0.5)
}

pub fn sharpe(index: f64, p_breve: f64, sigma: f64) -> f64 {
    (index - p_breve) / if sigma < 1e-9 { 1e-9 } else { sigma }
}

/// `|a - b| <= tol * max(|a|, |b|, floor)`.
pub fn close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
}

/// Rebuilds total cost from the billing log by summing trace prices second
/// by second, in log order.
pub fn replay_cost(report: &SimReport, traces: &BTreeMap<VmId, PriceTrace>) -> f64 {
    let mut total = 0.0;
    for iv in &report.billing {
        let pts: Vec<(i64, f64)> = traces[&iv.vm_id]
            .points()
            .iter()
            .map(|p| (p.timestamp, p.price))
            .collect();
        let mut sum = 0.0;
        for s in iv.start..iv.end {
            sum += price_at(&pts, s).unwrap();
        }
        total += sum / 3600.0;
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Run {
    pub phases: usize,
    pub scale: f64,
    pub policy: PolicyKind,
    pub seed: u64,
}

pub fn run(r: Run) -> (SimReport, BTreeMap<VmId, PriceTrace>) {
    let traces = presets::traces(r.seed, r.scale).expect("synthetic traces");
    let report = run_simulation(
        &presets::job(r.phases),
        &traces,
        &presets::catalog(),
        &presets::composition(),
        &presets::config(r.policy, r.seed),
    )
    .expect("simulation");
    (report, traces)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}
