//! The four-market synthetic scenario and its two-phase job family.
//!
//! Traces span two hours: the first hour only feeds the trailing volatility
//! windows, the job runs from [`JOB_START`] on the second hour. Each hour is
//! generated separately so both carry the exact target moments.

use std::collections::BTreeMap;

use crate::catalog::{Catalog, Family, ResourceRequirement, VmId, VmSpec};
use crate::policies::{BalancedParams, PolicyKind, Sufficiency};
use crate::prices::PriceTrace;
use crate::simulator::{JobKind, JobSpec, Phase, SimConfig, DEFAULT_SUPERSTEP};
use crate::synth::{concat, derive_seed, generate_market_suite, SynthError, SynthMarketSpec};

pub const JOB_START: i64 = 3600;

/// `(id, family, vcpu, mem GB, mean, stddev, on-demand)`, prices in cents/hour.
pub const MARKETS: [(&str, Family, f64, f64, f64, f64, f64); 4] = [
    ("m4.large", Family::General, 2.0, 8.0, 4.5, 0.5, 10.0),
    ("m4.2xlarge", Family::General, 8.0, 32.0, 8.5, 0.5, 40.0),
    ("c4.2xlarge", Family::Compute, 8.0, 16.0, 6.5, 1.0, 39.8),
    ("r4.xlarge", Family::Memory, 4.0, 30.5, 6.5, 1.1, 26.6),
];

pub fn catalog() -> Catalog {
    Catalog::new(MARKETS.iter().map(|&(id, family, cpu, mem, _, _, od)| VmSpec {
        id: id.into(),
        instance_type: id.into(),
        zone: "synthetic-1a".into(),
        region: "synthetic-1".into(),
        family,
        cpu_capacity: cpu,
        mem_capacity: mem,
        on_demand_price: od,
    }))
    .expect("preset catalog is valid")
}

pub fn composition() -> Vec<VmId> {
    MARKETS.iter().map(|m| VmId::from(m.0)).collect()
}

/// One hour of each market starting at `start`, stddev scaled by `scale`.
pub fn market_specs(scale: f64, start: i64) -> Vec<SynthMarketSpec> {
    MARKETS
        .iter()
        .map(|&(id, _, _, _, mean, sd, _)| SynthMarketSpec {
            volatility_scale: scale,
            start,
            ..SynthMarketSpec::new(id, mean, sd)
        })
        .collect()
}

/// Warm-up hour followed by the job hour.
pub fn traces(seed: u64, scale: f64) -> Result<BTreeMap<VmId, PriceTrace>, SynthError> {
    let warm = generate_market_suite(&market_specs(scale, 0), derive_seed(seed, "warm-up"))?;
    let job = generate_market_suite(&market_specs(scale, JOB_START), derive_seed(seed, "job"))?;
    let mut out = BTreeMap::new();
    for (id, w) in warm {
        let j = &job[&id];
        out.insert(id, concat(&w, j)?);
    }
    Ok(out)
}

/// The two-phase job split into `phases` equal phases alternating between
/// (4 vCPU, 16 GB) and (2 vCPU, 8 GB). One hour of work in total.
pub fn job(phases: usize) -> JobSpec {
    let len = 3600 / phases as i64;
    let phases = (0..phases)
        .map(|i| {
            if i % 2 == 0 {
                Phase::new(len, 4.0, 16.0)
            } else {
                Phase::new(len, 2.0, 8.0)
            }
        })
        .collect();
    JobSpec {
        name: format!("two-level-{}", 3600 / len),
        kind: JobKind::LongRunning,
        tasks: 1,
        phases,
        task_phases: Vec::new(),
        requirement: ResourceRequirement {
            min_cpu: 2.0,
            min_mem: 8.0,
        },
        mem_footprint: 16.0,
        max_price: Some(40.0),
        reference_capacity: Some((8.0, 32.0)),
        superstep: DEFAULT_SUPERSTEP,
    }
}

/// Baseline (2 phases) and the two more volatile variants (4 and 6).
pub fn job_variants() -> [JobSpec; 3] {
    [job(2), job(4), job(6)]
}

pub fn config(policy: PolicyKind, seed: u64) -> SimConfig {
    SimConfig {
        policy,
        start: JOB_START,
        sigma_sample: 60,
        balanced: BalancedParams {
            sufficiency: Sufficiency::Off,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}
