mod common;

use std::collections::BTreeMap;

use cloudindex::catalog::{filter_candidates, Catalog, CompositionScope, Family, ResourceRequirement, VmId, VmSpec};
use cloudindex::index::{index_at, normalize, IndexCurve, IndexOptions};
use cloudindex::policies::{
    policy_availability_aware, policy_balanced, select_availability_aware, select_balanced, select_cost_centric,
    sharpe_score, Action, BalancedParams, CandidateQuote, PolicyKind,
};
use cloudindex::prices::PriceTrace;
use cloudindex::prices::{ingest_traces, read_trace_csv, write_traces_csv, TraceKeySchema, UnknownVmPolicy};
use cloudindex::simulator::{run_simulation, ForcedMigration, JobKind, JobSpec, Phase, SimConfig};
use cloudindex::synth::{generate, generate_market_suite, sample_moments, SynthMarketSpec};
use cloudindex::tracking::{gain, migration_loss, should_migrate};
use proptest::prelude::*;

const ZONES: [&str; 4] = ["us-west-1a", "us-west-1b", "us-east-1a", "us-east-1b"];

fn spec(id: String, zone: &str, family: Family, cpu: f64, mem: f64, od: f64) -> VmSpec {
    VmSpec {
        id: id.clone().into(),
        instance_type: id,
        zone: zone.into(),
        region: zone[..zone.len() - 1].into(),
        family,
        cpu_capacity: cpu,
        mem_capacity: mem,
        on_demand_price: od,
    }
}

fn arb_catalog() -> impl Strategy<Value = Catalog> {
    prop::collection::vec((0..4usize, 0..3usize, 1u32..64, 1u32..256), 1..12).prop_map(|rows| {
        let families = [Family::General, Family::Compute, Family::Memory];
        Catalog::new(
            rows.into_iter()
                .enumerate()
                .map(|(i, (z, f, c, m))| spec(format!("vm{i:02}"), ZONES[z], families[f], c as f64, m as f64, 1.0)),
        )
        .unwrap()
    })
}

/// Member count, then per member `(cpu, mem, [(gap, price)])` with the
/// first point at t = 0.
fn arb_market() -> impl Strategy<Value = (Catalog, BTreeMap<VmId, PriceTrace>)> {
    prop::collection::vec(
        (
            0.5f64..32.0,
            0.5f64..128.0,
            prop::collection::vec((1i64..300, 0.01f64..20.0), 1..6),
        ),
        1..6,
    )
    .prop_map(|members| {
        let mut specs = Vec::new();
        let mut traces = BTreeMap::new();
        for (i, (cpu, mem, pts)) in members.into_iter().enumerate() {
            let id = format!("m{i}");
            let mut t = 0;
            let pairs: Vec<(i64, f64)> = pts
                .into_iter()
                .map(|(gap, p)| {
                    let point = (t, p);
                    t += gap;
                    point
                })
                .collect();
            traces.insert(
                VmId::from(id.as_str()),
                PriceTrace::from_pairs(id.as_str(), &pairs).unwrap(),
            );
            specs.push(spec(id, ZONES[0], Family::General, cpu, mem, 1000.0));
        }
        (Catalog::new(specs).unwrap(), traces)
    })
}

fn quotes_strategy(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<CandidateQuote>> {
    prop::collection::vec((0.01f64..10.0, 0.01f64..2.0, 0.01f64..5.0, 0.0f64..1.0), n).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (price, p_hat, p_breve, sigma))| CandidateQuote {
                vm_id: format!("c{i}").into(),
                price,
                p_hat,
                p_breve,
                p_breve_mean: p_breve,
                sigma,
            })
            .collect()
    })
}

fn scaled_quotes(quotes: &[CandidateQuote], k: f64) -> Vec<CandidateQuote> {
    quotes
        .iter()
        .map(|q| CandidateQuote {
            price: q.price * k,
            p_hat: q.p_hat * k,
            p_breve: q.p_breve * k,
            p_breve_mean: q.p_breve_mean * k,
            sigma: q.sigma * k,
            ..q.clone()
        })
        .collect()
}

proptest! {
    #[test]
    fn filter_is_monotone_in_requirement(catalog in arb_catalog(), cpu in 0.0f64..64.0, mem in 0.0f64..256.0,
                                          dc in 0.0f64..16.0, dm in 0.0f64..64.0) {
        let loose = filter_candidates(&catalog, &ResourceRequirement { min_cpu: cpu, min_mem: mem }, &CompositionScope::Global);
        let tight = filter_candidates(&catalog, &ResourceRequirement { min_cpu: cpu + dc, min_mem: mem + dm }, &CompositionScope::Global);
        for s in &tight {
            prop_assert!(loose.iter().any(|l| l.id == s.id));
        }
    }

    #[test]
    fn nested_scopes_nest(catalog in arb_catalog(), zone in 0..4usize) {
        let req = ResourceRequirement::default();
        let z = ZONES[zone];
        let ids = |scope: CompositionScope| -> Vec<VmId> {
            filter_candidates(&catalog, &req, &scope).iter().map(|s| s.id.clone()).collect()
        };
        let global = ids(CompositionScope::Global);
        let region = ids(CompositionScope::Region(z[..z.len() - 1].into()));
        let zone = ids(CompositionScope::Zone(z.into()));
        prop_assert!(region.iter().all(|id| global.contains(id)));
        prop_assert!(zone.iter().all(|id| region.contains(id)));
    }

    #[test]
    fn price_is_constant_between_points(pairs in prop::collection::vec((1i64..500, 0.0f64..50.0), 1..10),
                                        a in 0i64..3000, b in 0i64..3000) {
        let mut t = 0;
        let pts: Vec<(i64, f64)> = pairs.iter().map(|&(gap, p)| { let x = (t, p); t += gap; x }).collect();
        let trace = PriceTrace::from_pairs("v", &pts).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let intervening = pts.iter().any(|&(ts, _)| lo < ts && ts <= hi);
        if !intervening {
            prop_assert_eq!(trace.price_at(lo).unwrap(), trace.price_at(hi).unwrap());
        }
        prop_assert_eq!(trace.price_at(a).unwrap(), common::price_at(&pts, a).unwrap());
    }

    #[test]
    fn ingest_round_trip_is_idempotent((catalog, traces) in arb_market()) {
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, traces.values()).unwrap();
        let once = ingest_traces(read_trace_csv(buf.as_slice(), TraceKeySchema::Auto).unwrap(), &catalog, UnknownVmPolicy::Error).unwrap();
        let mut buf2 = Vec::new();
        write_traces_csv(&mut buf2, once.traces.values()).unwrap();
        let twice = ingest_traces(read_trace_csv(buf2.as_slice(), TraceKeySchema::Auto).unwrap(), &catalog, UnknownVmPolicy::Error).unwrap();
        prop_assert_eq!(&once.traces, &twice.traces);
        for (id, t) in &once.traces {
            for p in traces[id].points() {
                prop_assert_eq!(t.price_at(p.timestamp).unwrap(), p.price);
            }
        }
    }

    #[test]
    fn index_scales_with_prices((catalog, traces) in arb_market(), t in 0i64..1500, k in 0.01f64..100.0, e in -3i32..4) {
        let ids: Vec<VmId> = traces.keys().cloned().collect();
        let opts = IndexOptions::default();
        let base = index_at(&traces, &catalog, &ids, t, &opts).unwrap().value;
        let scaled: BTreeMap<VmId, PriceTrace> = traces.iter().map(|(id, tr)| (id.clone(), tr.scaled(k))).collect();
        let v = index_at(&scaled, &catalog, &ids, t, &opts).unwrap().value;
        prop_assert!(common::close(v, k * base, 1e-12, 0.0));
        // Powers of two scale every term without rounding, so the result is exact.
        let p2 = 2f64.powi(e);
        let exact: BTreeMap<VmId, PriceTrace> = traces.iter().map(|(id, tr)| (id.clone(), tr.scaled(p2))).collect();
        prop_assert_eq!(index_at(&exact, &catalog, &ids, t, &opts).unwrap().value, p2 * base);
    }

    #[test]
    fn index_ignores_composition_order((catalog, traces) in arb_market(), t in 0i64..1500, rot in 0usize..6) {
        let mut ids: Vec<VmId> = traces.keys().cloned().collect();
        let opts = IndexOptions::default();
        let a = index_at(&traces, &catalog, &ids, t, &opts).unwrap();
        let r = rot % ids.len();
        ids.rotate_left(r);
        ids.reverse();
        let b = index_at(&traces, &catalog, &ids, t, &opts).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn index_lies_within_member_range((catalog, traces) in arb_market(), t in 0i64..1500) {
        let ids: Vec<VmId> = traces.keys().cloned().collect();
        let s = index_at(&traces, &catalog, &ids, t, &IndexOptions::default()).unwrap();
        let hats: Vec<f64> = ids.iter().map(|id| normalize(catalog.get(id).unwrap(), traces[id].price_at(t).unwrap())).collect();
        let lo = hats.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = hats.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= s.value * (1.0 + 1e-12) && s.value <= hi * (1.0 + 1e-12));
        prop_assert_eq!(s.min, lo);
        prop_assert_eq!(s.max, hi);
    }

    #[test]
    fn gain_is_additive((catalog, traces) in arb_market(), a in 0i64..20, b in 1i64..20, c in 1i64..20, period in 1i64..60) {
        let ids: Vec<VmId> = traces.keys().cloned().collect();
        let curve = IndexCurve::build(&traces, &catalog, &ids, &IndexOptions::default()).unwrap();
        let (t1, t2, t3) = (a * period, (a + b) * period, (a + b + c) * period);
        let spec = catalog.get(&ids[0]).unwrap();
        let tr = &traces[&ids[0]];
        let left = gain(&curve, spec, tr, t1, t2, period).unwrap() + gain(&curve, spec, tr, t2, t3, period).unwrap();
        let whole = gain(&curve, spec, tr, t1, t3, period).unwrap();
        let magnitude = (t1..t3).step_by(period as usize)
            .map(|t| (curve.sample_at(t).unwrap().value * spec.resource_scale()).abs() + tr.price_at(t).unwrap())
            .sum::<f64>() * period as f64 / 3600.0;
        prop_assert!(common::close(left, whole, 1e-12, magnitude));
    }

    #[test]
    fn migration_loss_is_symmetric_and_linear(a in 0.0f64..50.0, b in 0.0f64..50.0, t in 0.0f64..600.0, k in 0.0f64..10.0) {
        prop_assert_eq!(migration_loss(a, b, t), migration_loss(b, a, t));
        prop_assert!(common::close(migration_loss(a, b, k * t), k * migration_loss(a, b, t), 1e-12, 0.0));
    }

    #[test]
    fn should_migrate_is_monotone(i in 0.0f64..2.0, s in 0.0f64..1.0, d in 0.0f64..1.0, ds in 0.0f64..1.0, dd in 0.0f64..1.0) {
        if should_migrate(i, s, d) {
            prop_assert!(should_migrate(i, s * (1.0 - ds), d));
            prop_assert!(should_migrate(i, s, d * (1.0 - dd)));
        }
    }

    #[test]
    fn selection_is_scale_invariant(quotes in quotes_strategy(1..6), index in 0.01f64..5.0, e in -4i32..5) {
        let k = 2f64.powi(e);
        let scaled = scaled_quotes(&quotes, k);
        prop_assert_eq!(select_cost_centric(&quotes), select_cost_centric(&scaled));
        prop_assert_eq!(select_balanced(&quotes, index), select_balanced(&scaled, index * k));
        prop_assert_eq!(
            select_availability_aware(&quotes, index).ok(),
            select_availability_aware(&scaled, index * k).ok()
        );
    }

    #[test]
    fn availability_aware_stays_at_or_below_index(quotes in quotes_strategy(1..6), index in 0.01f64..2.0) {
        let current = quotes[0].vm_id.clone();
        if quotes[0].p_hat <= index {
            let d = policy_availability_aware(&current, &quotes, index).unwrap();
            prop_assert_eq!(d.action, Action::Stay);
        }
    }

    #[test]
    fn sharpe_is_shift_invariant(index in 0.0f64..5.0, p in 0.0f64..5.0, sigma in 0.01f64..2.0, c in -2.0f64..2.0) {
        let a = sharpe_score(index, p, sigma);
        let b = sharpe_score(index + c, p + c, sigma);
        prop_assert!((a - b).abs() <= 1e-12 * (index.abs() + p.abs() + c.abs()) / sigma);
    }

    #[test]
    fn synthetic_moments_are_exact(mean in 1.0f64..20.0, sd_share in 0.0f64..0.3, scale in 0.0f64..1.5, seed in any::<u64>()) {
        // Keep the scaled stddev small enough that no price can go negative.
        let sd = sd_share * mean;
        let spec = SynthMarketSpec { volatility_scale: scale, ..SynthMarketSpec::new("v", mean, sd) };
        let t = generate(&spec, seed).unwrap();
        prop_assert_eq!(&t, &generate(&spec, seed).unwrap());
        let v: Vec<f64> = t.points().iter().map(|p| p.price).collect();
        let (m, s) = sample_moments(&v);
        prop_assert!((m - mean).abs() <= 1e-9 * mean);
        prop_assert!((s - sd * scale).abs() <= 1e-9 * mean);
    }

    #[test]
    fn markets_are_isolated(seed in any::<u64>(), sd in 0.1f64..1.0) {
        let base = vec![SynthMarketSpec::new("a", 5.0, 0.5), SynthMarketSpec::new("b", 6.0, 0.7)];
        let mut edited = base.clone();
        edited[1].stddev = sd;
        edited[1].mean = 7.0;
        let x = generate_market_suite(&base, seed).unwrap();
        let y = generate_market_suite(&edited, seed).unwrap();
        prop_assert_eq!(&x[&VmId::from("a")], &y[&VmId::from("a")]);
    }
}

/// All grid instances of (index, current, rival) under the written rules:
/// stay if current holds the max ratio, else move to the argmax only when
/// the index exceeds the source plus twice the destination price.
#[test]
fn balanced_matches_exhaustive_oracle() {
    let levels = [0.1, 0.3, 0.5];
    let sigmas = [0.0, 0.1, 0.4];
    let indexes = [0.2, 0.6, 1.0, 1.6];
    let params = BalancedParams::default();
    let mut checked = 0;
    let mut migrations = 0;
    for &index in &indexes {
        for &ha in &levels {
            for &hb in &levels {
                for &hc in &levels {
                    for &ba in &levels {
                        for &bb in &levels {
                            for &bc in &levels {
                                for &sa in &sigmas {
                                    for &sb in &sigmas {
                                        for &sc in &sigmas {
                                            let q = |id: &str, p_hat, p_breve, sigma| CandidateQuote {
                                                vm_id: id.into(),
                                                price: 1.0,
                                                p_hat,
                                                p_breve,
                                                p_breve_mean: p_breve,
                                                sigma,
                                            };
                                            let quotes = [q("a", ha, ba, sa), q("b", hb, bb, sb), q("c", hc, bc, sc)];
                                            let d =
                                                policy_balanced(&"a".into(), &quotes, index, index, &params).unwrap();
                                            let expected = oracle_balanced(&quotes, index);
                                            assert_eq!(d.action, expected, "{quotes:?} at {index}");
                                            if let Action::Migrate(target) = &d.action {
                                                let dst = quotes.iter().find(|x| &x.vm_id == target).unwrap();
                                                assert!(common::should_migrate(index, ha, dst.p_hat));
                                                migrations += 1;
                                            }
                                            checked += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert_eq!(checked, 4 * 729 * 27);
    assert!(migrations > 0);
}

fn oracle_balanced(quotes: &[CandidateQuote], index: f64) -> Action {
    let scores: Vec<f64> = quotes
        .iter()
        .map(|q| common::sharpe(index, q.p_breve, q.sigma))
        .collect();
    let mut best = 0;
    for i in 1..quotes.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let max = scores[best];
    if scores[0] >= max - 1e-9 * max.abs().max(1.0) {
        return Action::Stay;
    }
    if common::should_migrate(index, quotes[0].p_hat, quotes[best].p_hat) {
        Action::Migrate(quotes[best].vm_id.clone())
    } else {
        Action::Stay
    }
}

fn sim_catalog(prices: &[f64]) -> (Catalog, BTreeMap<VmId, PriceTrace>, Vec<VmId>) {
    let specs: Vec<VmSpec> = (0..prices.len())
        .map(|i| spec(format!("v{i}"), ZONES[0], Family::General, 2.0, 4.0, 100.0))
        .collect();
    let ids: Vec<VmId> = specs.iter().map(|s| s.id.clone()).collect();
    let traces = ids
        .iter()
        .zip(prices)
        .map(|(id, p)| (id.clone(), PriceTrace::from_pairs(id.clone(), &[(0, *p)]).unwrap()))
        .collect();
    (Catalog::new(specs).unwrap(), traces, ids)
}

fn small_job(tasks: usize, work: i64) -> JobSpec {
    JobSpec {
        name: "p".into(),
        kind: if tasks == 1 { JobKind::LongRunning } else { JobKind::Bsp },
        tasks,
        phases: vec![Phase::new(work, 1.0, 2.0)],
        task_phases: Vec::new(),
        requirement: ResourceRequirement {
            min_cpu: 1.0,
            min_mem: 1.0,
        },
        mem_footprint: 8.0,
        max_price: Some(50.0),
        reference_capacity: None,
        superstep: 120,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn simulation_is_deterministic_and_conserves_cost(
        steps in prop::collection::vec(prop::collection::vec((1i64..400, 0.5f64..60.0), 1..6), 2..4),
        tasks in 1usize..4, work in 200i64..1500, policy in 0usize..4,
    ) {
        let mut specs = Vec::new();
        let mut traces = BTreeMap::new();
        for (i, s) in steps.iter().enumerate() {
            let id = format!("v{i}");
            let mut t = 0;
            let pts: Vec<(i64, f64)> = s.iter().map(|&(gap, p)| { let x = (t, p); t += gap; x }).collect();
            traces.insert(VmId::from(id.as_str()), PriceTrace::from_pairs(id.as_str(), &pts).unwrap());
            specs.push(spec(id, ZONES[0], Family::General, 2.0 + i as f64, 4.0, 100.0));
        }
        let catalog = Catalog::new(specs).unwrap();
        let ids: Vec<VmId> = traces.keys().cloned().collect();
        let config = SimConfig { policy: PolicyKind::ALL[policy], epoch: 60, sigma_sample: 60, ..Default::default() };
        let job = small_job(tasks, work);
        match run_simulation(&job, &traces, &catalog, &ids, &config) {
            Ok(a) => {
                let b = run_simulation(&job, &traces, &catalog, &ids, &config).unwrap();
                prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
                prop_assert_eq!(common::replay_cost(&a, &traces), a.total_cost);
                prop_assert!((0.0..=1.0).contains(&a.availability));
                let count = |k| a.events.iter().filter(|e| e.kind == k).count();
                prop_assert_eq!(count(cloudindex::simulator::EventKind::MigrateBegin), a.migrations);
                prop_assert_eq!(count(cloudindex::simulator::EventKind::Revoke), a.revocations);
                let net = a.tracked_index_cost - a.total_cost;
                prop_assert!((a.ledger_net - net).abs() <= 1e-9 * a.total_cost.max(1.0));
            }
            // Every VM above the revocation threshold, or none below the index.
            Err(e) => prop_assert!(matches!(
                e,
                cloudindex::simulator::SimError::NoCandidates { .. } | cloudindex::simulator::SimError::Policy { .. }
            ), "{e}"),
        }
    }

    #[test]
    fn extra_forced_migration_never_helps(
        prices in prop::collection::vec(0.5f64..20.0, 2..4),
        tasks in 1usize..4, work in 100i64..900, at in 0i64..900, task in 0usize..3, target in 0usize..3,
    ) {
        let (catalog, traces, ids) = sim_catalog(&prices);
        let job = small_job(tasks, work);
        let base = SimConfig { policy: PolicyKind::Static, ..Default::default() };
        let a = run_simulation(&job, &traces, &catalog, &ids, &base).unwrap();
        let forced = SimConfig {
            forced: vec![ForcedMigration { task: task % tasks, time: at % work, target: ids[target % ids.len()].clone() }],
            ..base
        };
        let b = run_simulation(&job, &traces, &catalog, &ids, &forced).unwrap();
        prop_assert!(b.total_cost >= a.total_cost);
        prop_assert!(b.availability <= a.availability);
    }
}
