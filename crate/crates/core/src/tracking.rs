//! Gain of a placement against the index, migration loss, and the migration
//! sufficiency test.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{VmId, VmSpec};
use crate::index::{normalize, IndexLookup};
use crate::prices::PriceTrace;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("invalid interval [{t1}, {t2}) with period {period}")]
    InvalidInterval { t1: i64, t2: i64, period: i64 },
    #[error("index or price missing at {} sample(s): {missing:?}", missing.len())]
    CoverageGap { missing: Vec<i64> },
}

/// One term of the gain sum: an hourly rate held for `seconds`.
pub fn gain_term(index_value: f64, spec: &VmSpec, price: f64, seconds: f64) -> f64 {
    (index_value - normalize(spec, price)) * spec.resource_scale() * (seconds / 3600.0)
}

/// Currency gained by holding `spec` instead of paying the denormalized index,
/// summed over the grid `t1, t1 + period, ... < t2`. Each sample stands for
/// `period` seconds of an hourly rate.
pub fn gain<I: IndexLookup + ?Sized>(
    index: &I,
    spec: &VmSpec,
    trace: &PriceTrace,
    t1: i64,
    t2: i64,
    period: i64,
) -> Result<f64, TrackingError> {
    if period <= 0 || t2 <= t1 {
        return Err(TrackingError::InvalidInterval { t1, t2, period });
    }
    let mut total = 0.0;
    let mut missing = Vec::new();
    let mut t = t1;
    while t < t2 {
        match (index.index_value(t), trace.price_at(t)) {
            (Some(i), Ok(p)) => total += gain_term(i, spec, p, period as f64),
            _ => missing.push(t),
        }
        t += period;
    }
    if !missing.is_empty() {
        return Err(TrackingError::CoverageGap { missing });
    }
    Ok(total)
}

/// Cost of holding both VMs for a stop-and-copy migration of `t_m` seconds.
pub fn migration_loss(price_src: f64, price_dst: f64, t_m: f64) -> f64 {
    (price_src + price_dst) * t_m / 3600.0
}

/// A migration preserves the index level only if the index exceeds the
/// source price plus twice the destination price (double pay plus the
/// delayed work), all capacity-normalized.
pub fn should_migrate(index_value: f64, p_hat_src: f64, p_hat_dst: f64) -> bool {
    index_value > p_hat_src + 2.0 * p_hat_dst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerKind {
    HoldTick,
    Migrate,
    Revoke,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// End of the interval this entry covers.
    pub timestamp: i64,
    pub start: i64,
    pub kind: LedgerKind,
    /// VM held (hold ticks), revoked VM (revocations) or destination (migrations).
    pub vm_id: VmId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub from: Option<VmId>,
    /// Spot price(s) at `start`: held VM, or source then destination.
    pub prices: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub index: Option<f64>,
    pub gain: f64,
    pub loss: f64,
    /// Whether the sufficiency condition held when the migration was decided.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sufficient: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OpenMigration {
    from: VmId,
    to: VmId,
    start: i64,
    prices: Vec<f64>,
    index: Option<f64>,
    sufficient: Option<bool>,
    loss: f64,
}

/// Running gain/loss of one application instance against its reference index.
///
/// Gain accrues only while a single VM is held; seconds spent double-holding
/// during a migration accrue loss instead. Every flushed interval becomes an
/// entry, so the totals can be rebuilt from the entries alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingLedger {
    pub reference_index: String,
    pub current_vm: Option<VmId>,
    pub hold_start: i64,
    pub accrued_gain: f64,
    pub accrued_loss: f64,
    pub entries: Vec<LedgerEntry>,
    #[serde(skip)]
    pending_gain: f64,
    #[serde(skip)]
    hold_price: f64,
    #[serde(skip)]
    hold_index: Option<f64>,
    #[serde(skip)]
    migration: Option<OpenMigration>,
}

impl TrackingLedger {
    pub fn new(reference_index: impl Into<String>) -> Self {
        TrackingLedger {
            reference_index: reference_index.into(),
            current_vm: None,
            hold_start: 0,
            accrued_gain: 0.0,
            accrued_loss: 0.0,
            entries: Vec::new(),
            pending_gain: 0.0,
            hold_price: 0.0,
            hold_index: None,
            migration: None,
        }
    }

    pub fn net(&self) -> f64 {
        self.accrued_gain - self.accrued_loss
    }

    pub fn is_migrating(&self) -> bool {
        self.migration.is_some()
    }

    /// Starts holding `vm` at `t` (initial placement or restart target).
    pub fn hold(&mut self, vm: VmId, t: i64, price: f64, index: Option<f64>) {
        self.current_vm = Some(vm);
        self.hold_start = t;
        self.hold_price = price;
        self.hold_index = index;
        self.pending_gain = 0.0;
    }

    /// One second (or `seconds`) of single-VM holding.
    pub fn accrue_hold(&mut self, index_value: f64, spec: &VmSpec, price: f64, seconds: f64) {
        self.pending_gain += gain_term(index_value, spec, price, seconds);
    }

    /// One second (or `seconds`) of paying for both migration endpoints.
    pub fn accrue_migration(&mut self, price_src: f64, price_dst: f64, seconds: f64) {
        if let Some(m) = self.migration.as_mut() {
            m.loss += migration_loss(price_src, price_dst, seconds);
        }
    }

    /// Closes the current hold interval at `t` if it is non-empty.
    pub fn tick(&mut self, t: i64, price: f64, index: Option<f64>) {
        let Some(vm) = self.current_vm.clone() else { return };
        if self.migration.is_some() || t <= self.hold_start {
            return;
        }
        let gain = std::mem::take(&mut self.pending_gain);
        self.accrued_gain += gain;
        self.entries.push(LedgerEntry {
            timestamp: t,
            start: self.hold_start,
            kind: LedgerKind::HoldTick,
            vm_id: vm,
            from: None,
            prices: vec![self.hold_price],
            index: self.hold_index,
            gain,
            loss: 0.0,
            sufficient: None,
        });
        self.hold_start = t;
        self.hold_price = price;
        self.hold_index = index;
    }

    pub fn begin_migration(
        &mut self,
        t: i64,
        to: VmId,
        prices: (f64, f64),
        index: Option<f64>,
        sufficient: Option<bool>,
    ) {
        self.tick(t, prices.0, index);
        let from = self.current_vm.clone().expect("migration without a held vm");
        self.migration = Some(OpenMigration {
            from,
            to,
            start: t,
            prices: vec![prices.0, prices.1],
            index,
            sufficient,
            loss: 0.0,
        });
    }

    /// Closes the open migration at `t`; the task continues on `landed_on`
    /// (the destination normally, the source when the move was aborted).
    pub fn end_migration(&mut self, t: i64, landed_on: VmId, price: f64, index: Option<f64>) {
        if let Some(m) = self.migration.take() {
            self.accrued_loss += m.loss;
            self.entries.push(LedgerEntry {
                timestamp: t,
                start: m.start,
                kind: LedgerKind::Migrate,
                vm_id: m.to,
                from: Some(m.from),
                prices: m.prices,
                index: m.index,
                gain: 0.0,
                loss: m.loss,
                sufficient: m.sufficient,
            });
        }
        self.hold(landed_on, t, price, index);
    }

    /// Records a revocation of `vm` at `t`. Holding resumes via [`hold`](Self::hold).
    pub fn revoke(&mut self, t: i64, vm: VmId, price: f64, index: Option<f64>) {
        if self.migration.is_some() {
            let current = self.current_vm.clone().unwrap_or_else(|| vm.clone());
            self.end_migration(t, current, price, index);
        } else {
            self.tick(t, price, index);
        }
        self.entries.push(LedgerEntry {
            timestamp: t,
            start: t,
            kind: LedgerKind::Revoke,
            vm_id: vm,
            from: None,
            prices: vec![price],
            index,
            gain: 0.0,
            loss: 0.0,
            sufficient: None,
        });
        self.current_vm = None;
    }

    /// Flushes everything at the end of a run.
    pub fn finish(&mut self, t: i64) {
        if self.migration.is_some() {
            let current = self.current_vm.clone().expect("migration without a held vm");
            self.end_migration(t, current, 0.0, None);
        }
        self.tick(t, 0.0, None);
        self.current_vm = None;
    }

    /// Totals rebuilt from the entries.
    pub fn replay(&self) -> (f64, f64) {
        self.entries
            .iter()
            .fold((0.0, 0.0), |(g, l), e| (g + e.gain, l + e.loss))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Family;
    use crate::index::IndexSample;
    use crate::index::IndexSeries;

    fn spec(cpu: f64, mem: f64) -> VmSpec {
        VmSpec {
            id: "a".into(),
            instance_type: "a".into(),
            zone: "z".into(),
            region: "r".into(),
            family: Family::General,
            cpu_capacity: cpu,
            mem_capacity: mem,
            on_demand_price: 1.0,
        }
    }

    fn flat_index(value: f64, period: i64, n: usize) -> IndexSeries {
        IndexSeries {
            composition: vec![],
            period,
            samples: (0..n)
                .map(|i| IndexSample {
                    timestamp: i as i64 * period,
                    value,
                    min: value,
                    max: value,
                    n_effective: 1,
                })
                .collect(),
            gaps: vec![],
            on_demand: None,
        }
    }

    #[test]
    fn gain_examples() {
        let s = spec(4.0, 16.0);
        let idx = flat_index(0.5, 3600, 3);
        // p_hat = 0.4 means price 3.2 on a scale-8 VM.
        let cheap = PriceTrace::from_pairs("a", &[(0, 3.2)]).unwrap();
        let g = gain(&idx, &s, &cheap, 0, 3 * 3600, 3600).unwrap();
        assert!((g - 2.4).abs() < 1e-12);

        let at_index = PriceTrace::from_pairs("a", &[(0, 4.0)]).unwrap();
        assert_eq!(gain(&idx, &s, &at_index, 0, 3 * 3600, 3600).unwrap(), 0.0);

        let dear = PriceTrace::from_pairs("a", &[(0, 4.8)]).unwrap();
        let g = gain(&idx, &s, &dear, 0, 3 * 3600, 3600).unwrap();
        assert!((g + 2.4).abs() < 1e-12);
    }

    #[test]
    fn gain_reports_missing_samples() {
        let s = spec(1.0, 1.0);
        let idx = flat_index(0.5, 300, 2);
        let tr = PriceTrace::from_pairs("a", &[(0, 0.1)]).unwrap();
        match gain(&idx, &s, &tr, 0, 1200, 300) {
            Err(TrackingError::CoverageGap { missing }) => assert_eq!(missing, vec![600, 900]),
            other => panic!("{other:?}"),
        }
        assert!(gain(&idx, &s, &tr, 10, 10, 300).is_err());
    }

    #[test]
    fn migration_loss_examples() {
        assert!((migration_loss(4.0, 6.0, 30.0) - 10.0 * 30.0 / 3600.0).abs() < 1e-15);
        assert_eq!(migration_loss(4.0, 6.0, 0.0), 0.0);
        assert_eq!(migration_loss(2.5, 2.5, 3600.0), 5.0);
    }

    #[test]
    fn sufficiency_examples() {
        assert!(!should_migrate(0.5, 0.6, 0.2));
        assert!(should_migrate(1.0, 0.3, 0.3));
        assert!(!should_migrate(0.7, 0.7, 0.0));
    }

    #[test]
    fn ledger_replay_matches_accrual() {
        let s = spec(4.0, 16.0);
        let mut l = TrackingLedger::new("test");
        l.hold("a".into(), 0, 3.2, Some(0.5));
        for _ in 0..300 {
            l.accrue_hold(0.5, &s, 3.2, 1.0);
        }
        l.tick(300, 3.2, Some(0.5));
        l.begin_migration(300, "b".into(), (3.2, 2.0), Some(0.5), Some(false));
        for _ in 0..30 {
            l.accrue_migration(3.2, 2.0, 1.0);
        }
        l.end_migration(330, "b".into(), 2.0, Some(0.5));
        l.revoke(400, "b".into(), 9.0, Some(0.5));
        l.finish(500);
        let (g, loss) = l.replay();
        assert_eq!(g, l.accrued_gain);
        assert_eq!(loss, l.accrued_loss);
        assert!((loss - migration_loss(3.2, 2.0, 30.0)).abs() < 1e-12);
        assert!(l.accrued_loss >= 0.0);
        let kinds: Vec<_> = l.entries.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                LedgerKind::HoldTick,
                LedgerKind::Migrate,
                LedgerKind::HoldTick,
                LedgerKind::Revoke
            ]
        );
        let mut out = Vec::new();
        l.write_jsonl(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
    }
}
