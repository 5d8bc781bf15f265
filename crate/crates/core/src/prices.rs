//! Spot-price traces: ingestion, zero-order-hold evaluation and cap detection.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, VmId, VmSpec};
use crate::records::{self, RawRecord};

/// Spot prices at exactly this multiple of the on-demand price signal
/// temporary unavailability rather than a market price.
pub const CAP_MULTIPLIER: f64 = 10.0;
pub const DEFAULT_CAP_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PriceError {
    #[error("vm `{vm_id}`: t={t} is before the first price point at t={first}")]
    OutOfRange { vm_id: VmId, t: i64, first: i64 },
    #[error("vm `{0}`: trace has no points")]
    Empty(VmId),
    #[error("vm `{vm_id}`: {message}")]
    Invalid { vm_id: VmId, message: String },
    #[error("unknown vm `{0}`")]
    UnknownVm(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PricePoint {
    /// Seconds since the epoch.
    pub timestamp: i64,
    /// Currency units per hour.
    pub price: f64,
}

/// Right-continuous step function of price over time for one VM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceTrace {
    vm_id: VmId,
    points: Vec<PricePoint>,
}

impl PriceTrace {
    /// Points must be nonempty, strictly increasing in time and carry
    /// finite non-negative prices.
    pub fn new(vm_id: VmId, points: Vec<PricePoint>) -> Result<Self, PriceError> {
        if points.is_empty() {
            return Err(PriceError::Empty(vm_id));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.price.is_finite() && p.price >= 0.0) {
                return Err(PriceError::Invalid {
                    vm_id,
                    message: format!(
                        "price {} at t={} is not a finite non-negative number",
                        p.price, p.timestamp
                    ),
                });
            }
            if i > 0 && points[i - 1].timestamp >= p.timestamp {
                return Err(PriceError::Invalid {
                    vm_id,
                    message: format!("timestamps not strictly increasing at t={}", p.timestamp),
                });
            }
        }
        Ok(PriceTrace { vm_id, points })
    }

    /// Convenience constructor from `(timestamp, price)` pairs.
    pub fn from_pairs(vm_id: impl Into<VmId>, pairs: &[(i64, f64)]) -> Result<Self, PriceError> {
        let points = pairs
            .iter()
            .map(|&(timestamp, price)| PricePoint { timestamp, price })
            .collect();
        Self::new(vm_id.into(), points)
    }

    pub fn vm_id(&self) -> &VmId {
        &self.vm_id
    }

    pub fn points(&self) -> &[PricePoint] {
        &self.points
    }

    pub fn first_timestamp(&self) -> i64 {
        self.points[0].timestamp
    }

    pub fn last_timestamp(&self) -> i64 {
        self.points[self.points.len() - 1].timestamp
    }

    /// Price of the latest point with timestamp <= t.
    pub fn price_at(&self, t: i64) -> Result<f64, PriceError> {
        let idx = self.points.partition_point(|p| p.timestamp <= t);
        if idx == 0 {
            return Err(PriceError::OutOfRange {
                vm_id: self.vm_id.clone(),
                t,
                first: self.first_timestamp(),
            });
        }
        Ok(self.points[idx - 1].price)
    }

    /// Every price multiplied by `k`.
    pub fn scaled(&self, k: f64) -> PriceTrace {
        PriceTrace {
            vm_id: self.vm_id.clone(),
            points: self
                .points
                .iter()
                .map(|p| PricePoint {
                    timestamp: p.timestamp,
                    price: p.price * k,
                })
                .collect(),
        }
    }

    pub fn cursor(&self) -> StepCursor<'_> {
        StepCursor { trace: self, idx: 0 }
    }
}

/// Amortised O(1) evaluation for non-decreasing query times.
#[derive(Clone, Debug)]
pub struct StepCursor<'a> {
    trace: &'a PriceTrace,
    idx: usize,
}

impl StepCursor<'_> {
    pub fn price_at(&mut self, t: i64) -> Result<f64, PriceError> {
        let pts = &self.trace.points;
        if self.idx < pts.len() && pts[self.idx].timestamp > t {
            // Query moved backwards; restart the scan.
            self.idx = 0;
        }
        while self.idx + 1 < pts.len() && pts[self.idx + 1].timestamp <= t {
            self.idx += 1;
        }
        if pts[self.idx].timestamp > t {
            return Err(PriceError::OutOfRange {
                vm_id: self.trace.vm_id.clone(),
                t,
                first: pts[0].timestamp,
            });
        }
        Ok(pts[self.idx].price)
    }
}

/// True iff `price` sits on the 10x on-demand cap, with relative tolerance.
pub fn is_capped(price: f64, spec: &VmSpec, epsilon: f64) -> bool {
    let cap = CAP_MULTIPLIER * spec.on_demand_price;
    (price - cap).abs() <= epsilon * cap
}

/// How a trace row names its VM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VmKey {
    Id(VmId),
    TypeZone { instance_type: String, zone: String },
}

/// One parsed row of a price-history dump.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub timestamp: i64,
    pub key: VmKey,
    pub price: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownVmPolicy {
    #[default]
    Skip,
    Error,
}

/// Which columns identify the VM in a trace file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKeySchema {
    /// `vm_id` when present, otherwise `instance_type` + `zone`.
    #[default]
    Auto,
    VmId,
    TypeZone,
}

impl std::str::FromStr for TraceKeySchema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(TraceKeySchema::Auto),
            "vm-id" => Ok(TraceKeySchema::VmId),
            "type-zone" => Ok(TraceKeySchema::TypeZone),
            _ => Err(format!("unknown trace key schema `{s}` (auto, vm-id, type-zone)")),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub traces: BTreeMap<VmId, PriceTrace>,
    pub skipped_unknown: usize,
    pub duplicate_timestamps: usize,
    pub warnings: Vec<String>,
}

/// Groups records per VM, sorts them, resolves exact-duplicate timestamps
/// last-write-wins and collapses consecutive repeats of the same price.
pub fn ingest_traces(
    records: impl IntoIterator<Item = TraceRecord>,
    catalog: &Catalog,
    unknown: UnknownVmPolicy,
) -> Result<Ingested, PriceError> {
    let mut out = Ingested::default();
    let mut grouped: BTreeMap<VmId, Vec<PricePoint>> = BTreeMap::new();
    let mut unknown_names: BTreeMap<String, usize> = BTreeMap::new();

    for rec in records {
        let resolved = match &rec.key {
            VmKey::Id(id) => catalog.get(id).map(|s| s.id.clone()),
            VmKey::TypeZone { instance_type, zone } => {
                catalog.find_by_type_zone(instance_type, zone).map(|s| s.id.clone())
            }
        };
        let Some(id) = resolved else {
            let name = match &rec.key {
                VmKey::Id(id) => id.to_string(),
                VmKey::TypeZone { instance_type, zone } => format!("{instance_type}@{zone}"),
            };
            if unknown == UnknownVmPolicy::Error {
                return Err(PriceError::UnknownVm(name));
            }
            *unknown_names.entry(name).or_default() += 1;
            out.skipped_unknown += 1;
            continue;
        };
        if !(rec.price.is_finite() && rec.price >= 0.0) {
            return Err(PriceError::Invalid {
                vm_id: id,
                message: format!("price {} at t={}", rec.price, rec.timestamp),
            });
        }
        grouped.entry(id).or_default().push(PricePoint {
            timestamp: rec.timestamp,
            price: rec.price,
        });
    }

    for (name, count) in unknown_names {
        let msg = format!("skipped {count} record(s) for unknown vm `{name}`");
        log::warn!("{msg}");
        out.warnings.push(msg);
    }

    for (id, mut points) in grouped {
        // Stable sort keeps input order among equal timestamps.
        points.sort_by_key(|p| p.timestamp);
        let mut deduped: Vec<PricePoint> = Vec::with_capacity(points.len());
        for p in points {
            match deduped.last_mut() {
                Some(last) if last.timestamp == p.timestamp => {
                    let msg = format!("vm `{id}`: duplicate timestamp {}, keeping last value", p.timestamp);
                    log::warn!("{msg}");
                    out.warnings.push(msg);
                    out.duplicate_timestamps += 1;
                    *last = p;
                }
                _ => deduped.push(p),
            }
        }
        deduped.dedup_by(|next, prev| next.price == prev.price);
        let trace = PriceTrace::new(id.clone(), deduped)?;
        out.traces.insert(id, trace);
    }
    Ok(out)
}

/// Parses epoch seconds or an RFC 3339 / ISO-8601 timestamp.
pub fn parse_timestamp(text: &str) -> Result<i64, String> {
    let text = text.trim();
    if let Ok(secs) = text.parse::<i64>() {
        return Ok(secs);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(text) {
        return Ok(dt.timestamp());
    }
    if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S") {
        return Ok(naive.and_utc().timestamp());
    }
    if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S") {
        return Ok(naive.and_utc().timestamp());
    }
    Err(format!("unrecognised timestamp `{text}`"))
}

fn record_from_raw(rec: &RawRecord, schema: TraceKeySchema) -> Result<TraceRecord, PriceError> {
    let parse_err = |message: String| PriceError::Parse {
        line: rec.line,
        message,
    };
    let ts = rec
        .get("timestamp")
        .ok_or_else(|| parse_err("missing field `timestamp`".into()))?;
    let timestamp = parse_timestamp(ts).map_err(|m| parse_err(format!("field `timestamp`: {m}")))?;
    let price = rec
        .get("price")
        .ok_or_else(|| parse_err("missing field `price`".into()))?
        .trim()
        .parse::<f64>()
        .map_err(|e| parse_err(format!("field `price`: {e}")))?;
    let by_id = || {
        rec.get("vm_id")
            .map(|id| VmKey::Id(VmId::new(id.trim())))
            .ok_or_else(|| parse_err("missing field `vm_id`".into()))
    };
    let by_type_zone = || match (rec.get("instance_type"), rec.get("zone")) {
        (Some(t), Some(z)) => Ok(VmKey::TypeZone {
            instance_type: t.trim().to_string(),
            zone: z.trim().to_string(),
        }),
        _ => Err(parse_err("missing `instance_type`/`zone` fields".into())),
    };
    let key = match schema {
        TraceKeySchema::VmId => by_id()?,
        TraceKeySchema::TypeZone => by_type_zone()?,
        TraceKeySchema::Auto => {
            if rec.get("vm_id").is_some() {
                by_id()?
            } else {
                by_type_zone()?
            }
        }
    };
    Ok(TraceRecord { timestamp, key, price })
}

pub fn read_trace_csv<R: Read>(reader: R, schema: TraceKeySchema) -> Result<Vec<TraceRecord>, PriceError> {
    let rows = records::read_csv(reader).map_err(|(line, message)| PriceError::Parse { line, message })?;
    rows.iter().map(|r| record_from_raw(r, schema)).collect()
}

pub fn read_trace_jsonl<R: BufRead>(reader: R, schema: TraceKeySchema) -> Result<Vec<TraceRecord>, PriceError> {
    let rows = records::read_jsonl(reader).map_err(|(line, message)| PriceError::Parse { line, message })?;
    rows.iter().map(|r| record_from_raw(r, schema)).collect()
}

/// Reads one trace file, or every `.csv`/`.jsonl` file of a directory in
/// name order.
pub fn read_trace_path(path: &Path, schema: TraceKeySchema) -> Result<Vec<TraceRecord>, PriceError> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("csv") | Some("jsonl") | Some("json") | Some("ndjson")
                )
            })
            .collect();
        entries.sort();
        let mut all = Vec::new();
        for p in entries {
            all.extend(read_trace_path(&p, schema)?);
        }
        return Ok(all);
    }
    let file = std::fs::File::open(path)?;
    if records::is_jsonl_path(path) {
        read_trace_jsonl(std::io::BufReader::new(file), schema)
    } else {
        read_trace_csv(file, schema)
    }
}

/// Writes `timestamp,vm_id,price` rows, VMs in id order. Prices use the
/// shortest representation that parses back to the same f64.
pub fn write_traces_csv<'a, W: Write>(
    writer: W,
    traces: impl IntoIterator<Item = &'a PriceTrace>,
) -> Result<(), PriceError> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| PriceError::Io(std::io::Error::other(e));
    w.write_record(["timestamp", "vm_id", "price"]).map_err(to_io)?;
    for trace in traces {
        for p in &trace.points {
            w.write_record([p.timestamp.to_string(), trace.vm_id.to_string(), p.price.to_string()])
                .map_err(to_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Family;

    fn spec(id: &str, od: f64) -> VmSpec {
        VmSpec {
            id: id.into(),
            instance_type: "m4.large".into(),
            zone: "us-west-1a".into(),
            region: "us-west-1".into(),
            family: Family::General,
            cpu_capacity: 2.0,
            mem_capacity: 8.0,
            on_demand_price: od,
        }
    }

    fn rec(t: i64, id: &str, price: f64) -> TraceRecord {
        TraceRecord {
            timestamp: t,
            key: VmKey::Id(id.into()),
            price,
        }
    }

    #[test]
    fn step_function_semantics() {
        let tr = PriceTrace::from_pairs("a", &[(0, 4.0), (100, 5.0)]).unwrap();
        assert_eq!(tr.price_at(99).unwrap(), 4.0);
        assert_eq!(tr.price_at(100).unwrap(), 5.0);
        assert!(matches!(tr.price_at(-1), Err(PriceError::OutOfRange { .. })));
        assert_eq!(tr.price_at(1_000_000).unwrap(), 5.0);
    }

    #[test]
    fn cursor_matches_binary_search() {
        let tr = PriceTrace::from_pairs("a", &[(10, 1.0), (20, 2.0), (35, 3.0)]).unwrap();
        let mut c = tr.cursor();
        assert!(c.price_at(5).is_err());
        for t in 10..60 {
            assert_eq!(c.price_at(t).unwrap(), tr.price_at(t).unwrap());
        }
        // Going backwards is allowed, just slower.
        assert_eq!(c.price_at(12).unwrap(), 1.0);
    }

    #[test]
    fn cap_detection() {
        let s = spec("a", 0.1);
        assert!(is_capped(1.0, &s, DEFAULT_CAP_EPSILON));
        assert!(is_capped(0.9999999999, &s, DEFAULT_CAP_EPSILON));
        assert!(!is_capped(0.5, &s, DEFAULT_CAP_EPSILON));
        assert!(!is_capped(0.999, &s, DEFAULT_CAP_EPSILON));
    }

    #[test]
    fn ingest_three_points() {
        let cat = Catalog::new(vec![spec("a", 0.1)]).unwrap();
        let got = ingest_traces(
            vec![rec(0, "a", 4.0), rec(60, "a", 5.0), rec(120, "a", 4.0)],
            &cat,
            UnknownVmPolicy::Skip,
        )
        .unwrap();
        assert_eq!(got.traces[&VmId::from("a")].points().len(), 3);
    }

    #[test]
    fn ingest_duplicate_timestamp_last_wins() {
        let cat = Catalog::new(vec![spec("a", 0.1)]).unwrap();
        let got = ingest_traces(vec![rec(0, "a", 4.0), rec(0, "a", 6.0)], &cat, UnknownVmPolicy::Skip).unwrap();
        let tr = &got.traces[&VmId::from("a")];
        assert_eq!(tr.points().len(), 1);
        assert_eq!(tr.price_at(0).unwrap(), 6.0);
        assert_eq!(got.duplicate_timestamps, 1);
        assert_eq!(got.warnings.len(), 1);
    }

    #[test]
    fn ingest_unknown_vm_skips_or_errors() {
        let cat = Catalog::new(vec![spec("a", 0.1)]).unwrap();
        let records = vec![rec(0, "a", 4.0), rec(0, "ghost", 1.0)];
        let got = ingest_traces(records.clone(), &cat, UnknownVmPolicy::Skip).unwrap();
        assert_eq!(got.skipped_unknown, 1);
        assert_eq!(got.traces.len(), 1);
        assert!(matches!(
            ingest_traces(records, &cat, UnknownVmPolicy::Error),
            Err(PriceError::UnknownVm(name)) if name == "ghost"
        ));
    }

    #[test]
    fn ingest_sorts_and_collapses_repeats() {
        let cat = Catalog::new(vec![spec("a", 0.1)]).unwrap();
        let got = ingest_traces(
            vec![rec(120, "a", 5.0), rec(0, "a", 4.0), rec(60, "a", 4.0)],
            &cat,
            UnknownVmPolicy::Skip,
        )
        .unwrap();
        let pts = got.traces[&VmId::from("a")].points().to_vec();
        assert_eq!(
            pts,
            vec![
                PricePoint {
                    timestamp: 0,
                    price: 4.0
                },
                PricePoint {
                    timestamp: 120,
                    price: 5.0
                }
            ]
        );
    }

    #[test]
    fn csv_reader_handles_both_key_schemas_and_iso_time() {
        let cat = Catalog::new(vec![spec("m4.large@us-west-1a", 0.1)]).unwrap();
        let src = "timestamp,instance_type,zone,price\n2017-03-01T00:00:00Z,m4.large,us-west-1a,0.0321\n";
        let recs = read_trace_csv(src.as_bytes(), TraceKeySchema::Auto).unwrap();
        assert_eq!(recs[0].timestamp, 1_488_326_400);
        let got = ingest_traces(recs, &cat, UnknownVmPolicy::Error).unwrap();
        assert_eq!(got.traces.len(), 1);

        let src = "timestamp,vm_id,price\n5,m4.large@us-west-1a,0.5\n";
        let recs = read_trace_csv(src.as_bytes(), TraceKeySchema::VmId).unwrap();
        assert_eq!(recs[0].key, VmKey::Id("m4.large@us-west-1a".into()));
        assert!(read_trace_csv(src.as_bytes(), TraceKeySchema::TypeZone).is_err());
    }

    #[test]
    fn bad_price_reports_line() {
        let src = "timestamp,vm_id,price\n0,a,1\n60,a,nope\n";
        match read_trace_csv(src.as_bytes(), TraceKeySchema::Auto) {
            Err(PriceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_non_increasing_points() {
        assert!(PriceTrace::from_pairs("a", &[(5, 1.0), (5, 2.0)]).is_err());
        assert!(PriceTrace::from_pairs("a", &[(5, -1.0)]).is_err());
        assert!(PriceTrace::from_pairs("a", &[]).is_err());
    }
}
