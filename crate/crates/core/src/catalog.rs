//! VM type specifications, on-demand prices and requirement filtering.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{self, RawRecord};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("vm `{id}`: {message}")]
    Invariant { id: String, message: String },
    #[error("duplicate vm id `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque catalog key, e.g. `m4.2xlarge@us-west-1a`. Ordered lexicographically,
/// which is also the tie-break order used by every policy.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(String);

impl VmId {
    pub fn new(id: impl Into<String>) -> Self {
        VmId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VmId {
    fn from(s: &str) -> Self {
        VmId(s.to_string())
    }
}

impl From<String> for VmId {
    fn from(s: String) -> Self {
        VmId(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    General,
    Compute,
    Memory,
    Storage,
    Accelerated,
    Other,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::General => "general",
            Family::Compute => "compute",
            Family::Memory => "memory",
            Family::Storage => "storage",
            Family::Accelerated => "accelerated",
            Family::Other => "other",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "general" => Ok(Family::General),
            "compute" => Ok(Family::Compute),
            "memory" => Ok(Family::Memory),
            "storage" => Ok(Family::Storage),
            "accelerated" => Ok(Family::Accelerated),
            "other" => Ok(Family::Other),
            other => Err(format!("unknown family `{other}`")),
        }
    }
}

/// A VM type in one zone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmSpec {
    pub id: VmId,
    pub instance_type: String,
    pub zone: String,
    pub region: String,
    pub family: Family,
    /// Abstract compute units; vCPU and ECU catalogs both work as long as one
    /// scale is used throughout.
    pub cpu_capacity: f64,
    /// GB.
    pub mem_capacity: f64,
    /// Currency units per hour.
    pub on_demand_price: f64,
}

impl VmSpec {
    pub fn validate(&self) -> Result<(), CatalogError> {
        let bad = |message: &str| CatalogError::Invariant {
            id: self.id.to_string(),
            message: message.to_string(),
        };
        if self.id.as_str().is_empty() {
            return Err(bad("empty id"));
        }
        if !(self.cpu_capacity.is_finite() && self.cpu_capacity > 0.0) {
            return Err(bad("cpu_capacity must be positive and finite"));
        }
        if !(self.mem_capacity.is_finite() && self.mem_capacity > 0.0) {
            return Err(bad("mem_capacity must be positive and finite"));
        }
        if !(self.on_demand_price.is_finite() && self.on_demand_price > 0.0) {
            return Err(bad("on_demand_price must be positive and finite"));
        }
        Ok(())
    }

    /// sqrt(C * M), the per-unit denominator of a normalized price.
    pub fn resource_scale(&self) -> f64 {
        (self.cpu_capacity * self.mem_capacity).sqrt()
    }

    pub fn fits(&self, cpu: f64, mem: f64) -> bool {
        self.cpu_capacity >= cpu && self.mem_capacity >= mem
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceRequirement {
    pub min_cpu: f64,
    pub min_mem: f64,
}

impl ResourceRequirement {
    pub fn new(min_cpu: f64, min_mem: f64) -> Result<Self, String> {
        let req = ResourceRequirement { min_cpu, min_mem };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_cpu.is_finite() && self.min_cpu >= 0.0) {
            return Err(format!("min_cpu must be finite and >= 0, got {}", self.min_cpu));
        }
        if !(self.min_mem.is_finite() && self.min_mem >= 0.0) {
            return Err(format!("min_mem must be finite and >= 0, got {}", self.min_mem));
        }
        Ok(())
    }

    pub fn admits(&self, spec: &VmSpec) -> bool {
        spec.fits(self.min_cpu, self.min_mem)
    }
}

impl FromStr for ResourceRequirement {
    type Err = String;

    /// Parses `cpu,mem`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (cpu, mem) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `cpu,mem`, got `{s}`"))?;
        let cpu: f64 = cpu.trim().parse().map_err(|e| format!("cpu: {e}"))?;
        let mem: f64 = mem.trim().parse().map_err(|e| format!("mem: {e}"))?;
        ResourceRequirement::new(cpu, mem)
    }
}

/// Which slice of the catalog an index or candidate set is drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scope", content = "value")]
pub enum CompositionScope {
    Global,
    Region(String),
    Zone(String),
    Family(Family),
}

impl CompositionScope {
    pub fn contains(&self, spec: &VmSpec) -> bool {
        match self {
            CompositionScope::Global => true,
            CompositionScope::Region(r) => &spec.region == r,
            CompositionScope::Zone(z) => &spec.zone == z,
            CompositionScope::Family(f) => spec.family == *f,
        }
    }
}

impl fmt::Display for CompositionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositionScope::Global => f.write_str("global"),
            CompositionScope::Region(r) => write!(f, "region:{r}"),
            CompositionScope::Zone(z) => write!(f, "zone:{z}"),
            CompositionScope::Family(fam) => write!(f, "family:{fam}"),
        }
    }
}

impl FromStr for CompositionScope {
    type Err = String;

    /// `global`, `region:<name>`, `zone:<name>` or `family:<name>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("global") {
            return Ok(CompositionScope::Global);
        }
        let (kind, value) = s.split_once(':').ok_or_else(|| format!("unrecognised scope `{s}`"))?;
        match kind {
            "region" => Ok(CompositionScope::Region(value.to_string())),
            "zone" => Ok(CompositionScope::Zone(value.to_string())),
            "family" => Ok(CompositionScope::Family(value.parse()?)),
            _ => Err(format!("unrecognised scope kind `{kind}`")),
        }
    }
}

/// Immutable set of VM specs keyed by id.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    specs: BTreeMap<VmId, VmSpec>,
}

impl Catalog {
    pub fn new(specs: impl IntoIterator<Item = VmSpec>) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for spec in specs {
            spec.validate()?;
            if map.contains_key(&spec.id) {
                return Err(CatalogError::Duplicate(spec.id.to_string()));
            }
            map.insert(spec.id.clone(), spec);
        }
        Ok(Catalog { specs: map })
    }

    pub fn get(&self, id: &VmId) -> Option<&VmSpec> {
        self.specs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VmSpec> {
        self.specs.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &VmId> {
        self.specs.keys()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn find_by_type_zone(&self, instance_type: &str, zone: &str) -> Option<&VmSpec> {
        self.specs
            .values()
            .find(|s| s.instance_type == instance_type && s.zone == zone)
    }

    /// Cheapest on-demand spec satisfying `cpu`/`mem`, ties by id.
    pub fn cheapest_on_demand(&self, cpu: f64, mem: f64) -> Option<&VmSpec> {
        self.specs
            .values()
            .filter(|s| s.fits(cpu, mem))
            .min_by(|a, b| a.on_demand_price.total_cmp(&b.on_demand_price))
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, CatalogError> {
        let rows = records::read_csv(reader).map_err(|(line, message)| CatalogError::Parse {
            line,
            field: "<row>".into(),
            message,
        })?;
        Self::from_raw(rows)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, CatalogError> {
        let rows = records::read_jsonl(reader).map_err(|(line, message)| CatalogError::Parse {
            line,
            field: "<row>".into(),
            message,
        })?;
        Self::from_raw(rows)
    }

    /// Chooses CSV or JSON-lines by extension (`.jsonl`/`.json` vs anything else).
    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let file = std::fs::File::open(path)?;
        if records::is_jsonl_path(path) {
            Self::from_jsonl(std::io::BufReader::new(file))
        } else {
            Self::from_csv(file)
        }
    }

    fn from_raw(rows: Vec<RawRecord>) -> Result<Self, CatalogError> {
        let specs = rows.iter().map(spec_from_record).collect::<Result<Vec<_>, _>>()?;
        Self::new(specs)
    }

    /// Writes the catalog back in CSV form, sorted by id.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), CatalogError> {
        let mut w = csv::Writer::from_writer(writer);
        let to_io = |e: csv::Error| CatalogError::Io(std::io::Error::other(e));
        w.write_record(SPEC_FIELDS).map_err(to_io)?;
        for s in self.specs.values() {
            w.write_record([
                s.id.as_str(),
                &s.instance_type,
                &s.zone,
                &s.region,
                s.family.as_str(),
                &s.cpu_capacity.to_string(),
                &s.mem_capacity.to_string(),
                &s.on_demand_price.to_string(),
            ])
            .map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

const SPEC_FIELDS: [&str; 8] = [
    "id",
    "instance_type",
    "zone",
    "region",
    "family",
    "cpu_capacity",
    "mem_capacity",
    "on_demand_price",
];

fn spec_from_record(rec: &RawRecord) -> Result<VmSpec, CatalogError> {
    let field = |name: &str| -> Result<&str, CatalogError> {
        rec.get(name).ok_or_else(|| CatalogError::Parse {
            line: rec.line,
            field: name.to_string(),
            message: "missing".into(),
        })
    };
    let number = |name: &str| -> Result<f64, CatalogError> {
        field(name)?.trim().parse::<f64>().map_err(|e| CatalogError::Parse {
            line: rec.line,
            field: name.to_string(),
            message: e.to_string(),
        })
    };
    let family = field("family")?.parse().map_err(|message| CatalogError::Parse {
        line: rec.line,
        field: "family".into(),
        message,
    })?;
    Ok(VmSpec {
        id: VmId::new(field("id")?.trim()),
        instance_type: field("instance_type")?.trim().to_string(),
        zone: field("zone")?.trim().to_string(),
        region: field("region")?.trim().to_string(),
        family,
        cpu_capacity: number("cpu_capacity")?,
        mem_capacity: number("mem_capacity")?,
        on_demand_price: number("on_demand_price")?,
    })
}

/// Specs admitted by `req` inside `scope`, in id order.
pub fn filter_candidates<'a>(
    catalog: &'a Catalog,
    req: &ResourceRequirement,
    scope: &CompositionScope,
) -> Vec<&'a VmSpec> {
    catalog.iter().filter(|s| scope.contains(s) && req.admits(s)).collect()
}
