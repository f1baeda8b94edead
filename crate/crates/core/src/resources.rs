//! Configurable resources: the ItemID taxonomy, per-variable range table and
//! the extraction keywords.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ITEM_MAP_FILE: &str = "itemid_to_variable_map.csv";
pub const VARIABLE_RANGES_FILE: &str = "variable_ranges.csv";

const ITEM_MAP_COLUMNS: [&str; 4] = ["itemid", "raw_label", "aggregate_group", "unit_class"];
const RANGE_COLUMNS: [&str; 5] = [
    "variable",
    "outlier_low",
    "valid_low",
    "valid_high",
    "outlier_high",
];

pub const DEFAULT_ITEM_MAP: &str = include_str!("../resources/itemid_to_variable_map.csv");
pub const DEFAULT_VARIABLE_RANGES: &str = include_str!("../resources/variable_ranges.csv");

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("{file}: expected columns {expected:?}, found {found:?}")]
    SchemaMismatch {
        file: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("duplicate itemid {0} in item map")]
    DuplicateItemId(i64),
    #[error("item map row {row}: unknown unit class {value:?}")]
    UnknownUnitClass { row: usize, value: String },
    #[error("item map row {row}: empty aggregate group")]
    EmptyGroup { row: usize },
    #[error("{file} row {row}, column {column}: cannot parse {value:?}")]
    BadValue {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("range for {variable}: bounds out of order (outlier_low <= valid_low <= valid_high <= outlier_high)")]
    RangeOrderViolation { variable: String },
    #[error("duplicate range row for variable {0}")]
    DuplicateVariable(String),
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ResourceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitClass {
    None,
    Weight,
    Height,
    Temperature,
}

impl UnitClass {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitClass::None => "none",
            UnitClass::Weight => "weight",
            UnitClass::Height => "height",
            UnitClass::Temperature => "temperature",
        }
    }
}

impl FromStr for UnitClass {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "" => Ok(UnitClass::None),
            "weight" => Ok(UnitClass::Weight),
            "height" => Ok(UnitClass::Height),
            "temperature" => Ok(UnitClass::Temperature),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemMapEntry {
    pub itemid: i64,
    pub raw_label: String,
    pub aggregate_group: String,
    pub unit_class: UnitClass,
}

/// Output variable key: a clinical aggregate name, or a raw ItemID rendered
/// as its decimal string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableKey(pub String);

impl VariableKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Validated item map with an itemid index.
#[derive(Debug, Clone, Default)]
pub struct ItemMap {
    entries: Vec<ItemMapEntry>,
    by_itemid: HashMap<i64, usize>,
}

impl ItemMap {
    pub fn new(entries: Vec<ItemMapEntry>) -> Result<Self> {
        let mut by_itemid = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.aggregate_group.trim().is_empty() {
                return Err(ResourceError::EmptyGroup { row: i + 1 });
            }
            if by_itemid.insert(e.itemid, i).is_some() {
                return Err(ResourceError::DuplicateItemId(e.itemid));
            }
        }
        Ok(ItemMap { entries, by_itemid })
    }

    pub fn entries(&self) -> &[ItemMapEntry] {
        &self.entries
    }

    pub fn get(&self, itemid: i64) -> Option<&ItemMapEntry> {
        self.by_itemid.get(&itemid).map(|&i| &self.entries[i])
    }

    /// Distinct aggregate groups, sorted.
    pub fn groups(&self) -> Vec<String> {
        let set: HashSet<&str> = self.entries.iter().map(|e| e.aggregate_group.as_str()).collect();
        let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
        v.sort();
        v
    }

    /// Entries of one group in file order.
    pub fn items_in_group(&self, group: &str) -> Vec<&ItemMapEntry> {
        self.entries.iter().filter(|e| e.aggregate_group == group).collect()
    }
}

/// Variable key for `itemid`, or `None` when the item is not curated.
pub fn resolve_variable(itemid: i64, map: &ItemMap, group_by_level2: bool) -> Option<VariableKey> {
    map.get(itemid).map(|e| {
        if group_by_level2 {
            VariableKey(e.aggregate_group.clone())
        } else {
            VariableKey(e.itemid.to_string())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VariableRange {
    pub outlier_low: Option<f64>,
    pub valid_low: Option<f64>,
    pub valid_high: Option<f64>,
    pub outlier_high: Option<f64>,
}

impl VariableRange {
    pub const UNBOUNDED: VariableRange = VariableRange {
        outlier_low: None,
        valid_low: None,
        valid_high: None,
        outlier_high: None,
    };

    pub fn new(ol: f64, vl: f64, vh: f64, oh: f64) -> Self {
        VariableRange {
            outlier_low: Some(ol),
            valid_low: Some(vl),
            valid_high: Some(vh),
            outlier_high: Some(oh),
        }
    }

    /// True when the present bounds are non-decreasing in the order
    /// outlier_low, valid_low, valid_high, outlier_high.
    pub fn is_ordered(&self) -> bool {
        let present: Vec<f64> = [self.outlier_low, self.valid_low, self.valid_high, self.outlier_high]
            .into_iter()
            .flatten()
            .collect();
        present.iter().all(|v| !v.is_nan()) && present.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Ranges keyed by aggregate group.
#[derive(Debug, Clone, Default)]
pub struct RangeTable {
    ranges: BTreeMap<String, VariableRange>,
}

impl RangeTable {
    pub fn new(rows: Vec<(String, VariableRange)>) -> Result<Self> {
        let mut ranges = BTreeMap::new();
        for (variable, r) in rows {
            if !r.is_ordered() {
                return Err(ResourceError::RangeOrderViolation { variable });
            }
            if ranges.insert(variable.clone(), r).is_some() {
                return Err(ResourceError::DuplicateVariable(variable));
            }
        }
        Ok(RangeTable { ranges })
    }

    /// Range for an aggregate group; groups without a row are unconstrained.
    pub fn get(&self, group: &str) -> VariableRange {
        self.ranges.get(group).copied().unwrap_or(VariableRange::UNBOUNDED)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &VariableRange)> {
        self.ranges.iter().map(|(k, v)| (k.as_str(), v))
    }
}

pub fn load_item_map(path: &Path) -> Result<ItemMap> {
    let file = open(path)?;
    parse_item_map(file, &path.display().to_string())
}

pub fn parse_item_map<R: Read>(reader: R, label: &str) -> Result<ItemMap> {
    let rows = read_rows(reader, label, &ITEM_MAP_COLUMNS)?;
    let mut entries = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let row = i + 1;
        let itemid = r[0].trim().parse().map_err(|_| ResourceError::BadValue {
            file: label.to_string(),
            row,
            column: "itemid".into(),
            value: r[0].clone(),
        })?;
        let unit_class = r[3].parse().map_err(|_| ResourceError::UnknownUnitClass {
            row,
            value: r[3].clone(),
        })?;
        entries.push(ItemMapEntry {
            itemid,
            raw_label: r[1].clone(),
            aggregate_group: r[2].trim().to_string(),
            unit_class,
        });
    }
    ItemMap::new(entries)
}

pub fn load_variable_ranges(path: &Path) -> Result<RangeTable> {
    let file = open(path)?;
    parse_variable_ranges(file, &path.display().to_string())
}

pub fn parse_variable_ranges<R: Read>(reader: R, label: &str) -> Result<RangeTable> {
    let rows = read_rows(reader, label, &RANGE_COLUMNS)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let bound = |col: usize| -> Result<Option<f64>> {
            let s = r[col].trim();
            if s.is_empty() || s.eq_ignore_ascii_case("nan") {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| ResourceError::BadValue {
                file: label.to_string(),
                row: i + 1,
                column: RANGE_COLUMNS[col].to_string(),
                value: r[col].clone(),
            })
        };
        out.push((
            r[0].trim().to_string(),
            VariableRange {
                outlier_low: bound(1)?,
                valid_low: bound(2)?,
                valid_high: bound(3)?,
                outlier_high: bound(4)?,
            },
        ));
    }
    RangeTable::new(out)
}

/// The item map shipped with the crate.
pub fn default_item_map() -> ItemMap {
    parse_item_map(DEFAULT_ITEM_MAP.as_bytes(), ITEM_MAP_FILE).expect("bundled item map is valid")
}

/// The range table shipped with the crate.
pub fn default_variable_ranges() -> RangeTable {
    parse_variable_ranges(DEFAULT_VARIABLE_RANGES.as_bytes(), VARIABLE_RANGES_FILE)
        .expect("bundled ranges are valid")
}

/// Writes the bundled resource files into `dir`.
pub fn write_default_resources(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| ResourceError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, body) in [
        (ITEM_MAP_FILE, DEFAULT_ITEM_MAP),
        (VARIABLE_RANGES_FILE, DEFAULT_VARIABLE_RANGES),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|source| ResourceError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| ResourceError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_rows<R: Read>(reader: R, label: &str, columns: &[&str]) -> Result<Vec<Vec<String>>> {
    let csv_err = |source| ResourceError::Csv {
        file: label.to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != columns {
        return Err(ResourceError::SchemaMismatch {
            file: label.to_string(),
            expected: columns.iter().map(|c| c.to_string()).collect(),
            found: header,
        });
    }
    rdr.records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(csv_err))
        .collect()
}

/// Extraction keywords controlling cohort and feature selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Years.
    pub min_age: f64,
    /// Hours, inclusive.
    pub min_duration: f64,
    /// Hours, exclusive.
    pub max_duration: f64,
    pub group_by_level2: bool,
    /// Percentage of (stay, hour) rows in which a variable must be present.
    pub min_percent: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            min_age: 15.0,
            min_duration: 12.0,
            max_duration: 240.0,
            group_by_level2: true,
            min_percent: 0.0,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ResourceError::InvalidConfig(m.to_string()));
        if !(self.min_duration > 0.0 && self.min_duration < self.max_duration) {
            return bad("require 0 < min_duration < max_duration");
        }
        if !(0.0..=100.0).contains(&self.min_percent) {
            return bad("min_percent must lie in [0, 100]");
        }
        if !self.min_age.is_finite() || self.min_age < 0.0 {
            return bad("min_age must be a nonnegative number");
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| ResourceError::InvalidConfig(format!("{key}: not a number: {v:?}")))
        };
        match key.trim() {
            "min_age" => self.min_age = num(value)?,
            "min_duration" => self.min_duration = num(value)?,
            "max_duration" => self.max_duration = num(value)?,
            "min_percent" => self.min_percent = num(value)?,
            "group_by_level2" => {
                self.group_by_level2 = parse_bool(value).ok_or_else(|| {
                    ResourceError::InvalidConfig(format!("group_by_level2: not a boolean: {value:?}"))
                })?
            }
            other => return Err(ResourceError::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a `key=value` file over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ExtractConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ResourceError::InvalidConfig(format!("line {}: expected key=value", n + 1))
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Stable textual form used for hashing and manifests.
    pub fn canonical_string(&self) -> String {
        format!(
            "group_by_level2={}\nmax_duration={}\nmin_age={}\nmin_duration={}\nmin_percent={}\n",
            self.group_by_level2, self.max_duration, self.min_age, self.min_duration, self.min_percent
        )
    }
}

pub fn parse_bool(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "itemid,raw_label,aggregate_group,unit_class\n";

    #[test]
    fn two_itemids_share_one_group() {
        let text = format!("{HEADER}211,Heart Rate,heart_rate,none\n220045,Heart Rate,heart_rate,none\n");
        let map = parse_item_map(text.as_bytes(), "t").unwrap();
        assert_eq!(map.entries().len(), 2);
        assert_eq!(map.groups(), vec!["heart_rate".to_string()]);
    }

    #[test]
    fn duplicate_itemid_is_rejected() {
        let text = format!("{HEADER}211,Heart Rate,heart_rate,none\n211,HR,heart_rate,none\n");
        assert!(matches!(
            parse_item_map(text.as_bytes(), "t"),
            Err(ResourceError::DuplicateItemId(211))
        ));
    }

    #[test]
    fn unknown_unit_class_is_rejected() {
        let text = format!("{HEADER}211,Heart Rate,heart_rate,furlongs\n");
        assert!(matches!(
            parse_item_map(text.as_bytes(), "t"),
            Err(ResourceError::UnknownUnitClass { row: 1, .. })
        ));
    }

    #[test]
    fn range_rows_validate_ordering() {
        let hdr = "variable,outlier_low,valid_low,valid_high,outlier_high\n";
        let ok = parse_variable_ranges(format!("{hdr}heart_rate,0,0,350,390\n").as_bytes(), "t")
            .unwrap();
        assert_eq!(ok.get("heart_rate"), VariableRange::new(0.0, 0.0, 350.0, 390.0));

        let bad = parse_variable_ranges(format!("{hdr}heart_rate,0,0,400,390\n").as_bytes(), "t");
        assert!(matches!(bad, Err(ResourceError::RangeOrderViolation { .. })));

        let blank = parse_variable_ranges(format!("{hdr}albumin,,,,\n").as_bytes(), "t").unwrap();
        assert_eq!(blank.get("albumin"), VariableRange::UNBOUNDED);
    }

    #[test]
    fn resolve_by_level() {
        let map = default_item_map();
        assert_eq!(resolve_variable(211, &map, true), Some(VariableKey("heart_rate".into())));
        assert_eq!(resolve_variable(211, &map, false), Some(VariableKey("211".into())));
        assert_eq!(resolve_variable(999_999, &map, true), None);
    }

    #[test]
    fn bundled_resources_cover_every_group() {
        let map = default_item_map();
        let ranges = default_variable_ranges();
        let groups = map.groups();
        assert!(groups.len() >= 25);
        for g in &groups {
            assert!(ranges.iter().any(|(v, _)| v == g), "no range row for {g}");
        }
    }

    #[test]
    fn config_file_and_overrides() {
        let cfg = ExtractConfig::from_kv_str("# comment\nmin_age = 18\ngroup_by_level2=false\n").unwrap();
        assert_eq!(cfg.min_age, 18.0);
        assert!(!cfg.group_by_level2);
        assert_eq!(cfg.max_duration, 240.0);
        assert!(ExtractConfig::from_kv_str("bogus=1").is_err());
        let bad = ExtractConfig {
            min_duration: 300.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(ExtractConfig { min_percent: 101.0, ..Default::default() }.validate().is_err());
    }

    fn bound() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), (-50i32..50).prop_map(|v| Some(v as f64))]
    }

    proptest! {
        #[test]
        fn range_acceptance_matches_chain_oracle(ol in bound(), vl in bound(), vh in bound(), oh in bound()) {
            let r = VariableRange { outlier_low: ol, valid_low: vl, valid_high: vh, outlier_high: oh };
            // Oracle: every present pair (i < j) must satisfy b_i <= b_j.
            let b = [ol, vl, vh, oh];
            let mut expected = true;
            for i in 0..4 {
                for j in (i + 1)..4 {
                    if let (Some(x), Some(y)) = (b[i], b[j]) {
                        if x > y { expected = false; }
                    }
                }
            }
            let accepted = RangeTable::new(vec![("v".into(), r)]).is_ok();
            prop_assert_eq!(accepted, expected);
        }

        #[test]
        fn raw_resolution_is_injective(ids in proptest::collection::hash_set(1i64..1_000_000, 1..40)) {
            let entries: Vec<ItemMapEntry> = ids.iter().map(|&id| ItemMapEntry {
                itemid: id,
                raw_label: String::new(),
                aggregate_group: format!("g{}", id % 3),
                unit_class: UnitClass::None,
            }).collect();
            let map = ItemMap::new(entries).unwrap();
            let keys: HashSet<VariableKey> = ids.iter().map(|&i| resolve_variable(i, &map, false).unwrap()).collect();
            prop_assert_eq!(keys.len(), ids.len());
            for &i in &ids {
                prop_assert_eq!(resolve_variable(i, &map, true).unwrap().0, format!("g{}", i % 3));
            }
        }
    }
}
