//! Unit conversion, outlier correction and hourly aggregation of vitals and labs.
//!
//! Every event goes through the same fixed sequence:
//!
//! 1. resolve the ItemID to a variable key (raw or clinical aggregate),
//! 2. convert the value into the variable's canonical unit,
//! 3. apply the two-tier outlier policy (drop beyond the outlier thresholds,
//!    clamp into the physiologically valid range),
//! 4. bucket into the stay's hourly grid.
//!
//! Surviving values are pooled per (stay, hour, variable) into a mean, a count
//! and a sample standard deviation.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortRow};
use crate::ingest::EventRow;
use crate::resources::{ExtractConfig, ItemMap, RangeTable, UnitClass, VariableKey, VariableRange};
use crate::time::{hour_floor, seconds_between, Timestamp};

pub const LB_TO_KG: f64 = 0.45359237;
pub const OZ_TO_KG: f64 = 0.0283495231;
pub const IN_TO_CM: f64 = 2.54;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unit {uom:?} is not recognized for unit class {class}")]
pub struct UnknownUnit {
    pub uom: String,
    pub class: &'static str,
}

fn normalize_uom(uom: &str) -> String {
    uom.chars()
        .filter(|c| !c.is_whitespace() && *c != '°' && *c != '.')
        .collect::<String>()
        .to_ascii_lowercase()
}

/// Converts `value` recorded in `uom` into the canonical unit of `class`
/// (kg, cm, degrees Celsius). An empty unit string is taken as canonical.
pub fn convert_units(value: f64, uom: &str, class: UnitClass) -> Result<f64, UnknownUnit> {
    let u = normalize_uom(uom);
    let err = || UnknownUnit {
        uom: uom.to_string(),
        class: class.as_str(),
    };
    match class {
        UnitClass::None => Ok(value),
        UnitClass::Weight => match u.as_str() {
            "" | "kg" | "kgs" => Ok(value),
            "lb" | "lbs" | "pound" | "pounds" => Ok(value * LB_TO_KG),
            "oz" | "ounce" | "ounces" => Ok(value * OZ_TO_KG),
            _ => Err(err()),
        },
        UnitClass::Height => match u.as_str() {
            "" | "cm" => Ok(value),
            "in" | "inch" | "inches" => Ok(value * IN_TO_CM),
            _ => Err(err()),
        },
        UnitClass::Temperature => match u.as_str() {
            "" | "c" | "degc" => Ok(value),
            "f" | "degf" => Ok((value - 32.0) * 5.0 / 9.0),
            _ => Err(err()),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClampSide {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutlierDecision {
    Keep(f64),
    Clamp(f64, ClampSide),
    Drop,
}

/// Drops values beyond the outlier thresholds and clamps the remaining
/// out-of-range values to the nearest valid bound. Missing bounds impose no
/// constraint.
pub fn apply_outlier_policy(value: f64, range: &VariableRange) -> OutlierDecision {
    if matches!(range.outlier_low, Some(lo) if value < lo)
        || matches!(range.outlier_high, Some(hi) if value > hi)
    {
        return OutlierDecision::Drop;
    }
    if let Some(lo) = range.valid_low {
        if value < lo {
            return OutlierDecision::Clamp(lo, ClampSide::Low);
        }
    }
    if let Some(hi) = range.valid_high {
        if value > hi {
            return OutlierDecision::Clamp(hi, ClampSide::High);
        }
    }
    OutlierDecision::Keep(value)
}

/// Hour index of `charttime` in a grid of `n_hours` rows starting at `intime`.
pub fn bucket_hour(charttime: Timestamp, intime: Timestamp, n_hours: usize) -> Option<usize> {
    let h = hour_floor(seconds_between(&intime, &charttime));
    if h < 0 || h as usize >= n_hours {
        None
    } else {
        Some(h as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourlyCell {
    pub mean: f64,
    pub count: u32,
    /// Sample standard deviation; absent for singleton cells.
    pub std: Option<f64>,
}

impl HourlyCell {
    /// Summarizes a non-empty slice, summing in slice order.
    pub fn from_values(values: &[f64]) -> HourlyCell {
        debug_assert!(!values.is_empty());
        let n = values.len() as f64;
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let mean = (sum / n).clamp(lo, hi);
        let std = (values.len() > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        HourlyCell {
            mean,
            count: values.len() as u32,
            std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StayKey {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub icustay_id: i64,
}

impl From<&CohortRow> for StayKey {
    fn from(r: &CohortRow) -> Self {
        StayKey {
            subject_id: r.subject_id,
            hadm_id: r.hadm_id,
            icustay_id: r.icustay_id,
        }
    }
}

/// Cell is `(hour, variable index, stats)`.
pub type SparseCell = (u32, u32, HourlyCell);

#[derive(Debug, Clone, PartialEq)]
pub struct StayGrid {
    pub key: StayKey,
    pub n_hours: usize,
    /// Sorted by (hour, variable index).
    pub cells: Vec<SparseCell>,
}

impl StayGrid {
    pub fn cell(&self, hour: usize, var: usize) -> Option<&HourlyCell> {
        self.cells
            .binary_search_by_key(&(hour as u32, var as u32), |c| (c.0, c.1))
            .ok()
            .map(|i| &self.cells[i].2)
    }

    /// Cells of one hour, in variable order.
    pub fn hour_cells(&self, hour: usize) -> &[SparseCell] {
        let h = hour as u32;
        let start = self.cells.partition_point(|c| c.0 < h);
        let end = self.cells.partition_point(|c| c.0 <= h);
        &self.cells[start..end]
    }

    /// Hourly means of one variable, `None` where no cell exists.
    pub fn series(&self, var: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; self.n_hours];
        for &(h, v, c) in &self.cells {
            if v as usize == var {
                out[h as usize] = Some(c.mean);
            }
        }
        out
    }
}

/// Dense hourly index with sparse cells: every stay contributes `n_hours`
/// rows whether or not any value was observed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HourlyGrid {
    /// Sorted lexicographically.
    pub variables: Vec<VariableKey>,
    /// In cohort order (subject_id).
    pub stays: Vec<StayGrid>,
}

impl HourlyGrid {
    pub fn row_count(&self) -> usize {
        self.stays.iter().map(|s| s.n_hours).sum()
    }

    pub fn variable_index(&self, key: &str) -> Option<usize> {
        self.variables.binary_search_by(|v| v.as_str().cmp(key)).ok()
    }

    pub fn cell_count(&self) -> usize {
        self.stays.iter().map(|s| s.cells.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableCounts {
    pub n_kept: usize,
    pub n_clamped_low: usize,
    pub n_clamped_high: usize,
    pub n_dropped: usize,
    pub n_unit_errors: usize,
    pub n_out_of_stay: usize,
}

impl VariableCounts {
    pub fn examined(&self) -> usize {
        self.n_kept
            + self.n_clamped_low
            + self.n_clamped_high
            + self.n_dropped
            + self.n_unit_errors
            + self.n_out_of_stay
    }

    fn add(&mut self, o: &VariableCounts) {
        self.n_kept += o.n_kept;
        self.n_clamped_low += o.n_clamped_low;
        self.n_clamped_high += o.n_clamped_high;
        self.n_dropped += o.n_dropped;
        self.n_unit_errors += o.n_unit_errors;
        self.n_out_of_stay += o.n_out_of_stay;
    }
}

/// Per-run accounting of every event handed to [`aggregate_hourly`].
///
/// Each event lands in exactly one bucket: outside the cohort, unmapped, or
/// one of the per-variable outcomes. A value that is dropped as an extreme
/// outlier counts as dropped even when it also falls outside the grid; a
/// value that would be kept or clamped but falls outside the grid counts as
/// out-of-stay only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub per_variable: BTreeMap<VariableKey, VariableCounts>,
    pub n_unmapped: usize,
    pub n_outside_cohort: usize,
    pub total_events: usize,
}

impl OutlierReport {
    pub fn totals(&self) -> VariableCounts {
        let mut t = VariableCounts::default();
        for c in self.per_variable.values() {
            t.add(c);
        }
        t
    }

    /// Events that belonged to a cohort stay.
    pub fn examined(&self) -> usize {
        self.totals().examined() + self.n_unmapped
    }
}

struct ResolvedItem {
    var: u32,
    unit_class: UnitClass,
    range: VariableRange,
}

/// Variable keys the item map produces at the chosen level, sorted.
pub fn variable_keys(map: &ItemMap, group_by_level2: bool) -> Vec<VariableKey> {
    let mut keys: Vec<VariableKey> = if group_by_level2 {
        map.groups().into_iter().map(VariableKey).collect()
    } else {
        map.entries().iter().map(|e| VariableKey(e.itemid.to_string())).collect()
    };
    keys.sort();
    keys.dedup();
    keys
}

/// Builds the hourly grid for the cohort. Work is spread across stays on the
/// current rayon pool; within a stay events are reduced in
/// (charttime, itemid, valuenum) order, so the output does not depend on
/// input order or thread count.
pub fn aggregate_hourly(
    events: &[EventRow],
    cohort: &Cohort,
    item_map: &ItemMap,
    ranges: &RangeTable,
    cfg: &ExtractConfig,
) -> (HourlyGrid, OutlierReport) {
    let variables = variable_keys(item_map, cfg.group_by_level2);
    let resolved: HashMap<i64, ResolvedItem> = item_map
        .entries()
        .iter()
        .map(|e| {
            let key = if cfg.group_by_level2 {
                e.aggregate_group.clone()
            } else {
                e.itemid.to_string()
            };
            let var = variables.binary_search_by(|v| v.0.cmp(&key)).unwrap() as u32;
            (
                e.itemid,
                ResolvedItem {
                    var,
                    unit_class: e.unit_class,
                    range: ranges.get(&e.aggregate_group),
                },
            )
        })
        .collect();

    let stay_pos: HashMap<i64, usize> = cohort
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.icustay_id, i))
        .collect();
    let mut per_stay: Vec<Vec<&EventRow>> = vec![Vec::new(); cohort.rows.len()];
    let mut outside = 0;
    for e in events {
        match e.icustay_id.and_then(|id| stay_pos.get(&id)) {
            Some(&i) => per_stay[i].push(e),
            None => outside += 1,
        }
    }

    let n_vars = variables.len();
    let results: Vec<(StayGrid, Vec<VariableCounts>, usize)> = cohort
        .rows
        .par_iter()
        .zip(per_stay.into_par_iter())
        .map(|(row, evs)| aggregate_stay(row, evs, &resolved, n_vars))
        .collect();

    let mut counts = vec![VariableCounts::default(); n_vars];
    let mut unmapped = 0;
    let mut stays = Vec::with_capacity(results.len());
    for (grid, c, u) in results {
        for (acc, x) in counts.iter_mut().zip(&c) {
            acc.add(x);
        }
        unmapped += u;
        stays.push(grid);
    }
    let report = OutlierReport {
        per_variable: variables.iter().cloned().zip(counts).collect(),
        n_unmapped: unmapped,
        n_outside_cohort: outside,
        total_events: events.len(),
    };
    (HourlyGrid { variables, stays }, report)
}

fn aggregate_stay(
    row: &CohortRow,
    mut events: Vec<&EventRow>,
    resolved: &HashMap<i64, ResolvedItem>,
    n_vars: usize,
) -> (StayGrid, Vec<VariableCounts>, usize) {
    events.sort_by(|a, b| {
        a.charttime
            .cmp(&b.charttime)
            .then(a.itemid.cmp(&b.itemid))
            .then(a.valuenum.total_cmp(&b.valuenum))
    });
    let n_hours = row.n_hours();
    let mut counts = vec![VariableCounts::default(); n_vars];
    let mut unmapped = 0;
    let mut pooled: Vec<(u32, u32, f64)> = Vec::with_capacity(events.len());
    for e in events {
        let Some(item) = resolved.get(&e.itemid) else {
            unmapped += 1;
            continue;
        };
        let c = &mut counts[item.var as usize];
        let Ok(value) = convert_units(e.valuenum, &e.valueuom, item.unit_class) else {
            c.n_unit_errors += 1;
            continue;
        };
        let decision = apply_outlier_policy(value, &item.range);
        let value = match decision {
            OutlierDecision::Drop => {
                c.n_dropped += 1;
                continue;
            }
            OutlierDecision::Keep(v) | OutlierDecision::Clamp(v, _) => v,
        };
        let Some(hour) = bucket_hour(e.charttime, row.intime, n_hours) else {
            c.n_out_of_stay += 1;
            continue;
        };
        match decision {
            OutlierDecision::Clamp(_, ClampSide::Low) => c.n_clamped_low += 1,
            OutlierDecision::Clamp(_, ClampSide::High) => c.n_clamped_high += 1,
            _ => c.n_kept += 1,
        }
        pooled.push((hour as u32, item.var, value));
    }
    // Stable sort keeps the event order inside each cell.
    pooled.sort_by_key(|p| (p.0, p.1));
    let mut cells = Vec::new();
    let mut buf = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let (h, v) = (pooled[i].0, pooled[i].1);
        buf.clear();
        while i < pooled.len() && pooled[i].0 == h && pooled[i].1 == v {
            buf.push(pooled[i].2);
            i += 1;
        }
        cells.push((h, v, HourlyCell::from_values(&buf)));
    }
    (
        StayGrid {
            key: StayKey::from(row),
            n_hours,
            cells,
        },
        counts,
        unmapped,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariablePresence {
    pub variable: VariableKey,
    pub present_rows: usize,
    pub total_rows: usize,
    /// Percentage of index rows holding a cell.
    pub presence: f64,
    /// Mean of the observed hourly means.
    pub mean: Option<f64>,
    /// Sample standard deviation of the observed hourly means.
    pub std: Option<f64>,
}

pub fn summarize_missingness(grid: &HourlyGrid) -> Vec<VariablePresence> {
    let total_rows = grid.row_count();
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); grid.variables.len()];
    for s in &grid.stays {
        for &(_, v, c) in &s.cells {
            means[v as usize].push(c.mean);
        }
    }
    grid.variables
        .iter()
        .zip(means)
        .map(|(var, m)| {
            let present_rows = m.len();
            let (mean, std) = if m.is_empty() {
                (None, None)
            } else {
                let c = HourlyCell::from_values(&m);
                (Some(c.mean), c.std)
            };
            VariablePresence {
                variable: var.clone(),
                present_rows,
                total_rows,
                presence: presence_percent(present_rows, total_rows),
                mean,
                std,
            }
        })
        .collect()
}

fn presence_percent(present: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        present as f64 * 100.0 / total as f64
    }
}

/// Keeps variables present in at least `min_percent` percent of the grid's
/// (stay, hour) rows. Returns the filtered grid and the dropped keys.
pub fn filter_missingness(grid: HourlyGrid, min_percent: f64) -> (HourlyGrid, Vec<VariableKey>) {
    if min_percent <= 0.0 {
        return (grid, Vec::new());
    }
    let total = grid.row_count();
    let mut present = vec![0usize; grid.variables.len()];
    for s in &grid.stays {
        for &(_, v, _) in &s.cells {
            present[v as usize] += 1;
        }
    }
    let keep: Vec<bool> = present
        .iter()
        .map(|&p| presence_percent(p, total) >= min_percent)
        .collect();
    let mut remap = vec![u32::MAX; keep.len()];
    let mut variables = Vec::new();
    let mut dropped = Vec::new();
    for (i, (var, &k)) in grid.variables.into_iter().zip(&keep).enumerate() {
        if k {
            remap[i] = variables.len() as u32;
            variables.push(var);
        } else {
            dropped.push(var);
        }
    }
    let stays = grid
        .stays
        .into_iter()
        .map(|s| StayGrid {
            cells: s
                .cells
                .into_iter()
                .filter(|c| keep[c.1 as usize])
                .map(|(h, v, c)| (h, remap[v as usize], c))
                .collect(),
            ..s
        })
        .collect();
    (HourlyGrid { variables, stays }, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::ItemMapEntry;
    use crate::time::parse_timestamp;
    use proptest::prelude::*;

    fn ts(s: &str) -> Timestamp {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn unit_conversion_examples() {
        assert!((convert_units(98.6, "F", UnitClass::Temperature).unwrap() - 37.0).abs() < 1e-12);
        assert!((convert_units(98.6, "°f", UnitClass::Temperature).unwrap() - 37.0).abs() < 1e-12);
        assert_eq!(convert_units(37.0, "°C", UnitClass::Temperature).unwrap(), 37.0);
        assert_eq!(convert_units(180.0, "cm", UnitClass::Height).unwrap(), 180.0);
        assert!((convert_units(70.0, "in", UnitClass::Height).unwrap() - 177.8).abs() < 1e-12);
        // Independent arithmetic: 154.3234054 lb / 2.20462262185 lb per kg.
        let kg = convert_units(154.3234054, "lb", UnitClass::Weight).unwrap();
        assert!((kg - 154.3234054 / 2.204_622_621_85).abs() < 1e-9);
        // 70 kg to within the precision of the quoted pound figure.
        assert!((kg - 70.0).abs() < 1e-3);
        assert!((kg - 69.99991920185681).abs() < 1e-9);
        assert!((convert_units(16.0, "oz", UnitClass::Weight).unwrap() - 0.45359237).abs() < 1e-9);
        assert_eq!(convert_units(80.0, "bpm", UnitClass::None).unwrap(), 80.0);
        assert!(convert_units(10.0, "stone", UnitClass::Weight).is_err());
        assert!(convert_units(10.0, "K", UnitClass::Temperature).is_err());
    }

    #[test]
    fn outlier_policy_examples() {
        let r = VariableRange::new(0.0, 0.0, 350.0, 390.0);
        assert_eq!(apply_outlier_policy(400.0, &r), OutlierDecision::Drop);
        assert_eq!(apply_outlier_policy(370.0, &r), OutlierDecision::Clamp(350.0, ClampSide::High));
        assert_eq!(apply_outlier_policy(80.0, &r), OutlierDecision::Keep(80.0));
        assert_eq!(apply_outlier_policy(-1.0, &r), OutlierDecision::Drop);
        assert_eq!(apply_outlier_policy(390.0, &r), OutlierDecision::Clamp(350.0, ClampSide::High));
        let t = VariableRange::new(14.2, 26.0, 45.0, 47.0);
        assert_eq!(apply_outlier_policy(20.0, &t), OutlierDecision::Clamp(26.0, ClampSide::Low));
        assert_eq!(apply_outlier_policy(1e9, &VariableRange::UNBOUNDED), OutlierDecision::Keep(1e9));
    }

    #[test]
    fn bucket_examples() {
        let intime = ts("2101-01-01 00:00:00");
        assert_eq!(bucket_hour(intime, intime, 24), Some(0));
        assert_eq!(bucket_hour(ts("2101-01-01 00:59:00"), intime, 24), Some(0));
        assert_eq!(bucket_hour(ts("2101-01-01 01:00:00"), intime, 24), Some(1));
        assert_eq!(bucket_hour(ts("2101-01-02 00:01:00"), intime, 24), None);
        assert_eq!(bucket_hour(ts("2100-12-31 23:59:59"), intime, 24), None);
    }

    #[test]
    fn cell_statistics() {
        let c = HourlyCell::from_values(&[80.0, 90.0]);
        assert_eq!(c.mean, 85.0);
        assert_eq!(c.count, 2);
        // (n-1) oracle: sqrt(((80-85)^2 + (90-85)^2) / 1) = sqrt(50)
        assert!((c.std.unwrap() - 7.0710678118654755).abs() < 1e-12);
        let single = HourlyCell::from_values(&[80.0]);
        assert_eq!((single.mean, single.count, single.std), (80.0, 1, None));
        let tenths = HourlyCell::from_values(&[0.1, 0.1, 0.1]);
        assert_eq!(tenths.mean, 0.1);
    }

    fn cohort_row(id: i64, hours: i64) -> CohortRow {
        let intime = ts("2101-01-01 00:00:00");
        CohortRow {
            subject_id: id,
            hadm_id: id * 10,
            icustay_id: id * 100,
            age: 50,
            gender: "M".into(),
            ethnicity: "WHITE".into(),
            insurance: "Private".into(),
            admission_type: "EMERGENCY".into(),
            first_careunit: "MICU".into(),
            admittime: intime,
            dischtime: intime + chrono::Duration::hours(hours),
            intime,
            outtime: intime + chrono::Duration::hours(hours),
            mort_icu: false,
            mort_hosp: false,
            los_icu_hours: hours as f64,
        }
    }

    fn event(stay: i64, itemid: i64, minutes: i64, value: f64, uom: &str) -> EventRow {
        EventRow {
            subject_id: stay / 100,
            hadm_id: stay / 10,
            icustay_id: Some(stay),
            itemid,
            charttime: ts("2101-01-01 00:00:00") + chrono::Duration::minutes(minutes),
            valuenum: value,
            valueuom: uom.into(),
        }
    }

    fn hr_map() -> ItemMap {
        ItemMap::new(vec![
            ItemMapEntry {
                itemid: 211,
                raw_label: "Heart Rate".into(),
                aggregate_group: "heart_rate".into(),
                unit_class: UnitClass::None,
            },
            ItemMapEntry {
                itemid: 220045,
                raw_label: "Heart Rate".into(),
                aggregate_group: "heart_rate".into(),
                unit_class: UnitClass::None,
            },
            ItemMapEntry {
                itemid: 226512,
                raw_label: "Weight".into(),
                aggregate_group: "weight".into(),
                unit_class: UnitClass::Weight,
            },
        ])
        .unwrap()
    }

    fn hr_ranges() -> RangeTable {
        RangeTable::new(vec![("heart_rate".into(), VariableRange::new(0.0, 0.0, 350.0, 390.0))]).unwrap()
    }

    #[test]
    fn aggregated_grouping_pools_itemids() {
        let cohort = Cohort::from_rows(vec![cohort_row(1, 24)]);
        let events = vec![event(100, 211, 10, 60.0, "bpm"), event(100, 220045, 20, 70.0, "bpm")];
        let (grid, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
        let hr = grid.variable_index("heart_rate").unwrap();
        let cell = grid.stays[0].cell(0, hr).unwrap();
        assert_eq!((cell.mean, cell.count), (65.0, 2));

        let raw_cfg = ExtractConfig {
            group_by_level2: false,
            ..Default::default()
        };
        let (raw, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &raw_cfg);
        assert_eq!(
            raw.variables.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
            vec!["211", "220045", "226512"]
        );
        assert_eq!(raw.stays[0].cell(0, 0).unwrap().mean, 60.0);
        assert_eq!(raw.stays[0].cell(0, 1).unwrap().mean, 70.0);
    }

    #[test]
    fn report_partitions_events() {
        let cohort = Cohort::from_rows(vec![cohort_row(1, 12)]);
        let events = vec![
            event(100, 211, 0, 80.0, ""),
            event(100, 211, 5, 370.0, ""),
            event(100, 211, 6, 400.0, ""),
            event(100, 211, 12 * 60 + 1, 80.0, ""),
            event(100, 999, 5, 1.0, ""),
            event(100, 226512, 5, 10.0, "stone"),
            event(200, 211, 5, 80.0, ""),
        ];
        let (grid, rep) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
        let hr = &rep.per_variable[&VariableKey("heart_rate".into())];
        assert_eq!(
            (hr.n_kept, hr.n_clamped_high, hr.n_dropped, hr.n_out_of_stay),
            (1, 1, 1, 1)
        );
        assert_eq!(rep.per_variable[&VariableKey("weight".into())].n_unit_errors, 1);
        assert_eq!(rep.n_unmapped, 1);
        assert_eq!(rep.n_outside_cohort, 1);
        assert_eq!(rep.examined() + rep.n_outside_cohort, rep.total_events);
        assert_eq!(grid.row_count(), 12);
        let c = grid.stays[0].cell(0, 0).unwrap();
        assert_eq!((c.mean, c.count), (215.0, 2));
    }

    #[test]
    fn missingness_threshold() {
        let cohort = Cohort::from_rows(vec![cohort_row(1, 12), cohort_row(2, 12)]);
        let mut events = Vec::new();
        // heart rate in 12 of 24 rows (50%), weight in 2 of 24 rows.
        for h in 0..12 {
            events.push(event(100, 211, h * 60, 80.0, ""));
        }
        events.push(event(200, 226512, 0, 70.0, "kg"));
        events.push(event(200, 226512, 60, 70.0, "kg"));
        let (grid, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
        let summary = summarize_missingness(&grid);
        assert_eq!(summary[0].presence, 50.0);
        assert!((summary[1].presence - 100.0 / 12.0).abs() < 1e-12);

        let (same, dropped) = filter_missingness(grid.clone(), 0.0);
        assert_eq!(same, grid);
        assert!(dropped.is_empty());

        let (kept, dropped) = filter_missingness(grid.clone(), 50.0);
        assert_eq!(kept.variables, vec![VariableKey("heart_rate".into())]);
        assert_eq!(dropped, vec![VariableKey("weight".into())]);
        assert_eq!(kept.stays[0].cells.len(), 12);

        let (none, _) = filter_missingness(grid, 60.0);
        assert!(none.variables.is_empty());
        assert_eq!(none.row_count(), 24);
    }

    #[test]
    fn empty_and_dense_presence() {
        let cohort = Cohort::from_rows(vec![cohort_row(1, 12)]);
        let events: Vec<EventRow> = (0..12).map(|h| event(100, 211, h * 60 + 3, 90.0, "")).collect();
        let (grid, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
        let s = summarize_missingness(&grid);
        assert_eq!(s[0].presence, 100.0);
        assert_eq!(s[1].presence, 0.0);
        assert_eq!(s[1].mean, None);
    }

    proptest! {
        #[test]
        fn clamped_values_are_kept_on_reapplication(
            ol in -100.0f64..0.0, gap_lo in 0.0f64..50.0, width in 0.0f64..100.0, gap_hi in 0.0f64..50.0,
            v in -300.0f64..300.0
        ) {
            let r = VariableRange::new(ol, ol + gap_lo, ol + gap_lo + width, ol + gap_lo + width + gap_hi);
            if let OutlierDecision::Clamp(x, _) = apply_outlier_policy(v, &r) {
                prop_assert_eq!(apply_outlier_policy(x, &r), OutlierDecision::Keep(x));
            }
        }

        #[test]
        fn cells_match_brute_force(values in proptest::collection::vec((0i64..(24 * 60), 20.0f64..300.0), 1..200)) {
            let cohort = Cohort::from_rows(vec![cohort_row(1, 24)]);
            let events: Vec<EventRow> = values.iter().map(|&(m, v)| event(100, 211, m, v, "")).collect();
            let (grid, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
            for h in 0..24usize {
                let vals: Vec<f64> = values.iter().filter(|(m, _)| (*m / 60) as usize == h).map(|&(_, v)| v).collect();
                let cell = grid.stays[0].cell(h, 0);
                if vals.is_empty() {
                    prop_assert!(cell.is_none());
                    continue;
                }
                let cell = cell.unwrap();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                prop_assert_eq!(cell.count as usize, vals.len());
                prop_assert!((cell.mean - mean).abs() < 1e-9);
                if vals.len() > 1 {
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                    prop_assert!((cell.std.unwrap() - var.sqrt()).abs() < 1e-9);
                } else {
                    prop_assert!(cell.std.is_none());
                }
            }
        }

        #[test]
        fn input_order_does_not_matter(values in proptest::collection::vec((0i64..(12 * 60), 20.0f64..300.0), 1..80), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cohort = Cohort::from_rows(vec![cohort_row(1, 12)]);
            let mut events: Vec<EventRow> = values.iter().map(|&(m, v)| event(100, 211, m, v, "")).collect();
            let (a, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
            events.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (b, _) = aggregate_hourly(&events, &cohort, &hr_map(), &hr_ranges(), &ExtractConfig::default());
            prop_assert_eq!(a, b);
        }
    }
}
