//! Supervised samples built from the hourly grids.
//!
//! Two prediction frameworks are supported:
//!
//! * **fixed**: the first 24 grid hours of stays with at least 30 grid hours
//!   predict in-ICU/in-hospital mortality and LOS > 3 / > 7 days. The six
//!   hours between the feature window and the eligibility cut-off act as a
//!   gap against label leakage.
//! * **dynamic**: a 6-hour sliding input window predicts the state of one
//!   intervention over a 4-hour window that begins 6 hours after the input
//!   window ends, as one of onset, stay-on, wean or stay-off.
//!
//! Each variable is represented as (value, mask, delta) with Simple
//! Imputation: forward fill, then the patient's mean within the window, then
//! the training-set global mean. Values are imputed in raw units and then
//! standardized with training-split statistics, which is the same as
//! standardizing first because every fallback is an affine-invariant mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortRow};
use crate::interventions::{Intervention, InterventionGrid};
use crate::resources::VariableKey;
use crate::timeseries::{HourlyCell, HourlyGrid, StayGrid, StayKey};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("target must be vent or vaso, got {0}")]
    BadTarget(Intervention),
    #[error("grid and cohort disagree: {0}")]
    Mismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {reason}")]
    Format { file: String, reason: String },
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub by_subject: BTreeMap<i64, Split>,
}

impl SplitAssignment {
    pub fn of(&self, subject_id: i64) -> Option<Split> {
        self.by_subject.get(&subject_id).copied()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) determined by (seed, subject).
fn subject_unit(seed: u64, subject_id: i64) -> f64 {
    let h = splitmix64(splitmix64(seed) ^ subject_id as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns every subject to a split by hashing its id with `seed`, so the
/// assignment of one subject never depends on who else is in the cohort.
pub fn split_cohort(cohort: &Cohort, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(BenchError::BadRatios(r));
    }
    let by_subject = cohort
        .rows
        .iter()
        .map(|row| {
            let u = subject_unit(seed, row.subject_id);
            let s = if u < ratios.train {
                Split::Train
            } else if u < ratios.train + ratios.val {
                Split::Val
            } else {
                Split::Test
            };
            (row.subject_id, s)
        })
        .collect();
    Ok(SplitAssignment {
        ratios,
        seed,
        by_subject,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub mean: f64,
    pub std: f64,
}

impl VarStats {
    pub const FALLBACK: VarStats = VarStats { mean: 0.0, std: 1.0 };

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    /// Sample statistics with the standard deviation floored; `(0, 1)` when
    /// nothing was observed.
    pub fn from_values(values: &[f64]) -> VarStats {
        if values.is_empty() {
            return VarStats::FALLBACK;
        }
        let c = HourlyCell::from_values(values);
        VarStats {
            mean: c.mean,
            std: c.std.unwrap_or(0.0).max(STD_FLOOR),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub variables: Vec<VariableKey>,
    pub stats: Vec<VarStats>,
}

/// Per-variable mean and sample standard deviation of the hourly means of
/// training-split stays. With `hour_limit`, only hours before it are read, so
/// the statistics cannot see anything past a fixed feature window.
pub fn compute_train_stats(
    grid: &HourlyGrid,
    cohort: &Cohort,
    split: &SplitAssignment,
    hour_limit: Option<usize>,
) -> TrainStats {
    let train = train_stays(cohort, split);
    let limit = hour_limit.map_or(u32::MAX, |h| h.min(u32::MAX as usize) as u32);
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); grid.variables.len()];
    for s in &grid.stays {
        if train.contains(&s.key.icustay_id) {
            for &(_, v, c) in s.cells.iter().filter(|c| c.0 < limit) {
                values[v as usize].push(c.mean);
            }
        }
    }
    TrainStats {
        variables: grid.variables.clone(),
        stats: values.iter().map(|v| VarStats::from_values(v)).collect(),
    }
}

fn train_stays(cohort: &Cohort, split: &SplitAssignment) -> BTreeSet<i64> {
    cohort
        .rows
        .iter()
        .filter(|r| split.of(r.subject_id) == Some(Split::Train))
        .map(|r| r.icustay_id)
        .collect()
}

/// One variable's imputed window, in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSeries {
    pub values: Vec<f64>,
    pub mask: Vec<u8>,
    pub delta: Vec<f64>,
}

/// Simple Imputation of one window. Unobserved hours take the last observed
/// value, else the window's own mean, else `global_mean`. `delta` counts hours
/// since the last observation, with `sentinel` before the first one.
pub fn simple_impute(series: &[Option<f64>], global_mean: f64, sentinel: f64) -> ImputedSeries {
    let observed: Vec<f64> = series.iter().flatten().copied().collect();
    let fallback = if observed.is_empty() {
        global_mean
    } else {
        HourlyCell::from_values(&observed).mean
    };
    let mut out = ImputedSeries {
        values: Vec::with_capacity(series.len()),
        mask: Vec::with_capacity(series.len()),
        delta: Vec::with_capacity(series.len()),
    };
    let mut last: Option<(usize, f64)> = None;
    for (h, x) in series.iter().enumerate() {
        match x {
            Some(v) => {
                last = Some((h, *v));
                out.values.push(*v);
                out.mask.push(1);
                out.delta.push(0.0);
            }
            None => {
                out.values.push(last.map_or(fallback, |(_, v)| v));
                out.mask.push(0);
                out.delta.push(last.map_or(sentinel, |(lh, _)| (h - lh) as f64));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBucket {
    #[serde(rename = "<30")]
    UpTo30,
    #[serde(rename = "31-50")]
    From31To50,
    #[serde(rename = "51-70")]
    From51To70,
    #[serde(rename = ">70")]
    Over70,
}

impl AgeBucket {
    pub const ALL: [AgeBucket; 4] = [
        AgeBucket::UpTo30,
        AgeBucket::From31To50,
        AgeBucket::From51To70,
        AgeBucket::Over70,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AgeBucket::UpTo30 => "<30",
            AgeBucket::From31To50 => "31-50",
            AgeBucket::From51To70 => "51-70",
            AgeBucket::Over70 => ">70",
        }
    }
}

impl fmt::Display for AgeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Buckets `[0, 30]`, `(30, 50]`, `(50, 70]`, `(70, ∞)`. The privacy mask
/// (300) falls in the oldest bucket.
pub fn age_bucket(age: i64) -> AgeBucket {
    match age {
        a if a <= 30 => AgeBucket::UpTo30,
        a if a <= 50 => AgeBucket::From31To50,
        a if a <= 70 => AgeBucket::From51To70,
        _ => AgeBucket::Over70,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLabel {
    Onset,
    StayOn,
    Wean,
    StayOff,
}

impl WindowLabel {
    pub const ALL: [WindowLabel; 4] = [
        WindowLabel::Onset,
        WindowLabel::StayOn,
        WindowLabel::Wean,
        WindowLabel::StayOff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WindowLabel::Onset => "onset",
            WindowLabel::StayOn => "stay_on",
            WindowLabel::Wean => "wean",
            WindowLabel::StayOff => "stay_off",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for WindowLabel {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        WindowLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or(())
    }
}

/// Classifies a prediction window from the state in the hour before it.
/// The starting state picks the family: off leads to onset or stay-off, on
/// leads to wean or stay-on.
pub fn label_window(state_before: u8, window: &[u8]) -> WindowLabel {
    if state_before == 0 {
        if window.iter().any(|&v| v != 0) {
            WindowLabel::Onset
        } else {
            WindowLabel::StayOff
        }
    } else if window.contains(&0) {
        WindowLabel::Wean
    } else {
        WindowLabel::StayOn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedOptions {
    /// Feature hours taken from the start of the stay.
    pub window_hours: usize,
    /// Minimum grid hours for a stay to be eligible.
    pub min_hours: usize,
    pub sentinel: f64,
}

impl Default for FixedOptions {
    fn default() -> Self {
        FixedOptions {
            window_hours: 24,
            min_hours: 30,
            sentinel: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedLabels {
    pub mort_icu: bool,
    pub mort_hosp: bool,
    pub los3: bool,
    pub los7: bool,
}

impl FixedLabels {
    pub const NAMES: [&'static str; 4] = ["mort_icu", "mort_hosp", "los3", "los7"];

    pub fn from_row(row: &CohortRow) -> Self {
        FixedLabels {
            mort_icu: row.mort_icu,
            mort_hosp: row.mort_hosp,
            los3: row.los_icu_hours > 72.0,
            los7: row.los_icu_hours > 168.0,
        }
    }

    pub fn as_array(&self) -> [bool; 4] {
        [self.mort_icu, self.mort_hosp, self.los3, self.los7]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedSample {
    pub key: StayKey,
    pub split: Split,
    /// Laid out as in [`FixedSampleSet::columns`].
    pub features: Vec<f64>,
    pub labels: FixedLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedSampleSet {
    pub columns: Vec<String>,
    pub samples: Vec<FixedSample>,
}

const STATS: [&str; 3] = ["value", "mask", "delta"];

fn window_columns(variables: &[VariableKey], hours: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(variables.len() * 3 * hours);
    for v in variables {
        for stat in STATS {
            for h in 0..hours {
                cols.push(format!("{v}__{stat}__h{h}"));
            }
        }
    }
    cols
}

/// Appends `[values | mask | delta]` per variable for grid hours
/// `[start, start + len)`.
fn window_features(
    stay: &StayGrid,
    start: usize,
    len: usize,
    stats: &TrainStats,
    sentinel: f64,
    delta_stats: Option<&[VarStats]>,
    out: &mut Vec<f64>,
) {
    let mut series: Vec<Vec<Option<f64>>> = vec![vec![None; len]; stats.variables.len()];
    for h in start..start + len {
        for &(_, v, c) in stay.hour_cells(h) {
            series[v as usize][h - start] = Some(c.mean);
        }
    }
    for (v, s) in series.iter().enumerate() {
        let vs = stats.stats[v];
        let imp = simple_impute(s, vs.mean, sentinel);
        out.extend(imp.values.iter().map(|&x| vs.standardize(x)));
        out.extend(imp.mask.iter().map(|&m| m as f64));
        match delta_stats {
            Some(ds) => out.extend(imp.delta.iter().map(|&d| ds[v].standardize(d))),
            None => out.extend(imp.delta.iter().copied()),
        }
    }
}

fn check_alignment(grid: &HourlyGrid, cohort: &Cohort) -> Result<()> {
    if grid.stays.len() != cohort.rows.len()
        || grid
            .stays
            .iter()
            .zip(&cohort.rows)
            .any(|(s, r)| s.key.icustay_id != r.icustay_id || s.n_hours != r.n_hours())
    {
        return Err(BenchError::Mismatch(
            "grid stays must follow cohort order with ceil(LOS) rows each".into(),
        ));
    }
    Ok(())
}

pub fn build_fixed_samples(
    grid: &HourlyGrid,
    cohort: &Cohort,
    split: &SplitAssignment,
    stats: &TrainStats,
    opts: &FixedOptions,
) -> Result<FixedSampleSet> {
    check_alignment(grid, cohort)?;
    let samples = grid
        .stays
        .par_iter()
        .zip(&cohort.rows)
        .filter(|(s, _)| s.n_hours >= opts.min_hours)
        .filter_map(|(s, row)| {
            let sp = split.of(row.subject_id)?;
            let mut features = Vec::with_capacity(stats.variables.len() * 3 * opts.window_hours);
            window_features(s, 0, opts.window_hours, stats, opts.sentinel, None, &mut features);
            Some(FixedSample {
                key: s.key,
                split: sp,
                features,
                labels: FixedLabels::from_row(row),
            })
        })
        .collect();
    Ok(FixedSampleSet {
        columns: window_columns(&stats.variables, opts.window_hours),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicOptions {
    pub input_hours: usize,
    pub gap_hours: usize,
    pub prediction_hours: usize,
    pub stride: usize,
    pub sentinel: f64,
}

impl Default for DynamicOptions {
    fn default() -> Self {
        DynamicOptions {
            input_hours: 6,
            gap_hours: 6,
            prediction_hours: 4,
            stride: 1,
            sentinel: 7.0,
        }
    }
}

impl DynamicOptions {
    pub fn span(&self) -> usize {
        self.input_hours + self.gap_hours + self.prediction_hours
    }

    /// Anchors `t = 0, stride, 2·stride, …` with `t + span <= n_hours`.
    pub fn anchors(&self, n_hours: usize) -> impl Iterator<Item = usize> {
        let last = n_hours.checked_sub(self.span());
        (0..last.map_or(0, |l| l + 1)).step_by(self.stride.max(1))
    }

    /// First hour of the prediction window for anchor `t`.
    pub fn prediction_start(&self, t: usize) -> usize {
        t + self.input_hours + self.gap_hours
    }
}

/// Category lists for the one-hot static features, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticVocabulary {
    pub gender: Vec<String>,
    pub age_bucket: Vec<String>,
    pub ethnicity: Vec<String>,
    pub first_careunit: Vec<String>,
    pub admission_type: Vec<String>,
}

impl StaticVocabulary {
    pub fn from_cohort(cohort: &Cohort) -> Self {
        fn uniq<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
            it.collect::<BTreeSet<_>>().into_iter().map(str::to_string).collect()
        }
        StaticVocabulary {
            gender: uniq(cohort.rows.iter().map(|r| r.gender.as_str())),
            age_bucket: AgeBucket::ALL.iter().map(|b| b.label().to_string()).collect(),
            ethnicity: uniq(cohort.rows.iter().map(|r| r.ethnicity.as_str())),
            first_careunit: uniq(cohort.rows.iter().map(|r| r.first_careunit.as_str())),
            admission_type: uniq(cohort.rows.iter().map(|r| r.admission_type.as_str())),
        }
    }

    fn groups(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("gender", &self.gender),
            ("age_bucket", &self.age_bucket),
            ("ethnicity", &self.ethnicity),
            ("first_careunit", &self.first_careunit),
            ("admission_type", &self.admission_type),
        ]
    }

    pub fn columns(&self) -> Vec<String> {
        self.groups()
            .iter()
            .flat_map(|(g, cats)| cats.iter().map(move |c| format!("static__{g}__{c}")))
            .collect()
    }

    pub fn encode(&self, row: &CohortRow, out: &mut Vec<f64>) {
        let bucket = age_bucket(row.age).label();
        let values = [
            row.gender.as_str(),
            bucket,
            row.ethnicity.as_str(),
            row.first_careunit.as_str(),
            row.admission_type.as_str(),
        ];
        for ((_, cats), v) in self.groups().iter().zip(values) {
            out.extend(cats.iter().map(|c| if c == v { 1.0 } else { 0.0 }));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSample {
    pub key: StayKey,
    pub split: Split,
    pub anchor: usize,
    /// Clock hour (0–23) at the start of the input window.
    pub time_of_day: u32,
    /// Window features, then the one-hot statics; see [`DynamicPlan::columns`].
    pub features: Vec<f64>,
    pub label: WindowLabel,
}

/// Everything needed to produce dynamic samples stay by stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicPlan {
    pub target: Intervention,
    pub options: DynamicOptions,
    pub vocabulary: StaticVocabulary,
    /// Training statistics of the raw deltas, per variable.
    pub delta_stats: Vec<VarStats>,
}

impl DynamicPlan {
    pub fn new(
        grid: &HourlyGrid,
        cohort: &Cohort,
        split: &SplitAssignment,
        target: Intervention,
        options: DynamicOptions,
    ) -> Result<Self> {
        if !matches!(target, Intervention::Vent | Intervention::Vaso) {
            return Err(BenchError::BadTarget(target));
        }
        check_alignment(grid, cohort)?;
        let train = train_stays(cohort, split);
        let n_vars = grid.variables.len();
        // Raw delta values over every training window, gathered per variable.
        let per_stay: Vec<Vec<Vec<f64>>> = grid
            .stays
            .par_iter()
            .filter(|s| train.contains(&s.key.icustay_id))
            .map(|s| {
                let mut acc = vec![Vec::new(); n_vars];
                for t in options.anchors(s.n_hours) {
                    for (v, a) in acc.iter_mut().enumerate() {
                        let series: Vec<Option<f64>> = (t..t + options.input_hours)
                            .map(|h| s.cell(h, v).map(|c| c.mean))
                            .collect();
                        a.extend(simple_impute(&series, 0.0, options.sentinel).delta);
                    }
                }
                acc
            })
            .collect();
        let mut deltas = vec![Vec::new(); n_vars];
        for stay in per_stay {
            for (d, s) in deltas.iter_mut().zip(stay) {
                d.extend(s);
            }
        }
        Ok(DynamicPlan {
            target,
            options,
            vocabulary: StaticVocabulary::from_cohort(cohort),
            delta_stats: deltas.iter().map(|d| VarStats::from_values(d)).collect(),
        })
    }

    pub fn columns(&self, variables: &[VariableKey]) -> Vec<String> {
        let mut c = window_columns(variables, self.options.input_hours);
        c.extend(self.vocabulary.columns());
        c
    }

    /// Samples for one stay, ordered by anchor.
    pub fn samples_for_stay(
        &self,
        stay: &StayGrid,
        row: &CohortRow,
        interventions: &[u8],
        split: Split,
        stats: &TrainStats,
    ) -> Vec<DynamicSample> {
        use chrono::Timelike;
        let o = &self.options;
        let mut statics = Vec::new();
        self.vocabulary.encode(row, &mut statics);
        o.anchors(stay.n_hours)
            .map(|t| {
                let mut features = Vec::new();
                window_features(
                    stay,
                    t,
                    o.input_hours,
                    stats,
                    o.sentinel,
                    Some(&self.delta_stats),
                    &mut features,
                );
                features.extend_from_slice(&statics);
                let p = o.prediction_start(t);
                DynamicSample {
                    key: stay.key,
                    split,
                    anchor: t,
                    time_of_day: ((row.intime.hour() as usize + t) % 24) as u32,
                    features,
                    label: label_window(interventions[p - 1], &interventions[p..p + o.prediction_hours]),
                }
            })
            .collect()
    }
}

/// Sliding-window samples for every cohort stay, ordered by (subject_id, t).
pub fn build_dynamic_samples(
    grid: &HourlyGrid,
    interventions: &InterventionGrid,
    cohort: &Cohort,
    split: &SplitAssignment,
    stats: &TrainStats,
    target: Intervention,
    options: DynamicOptions,
) -> Result<(DynamicPlan, Vec<DynamicSample>)> {
    let plan = DynamicPlan::new(grid, cohort, split, target, options)?;
    check_interventions(interventions, grid)?;
    let samples = grid
        .stays
        .par_iter()
        .zip(&cohort.rows)
        .zip(&interventions.stays)
        .flat_map_iter(|((s, row), iv)| {
            let sp = split.of(row.subject_id);
            let col = iv.column(target);
            sp.map(|sp| plan.samples_for_stay(s, row, &col, sp, stats))
                .unwrap_or_default()
        })
        .collect();
    Ok((plan, samples))
}

pub fn check_interventions(interventions: &InterventionGrid, grid: &HourlyGrid) -> Result<()> {
    if interventions.stays.len() != grid.stays.len()
        || interventions
            .stays
            .iter()
            .zip(&grid.stays)
            .any(|(i, g)| i.key != g.key || i.rows.len() != g.n_hours)
    {
        return Err(BenchError::Mismatch(
            "intervention grid index differs from the hourly grid index".into(),
        ));
    }
    Ok(())
}

/// Metadata written next to a samples file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepSidecar {
    pub task: String,
    pub target: Option<Intervention>,
    pub config_hash: String,
    pub split: SplitAssignment,
    pub train_stats: TrainStats,
    pub sentinel: f64,
    pub fixed: Option<FixedOptions>,
    pub dynamic: Option<DynamicPlan>,
    pub n_samples: usize,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_row(w: &mut impl Write, fields: &[String], features: &[f64], tail: &[String]) -> std::io::Result<()> {
    let mut first = true;
    let mut sep = |w: &mut dyn Write| -> std::io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        Ok(())
    };
    for f in fields {
        sep(w)?;
        w.write_all(f.as_bytes())?;
    }
    for x in features {
        sep(w)?;
        write!(w, "{x}")?;
    }
    for f in tail {
        sep(w)?;
        w.write_all(f.as_bytes())?;
    }
    w.write_all(b"\n")
}

/// Column names never need quoting: variable keys and categories with a
/// comma or quote are rejected here.
fn check_plain(cols: &[String], path: &Path) -> Result<()> {
    match cols.iter().find(|c| c.contains([',', '"', '\n'])) {
        Some(c) => Err(BenchError::Format {
            file: path.display().to_string(),
            reason: format!("column name {c:?} needs quoting"),
        }),
        None => Ok(()),
    }
}

pub fn write_fixed_samples(set: &FixedSampleSet, path: &Path) -> Result<()> {
    check_plain(&set.columns, path)?;
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::with_capacity(1 << 20, f);
    let mut header: Vec<String> = ["subject_id", "hadm_id", "icustay_id", "split"].map(String::from).to_vec();
    header.extend(set.columns.iter().cloned());
    header.extend(FixedLabels::NAMES.iter().map(|s| s.to_string()));
    writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
    for s in &set.samples {
        let ids = [
            s.key.subject_id.to_string(),
            s.key.hadm_id.to_string(),
            s.key.icustay_id.to_string(),
            s.split.as_str().to_string(),
        ];
        let labels: Vec<String> = s.labels.as_array().iter().map(|&b| u8::from(b).to_string()).collect();
        write_row(&mut w, &ids, &s.features, &labels).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub const DYNAMIC_ID_COLUMNS: [&str; 6] = ["subject_id", "hadm_id", "icustay_id", "split", "t", "time_of_day"];

pub fn dynamic_header(columns: &[String]) -> String {
    let mut header: Vec<String> = DYNAMIC_ID_COLUMNS.map(String::from).to_vec();
    header.extend(columns.iter().cloned());
    header.push("label".into());
    header.join(",")
}

pub fn write_dynamic_rows(w: &mut impl Write, samples: &[DynamicSample]) -> std::io::Result<()> {
    for s in samples {
        let ids = [
            s.key.subject_id.to_string(),
            s.key.hadm_id.to_string(),
            s.key.icustay_id.to_string(),
            s.split.as_str().to_string(),
            s.anchor.to_string(),
            s.time_of_day.to_string(),
        ];
        write_row(w, &ids, &s.features, &[s.label.as_str().to_string()])?;
    }
    Ok(())
}

/// Streams dynamic samples to `path` stay by stay and returns the sample count.
pub fn write_dynamic_samples(
    plan: &DynamicPlan,
    grid: &HourlyGrid,
    interventions: &InterventionGrid,
    cohort: &Cohort,
    split: &SplitAssignment,
    stats: &TrainStats,
    path: &Path,
) -> Result<usize> {
    check_alignment(grid, cohort)?;
    check_interventions(interventions, grid)?;
    let columns = plan.columns(&grid.variables);
    check_plain(&columns, path)?;
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::with_capacity(1 << 20, f);
    writeln!(w, "{}", dynamic_header(&columns)).map_err(io_err(path))?;
    let mut n = 0;
    const CHUNK: usize = 256;
    let stays: Vec<_> = grid.stays.iter().zip(&cohort.rows).zip(&interventions.stays).collect();
    for chunk in stays.chunks(CHUNK) {
        let rendered: Vec<(usize, Vec<u8>)> = chunk
            .par_iter()
            .map(|((s, row), iv)| {
                let mut buf = Vec::new();
                let Some(sp) = split.of(row.subject_id) else {
                    return (0, buf);
                };
                let samples = plan.samples_for_stay(s, row, &iv.column(plan.target), sp, stats);
                write_dynamic_rows(&mut buf, &samples).expect("writing to a Vec cannot fail");
                (samples.len(), buf)
            })
            .collect();
        for (k, buf) in rendered {
            n += k;
            w.write_all(&buf).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(n)
}

/// Column-typed view of a samples file, used by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    /// `icustay_id` for fixed samples, `icustay_id:t` for dynamic ones.
    pub ids: Vec<String>,
    pub splits: Vec<Split>,
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    /// Binary label columns (fixed samples).
    pub binary_labels: BTreeMap<String, Vec<u8>>,
    /// Four-class labels (dynamic samples).
    pub window_labels: Option<Vec<WindowLabel>>,
}

impl SampleTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let fmt_err = |reason: String| BenchError::Format {
            file: file.clone(),
            reason,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| fmt_err(e.to_string()))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| fmt_err(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let pos = |name: &str| header.iter().position(|h| h == name);
        let stay_col = pos("icustay_id").ok_or_else(|| fmt_err("no icustay_id column".into()))?;
        let split_col = pos("split").ok_or_else(|| fmt_err("no split column".into()))?;
        let t_col = pos("t");
        let label_col = pos("label");
        let id_like = |h: &str| DYNAMIC_ID_COLUMNS.contains(&h);
        let binary: Vec<(usize, String)> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| FixedLabels::NAMES.contains(&h.as_str()))
            .map(|(i, h)| (i, h.clone()))
            .collect();
        let feature_cols: Vec<usize> = (0..header.len())
            .filter(|&i| {
                let h = header[i].as_str();
                !id_like(h) && h != "label" && !FixedLabels::NAMES.contains(&h)
            })
            .collect();
        let mut table = SampleTable {
            ids: Vec::new(),
            splits: Vec::new(),
            feature_names: feature_cols.iter().map(|&i| header[i].clone()).collect(),
            features: Vec::new(),
            binary_labels: binary.iter().map(|(_, h)| (h.clone(), Vec::new())).collect(),
            window_labels: label_col.map(|_| Vec::new()),
        };
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
            let row = n + 1;
            let mut id = rec[stay_col].to_string();
            if let Some(t) = t_col {
                id = format!("{id}:{}", &rec[t]);
            }
            table.ids.push(id);
            table.splits.push(
                rec[split_col]
                    .parse()
                    .map_err(|_| fmt_err(format!("row {row}: bad split {:?}", &rec[split_col])))?,
            );
            let feats = feature_cols
                .iter()
                .map(|&i| {
                    rec[i]
                        .parse::<f64>()
                        .map_err(|_| fmt_err(format!("row {row}: bad value in {}", header[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            table.features.push(feats);
            for (i, h) in &binary {
                let v = match &rec[*i] {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(fmt_err(format!("row {row}: bad label {other:?} in {h}"))),
                };
                table.binary_labels.get_mut(h).unwrap().push(v);
            }
            if let (Some(c), Some(labels)) = (label_col, table.window_labels.as_mut()) {
                labels.push(
                    rec[c]
                        .parse()
                        .map_err(|_| fmt_err(format!("row {row}: bad label {:?}", &rec[c])))?,
                );
            }
        }
        Ok(table)
    }
}
