//! Seeded synthetic source data with a ground-truth sidecar.
//!
//! The generator plans every stay in hour space first (which hour an event
//! lands in, whether it is out of stay, clamped, dropped or malformed) and
//! records the expected pipeline output from that plan with its own
//! arithmetic. Timestamps are then derived from the plan.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::StayDecision;
use crate::ingest::{
    write_source_dataset, AdmissionRow, EventRow, IngestError, InterventionEventRow, PatientRow, SourceDataset,
    StayRow,
};
use crate::interventions::Intervention;
use crate::resources::{default_variable_ranges, VariableRange};
use crate::time::Timestamp;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const LB_KG: f64 = 0.45359237;
const IN_CM: f64 = 2.54;
const HOUR: i64 = 3600;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator parameter {name} = {value}")]
    InvalidParams { name: &'static str, value: f64 },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode ground truth: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_subjects: usize,
    pub seed: u64,
    /// Subjects given a second, later ICU stay.
    pub repeat_stay_fraction: f64,
    /// Of the repeat stays, those inside the same hospital admission.
    pub same_admission_fraction: f64,
    /// Subjects younger than 15 at ICU admission.
    pub child_fraction: f64,
    /// Subjects whose birth date is shifted to read as about 300 years.
    pub masked_age_fraction: f64,
    /// Stays shorter than 12 hours.
    pub short_stay_fraction: f64,
    /// Stays of 240 hours or longer.
    pub long_stay_fraction: f64,
    pub los_median_hours: f64,
    /// Multiplies every per-variable hourly event rate.
    pub event_rate_scale: f64,
    /// Per in-stay measurement, chance of a value between the outlier and
    /// valid bounds.
    pub clamp_rate: f64,
    /// Per in-stay measurement, chance of a value beyond the outlier bounds.
    pub drop_rate: f64,
    /// Temperature in Fahrenheit, weight in pounds, height in inches.
    pub unit_variant_fraction: f64,
    /// Weight measurements with an unrecognized unit.
    pub unit_error_rate: f64,
    /// Chart events carrying an item id missing from the map, per stay-hour.
    pub unmapped_rate: f64,
    /// Measurements moved outside the stay window.
    pub out_of_stay_rate: f64,
    pub vent_rate: f64,
    pub vaso_rate: f64,
    pub niv_rate: f64,
    /// Expected fluid boluses per stay-day.
    pub bolus_rate: f64,
    pub mortality_rate: f64,
    /// Of the deaths, those occurring in the ICU.
    pub icu_death_fraction: f64,
    /// Heart-rate drift of deceased patients, in units of 1.5 bpm per hour
    /// (capped at 40 hours).
    pub mortality_signal: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_subjects: 1000,
            seed: 1,
            repeat_stay_fraction: 0.15,
            same_admission_fraction: 0.5,
            child_fraction: 0.03,
            masked_age_fraction: 0.02,
            short_stay_fraction: 0.08,
            long_stay_fraction: 0.03,
            los_median_hours: 30.0,
            event_rate_scale: 1.0,
            clamp_rate: 0.005,
            drop_rate: 0.005,
            unit_variant_fraction: 0.2,
            unit_error_rate: 0.02,
            unmapped_rate: 0.002,
            out_of_stay_rate: 0.01,
            vent_rate: 0.35,
            vaso_rate: 0.25,
            niv_rate: 0.1,
            bolus_rate: 0.5,
            mortality_rate: 0.15,
            icu_death_fraction: 0.6,
            mortality_signal: 1.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let rates = [
            ("repeat_stay_fraction", self.repeat_stay_fraction),
            ("same_admission_fraction", self.same_admission_fraction),
            ("child_fraction", self.child_fraction),
            ("masked_age_fraction", self.masked_age_fraction),
            ("short_stay_fraction", self.short_stay_fraction),
            ("long_stay_fraction", self.long_stay_fraction),
            ("clamp_rate", self.clamp_rate),
            ("drop_rate", self.drop_rate),
            ("unit_variant_fraction", self.unit_variant_fraction),
            ("unit_error_rate", self.unit_error_rate),
            ("unmapped_rate", self.unmapped_rate),
            ("out_of_stay_rate", self.out_of_stay_rate),
            ("vent_rate", self.vent_rate),
            ("vaso_rate", self.vaso_rate),
            ("niv_rate", self.niv_rate),
            ("mortality_rate", self.mortality_rate),
            ("icu_death_fraction", self.icu_death_fraction),
        ];
        for (name, value) in rates {
            if !(0.0..=1.0).contains(&value) {
                return Err(GenError::InvalidParams { name, value });
            }
        }
        let sums = [
            ("child_fraction + masked_age_fraction", self.child_fraction + self.masked_age_fraction),
            ("short_stay_fraction + long_stay_fraction", self.short_stay_fraction + self.long_stay_fraction),
            ("clamp_rate + drop_rate", self.clamp_rate + self.drop_rate),
        ];
        for (name, value) in sums {
            if value > 1.0 {
                return Err(GenError::InvalidParams { name, value });
            }
        }
        let positive = [
            ("los_median_hours", self.los_median_hours),
            ("event_rate_scale", self.event_rate_scale),
            ("bolus_rate", self.bolus_rate + 1.0),
            ("mortality_signal", self.mortality_signal + 1.0),
        ];
        for (name, value) in positive {
            if !value.is_finite() || value <= 0.0 {
                return Err(GenError::InvalidParams { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Units {
    Plain(&'static str),
    Temperature,
    Weight,
    Height,
}

struct VarSpec {
    group: &'static str,
    /// Canonical-unit item ids, then variant-unit ids (same list when the
    /// source does not distinguish).
    items: &'static [i64],
    variant_items: &'static [i64],
    lab: bool,
    mean: f64,
    sd: f64,
    /// Normal values are clipped into this interval, which sits inside the
    /// valid range.
    lo: f64,
    hi: f64,
    rate: f64,
    units: Units,
    decimals: i32,
}

const VARS: &[VarSpec] = &[
    VarSpec { group: "heart_rate", items: &[211, 220045], variant_items: &[211, 220045], lab: false, mean: 85.0, sd: 12.0, lo: 30.0, hi: 220.0, rate: 1.2, units: Units::Plain("bpm"), decimals: 0 },
    VarSpec { group: "systolic_blood_pressure", items: &[51, 220050], variant_items: &[51, 220050], lab: false, mean: 120.0, sd: 18.0, lo: 50.0, hi: 250.0, rate: 0.5, units: Units::Plain("mmHg"), decimals: 0 },
    VarSpec { group: "diastolic_blood_pressure", items: &[8368, 220051], variant_items: &[8368, 220051], lab: false, mean: 62.0, sd: 10.0, lo: 20.0, hi: 150.0, rate: 0.5, units: Units::Plain("mmHg"), decimals: 0 },
    VarSpec { group: "mean_blood_pressure", items: &[52, 220052], variant_items: &[52, 220052], lab: false, mean: 80.0, sd: 12.0, lo: 30.0, hi: 180.0, rate: 0.5, units: Units::Plain("mmHg"), decimals: 0 },
    VarSpec { group: "respiratory_rate", items: &[618, 220210], variant_items: &[618, 220210], lab: false, mean: 19.0, sd: 4.0, lo: 4.0, hi: 60.0, rate: 0.5, units: Units::Plain("insp/min"), decimals: 0 },
    VarSpec { group: "oxygen_saturation", items: &[646, 220277], variant_items: &[646, 220277], lab: false, mean: 96.5, sd: 2.0, lo: 70.0, hi: 100.0, rate: 0.5, units: Units::Plain("%"), decimals: 0 },
    VarSpec { group: "temperature", items: &[676, 223762], variant_items: &[678, 223761], lab: false, mean: 37.0, sd: 0.6, lo: 33.0, hi: 41.5, rate: 0.25, units: Units::Temperature, decimals: 1 },
    VarSpec { group: "weight", items: &[763, 224639], variant_items: &[226531], lab: false, mean: 80.0, sd: 18.0, lo: 35.0, hi: 200.0, rate: 0.03, units: Units::Weight, decimals: 1 },
    VarSpec { group: "height", items: &[226730], variant_items: &[920, 226707], lab: false, mean: 170.0, sd: 10.0, lo: 140.0, hi: 205.0, rate: 0.01, units: Units::Height, decimals: 1 },
    VarSpec { group: "glascow_coma_scale_total", items: &[198, 226755], variant_items: &[198, 226755], lab: false, mean: 12.0, sd: 3.0, lo: 3.0, hi: 15.0, rate: 0.2, units: Units::Plain("points"), decimals: 0 },
    VarSpec { group: "glucose", items: &[50931], variant_items: &[50931], lab: true, mean: 135.0, sd: 40.0, lo: 45.0, hi: 600.0, rate: 0.15, units: Units::Plain("mg/dL"), decimals: 0 },
    VarSpec { group: "white_blood_cell_count", items: &[51301], variant_items: &[51301], lab: true, mean: 10.5, sd: 4.0, lo: 0.5, hi: 60.0, rate: 0.1, units: Units::Plain("K/uL"), decimals: 1 },
    VarSpec { group: "hemoglobin", items: &[51222], variant_items: &[51222], lab: true, mean: 10.2, sd: 1.8, lo: 4.0, hi: 19.0, rate: 0.1, units: Units::Plain("g/dL"), decimals: 1 },
    VarSpec { group: "sodium", items: &[50983], variant_items: &[50983], lab: true, mean: 139.0, sd: 4.0, lo: 115.0, hi: 165.0, rate: 0.1, units: Units::Plain("mEq/L"), decimals: 0 },
    VarSpec { group: "potassium", items: &[50971], variant_items: &[50971], lab: true, mean: 4.1, sd: 0.5, lo: 2.0, hi: 8.0, rate: 0.1, units: Units::Plain("mEq/L"), decimals: 1 },
    VarSpec { group: "creatinine", items: &[50912], variant_items: &[50912], lab: true, mean: 1.3, sd: 0.8, lo: 0.2, hi: 15.0, rate: 0.1, units: Units::Plain("mg/dL"), decimals: 1 },
    VarSpec { group: "lactate", items: &[50813], variant_items: &[50813], lab: true, mean: 2.0, sd: 1.2, lo: 0.3, hi: 20.0, rate: 0.05, units: Units::Plain("mmol/L"), decimals: 1 },
];

/// Item ids absent from the shipped map.
const UNMAPPED_ITEMS: [i64; 3] = [999_001, 999_002, 999_003];

const GENDERS: [&str; 2] = ["F", "M"];
const ETHNICITIES: [&str; 5] = ["ASIAN", "BLACK/AFRICAN AMERICAN", "HISPANIC/LATINO", "OTHER", "WHITE"];
const INSURANCE: [&str; 5] = ["Government", "Medicaid", "Medicare", "Private", "Self Pay"];
const ADMISSION_TYPES: [&str; 3] = ["ELECTIVE", "EMERGENCY", "URGENT"];
const CAREUNITS: [&str; 5] = ["CCU", "CSRU", "MICU", "SICU", "TSICU"];

const MIN_AGE: i64 = 15;
const MIN_LOS_SECS: i64 = 12 * HOUR;
const MAX_LOS_SECS: i64 = 240 * HOUR;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellTruth {
    pub hour: u32,
    /// Index into [`GroundTruth::variables`].
    pub var: u16,
    pub mean: f64,
    pub count: u32,
    pub std: Option<f64>,
    /// Aggregate of the values as emitted, before clamping or dropping, for
    /// cells touched by an injected outlier.
    pub pre_policy: Option<(f64, u32, Option<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTruth {
    pub mort_icu: bool,
    pub mort_hosp: bool,
    pub los_icu_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayTruth {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub icustay_id: i64,
    pub decision: StayDecision,
    pub age: i64,
    pub n_hours: usize,
    pub outcomes: OutcomeTruth,
    /// On-hours per intervention column; empty for excluded stays.
    pub interventions: BTreeMap<Intervention, Vec<u32>>,
    /// Sorted by (hour, var); empty for excluded stays.
    pub cells: Vec<CellTruth>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTruth {
    pub kept: usize,
    pub clamped_low: usize,
    pub clamped_high: usize,
    pub dropped: usize,
    pub unit_errors: usize,
    pub out_of_stay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: GenParams,
    pub min_age: i64,
    pub min_duration_hours: f64,
    pub max_duration_hours: f64,
    pub variables: Vec<String>,
    /// Sorted by icustay_id.
    pub stays: Vec<StayTruth>,
    /// Counts for events of included stays, keyed by variable.
    pub counts: BTreeMap<String, CountTruth>,
    pub unmapped: usize,
    pub outside_cohort: usize,
    pub labs_attached: usize,
    pub labs_dropped: usize,
    pub chart_events: usize,
    pub total_events: usize,
    pub subjects_with_repeat: usize,
}

impl GroundTruth {
    pub fn included(&self) -> impl Iterator<Item = &StayTruth> {
        self.stays.iter().filter(|s| s.decision == StayDecision::Included)
    }

    pub fn total_clamped(&self) -> usize {
        self.counts.values().map(|c| c.clamped_low + c.clamped_high).sum()
    }

    pub fn total_dropped(&self) -> usize {
        self.counts.values().map(|c| c.dropped).sum()
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// Plain two-pass mean and sample standard deviation.
fn summarize(values: &[f64]) -> (f64, u32, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, values.len() as u32, std)
}

/// Values strictly inside the clamp zones of `r`, and the bound each one
/// clamps to.
fn clamp_choices(r: &VariableRange) -> Vec<(f64, f64, bool)> {
    let mut out = Vec::new();
    if let (Some(ol), Some(vl)) = (r.outlier_low, r.valid_low) {
        if ol < vl {
            out.push(((ol + vl) / 2.0, vl, false));
        }
    }
    if let (Some(vh), Some(oh)) = (r.valid_high, r.outlier_high) {
        if vh < oh {
            out.push(((vh + oh) / 2.0, vh, true));
        }
    }
    out
}

fn drop_choices(r: &VariableRange) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(ol) = r.outlier_low {
        out.push(ol - 1.0 - ol.abs() * 0.5);
    }
    if let Some(oh) = r.outlier_high {
        out.push(oh + 1.0 + oh.abs() * 0.5);
    }
    out
}

/// Per (hour, variable): values after the outlier policy, values before it,
/// and whether the policy touched the cell.
type CellValues = BTreeMap<(u32, u16), (Vec<f64>, Vec<f64>, bool)>;

struct Planned {
    stay: StayRow,
    age: i64,
    first: bool,
    deceased: bool,
}

enum Status {
    InStay { hour: u32, expected: f64, emitted_canonical: f64 },
    Clamped { hour: u32, bound: f64, high: bool, raw: f64 },
    Dropped { hour: u32, raw: f64 },
    UnitError,
    OutOfStay,
    /// A lab outside every stay window, removed when labs are joined to stays.
    Unattached,
}

struct Builder<'a> {
    p: &'a GenParams,
    rng: ChaCha8Rng,
    ds: SourceDataset,
    truth: GroundTruth,
    next_hadm: i64,
    next_stay: i64,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty choice list")
}

impl Builder<'_> {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.gen::<f64>() < p
    }

    fn secs(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.gen_range(lo..hi)
    }

    fn draw_los_secs(&mut self) -> i64 {
        let u: f64 = self.rng.gen();
        if u < self.p.short_stay_fraction {
            self.secs(2 * HOUR, MIN_LOS_SECS)
        } else if u < self.p.short_stay_fraction + self.p.long_stay_fraction {
            self.secs(MAX_LOS_SECS, 300 * HOUR)
        } else {
            let d = LogNormal::new(self.p.los_median_hours.ln(), 0.7).expect("valid lognormal");
            let h: f64 = d.sample(&mut self.rng);
            ((h * HOUR as f64) as i64).clamp(MIN_LOS_SECS, MAX_LOS_SECS - 1)
        }
    }

    fn new_stay(&mut self, subject_id: i64, hadm_id: i64, intime: Timestamp) -> StayRow {
        let los = self.draw_los_secs();
        self.next_stay += 1;
        StayRow {
            icustay_id: self.next_stay,
            hadm_id,
            subject_id,
            intime,
            outtime: intime + Duration::seconds(los),
            first_careunit: pick(&mut self.rng, &CAREUNITS).to_string(),
        }
    }

    fn new_admission(&mut self, subject_id: i64, admittime: Timestamp) -> AdmissionRow {
        self.next_hadm += 1;
        AdmissionRow {
            hadm_id: self.next_hadm,
            subject_id,
            admittime,
            dischtime: admittime,
            deathtime: None,
            admission_type: pick(&mut self.rng, &ADMISSION_TYPES).to_string(),
            hospital_expire_flag: false,
        }
    }

    fn subject(&mut self, subject_id: i64) -> Vec<Planned> {
        let date = NaiveDate::from_ymd_opt(
            2100 + self.rng.gen_range(0..10),
            self.rng.gen_range(1..=12),
            self.rng.gen_range(1..=28),
        )
        .expect("valid date");
        let intime = date.and_hms_opt(0, 0, 0).unwrap() + Duration::seconds(self.secs(0, 86_400));
        let u: f64 = self.rng.gen();
        let age = if u < self.p.child_fraction {
            self.rng.gen_range(1..MIN_AGE)
        } else if u < self.p.child_fraction + self.p.masked_age_fraction {
            300
        } else {
            self.rng.gen_range(MIN_AGE..90)
        };
        // Birth date a little before the birthday that gives `age`, so the
        // completed-year count is exactly `age`.
        let dob = NaiveDate::from_ymd_opt(date.year() - age as i32, date.month(), date.day())
            .expect("day <= 28 exists in every year")
            - Duration::days(self.rng.gen_range(1..300));
        self.ds.patients.push(PatientRow {
            subject_id,
            gender: pick(&mut self.rng, &GENDERS).to_string(),
            dob: dob.and_hms_opt(0, 0, 0).unwrap(),
            ethnicity: pick(&mut self.rng, &ETHNICITIES).to_string(),
            insurance: pick(&mut self.rng, &INSURANCE).to_string(),
        });

        let repeat = self.chance(self.p.repeat_stay_fraction);
        let deceased = !repeat && self.chance(self.p.mortality_rate);
        let lead = Duration::seconds(self.secs(0, 48 * HOUR));
        let mut adm = self.new_admission(subject_id, intime - lead);
        let s1 = self.new_stay(subject_id, adm.hadm_id, intime);
        let mut planned = vec![Planned {
            stay: s1.clone(),
            age,
            first: true,
            deceased,
        }];
        adm.dischtime = s1.outtime + Duration::seconds(self.secs(HOUR, 120 * HOUR));
        if deceased {
            let death = if self.chance(self.p.icu_death_fraction) {
                s1.outtime
            } else {
                s1.outtime + Duration::seconds(self.secs(HOUR, 96 * HOUR))
            };
            adm.deathtime = Some(death);
            adm.dischtime = death;
            adm.hospital_expire_flag = true;
        }
        if repeat {
            self.truth.subjects_with_repeat += 1;
            let age2 = |when: Timestamp| completed_years(dob, when);
            if self.chance(self.p.same_admission_fraction) {
                let t2 = s1.outtime + Duration::seconds(self.secs(24 * HOUR, 72 * HOUR));
                let s2 = self.new_stay(subject_id, adm.hadm_id, t2);
                adm.dischtime = s2.outtime + Duration::seconds(self.secs(HOUR, 120 * HOUR));
                planned.push(Planned {
                    age: age2(t2),
                    stay: s2,
                    first: false,
                    deceased: false,
                });
                self.ds.admissions.push(adm);
            } else {
                let a2time = adm.dischtime + Duration::days(self.rng.gen_range(30..400));
                self.ds.admissions.push(adm);
                let mut adm2 = self.new_admission(subject_id, a2time);
                let t2 = a2time + Duration::seconds(self.secs(0, 24 * HOUR));
                let s2 = self.new_stay(subject_id, adm2.hadm_id, t2);
                adm2.dischtime = s2.outtime + Duration::seconds(self.secs(HOUR, 120 * HOUR));
                self.ds.admissions.push(adm2);
                planned.push(Planned {
                    age: age2(t2),
                    stay: s2,
                    first: false,
                    deceased: false,
                });
            }
        } else {
            self.ds.admissions.push(adm);
        }
        planned
    }

    fn decision(pl: &Planned) -> StayDecision {
        let los = (pl.stay.outtime - pl.stay.intime).num_seconds();
        if !pl.first {
            StayDecision::NotFirstStay
        } else if pl.age < MIN_AGE {
            StayDecision::Age
        } else if los < MIN_LOS_SECS {
            StayDecision::ShortStay
        } else if los >= MAX_LOS_SECS {
            StayDecision::LongStay
        } else {
            StayDecision::Included
        }
    }

    fn emit_stay(&mut self, pl: &Planned, ranges: &[VariableRange]) {
        let stay = &pl.stay;
        let decision = Self::decision(pl);
        let included = decision == StayDecision::Included;
        let los = (stay.outtime - stay.intime).num_seconds();
        let n_hours = ((los + HOUR - 1) / HOUR) as usize;
        let last_hour_secs = los - (n_hours as i64 - 1) * HOUR;

        let adm = self
            .ds
            .admissions
            .iter()
            .rev()
            .find(|a| a.hadm_id == stay.hadm_id)
            .expect("admission emitted before its stays")
            .clone();
        let mort_icu = matches!(adm.deathtime, Some(d) if d == stay.outtime) && pl.first;
        let outcomes = OutcomeTruth {
            mort_icu,
            mort_hosp: pl.first && pl.deceased,
            los_icu_hours: los as f64 / HOUR as f64,
        };

        let offsets: Vec<f64> = VARS.iter().map(|_| 0.6 * self.normal()).collect();
        let mut cell_values = CellValues::new();
        for h in 0..n_hours {
            let span = if h + 1 == n_hours { last_hour_secs } else { HOUR };
            for (vi, spec) in VARS.iter().enumerate() {
                let rate = spec.rate * self.p.event_rate_scale;
                let mut k = rate.floor() as usize;
                if self.chance(rate.fract()) {
                    k += 1;
                }
                for _ in 0..k {
                    let offset = self.secs(0, span);
                    let status = self.emit_measurement(pl, vi, spec, h, offset, offsets[vi], &ranges[vi]);
                    if !included {
                        continue;
                    }
                    let c = self.truth.counts.entry(spec.group.to_string()).or_default();
                    match status {
                        Status::InStay {
                            hour,
                            expected,
                            emitted_canonical,
                        } => {
                            c.kept += 1;
                            let e = cell_values.entry((hour, vi as u16)).or_default();
                            e.0.push(expected);
                            e.1.push(emitted_canonical);
                        }
                        Status::Clamped { hour, bound, high, raw } => {
                            if high {
                                c.clamped_high += 1;
                            } else {
                                c.clamped_low += 1;
                            }
                            let e = cell_values.entry((hour, vi as u16)).or_default();
                            e.0.push(bound);
                            e.1.push(raw);
                            e.2 = true;
                        }
                        Status::Dropped { hour, raw } => {
                            c.dropped += 1;
                            let e = cell_values.entry((hour, vi as u16)).or_default();
                            e.1.push(raw);
                            e.2 = true;
                        }
                        Status::UnitError => c.unit_errors += 1,
                        Status::OutOfStay => c.out_of_stay += 1,
                        Status::Unattached => {}
                    }
                }
            }
            if self.chance(self.p.unmapped_rate) {
                let offset = self.secs(0, span);
                self.ds.events.push(EventRow {
                    subject_id: stay.subject_id,
                    hadm_id: stay.hadm_id,
                    icustay_id: Some(stay.icustay_id),
                    itemid: *pick(&mut self.rng, &UNMAPPED_ITEMS),
                    charttime: stay.intime + Duration::seconds(h as i64 * HOUR + offset),
                    valuenum: 1.0,
                    valueuom: String::new(),
                });
                self.truth.chart_events += 1;
                if included {
                    self.truth.unmapped += 1;
                } else {
                    self.truth.outside_cohort += 1;
                }
            }
        }

        let interventions = self.emit_interventions(stay, n_hours);
        let cells = if included {
            cell_values
                .into_iter()
                .filter_map(|((hour, var), (post, pre, touched))| {
                    let pre_policy = touched.then(|| summarize(&pre));
                    (!post.is_empty()).then(|| {
                        let (mean, count, std) = summarize(&post);
                        CellTruth {
                            hour,
                            var,
                            mean,
                            count,
                            std,
                            pre_policy,
                        }
                    })
                })
                .collect()
        } else {
            Vec::new()
        };
        self.truth.stays.push(StayTruth {
            subject_id: stay.subject_id,
            hadm_id: stay.hadm_id,
            icustay_id: stay.icustay_id,
            decision,
            age: pl.age,
            n_hours,
            outcomes,
            interventions: if included { interventions } else { BTreeMap::new() },
            cells,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_measurement(
        &mut self,
        pl: &Planned,
        vi: usize,
        spec: &VarSpec,
        hour: usize,
        offset: i64,
        patient_offset: f64,
        range: &VariableRange,
    ) -> Status {
        let stay = &pl.stay;
        let included = Self::decision(pl) == StayDecision::Included;
        let mut value = spec.mean + spec.sd * (patient_offset + 0.8 * self.normal());
        if vi == 0 && pl.deceased {
            value += self.p.mortality_signal * 1.5 * (hour.min(40) as f64);
        }
        let mut value = round_to(value.clamp(spec.lo, spec.hi), spec.decimals);

        let los = (stay.outtime - stay.intime).num_seconds();
        let n_hours = (los + HOUR - 1) / HOUR;
        let out_of_stay = self.chance(self.p.out_of_stay_rate);
        let rel = if out_of_stay {
            if self.rng.gen::<bool>() {
                -self.secs(HOUR, 5 * HOUR)
            } else if spec.lab {
                los + self.secs(HOUR, 5 * HOUR)
            } else {
                n_hours * HOUR + self.secs(0, 5 * HOUR)
            }
        } else {
            hour as i64 * HOUR + offset
        };

        let mut status = None;
        let mut uom;
        let mut itemid = *pick(&mut self.rng, spec.items);
        let mut expected = value;
        if !out_of_stay && spec.units == Units::Weight && self.chance(self.p.unit_error_rate) {
            uom = "stone".to_string();
            status = Some(Status::UnitError);
        } else {
            let u: f64 = self.rng.gen();
            let clamps = clamp_choices(range);
            let drops = drop_choices(range);
            let injected = if out_of_stay {
                None
            } else if u < self.p.clamp_rate && !clamps.is_empty() {
                let (v, bound, high) = *pick(&mut self.rng, &clamps);
                value = v;
                Some(Status::Clamped {
                    hour: hour as u32,
                    bound,
                    high,
                    raw: v,
                })
            } else if u >= self.p.clamp_rate && u < self.p.clamp_rate + self.p.drop_rate && !drops.is_empty() {
                let v = *pick(&mut self.rng, &drops);
                value = v;
                Some(Status::Dropped {
                    hour: hour as u32,
                    raw: v,
                })
            } else {
                None
            };
            uom = match spec.units {
                Units::Plain(u) => u.to_string(),
                Units::Temperature => "°C".into(),
                Units::Weight => "kg".into(),
                Units::Height => "cm".into(),
            };
            if injected.is_none() && !matches!(spec.units, Units::Plain(_)) && self.chance(self.p.unit_variant_fraction) {
                match spec.units {
                    Units::Temperature => {
                        value = round_to(value * 1.8 + 32.0, 1);
                        expected = (value - 32.0) / 1.8;
                        uom = "°F".into();
                        itemid = *pick(&mut self.rng, spec.variant_items);
                    }
                    Units::Weight => {
                        value = round_to(value / LB_KG, 1);
                        expected = value * LB_KG;
                        uom = "lbs".into();
                        itemid = *pick(&mut self.rng, spec.variant_items);
                    }
                    Units::Height => {
                        value = round_to(value / IN_CM, 1);
                        expected = value * IN_CM;
                        uom = "in".into();
                        itemid = *pick(&mut self.rng, spec.variant_items);
                    }
                    Units::Plain(_) => {}
                }
            }
            status = status.or(injected);
        }
        let status = status.unwrap_or(if out_of_stay && spec.lab {
            Status::Unattached
        } else if out_of_stay {
            Status::OutOfStay
        } else {
            Status::InStay {
                hour: hour as u32,
                expected,
                emitted_canonical: expected,
            }
        });

        if spec.lab {
            if out_of_stay {
                self.truth.labs_dropped += 1;
            } else {
                self.truth.labs_attached += 1;
                if !included {
                    self.truth.outside_cohort += 1;
                }
            }
        } else {
            self.truth.chart_events += 1;
            if !included {
                self.truth.outside_cohort += 1;
            }
        }
        self.ds.events.push(EventRow {
            subject_id: stay.subject_id,
            hadm_id: stay.hadm_id,
            icustay_id: (!spec.lab).then_some(stay.icustay_id),
            itemid,
            charttime: stay.intime + Duration::seconds(rel),
            valuenum: value,
            valueuom: uom,
        });
        status
    }

    /// A continuous episode covering grid hours `[a, b)` before clipping.
    fn episode(&mut self, stay: &StayRow, name: Intervention, a: i64, b: i64) {
        let start = a * HOUR + self.secs(0, HOUR);
        let end = ((b - 1) * HOUR + self.secs(1, HOUR + 1)).max(start + 1);
        self.ds.intervention_events.push(InterventionEventRow {
            icustay_id: stay.icustay_id,
            name,
            starttime: stay.intime + Duration::seconds(start),
            endtime: stay.intime + Duration::seconds(end),
        });
    }

    fn emit_interventions(&mut self, stay: &StayRow, n_hours: usize) -> BTreeMap<Intervention, Vec<u32>> {
        let n = n_hours as i64;
        let mut on: BTreeMap<Intervention, Vec<bool>> =
            Intervention::ALL.iter().map(|&i| (i, vec![false; n_hours])).collect();
        let mark = |on: &mut BTreeMap<Intervention, Vec<bool>>, name: Intervention, a: i64, b: i64| {
            for h in a.max(0)..b.min(n) {
                on.get_mut(&name).unwrap()[h as usize] = true;
            }
        };
        let mut continuous = vec![(Intervention::Vent, self.p.vent_rate), (Intervention::Nivdurations, self.p.niv_rate)];
        if self.chance(self.p.vaso_rate) {
            let k = self.rng.gen_range(1..=2);
            for d in Intervention::VASOPRESSOR_DRUGS.choose_multiple(&mut self.rng, k) {
                continuous.push((*d, 1.0));
            }
        }
        for (name, rate) in continuous {
            if !self.chance(rate) {
                continue;
            }
            for _ in 0..self.rng.gen_range(1..=2) {
                let a = self.rng.gen_range(-3..n);
                if self.chance(0.05) {
                    // Zero-length record: marks only the hour containing it.
                    let t = stay.intime + Duration::seconds(a * HOUR + self.secs(0, HOUR));
                    self.ds.intervention_events.push(InterventionEventRow {
                        icustay_id: stay.icustay_id,
                        name,
                        starttime: t,
                        endtime: t,
                    });
                    mark(&mut on, name, a, a + 1);
                } else {
                    let b = a + self.rng.gen_range(1..=48);
                    self.episode(stay, name, a, b);
                    mark(&mut on, name, a, b);
                }
            }
        }
        let expected = self.p.bolus_rate * n_hours as f64 / 24.0;
        for name in [Intervention::CrystalloidBolus, Intervention::ColloidBolus] {
            let k = (expected.floor() as usize) + usize::from(self.chance(expected.fract()));
            for _ in 0..k {
                let h = self.rng.gen_range(-2..n + 2);
                let t = stay.intime + Duration::seconds(h * HOUR + self.secs(0, HOUR));
                self.ds.intervention_events.push(InterventionEventRow {
                    icustay_id: stay.icustay_id,
                    name,
                    starttime: t,
                    endtime: t,
                });
                mark(&mut on, name, h, h + 1);
            }
        }
        let drugs: Vec<Vec<bool>> = Intervention::VASOPRESSOR_DRUGS.iter().map(|d| on[d].clone()).collect();
        let vaso = on.get_mut(&Intervention::Vaso).unwrap();
        for d in drugs {
            for (v, x) in vaso.iter_mut().zip(d) {
                *v |= x;
            }
        }
        on.into_iter()
            .map(|(k, v)| {
                let hours = v.iter().enumerate().filter(|(_, &x)| x).map(|(h, _)| h as u32).collect();
                (k, hours)
            })
            .collect()
    }
}

/// Completed years, counted independently of the cohort module.
fn completed_years(dob: NaiveDate, at: Timestamp) -> i64 {
    let mut years = i64::from(at.year() - dob.year());
    if (at.month(), at.day()) < (dob.month(), dob.day()) {
        years -= 1;
    }
    years
}


/// Generates a source dataset and its expected pipeline output. The same
/// parameters always produce the same data.
pub fn generate(params: &GenParams) -> Result<(SourceDataset, GroundTruth), GenError> {
    params.validate()?;
    let table = default_variable_ranges();
    let ranges: Vec<VariableRange> = VARS.iter().map(|v| table.get(v.group)).collect();
    let mut b = Builder {
        p: params,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        ds: SourceDataset::default(),
        truth: GroundTruth {
            params: params.clone(),
            min_age: MIN_AGE,
            min_duration_hours: (MIN_LOS_SECS / HOUR) as f64,
            max_duration_hours: (MAX_LOS_SECS / HOUR) as f64,
            variables: VARS.iter().map(|v| v.group.to_string()).collect(),
            stays: Vec::new(),
            counts: VARS.iter().map(|v| (v.group.to_string(), CountTruth::default())).collect(),
            unmapped: 0,
            outside_cohort: 0,
            labs_attached: 0,
            labs_dropped: 0,
            chart_events: 0,
            total_events: 0,
            subjects_with_repeat: 0,
        },
        next_hadm: 100_000,
        next_stay: 200_000,
    };
    for i in 0..params.n_subjects {
        let subject_id = 10_000 + i as i64;
        for pl in b.subject(subject_id) {
            b.ds.stays.push(pl.stay.clone());
            b.emit_stay(&pl, &ranges);
        }
    }
    b.truth.total_events = b.truth.chart_events + b.truth.labs_attached;
    b.truth.stays.sort_by_key(|s| s.icustay_id);
    Ok((b.ds, b.truth))
}

/// Writes the five source files and `ground_truth.json` into `dir`.
pub fn generate_to_dir(params: &GenParams, dir: &Path) -> Result<GroundTruth, GenError> {
    let (ds, truth) = generate(params)?;
    write_source_dataset(&ds, dir)?;
    write_ground_truth(&truth, &dir.join(GROUND_TRUTH_FILE))?;
    Ok(truth)
}

pub fn write_ground_truth(truth: &GroundTruth, path: &Path) -> Result<(), GenError> {
    let file = std::fs::File::create(path).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, truth)?;
    std::io::Write::flush(&mut w).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, GenError> {
    let file = std::fs::File::open(path).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Disagreements between a pipeline run and the ground truth, one message
/// per mismatch, grouped by what was compared.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TruthDiff {
    pub cohort: Vec<String>,
    pub outcomes: Vec<String>,
    pub cells: Vec<String>,
    pub interventions: Vec<String>,
    pub counts: Vec<String>,
    pub cells_compared: usize,
}

impl TruthDiff {
    pub fn is_empty(&self) -> bool {
        self.cohort.is_empty()
            && self.outcomes.is_empty()
            && self.cells.is_empty()
            && self.interventions.is_empty()
            && self.counts.is_empty()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Compares grouped-mode pipeline output against `truth`. Cell statistics
/// must agree within `tol`; everything else must match exactly.
pub fn verify(
    truth: &GroundTruth,
    cohort: &crate::cohort::Cohort,
    grid: &crate::timeseries::HourlyGrid,
    report: &crate::timeseries::OutlierReport,
    interventions: &crate::interventions::InterventionGrid,
    attach: &crate::ingest::AttachReport,
    tol: f64,
) -> TruthDiff {
    let mut d = TruthDiff::default();
    let decisions: BTreeMap<i64, StayDecision> = cohort.decisions.iter().copied().collect();
    for s in &truth.stays {
        match decisions.get(&s.icustay_id) {
            Some(got) if *got == s.decision => {}
            got => d
                .cohort
                .push(format!("stay {}: expected {:?}, got {:?}", s.icustay_id, s.decision, got)),
        }
    }
    if decisions.len() != truth.stays.len() {
        d.cohort
            .push(format!("{} decisions for {} generated stays", decisions.len(), truth.stays.len()));
    }

    let included: Vec<&StayTruth> = truth.included().collect();
    if included.len() != cohort.rows.len() {
        d.cohort
            .push(format!("cohort has {} rows, expected {}", cohort.rows.len(), included.len()));
    }
    let rows = cohort.by_stay();
    let grid_pos: BTreeMap<i64, usize> =
        grid.stays.iter().enumerate().map(|(i, s)| (s.key.icustay_id, i)).collect();
    let iv_pos: BTreeMap<i64, usize> = interventions
        .stays
        .iter()
        .enumerate()
        .map(|(i, s)| (s.key.icustay_id, i))
        .collect();
    let var_map: Vec<Option<usize>> = truth.variables.iter().map(|v| grid.variable_index(v)).collect();

    for s in included {
        let id = s.icustay_id;
        match rows.get(&id) {
            Some(r) => {
                let o = &s.outcomes;
                if r.mort_icu != o.mort_icu
                    || r.mort_hosp != o.mort_hosp
                    || !close(r.los_icu_hours, o.los_icu_hours, 1e-9)
                    || r.age != s.age
                {
                    d.outcomes.push(format!(
                        "stay {id}: expected {o:?} age {}, got ({}, {}, {}) age {}",
                        s.age, r.mort_icu, r.mort_hosp, r.los_icu_hours, r.age
                    ));
                }
            }
            None => continue,
        }

        let Some(&gi) = grid_pos.get(&id) else {
            d.cells.push(format!("stay {id}: missing from hourly grid"));
            continue;
        };
        let g = &grid.stays[gi];
        if g.n_hours != s.n_hours {
            d.cells.push(format!("stay {id}: {} grid hours, expected {}", g.n_hours, s.n_hours));
        }
        let mut expected = std::collections::BTreeSet::new();
        for c in &s.cells {
            d.cells_compared += 1;
            let Some(v) = var_map[c.var as usize] else {
                d.cells.push(format!("variable {} missing from grid", truth.variables[c.var as usize]));
                continue;
            };
            expected.insert((c.hour as usize, v));
            match g.cell(c.hour as usize, v) {
                Some(got)
                    if got.count == c.count
                        && close(got.mean, c.mean, tol)
                        && match (got.std, c.std) {
                            (Some(a), Some(b)) => close(a, b, tol),
                            (None, None) => true,
                            _ => false,
                        } => {}
                got => d.cells.push(format!(
                    "stay {id} hour {} {}: expected ({}, {}, {:?}), got {:?}",
                    c.hour, truth.variables[c.var as usize], c.mean, c.count, c.std, got
                )),
            }
        }
        for &(h, v, _) in &g.cells {
            if !expected.contains(&(h as usize, v as usize)) {
                d.cells.push(format!("stay {id} hour {h} {}: unexpected cell", grid.variables[v as usize]));
            }
        }

        let Some(&ii) = iv_pos.get(&id) else {
            d.interventions.push(format!("stay {id}: missing from intervention grid"));
            continue;
        };
        let iv = &interventions.stays[ii];
        for (name, hours) in &s.interventions {
            let got: Vec<u32> = iv
                .column(*name)
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == 1)
                .map(|(h, _)| h as u32)
                .collect();
            if &got != hours {
                d.interventions
                    .push(format!("stay {id} {name}: expected {hours:?}, got {got:?}"));
            }
        }
    }

    for (var, t) in &truth.counts {
        let got = report.per_variable.get(&crate::resources::VariableKey(var.clone())).copied().unwrap_or_default();
        let g = CountTruth {
            kept: got.n_kept,
            clamped_low: got.n_clamped_low,
            clamped_high: got.n_clamped_high,
            dropped: got.n_dropped,
            unit_errors: got.n_unit_errors,
            out_of_stay: got.n_out_of_stay,
        };
        if g != *t {
            d.counts.push(format!("{var}: expected {t:?}, got {g:?}"));
        }
    }
    let scalars = [
        ("unmapped", truth.unmapped, report.n_unmapped),
        ("outside_cohort", truth.outside_cohort, report.n_outside_cohort),
        ("total_events", truth.total_events, report.total_events),
        ("labs_attached", truth.labs_attached, attach.attached),
        ("labs_dropped", truth.labs_dropped, attach.dropped),
        ("chart_events", truth.chart_events, attach.already_assigned),
    ];
    for (name, want, got) in scalars {
        if want != got {
            d.counts.push(format!("{name}: expected {want}, got {got}"));
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::default_item_map;

    fn small() -> GenParams {
        GenParams {
            n_subjects: 100,
            repeat_stay_fraction: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&GenParams { seed: 2, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn repeat_stays_are_marked_excluded() {
        let (ds, truth) = generate(&small()).unwrap();
        let repeats = truth
            .stays
            .iter()
            .filter(|s| s.decision == StayDecision::NotFirstStay)
            .count();
        assert_eq!(repeats, truth.subjects_with_repeat);
        assert!((10..=30).contains(&repeats), "{repeats}");
        assert_eq!(ds.stays.len(), 100 + repeats);
    }

    #[test]
    fn output_passes_integrity_checks() {
        let (ds, truth) = generate(&small()).unwrap();
        ds.verify_integrity().unwrap();
        assert_eq!(ds.events.len(), truth.total_events + truth.labs_dropped);
        let map = default_item_map();
        for v in VARS {
            for id in v.items.iter().chain(v.variant_items) {
                assert_eq!(map.get(*id).unwrap().aggregate_group, v.group);
            }
            assert_eq!(v.lab, v.items.iter().all(|&i| (50_000..60_000).contains(&i)));
        }
        for id in UNMAPPED_ITEMS {
            assert!(map.get(id).is_none());
        }
    }

    #[test]
    fn normal_values_sit_inside_valid_ranges() {
        let table = default_variable_ranges();
        for v in VARS {
            let r = table.get(v.group);
            assert!(r.valid_low.is_none_or(|lo| v.lo >= lo), "{}", v.group);
            assert!(r.valid_high.is_none_or(|hi| v.hi <= hi), "{}", v.group);
        }
    }

    #[test]
    fn rejects_out_of_range_rates() {
        let p = GenParams {
            clamp_rate: 1.5,
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(GenError::InvalidParams { name: "clamp_rate", .. })));
    }

    #[test]
    fn summarize_matches_hand_values() {
        assert_eq!(summarize(&[2.0, 4.0]), (3.0, 2, Some(2f64.sqrt())));
        assert_eq!(summarize(&[7.0]), (7.0, 1, None));
    }
}
