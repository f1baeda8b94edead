//! Cohort selection and static outcomes.

use std::collections::HashMap;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AdmissionRow, SourceDataset, StayRow};
use crate::resources::ExtractConfig;
use crate::time::{hour_ceil, hours_between, seconds_between, Timestamp};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CohortError {
    #[error("date of birth {dob} is after ICU admission {intime}")]
    NegativeAge { dob: Timestamp, intime: Timestamp },
}

/// Age in completed years at `intime`.
///
/// Uses calendar birthdays rather than a mean year length, so a stay that
/// starts on the 30th birthday yields exactly 30. Privacy-masked birth dates
/// surface as roughly 300 and are returned unchanged.
pub fn compute_age(dob: Timestamp, intime: Timestamp) -> Result<i64, CohortError> {
    if dob > intime {
        return Err(CohortError::NegativeAge { dob, intime });
    }
    let mut years = i64::from(intime.year() - dob.year());
    let reached = (intime.month(), intime.day(), intime.num_seconds_from_midnight())
        >= (dob.month(), dob.day(), dob.num_seconds_from_midnight());
    if !reached {
        years -= 1;
    }
    Ok(years)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcomes {
    pub mort_icu: bool,
    pub mort_hosp: bool,
    pub los_icu_hours: f64,
}

pub fn derive_outcomes(stay: &StayRow, admission: &AdmissionRow) -> Outcomes {
    let died_in_icu = matches!(admission.deathtime, Some(d) if stay.intime <= d && d <= stay.outtime);
    let died_in_hosp = admission.hospital_expire_flag
        || matches!(admission.deathtime, Some(d) if d <= admission.dischtime);
    Outcomes {
        mort_icu: died_in_icu,
        mort_hosp: died_in_hosp || died_in_icu,
        los_icu_hours: hours_between(&stay.intime, &stay.outtime),
    }
}

/// Why a stay is or is not in the cohort. Exclusions are attributed to the
/// first failing criterion in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StayDecision {
    Included,
    NotFirstStay,
    Age,
    ShortStay,
    LongStay,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub not_first_stay: usize,
    pub age: usize,
    pub short_stay: usize,
    pub long_stay: usize,
}

impl ExclusionCounts {
    pub fn total(&self) -> usize {
        self.not_first_stay + self.age + self.short_stay + self.long_stay
    }

    fn record(&mut self, d: StayDecision) {
        match d {
            StayDecision::Included => {}
            StayDecision::NotFirstStay => self.not_first_stay += 1,
            StayDecision::Age => self.age += 1,
            StayDecision::ShortStay => self.short_stay += 1,
            StayDecision::LongStay => self.long_stay += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub icustay_id: i64,
    pub age: i64,
    pub gender: String,
    pub ethnicity: String,
    pub insurance: String,
    pub admission_type: String,
    pub first_careunit: String,
    pub admittime: Timestamp,
    pub dischtime: Timestamp,
    pub intime: Timestamp,
    pub outtime: Timestamp,
    pub mort_icu: bool,
    pub mort_hosp: bool,
    pub los_icu_hours: f64,
}

impl CohortRow {
    /// Rows in the stay's hourly grid: `ceil(los_icu_hours)`.
    pub fn n_hours(&self) -> usize {
        hour_ceil(seconds_between(&self.intime, &self.outtime)).max(0) as usize
    }
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    /// Sorted by subject_id.
    pub rows: Vec<CohortRow>,
    pub exclusions: ExclusionCounts,
    /// Decision for every source stay, sorted by icustay_id.
    pub decisions: Vec<(i64, StayDecision)>,
}

impl Cohort {
    pub fn by_stay(&self) -> HashMap<i64, &CohortRow> {
        self.rows.iter().map(|r| (r.icustay_id, r)).collect()
    }

    pub fn from_rows(mut rows: Vec<CohortRow>) -> Self {
        rows.sort_by_key(|r| (r.subject_id, r.icustay_id));
        let decisions = {
            let mut d: Vec<_> = rows.iter().map(|r| (r.icustay_id, StayDecision::Included)).collect();
            d.sort();
            d
        };
        Cohort {
            rows,
            exclusions: ExclusionCounts::default(),
            decisions,
        }
    }
}

/// Applies the inclusion criteria: first ICU stay per subject (earliest
/// intime, ties to the smallest icustay_id), age at least `min_age`, and
/// `min_duration <= LOS < max_duration` hours.
///
/// The dataset must have passed integrity checks.
pub fn select_cohort(ds: &SourceDataset, cfg: &ExtractConfig) -> Cohort {
    let patients: HashMap<i64, _> = ds.patients.iter().map(|p| (p.subject_id, p)).collect();
    let admissions: HashMap<i64, _> = ds.admissions.iter().map(|a| (a.hadm_id, a)).collect();

    let mut first: HashMap<i64, (Timestamp, i64)> = HashMap::new();
    for s in &ds.stays {
        let key = (s.intime, s.icustay_id);
        first
            .entry(s.subject_id)
            .and_modify(|k| {
                if key < *k {
                    *k = key
                }
            })
            .or_insert(key);
    }

    let mut rows = Vec::new();
    let mut exclusions = ExclusionCounts::default();
    let mut decisions = Vec::with_capacity(ds.stays.len());
    for s in &ds.stays {
        let patient = patients[&s.subject_id];
        let admission = admissions[&s.hadm_id];
        let outcomes = derive_outcomes(s, admission);
        let age = compute_age(patient.dob, s.intime).ok();

        let decision = if first[&s.subject_id].1 != s.icustay_id {
            StayDecision::NotFirstStay
        } else if !matches!(age, Some(a) if a as f64 >= cfg.min_age) {
            StayDecision::Age
        } else if outcomes.los_icu_hours < cfg.min_duration {
            StayDecision::ShortStay
        } else if outcomes.los_icu_hours >= cfg.max_duration {
            StayDecision::LongStay
        } else {
            StayDecision::Included
        };
        exclusions.record(decision);
        decisions.push((s.icustay_id, decision));
        if decision == StayDecision::Included {
            rows.push(CohortRow {
                subject_id: s.subject_id,
                hadm_id: s.hadm_id,
                icustay_id: s.icustay_id,
                age: age.unwrap_or_default(),
                gender: patient.gender.clone(),
                ethnicity: patient.ethnicity.clone(),
                insurance: patient.insurance.clone(),
                admission_type: admission.admission_type.clone(),
                first_careunit: s.first_careunit.clone(),
                admittime: admission.admittime,
                dischtime: admission.dischtime,
                intime: s.intime,
                outtime: s.outtime,
                mort_icu: outcomes.mort_icu,
                mort_hosp: outcomes.mort_hosp,
                los_icu_hours: outcomes.los_icu_hours,
            });
        }
    }
    rows.sort_by_key(|r| r.subject_id);
    decisions.sort();
    Cohort {
        rows,
        exclusions,
        decisions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PatientRow;
    use crate::time::parse_timestamp;

    fn ts(s: &str) -> Timestamp {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn age_examples() {
        assert_eq!(compute_age(ts("1980-06-01"), ts("2010-06-01")).unwrap(), 30);
        assert_eq!(compute_age(ts("1800-01-01"), ts("2100-06-01")).unwrap(), 300);
        assert_eq!(compute_age(ts("2000-01-02"), ts("2015-01-01")).unwrap(), 14);
        assert_eq!(compute_age(ts("2000-01-01"), ts("2015-01-01")).unwrap(), 15);
        assert!(matches!(
            compute_age(ts("2015-01-02"), ts("2015-01-01")),
            Err(CohortError::NegativeAge { .. })
        ));
    }

    #[test]
    fn leap_day_birthday_is_reached_on_march_first() {
        assert_eq!(compute_age(ts("2000-02-29"), ts("2015-02-28")).unwrap(), 14);
        assert_eq!(compute_age(ts("2000-02-29"), ts("2015-03-01")).unwrap(), 15);
    }

    fn admission(death: Option<&str>, flag: bool) -> AdmissionRow {
        AdmissionRow {
            hadm_id: 1,
            subject_id: 1,
            admittime: ts("2101-01-01 00:00:00"),
            dischtime: ts("2101-01-10 00:00:00"),
            deathtime: death.map(ts),
            admission_type: "EMERGENCY".into(),
            hospital_expire_flag: flag,
        }
    }

    fn stay(id: i64, subject: i64, intime: &str, hours: i64) -> StayRow {
        let t = ts(intime);
        StayRow {
            icustay_id: id,
            hadm_id: id * 10,
            subject_id: subject,
            intime: t,
            outtime: t + chrono::Duration::minutes(hours * 60),
            first_careunit: "MICU".into(),
        }
    }

    #[test]
    fn outcome_examples() {
        let s = stay(1, 1, "2101-01-02 00:00:00", 48);
        let in_icu = derive_outcomes(&s, &admission(Some("2101-01-02 05:00:00"), true));
        assert_eq!((in_icu.mort_icu, in_icu.mort_hosp, in_icu.los_icu_hours), (true, true, 48.0));
        let after = derive_outcomes(&s, &admission(Some("2101-01-06 00:00:00"), false));
        assert_eq!((after.mort_icu, after.mort_hosp), (false, true));
        let alive = derive_outcomes(&s, &admission(None, false));
        assert_eq!((alive.mort_icu, alive.mort_hosp), (false, false));
    }

    fn dataset(stays: Vec<StayRow>, dobs: &[(i64, &str)]) -> SourceDataset {
        let patients = dobs
            .iter()
            .map(|&(id, dob)| PatientRow {
                subject_id: id,
                gender: "F".into(),
                dob: ts(dob),
                ethnicity: "WHITE".into(),
                insurance: "Medicare".into(),
            })
            .collect();
        let admissions = stays
            .iter()
            .map(|s| AdmissionRow {
                hadm_id: s.hadm_id,
                subject_id: s.subject_id,
                admittime: s.intime,
                dischtime: s.outtime,
                deathtime: None,
                admission_type: "EMERGENCY".into(),
                hospital_expire_flag: false,
            })
            .collect();
        SourceDataset {
            patients,
            admissions,
            stays,
            ..Default::default()
        }
    }

    #[test]
    fn selection_examples() {
        let ds = dataset(
            vec![
                stay(1, 1, "2001-01-01 00:00:00", 24),
                stay(2, 1, "2003-01-01 00:00:00", 24),
                stay(3, 2, "2001-01-01 00:00:00", 0),
                stay(4, 3, "2001-01-01 00:00:00", 241),
                stay(5, 4, "2001-01-01 00:00:00", 24),
            ],
            &[(1, "1950-01-01"), (2, "1950-01-01"), (3, "1950-01-01"), (4, "1986-06-01")],
        );
        let mut ds = ds;
        // 11.5 hours
        ds.stays[2].outtime = ds.stays[2].intime + chrono::Duration::minutes(690);
        ds.admissions[2].dischtime = ds.stays[2].outtime;
        let c = select_cohort(&ds, &ExtractConfig::default());
        let decided: HashMap<i64, StayDecision> = c.decisions.iter().copied().collect();
        assert_eq!(decided[&1], StayDecision::Included);
        assert_eq!(decided[&2], StayDecision::NotFirstStay);
        assert_eq!(decided[&3], StayDecision::ShortStay);
        assert_eq!(decided[&4], StayDecision::LongStay);
        assert_eq!(decided[&5], StayDecision::Age);
        assert_eq!(c.rows.len() + c.exclusions.total(), ds.stays.len());
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.rows[0].n_hours(), 24);
    }

    #[test]
    fn ties_on_intime_go_to_smallest_stay_id() {
        let ds = dataset(
            vec![stay(9, 1, "2001-01-01 00:00:00", 24), stay(7, 1, "2001-01-01 00:00:00", 30)],
            &[(1, "1950-01-01")],
        );
        let c = select_cohort(&ds, &ExtractConfig::default());
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.rows[0].icustay_id, 7);
    }

    #[test]
    fn partial_final_hour_rounds_up() {
        let mut s = stay(1, 1, "2001-01-01 00:00:00", 12);
        s.outtime += chrono::Duration::minutes(1);
        let ds = dataset(vec![s], &[(1, "1950-01-01")]);
        let c = select_cohort(&ds, &ExtractConfig::default());
        assert_eq!(c.rows[0].n_hours(), 13);
    }
}
