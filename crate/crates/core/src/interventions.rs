//! Hourly binary treatment indicators.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortRow};
use crate::ingest::InterventionEventRow;
use crate::time::{hour_ceil, hour_floor, seconds_between};
use crate::timeseries::StayKey;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown intervention name {0:?}")]
pub struct UnknownInterventionName(pub String);

/// The fourteen treatment columns, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    Vent,
    Vaso,
    Adenosine,
    Dobutamine,
    Dopamine,
    Epinephrine,
    Isuprel,
    Milrinone,
    Norepinephrine,
    Phenylephrine,
    Vasopressin,
    ColloidBolus,
    CrystalloidBolus,
    Nivdurations,
}

pub const N_INTERVENTIONS: usize = 14;

impl Intervention {
    pub const ALL: [Intervention; N_INTERVENTIONS] = [
        Intervention::Vent,
        Intervention::Vaso,
        Intervention::Adenosine,
        Intervention::Dobutamine,
        Intervention::Dopamine,
        Intervention::Epinephrine,
        Intervention::Isuprel,
        Intervention::Milrinone,
        Intervention::Norepinephrine,
        Intervention::Phenylephrine,
        Intervention::Vasopressin,
        Intervention::ColloidBolus,
        Intervention::CrystalloidBolus,
        Intervention::Nivdurations,
    ];

    pub const VASOPRESSOR_DRUGS: [Intervention; 9] = [
        Intervention::Adenosine,
        Intervention::Dobutamine,
        Intervention::Dopamine,
        Intervention::Epinephrine,
        Intervention::Isuprel,
        Intervention::Milrinone,
        Intervention::Norepinephrine,
        Intervention::Phenylephrine,
        Intervention::Vasopressin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Intervention::Vent => "vent",
            Intervention::Vaso => "vaso",
            Intervention::Adenosine => "adenosine",
            Intervention::Dobutamine => "dobutamine",
            Intervention::Dopamine => "dopamine",
            Intervention::Epinephrine => "epinephrine",
            Intervention::Isuprel => "isuprel",
            Intervention::Milrinone => "milrinone",
            Intervention::Norepinephrine => "norepinephrine",
            Intervention::Phenylephrine => "phenylephrine",
            Intervention::Vasopressin => "vasopressin",
            Intervention::ColloidBolus => "colloid_bolus",
            Intervention::CrystalloidBolus => "crystalloid_bolus",
            Intervention::Nivdurations => "nivdurations",
        }
    }

    /// Column position in [`Intervention::ALL`].
    pub fn column(self) -> usize {
        self as usize
    }

    pub fn is_intermittent(self) -> bool {
        matches!(self, Intervention::ColloidBolus | Intervention::CrystalloidBolus)
    }

    pub fn is_vasopressor_drug(self) -> bool {
        Self::VASOPRESSOR_DRUGS.contains(&self)
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intervention {
    type Err = UnknownInterventionName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Intervention::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| UnknownInterventionName(s.to_string()))
    }
}

/// Hours whose `[h, h+1)` interval intersects `[start, end)`, clipped to the
/// grid. A zero-length record marks the hour containing it.
pub fn rasterize_continuous(event: &InterventionEventRow, stay: &CohortRow) -> Vec<usize> {
    let n = stay.n_hours() as i64;
    let s = seconds_between(&stay.intime, &event.starttime);
    let e = seconds_between(&stay.intime, &event.endtime);
    let first = hour_floor(s);
    let last = if e > s { hour_ceil(e) - 1 } else { first };
    (first.max(0)..=last.min(n - 1)).map(|h| h as usize).collect()
}

/// The single hour containing the administration time, if it lies in the grid.
pub fn rasterize_intermittent(event: &InterventionEventRow, stay: &CohortRow) -> Vec<usize> {
    let h = hour_floor(seconds_between(&stay.intime, &event.starttime));
    if h >= 0 && (h as usize) < stay.n_hours() {
        vec![h as usize]
    } else {
        Vec::new()
    }
}

pub type InterventionRow = [u8; N_INTERVENTIONS];

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionStay {
    pub key: StayKey,
    /// One row per grid hour.
    pub rows: Vec<InterventionRow>,
}

impl InterventionStay {
    pub fn column(&self, which: Intervention) -> Vec<u8> {
        self.rows.iter().map(|r| r[which.column()]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionGrid {
    /// In cohort order.
    pub stays: Vec<InterventionStay>,
}

impl InterventionGrid {
    pub fn row_count(&self) -> usize {
        self.stays.iter().map(|s| s.rows.len()).sum()
    }
}

/// Dense 0/1 grid over the cohort's hourly index. The vaso column is finally
/// OR-ed with every vasopressor drug column. Events of stays outside the
/// cohort are ignored.
pub fn build_intervention_grid(events: &[InterventionEventRow], cohort: &Cohort) -> InterventionGrid {
    let pos: HashMap<i64, usize> = cohort
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.icustay_id, i))
        .collect();
    let mut per_stay: Vec<Vec<&InterventionEventRow>> = vec![Vec::new(); cohort.rows.len()];
    for e in events {
        if let Some(&i) = pos.get(&e.icustay_id) {
            per_stay[i].push(e);
        }
    }
    let stays = cohort
        .rows
        .par_iter()
        .zip(per_stay.into_par_iter())
        .map(|(row, evs)| {
            let mut rows = vec![[0u8; N_INTERVENTIONS]; row.n_hours()];
            for e in evs {
                let hours = if e.name.is_intermittent() {
                    rasterize_intermittent(e, row)
                } else {
                    rasterize_continuous(e, row)
                };
                for h in hours {
                    rows[h][e.name.column()] = 1;
                }
            }
            for r in &mut rows {
                if Intervention::VASOPRESSOR_DRUGS.iter().any(|d| r[d.column()] == 1) {
                    r[Intervention::Vaso.column()] = 1;
                }
            }
            InterventionStay {
                key: StayKey::from(row),
                rows,
            }
        })
        .collect();
    InterventionGrid { stays }
}

/// Mean number of on-hours per stay, per column.
pub fn mean_on_hours(grid: &InterventionGrid) -> [f64; N_INTERVENTIONS] {
    let mut sums = [0usize; N_INTERVENTIONS];
    for s in &grid.stays {
        for r in &s.rows {
            for (acc, &v) in sums.iter_mut().zip(r) {
                *acc += v as usize;
            }
        }
    }
    let n = grid.stays.len().max(1) as f64;
    sums.map(|s| s as f64 / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::{parse_timestamp, Timestamp};
    use chrono::Duration;

    fn t0() -> Timestamp {
        parse_timestamp("2101-01-01 00:00:00").unwrap()
    }

    fn stay(hours: i64) -> CohortRow {
        CohortRow {
            subject_id: 1,
            hadm_id: 10,
            icustay_id: 100,
            age: 50,
            gender: "F".into(),
            ethnicity: "WHITE".into(),
            insurance: "Private".into(),
            admission_type: "EMERGENCY".into(),
            first_careunit: "MICU".into(),
            admittime: t0(),
            dischtime: t0() + Duration::hours(hours),
            intime: t0(),
            outtime: t0() + Duration::hours(hours),
            mort_icu: false,
            mort_hosp: false,
            los_icu_hours: hours as f64,
        }
    }

    fn ev(name: Intervention, start_min: i64, end_min: i64) -> InterventionEventRow {
        InterventionEventRow {
            icustay_id: 100,
            name,
            starttime: t0() + Duration::minutes(start_min),
            endtime: t0() + Duration::minutes(end_min),
        }
    }

    #[test]
    fn names_round_trip() {
        for i in Intervention::ALL {
            assert_eq!(i.as_str().parse::<Intervention>().unwrap(), i);
        }
        assert!("aspirin".parse::<Intervention>().is_err());
        assert_eq!(Intervention::Nivdurations.column(), 13);
    }

    #[test]
    fn continuous_examples() {
        let s = stay(24);
        assert_eq!(rasterize_continuous(&ev(Intervention::Vent, 150, 252), &s), vec![2, 3, 4]);
        assert_eq!(rasterize_continuous(&ev(Intervention::Vent, -90, 30), &s), vec![0]);
        assert_eq!(rasterize_continuous(&ev(Intervention::Vent, 180, 180), &s), vec![3]);
        assert_eq!(rasterize_continuous(&ev(Intervention::Vent, 120, 240), &s), vec![2, 3]);
        assert_eq!(rasterize_continuous(&ev(Intervention::Vent, 23 * 60, 30 * 60), &s), vec![23]);
        assert!(rasterize_continuous(&ev(Intervention::Vent, -120, -60), &s).is_empty());
    }

    #[test]
    fn intermittent_examples() {
        let s = stay(24);
        assert_eq!(rasterize_intermittent(&ev(Intervention::CrystalloidBolus, 474, 474), &s), vec![7]);
        assert!(rasterize_intermittent(&ev(Intervention::CrystalloidBolus, -5, -5), &s).is_empty());
        assert!(rasterize_intermittent(&ev(Intervention::ColloidBolus, 24 * 60, 24 * 60), &s).is_empty());
    }

    #[test]
    fn grid_examples() {
        let cohort = Cohort::from_rows(vec![stay(6)]);
        let empty = build_intervention_grid(&[], &cohort);
        assert_eq!(empty.row_count(), 6);
        assert!(empty.stays[0].rows.iter().all(|r| r.iter().all(|&v| v == 0)));

        let events = vec![
            ev(Intervention::Dopamine, 120, 240),
            ev(Intervention::Vent, 60, 180),
            ev(Intervention::Vent, 120, 240),
        ];
        let g = build_intervention_grid(&events, &cohort);
        let s = &g.stays[0];
        assert_eq!(s.column(Intervention::Dopamine), vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(s.column(Intervention::Vaso), vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(s.column(Intervention::Vent), vec![0, 1, 1, 1, 0, 0]);
        for r in &s.rows {
            for d in Intervention::VASOPRESSOR_DRUGS {
                assert!(r[Intervention::Vaso.column()] >= r[d.column()]);
            }
        }
    }

    #[test]
    fn direct_vaso_events_are_kept() {
        let cohort = Cohort::from_rows(vec![stay(4)]);
        let g = build_intervention_grid(&[ev(Intervention::Vaso, 0, 60)], &cohort);
        assert_eq!(g.stays[0].column(Intervention::Vaso), vec![1, 0, 0, 0]);
        assert_eq!(mean_on_hours(&g)[1], 1.0);
    }
}
