//! Reading and writing the four output tables.
//!
//! * `patients.csv`: one row per cohort stay, sorted by subject_id.
//! * `vitals_labs.csv`: dense hourly index, `<var>_mean,<var>_count,<var>_std`
//!   per variable.
//! * `vitals_labs_mean.csv`: same index, `<var>_mean` only.
//! * `interventions.csv`: same index, 14 binary columns.
//!
//! Absent values are empty strings. Floats use the shortest representation
//! that round-trips.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cohort::{Cohort, CohortRow};
use crate::interventions::{Intervention, InterventionGrid, InterventionStay, N_INTERVENTIONS};
use crate::resources::VariableKey;
use crate::time::{format_timestamp, parse_timestamp};
use crate::timeseries::{HourlyCell, HourlyGrid, StayGrid, StayKey};

pub const PATIENTS_TABLE: &str = "patients.csv";
pub const VITALS_LABS_TABLE: &str = "vitals_labs.csv";
pub const VITALS_LABS_MEAN_TABLE: &str = "vitals_labs_mean.csv";
pub const INTERVENTIONS_TABLE: &str = "interventions.csv";

pub const INDEX_COLUMNS: [&str; 4] = ["subject_id", "hadm_id", "icustay_id", "hours_in"];

pub const PATIENTS_COLUMNS: [&str; 16] = [
    "subject_id",
    "hadm_id",
    "icustay_id",
    "age",
    "gender",
    "ethnicity",
    "insurance",
    "admission_type",
    "first_careunit",
    "admittime",
    "dischtime",
    "intime",
    "outtime",
    "mort_icu",
    "mort_hosp",
    "los_icu_hours",
];

#[derive(Debug, Error)]
pub enum TableError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("{file}: malformed header: {reason}")]
    Header { file: String, reason: String },
    #[error("{file}: row {row}, column {column}: cannot parse {value:?}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{file}: row {row}: {reason}")]
    Layout { file: String, row: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, TableError>;

fn create(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(BufWriter::with_capacity(1 << 20, f)))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TableError + '_ {
    move |source| TableError::Csv {
        file: path.display().to_string(),
        source,
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_patients(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let e = csv_err(path);
    w.write_record(PATIENTS_COLUMNS).map_err(&e)?;
    for r in &cohort.rows {
        w.write_record([
            r.subject_id.to_string(),
            r.hadm_id.to_string(),
            r.icustay_id.to_string(),
            r.age.to_string(),
            r.gender.clone(),
            r.ethnicity.clone(),
            r.insurance.clone(),
            r.admission_type.clone(),
            r.first_careunit.clone(),
            format_timestamp(&r.admittime),
            format_timestamp(&r.dischtime),
            format_timestamp(&r.intime),
            format_timestamp(&r.outtime),
            flag(r.mort_icu).to_string(),
            flag(r.mort_hosp).to_string(),
            r.los_icu_hours.to_string(),
        ])
        .map_err(&e)?;
    }
    finish(w, path)
}

fn write_index(w: &mut csv::Writer<BufWriter<File>>, key: &StayKey, hour: usize, buf: &mut String) -> std::result::Result<(), csv::Error> {
    for v in [key.subject_id, key.hadm_id, key.icustay_id, hour as i64] {
        buf.clear();
        let _ = write!(buf, "{v}");
        w.write_field(buf.as_bytes())?;
    }
    Ok(())
}

/// Writes `vitals_labs.csv` (`with_stats`) or `vitals_labs_mean.csv`.
pub fn write_vitals_labs(grid: &HourlyGrid, path: &Path, with_stats: bool) -> Result<()> {
    let mut w = create(path)?;
    let e = csv_err(path);
    let mut header: Vec<String> = INDEX_COLUMNS.iter().map(|c| c.to_string()).collect();
    for v in &grid.variables {
        header.push(format!("{v}_mean"));
        if with_stats {
            header.push(format!("{v}_count"));
            header.push(format!("{v}_std"));
        }
    }
    w.write_record(&header).map_err(&e)?;
    let n_vars = grid.variables.len();
    let mut buf = String::new();
    for s in &grid.stays {
        for h in 0..s.n_hours {
            write_index(&mut w, &s.key, h, &mut buf).map_err(&e)?;
            let cells = s.hour_cells(h);
            let mut next = cells.iter().peekable();
            for var in 0..n_vars {
                let cell = match next.peek() {
                    Some(c) if c.1 as usize == var => next.next().map(|c| &c.2),
                    _ => None,
                };
                match cell {
                    Some(c) => {
                        buf.clear();
                        let _ = write!(buf, "{}", c.mean);
                        w.write_field(buf.as_bytes()).map_err(&e)?;
                        if with_stats {
                            buf.clear();
                            let _ = write!(buf, "{}", c.count);
                            w.write_field(buf.as_bytes()).map_err(&e)?;
                            buf.clear();
                            if let Some(sd) = c.std {
                                let _ = write!(buf, "{sd}");
                            }
                            w.write_field(buf.as_bytes()).map_err(&e)?;
                        }
                    }
                    None => {
                        let blanks = if with_stats { 3 } else { 1 };
                        for _ in 0..blanks {
                            w.write_field(b"").map_err(&e)?;
                        }
                    }
                }
            }
            w.write_record(None::<&[u8]>).map_err(&e)?;
        }
    }
    finish(w, path)
}

pub fn write_interventions(grid: &InterventionGrid, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let e = csv_err(path);
    let header: Vec<&str> = INDEX_COLUMNS
        .iter()
        .copied()
        .chain(Intervention::ALL.iter().map(|i| i.as_str()))
        .collect();
    w.write_record(&header).map_err(&e)?;
    let mut buf = String::new();
    for s in &grid.stays {
        for (h, row) in s.rows.iter().enumerate() {
            write_index(&mut w, &s.key, h, &mut buf).map_err(&e)?;
            for &v in row {
                w.write_field(if v == 1 { b"1" } else { b"0" }).map_err(&e)?;
            }
            w.write_record(None::<&[u8]>).map_err(&e)?;
        }
    }
    finish(w, path)
}

fn open_reader(path: &Path) -> Result<csv::Reader<Box<dyn Read>>> {
    let f = File::open(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(Box::new(std::io::BufReader::new(f)) as Box<dyn Read>))
}

struct Cursor<'a> {
    file: &'a str,
    row: usize,
    header: &'a csv::StringRecord,
    rec: &'a csv::StringRecord,
}

impl Cursor<'_> {
    fn err(&self, col: usize) -> TableError {
        TableError::Parse {
            file: self.file.to_string(),
            row: self.row,
            column: self.header.get(col).unwrap_or("?").to_string(),
            value: self.rec.get(col).unwrap_or("").to_string(),
        }
    }

    fn get(&self, col: usize) -> &str {
        self.rec.get(col).unwrap_or("")
    }

    fn int(&self, col: usize) -> Result<i64> {
        self.get(col).parse().map_err(|_| self.err(col))
    }

    fn real(&self, col: usize) -> Result<f64> {
        self.get(col).parse().map_err(|_| self.err(col))
    }

    fn opt_real(&self, col: usize) -> Result<Option<f64>> {
        if self.get(col).is_empty() {
            Ok(None)
        } else {
            self.real(col).map(Some)
        }
    }

    fn time(&self, col: usize) -> Result<crate::time::Timestamp> {
        parse_timestamp(self.get(col)).ok_or_else(|| self.err(col))
    }

    fn flag(&self, col: usize) -> Result<bool> {
        match self.get(col) {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(self.err(col)),
        }
    }
}

fn expect_header(file: &str, header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.iter().take(expected.len()).collect();
    if got != expected {
        return Err(TableError::Header {
            file: file.to_string(),
            reason: format!("expected leading columns {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}

pub fn read_patients(path: &Path) -> Result<Cohort> {
    let file = path.display().to_string();
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    expect_header(&file, &header, &PATIENTS_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let c = Cursor {
            file: &file,
            row: i + 1,
            header: &header,
            rec: &rec,
        };
        rows.push(CohortRow {
            subject_id: c.int(0)?,
            hadm_id: c.int(1)?,
            icustay_id: c.int(2)?,
            age: c.int(3)?,
            gender: c.get(4).to_string(),
            ethnicity: c.get(5).to_string(),
            insurance: c.get(6).to_string(),
            admission_type: c.get(7).to_string(),
            first_careunit: c.get(8).to_string(),
            admittime: c.time(9)?,
            dischtime: c.time(10)?,
            intime: c.time(11)?,
            outtime: c.time(12)?,
            mort_icu: c.flag(13)?,
            mort_hosp: c.flag(14)?,
            los_icu_hours: c.real(15)?,
        });
    }
    Ok(Cohort::from_rows(rows))
}

/// Accumulates consecutive rows of one stay while reading an indexed table.
struct IndexTracker<'a> {
    file: &'a str,
    current: Option<StayKey>,
    next_hour: usize,
}

impl IndexTracker<'_> {
    /// Returns `true` when the row starts a new stay.
    fn advance(&mut self, key: StayKey, hour: usize, row: usize) -> Result<bool> {
        let new = self.current != Some(key);
        if new {
            self.current = Some(key);
            self.next_hour = 0;
        }
        if hour != self.next_hour {
            return Err(TableError::Layout {
                file: self.file.to_string(),
                row,
                reason: format!("expected hours_in {} for stay {}, found {hour}", self.next_hour, key.icustay_id),
            });
        }
        self.next_hour += 1;
        Ok(new)
    }
}

fn read_key(c: &Cursor<'_>) -> Result<(StayKey, usize)> {
    let key = StayKey {
        subject_id: c.int(0)?,
        hadm_id: c.int(1)?,
        icustay_id: c.int(2)?,
    };
    let hour = c.int(3)?;
    if hour < 0 {
        return Err(c.err(3));
    }
    Ok((key, hour as usize))
}

/// Reads `vitals_labs.csv` back into a grid.
pub fn read_vitals_labs(path: &Path) -> Result<HourlyGrid> {
    let file = path.display().to_string();
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    expect_header(&file, &header, &INDEX_COLUMNS)?;
    let value_cols: Vec<&str> = header.iter().skip(INDEX_COLUMNS.len()).collect();
    if !value_cols.len().is_multiple_of(3) {
        return Err(TableError::Header {
            file,
            reason: "value columns are not mean/count/std triples".into(),
        });
    }
    let mut variables = Vec::new();
    for t in value_cols.chunks(3) {
        let name = t[0].strip_suffix("_mean").ok_or_else(|| TableError::Header {
            file: file.clone(),
            reason: format!("expected a _mean column, found {:?}", t[0]),
        })?;
        if t[1] != format!("{name}_count") || t[2] != format!("{name}_std") {
            return Err(TableError::Header {
                file: file.clone(),
                reason: format!("bad stat columns for {name}"),
            });
        }
        variables.push(VariableKey(name.to_string()));
    }
    let mut stays: Vec<StayGrid> = Vec::new();
    let mut tracker = IndexTracker {
        file: &file,
        current: None,
        next_hour: 0,
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let c = Cursor {
            file: &file,
            row: i + 1,
            header: &header,
            rec: &rec,
        };
        let (key, hour) = read_key(&c)?;
        if tracker.advance(key, hour, i + 1)? {
            stays.push(StayGrid {
                key,
                n_hours: 0,
                cells: Vec::new(),
            });
        }
        let stay = stays.last_mut().unwrap();
        stay.n_hours += 1;
        for var in 0..variables.len() {
            let base = INDEX_COLUMNS.len() + 3 * var;
            if let Some(mean) = c.opt_real(base)? {
                let count = c.int(base + 1)?;
                if count < 1 {
                    return Err(c.err(base + 1));
                }
                let std = c.opt_real(base + 2)?;
                stay.cells.push((
                    hour as u32,
                    var as u32,
                    HourlyCell {
                        mean,
                        count: count as u32,
                        std,
                    },
                ));
            }
        }
    }
    Ok(HourlyGrid { variables, stays })
}

pub fn read_interventions(path: &Path) -> Result<InterventionGrid> {
    let file = path.display().to_string();
    let mut rdr = open_reader(path)?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let expected: Vec<&str> = INDEX_COLUMNS
        .iter()
        .copied()
        .chain(Intervention::ALL.iter().map(|i| i.as_str()))
        .collect();
    expect_header(&file, &header, &expected)?;
    let mut stays: Vec<InterventionStay> = Vec::new();
    let mut tracker = IndexTracker {
        file: &file,
        current: None,
        next_hour: 0,
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let c = Cursor {
            file: &file,
            row: i + 1,
            header: &header,
            rec: &rec,
        };
        let (key, hour) = read_key(&c)?;
        if tracker.advance(key, hour, i + 1)? {
            stays.push(InterventionStay {
                key,
                rows: Vec::new(),
            });
        }
        let mut row = [0u8; N_INTERVENTIONS];
        for (j, v) in row.iter_mut().enumerate() {
            *v = u8::from(c.flag(INDEX_COLUMNS.len() + j)?);
        }
        stays.last_mut().unwrap().rows.push(row);
    }
    Ok(InterventionGrid { stays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::build_intervention_grid;
    use crate::time::Timestamp;
    use chrono::Duration;

    fn row(id: i64, hours: i64) -> CohortRow {
        let t: Timestamp = parse_timestamp("2101-01-01 08:30:00").unwrap();
        CohortRow {
            subject_id: id,
            hadm_id: id * 10,
            icustay_id: id * 100,
            age: 300,
            gender: "F".into(),
            ethnicity: "BLACK, AFRICAN AMERICAN".into(),
            insurance: "Medicare".into(),
            admission_type: "EMERGENCY".into(),
            first_careunit: "CCU".into(),
            admittime: t,
            dischtime: t + Duration::hours(hours + 5),
            intime: t,
            outtime: t + Duration::minutes(hours * 60 + 7),
            mort_icu: true,
            mort_hosp: true,
            los_icu_hours: hours as f64 + 7.0 / 60.0,
        }
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = Cohort::from_rows(vec![row(1, 3), row(2, 2)]);
        let grid = HourlyGrid {
            variables: vec![VariableKey("a".into()), VariableKey("b_c".into())],
            stays: vec![
                StayGrid {
                    key: StayKey::from(&cohort.rows[0]),
                    n_hours: 4,
                    cells: vec![
                        (0, 1, HourlyCell { mean: 0.1, count: 1, std: None }),
                        (2, 0, HourlyCell { mean: 85.0, count: 2, std: Some(7.0710678118654755) }),
                        (2, 1, HourlyCell { mean: -3.25, count: 3, std: Some(1e-17) }),
                    ],
                },
                StayGrid {
                    key: StayKey::from(&cohort.rows[1]),
                    n_hours: 3,
                    cells: vec![],
                },
            ],
        };
        let p = dir.path().join(PATIENTS_TABLE);
        write_patients(&cohort, &p).unwrap();
        assert_eq!(read_patients(&p).unwrap().rows, cohort.rows);

        let v = dir.path().join(VITALS_LABS_TABLE);
        write_vitals_labs(&grid, &v, true).unwrap();
        assert_eq!(read_vitals_labs(&v).unwrap(), grid);

        let m = dir.path().join(VITALS_LABS_MEAN_TABLE);
        write_vitals_labs(&grid, &m, false).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        assert!(text.starts_with("subject_id,hadm_id,icustay_id,hours_in,a_mean,b_c_mean\n"));
        assert_eq!(text.lines().count(), 1 + 7);

        let ig = build_intervention_grid(&[], &cohort);
        let i = dir.path().join(INTERVENTIONS_TABLE);
        write_interventions(&ig, &i).unwrap();
        assert_eq!(read_interventions(&i).unwrap(), ig);
    }
}
