//! Source-table ingestion.
//!
//! Reads the five relational tables (patients, admissions, ICU stays, chart/lab
//! events and intervention events) from RFC-4180 CSV files, validates row-level
//! invariants and referential integrity, and attaches ICU stays to lab events
//! that arrive with only a hospital admission id.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::interventions::Intervention;
use crate::time::{format_timestamp, parse_timestamp, Timestamp};

pub const PATIENTS_FILE: &str = "patients.csv";
pub const ADMISSIONS_FILE: &str = "admissions.csv";
pub const STAYS_FILE: &str = "icustays.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const INTERVENTION_EVENTS_FILE: &str = "intervention_events.csv";

pub const PATIENT_COLUMNS: [&str; 5] = ["subject_id", "gender", "dob", "ethnicity", "insurance"];
pub const ADMISSION_COLUMNS: [&str; 7] = [
    "hadm_id",
    "subject_id",
    "admittime",
    "dischtime",
    "deathtime",
    "admission_type",
    "hospital_expire_flag",
];
pub const STAY_COLUMNS: [&str; 6] = [
    "icustay_id",
    "hadm_id",
    "subject_id",
    "intime",
    "outtime",
    "first_careunit",
];
pub const EVENT_COLUMNS: [&str; 7] = [
    "subject_id",
    "hadm_id",
    "icustay_id",
    "itemid",
    "charttime",
    "valuenum",
    "valueuom",
];
pub const INTERVENTION_EVENT_COLUMNS: [&str; 4] = ["icustay_id", "name", "starttime", "endtime"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing source file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: column set differs from schema (missing: {missing:?}, unexpected: {unexpected:?})")]
    SchemaMismatch {
        file: String,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("{file}: row {row}, column {column}: cannot parse {value:?}")]
    ParseError {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{file}: row {row}: {reason}")]
    InvalidRow {
        file: String,
        row: usize,
        reason: String,
    },
    #[error("integrity: {0}")]
    IntegrityError(String),
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRow {
    pub subject_id: i64,
    pub gender: String,
    pub dob: Timestamp,
    pub ethnicity: String,
    pub insurance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionRow {
    pub hadm_id: i64,
    pub subject_id: i64,
    pub admittime: Timestamp,
    pub dischtime: Timestamp,
    pub deathtime: Option<Timestamp>,
    pub admission_type: String,
    pub hospital_expire_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StayRow {
    pub icustay_id: i64,
    pub hadm_id: i64,
    pub subject_id: i64,
    pub intime: Timestamp,
    pub outtime: Timestamp,
    pub first_careunit: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub subject_id: i64,
    pub hadm_id: i64,
    /// Absent for lab events until [`attach_stay_to_lab_events`] runs.
    pub icustay_id: Option<i64>,
    pub itemid: i64,
    pub charttime: Timestamp,
    pub valuenum: f64,
    pub valueuom: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionEventRow {
    pub icustay_id: i64,
    pub name: Intervention,
    pub starttime: Timestamp,
    /// Equal to `starttime` for intermittent events.
    pub endtime: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TableCounts {
    pub patients: usize,
    pub admissions: usize,
    pub stays: usize,
    pub events: usize,
    pub intervention_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceDataset {
    pub patients: Vec<PatientRow>,
    pub admissions: Vec<AdmissionRow>,
    pub stays: Vec<StayRow>,
    pub events: Vec<EventRow>,
    pub intervention_events: Vec<InterventionEventRow>,
}

impl SourceDataset {
    pub fn counts(&self) -> TableCounts {
        TableCounts {
            patients: self.patients.len(),
            admissions: self.admissions.len(),
            stays: self.stays.len(),
            events: self.events.len(),
            intervention_events: self.intervention_events.len(),
        }
    }

    /// Checks that every foreign key resolves and that stays agree with their
    /// admission about the subject.
    pub fn verify_integrity(&self) -> Result<()> {
        let mut patients = HashSet::with_capacity(self.patients.len());
        for p in &self.patients {
            if !patients.insert(p.subject_id) {
                return Err(IngestError::IntegrityError(format!(
                    "duplicate subject_id {}",
                    p.subject_id
                )));
            }
        }
        let mut admissions = HashMap::with_capacity(self.admissions.len());
        for a in &self.admissions {
            if admissions.insert(a.hadm_id, a.subject_id).is_some() {
                return Err(IngestError::IntegrityError(format!(
                    "duplicate hadm_id {}",
                    a.hadm_id
                )));
            }
            if !patients.contains(&a.subject_id) {
                return Err(IngestError::IntegrityError(format!(
                    "admission {} references unknown subject_id {}",
                    a.hadm_id, a.subject_id
                )));
            }
        }
        let mut stays = HashSet::with_capacity(self.stays.len());
        for s in &self.stays {
            if !stays.insert(s.icustay_id) {
                return Err(IngestError::IntegrityError(format!(
                    "duplicate icustay_id {}",
                    s.icustay_id
                )));
            }
            match admissions.get(&s.hadm_id) {
                None => {
                    return Err(IngestError::IntegrityError(format!(
                        "stay {} references unknown hadm_id {}",
                        s.icustay_id, s.hadm_id
                    )))
                }
                Some(&subject) if subject != s.subject_id => {
                    return Err(IngestError::IntegrityError(format!(
                        "stay {} has subject_id {} but admission {} belongs to {}",
                        s.icustay_id, s.subject_id, s.hadm_id, subject
                    )))
                }
                _ => {}
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if !admissions.contains_key(&e.hadm_id) {
                return Err(IngestError::IntegrityError(format!(
                    "event row {} references unknown hadm_id {}",
                    i + 1,
                    e.hadm_id
                )));
            }
            if let Some(id) = e.icustay_id {
                if !stays.contains(&id) {
                    return Err(IngestError::IntegrityError(format!(
                        "event row {} references unknown icustay_id {}",
                        i + 1,
                        id
                    )));
                }
            }
        }
        for (i, e) in self.intervention_events.iter().enumerate() {
            if !stays.contains(&e.icustay_id) {
                return Err(IngestError::IntegrityError(format!(
                    "intervention event row {} references unknown icustay_id {}",
                    i + 1,
                    e.icustay_id
                )));
            }
        }
        Ok(())
    }
}

/// Loads and validates the five source tables in `dir`.
///
/// Tables are parsed concurrently; the result does not depend on scheduling.
pub fn load_source_dataset(dir: &Path) -> Result<SourceDataset> {
    let paths = [
        PATIENTS_FILE,
        ADMISSIONS_FILE,
        STAYS_FILE,
        EVENTS_FILE,
        INTERVENTION_EVENTS_FILE,
    ]
    .map(|f| dir.join(f));
    for p in &paths {
        if !p.is_file() {
            return Err(IngestError::MissingFile(p.clone()));
        }
    }
    let ((patients, admissions), (stays, (events, intervention_events))) = rayon::join(
        || {
            rayon::join(
                || read_table(&paths[0], &PATIENT_COLUMNS, parse_patient),
                || read_table(&paths[1], &ADMISSION_COLUMNS, parse_admission),
            )
        },
        || {
            rayon::join(
                || read_table(&paths[2], &STAY_COLUMNS, parse_stay),
                || {
                    rayon::join(
                        || read_table(&paths[3], &EVENT_COLUMNS, parse_event),
                        || {
                            read_table(
                                &paths[4],
                                &INTERVENTION_EVENT_COLUMNS,
                                parse_intervention_event,
                            )
                        },
                    )
                },
            )
        },
    );
    let ds = SourceDataset {
        patients: patients?,
        admissions: admissions?,
        stays: stays?,
        events: events?,
        intervention_events: intervention_events?,
    };
    ds.verify_integrity()?;
    Ok(ds)
}

/// A CSV record with the header mapped onto the schema's column order.
struct Fields<'a> {
    file: &'a str,
    row: usize,
    columns: &'a [&'a str],
    index: &'a [usize],
    record: &'a csv::StringRecord,
}

impl Fields<'_> {
    fn raw(&self, col: usize) -> &str {
        self.record.get(self.index[col]).unwrap_or("")
    }

    fn parse_err(&self, col: usize) -> IngestError {
        IngestError::ParseError {
            file: self.file.to_string(),
            row: self.row,
            column: self.columns[col].to_string(),
            value: self.raw(col).to_string(),
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> IngestError {
        IngestError::InvalidRow {
            file: self.file.to_string(),
            row: self.row,
            reason: reason.into(),
        }
    }

    fn string(&self, col: usize) -> String {
        self.raw(col).to_string()
    }

    fn int(&self, col: usize) -> Result<i64> {
        self.raw(col).trim().parse().map_err(|_| self.parse_err(col))
    }

    fn opt_int(&self, col: usize) -> Result<Option<i64>> {
        if self.raw(col).trim().is_empty() {
            Ok(None)
        } else {
            self.int(col).map(Some)
        }
    }

    fn real(&self, col: usize) -> Result<f64> {
        match self.raw(col).trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.parse_err(col)),
        }
    }

    fn time(&self, col: usize) -> Result<Timestamp> {
        parse_timestamp(self.raw(col)).ok_or_else(|| self.parse_err(col))
    }

    fn opt_time(&self, col: usize) -> Result<Option<Timestamp>> {
        if self.raw(col).trim().is_empty() {
            Ok(None)
        } else {
            self.time(col).map(Some)
        }
    }

    fn flag(&self, col: usize) -> Result<bool> {
        match self.raw(col).trim() {
            "1" | "true" | "True" | "TRUE" => Ok(true),
            "0" | "false" | "False" | "FALSE" | "" => Ok(false),
            _ => Err(self.parse_err(col)),
        }
    }
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_table<T>(
    path: &Path,
    columns: &[&str],
    parse: impl Fn(&Fields<'_>) -> Result<T>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_table_from(file, &file_label(path), columns, parse)
}

fn read_table_from<T, R: Read>(
    reader: R,
    label: &str,
    columns: &[&str],
    parse: impl Fn(&Fields<'_>) -> Result<T>,
) -> Result<Vec<T>> {
    let csv_err = |source| IngestError::Csv {
        file: label.to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let index = column_index(label, &header, columns)?;
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0;
    while rdr.read_record(&mut record).map_err(csv_err)? {
        row += 1;
        let fields = Fields {
            file: label,
            row,
            columns,
            index: &index,
            record: &record,
        };
        out.push(parse(&fields)?);
    }
    Ok(out)
}

fn column_index(label: &str, header: &csv::StringRecord, columns: &[&str]) -> Result<Vec<usize>> {
    let present: Vec<&str> = header.iter().map(str::trim).collect();
    let missing: Vec<String> = columns
        .iter()
        .filter(|c| !present.contains(c))
        .map(|c| c.to_string())
        .collect();
    let unexpected: Vec<String> = present
        .iter()
        .filter(|c| !columns.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(IngestError::SchemaMismatch {
            file: label.to_string(),
            missing,
            unexpected,
        });
    }
    Ok(columns
        .iter()
        .map(|c| present.iter().position(|p| p == c).unwrap())
        .collect())
}

fn parse_patient(f: &Fields<'_>) -> Result<PatientRow> {
    Ok(PatientRow {
        subject_id: f.int(0)?,
        gender: f.string(1),
        dob: f.time(2)?,
        ethnicity: f.string(3),
        insurance: f.string(4),
    })
}

fn parse_admission(f: &Fields<'_>) -> Result<AdmissionRow> {
    let row = AdmissionRow {
        hadm_id: f.int(0)?,
        subject_id: f.int(1)?,
        admittime: f.time(2)?,
        dischtime: f.time(3)?,
        deathtime: f.opt_time(4)?,
        admission_type: f.string(5),
        hospital_expire_flag: f.flag(6)?,
    };
    if row.admittime > row.dischtime {
        return Err(f.invalid("admittime after dischtime"));
    }
    if matches!(row.deathtime, Some(d) if d < row.admittime) {
        return Err(f.invalid("deathtime before admittime"));
    }
    Ok(row)
}

fn parse_stay(f: &Fields<'_>) -> Result<StayRow> {
    let row = StayRow {
        icustay_id: f.int(0)?,
        hadm_id: f.int(1)?,
        subject_id: f.int(2)?,
        intime: f.time(3)?,
        outtime: f.time(4)?,
        first_careunit: f.string(5),
    };
    if row.intime >= row.outtime {
        return Err(f.invalid("intime not before outtime"));
    }
    Ok(row)
}

fn parse_event(f: &Fields<'_>) -> Result<EventRow> {
    Ok(EventRow {
        subject_id: f.int(0)?,
        hadm_id: f.int(1)?,
        icustay_id: f.opt_int(2)?,
        itemid: f.int(3)?,
        charttime: f.time(4)?,
        valuenum: f.real(5)?,
        valueuom: f.string(6),
    })
}

fn parse_intervention_event(f: &Fields<'_>) -> Result<InterventionEventRow> {
    let name = f.raw(1).trim().parse().map_err(|_| f.parse_err(1))?;
    let row = InterventionEventRow {
        icustay_id: f.int(0)?,
        name,
        starttime: f.time(2)?,
        endtime: f.time(3)?,
    };
    if row.starttime > row.endtime {
        return Err(f.invalid("starttime after endtime"));
    }
    Ok(row)
}

/// Writes the dataset in the same CSV layout [`load_source_dataset`] reads.
pub fn write_source_dataset(ds: &SourceDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_table(&dir.join(PATIENTS_FILE), &PATIENT_COLUMNS, &ds.patients, |p| {
        vec![
            p.subject_id.to_string(),
            p.gender.clone(),
            format_timestamp(&p.dob),
            p.ethnicity.clone(),
            p.insurance.clone(),
        ]
    })?;
    write_table(&dir.join(ADMISSIONS_FILE), &ADMISSION_COLUMNS, &ds.admissions, |a| {
        vec![
            a.hadm_id.to_string(),
            a.subject_id.to_string(),
            format_timestamp(&a.admittime),
            format_timestamp(&a.dischtime),
            a.deathtime.as_ref().map(format_timestamp).unwrap_or_default(),
            a.admission_type.clone(),
            u8::from(a.hospital_expire_flag).to_string(),
        ]
    })?;
    write_table(&dir.join(STAYS_FILE), &STAY_COLUMNS, &ds.stays, |s| {
        vec![
            s.icustay_id.to_string(),
            s.hadm_id.to_string(),
            s.subject_id.to_string(),
            format_timestamp(&s.intime),
            format_timestamp(&s.outtime),
            s.first_careunit.clone(),
        ]
    })?;
    write_table(&dir.join(EVENTS_FILE), &EVENT_COLUMNS, &ds.events, |e| {
        vec![
            e.subject_id.to_string(),
            e.hadm_id.to_string(),
            e.icustay_id.map(|i| i.to_string()).unwrap_or_default(),
            e.itemid.to_string(),
            format_timestamp(&e.charttime),
            e.valuenum.to_string(),
            e.valueuom.clone(),
        ]
    })?;
    write_table(
        &dir.join(INTERVENTION_EVENTS_FILE),
        &INTERVENTION_EVENT_COLUMNS,
        &ds.intervention_events,
        |e| {
            vec![
                e.icustay_id.to_string(),
                e.name.as_str().to_string(),
                format_timestamp(&e.starttime),
                format_timestamp(&e.endtime),
            ]
        },
    )
}

fn write_table<T>(
    path: &Path,
    columns: &[&str],
    rows: &[T],
    render: impl Fn(&T) -> Vec<String>,
) -> Result<()> {
    let label = file_label(path);
    let csv_err = |source| IngestError::Csv {
        file: label.clone(),
        source,
    };
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record(render(r)).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AttachReport {
    /// Events that arrived with a stay id.
    pub already_assigned: usize,
    pub attached: usize,
    pub dropped: usize,
}

/// Gives every lab event (no stay id) the stay of the same admission whose
/// closed `[intime, outtime]` window contains its charttime. When two stays of
/// an admission touch at a boundary the earlier one wins. Unmatched lab events
/// are dropped and counted.
pub fn attach_stay_to_lab_events(
    events: Vec<EventRow>,
    stays: &[StayRow],
) -> (Vec<EventRow>, AttachReport) {
    let mut by_hadm: HashMap<i64, Vec<&StayRow>> = HashMap::new();
    for s in stays {
        by_hadm.entry(s.hadm_id).or_default().push(s);
    }
    for v in by_hadm.values_mut() {
        v.sort_by_key(|s| (s.intime, s.icustay_id));
    }
    let mut report = AttachReport::default();
    let mut out = Vec::with_capacity(events.len());
    for mut e in events {
        if e.icustay_id.is_some() {
            report.already_assigned += 1;
            out.push(e);
            continue;
        }
        let hit = by_hadm.get(&e.hadm_id).and_then(|cands| {
            cands
                .iter()
                .find(|s| s.intime <= e.charttime && e.charttime <= s.outtime)
        });
        match hit {
            Some(s) => {
                e.icustay_id = Some(s.icustay_id);
                report.attached += 1;
                out.push(e);
            }
            None => report.dropped += 1,
        }
    }
    (out, report)
}
