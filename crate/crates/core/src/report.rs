//! Cohort summary tables: a demographic cross-tab by gender and a
//! per-variable presence table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::benchprep::{age_bucket, AgeBucket};
use crate::cohort::{Cohort, CohortRow};
use crate::timeseries::{summarize_missingness, HourlyGrid, VariablePresence};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTabRow {
    pub category: String,
    /// Counts in the order of [`CohortSummary::genders`].
    pub by_gender: Vec<usize>,
    pub total: usize,
    /// Share of the whole cohort, in percent.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTabSection {
    pub name: String,
    pub rows: Vec<CrossTabRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSummary {
    pub genders: Vec<String>,
    pub sections: Vec<CrossTabSection>,
    pub gender_totals: Vec<usize>,
    pub gender_percents: Vec<f64>,
    pub total: usize,
}

fn percent(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

fn section(
    name: &str,
    rows: &[CohortRow],
    genders: &[String],
    key: impl Fn(&CohortRow) -> String,
    order: Option<&[String]>,
) -> CrossTabSection {
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    if let Some(order) = order {
        for c in order {
            counts.insert(c.clone(), vec![0; genders.len()]);
        }
    }
    for r in rows {
        let g = genders.iter().position(|g| *g == r.gender).expect("gender list built from rows");
        counts.entry(key(r)).or_insert_with(|| vec![0; genders.len()])[g] += 1;
    }
    let mut out: Vec<CrossTabRow> = counts
        .into_iter()
        .map(|(category, by_gender)| {
            let total = by_gender.iter().sum();
            CrossTabRow {
                category,
                by_gender,
                total,
                percent: percent(total, rows.len()),
            }
        })
        .collect();
    match order {
        Some(order) => out.sort_by_key(|r| order.iter().position(|c| *c == r.category)),
        // Smallest categories first, as in the published cohort table.
        None => out.sort_by(|a, b| a.total.cmp(&b.total).then_with(|| a.category.cmp(&b.category))),
    }
    CrossTabSection {
        name: name.to_string(),
        rows: out,
    }
}

/// Gender cross-tab over ethnicity, age bucket, insurance, admission type and
/// first care unit.
pub fn cohort_summary(cohort: &Cohort) -> CohortSummary {
    let rows = &cohort.rows;
    let mut genders: Vec<String> = rows.iter().map(|r| r.gender.clone()).collect();
    genders.sort();
    genders.dedup();
    let ages: Vec<String> = AgeBucket::ALL.iter().map(|b| b.label().to_string()).collect();
    let sections = vec![
        section("Ethnicity", rows, &genders, |r| r.ethnicity.clone(), None),
        section("Age", rows, &genders, |r| age_bucket(r.age).label().to_string(), Some(&ages)),
        section("Insurance Type", rows, &genders, |r| r.insurance.clone(), None),
        section("Admission Type", rows, &genders, |r| r.admission_type.clone(), None),
        section("First Careunit", rows, &genders, |r| r.first_careunit.clone(), None),
    ];
    let gender_totals: Vec<usize> = genders
        .iter()
        .map(|g| rows.iter().filter(|r| r.gender == *g).count())
        .collect();
    CohortSummary {
        gender_percents: gender_totals.iter().map(|&n| percent(n, rows.len())).collect(),
        genders,
        sections,
        gender_totals,
        total: rows.len(),
    }
}

impl CohortSummary {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16} {:<26}", "", "");
        for g in &self.genders {
            let _ = write!(s, " {g:>14}");
        }
        let _ = writeln!(s, " {:>18}", "Total");
        for sec in &self.sections {
            for (i, r) in sec.rows.iter().enumerate() {
                let name = if i == 0 { sec.name.as_str() } else { "" };
                let _ = write!(s, "{:<16} {:<26}", name, r.category);
                for n in &r.by_gender {
                    let _ = write!(s, " {n:>14}");
                }
                let _ = writeln!(s, " {:>18}", format!("{} ({:.1}%)", r.total, r.percent));
            }
        }
        let _ = write!(s, "{:<16} {:<26}", "Total", "");
        for (n, p) in self.gender_totals.iter().zip(&self.gender_percents) {
            let _ = write!(s, " {:>14}", format!("{n} ({p:.1}%)"));
        }
        let _ = writeln!(s, " {:>18}", format!("{} (100.0%)", self.total));
        s
    }

    pub fn write_csv(&self, path: &Path) -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["section".to_string(), "category".to_string()];
        header.extend(self.genders.iter().cloned());
        header.extend(["total".to_string(), "percent".to_string()]);
        w.write_record(&header)?;
        for sec in &self.sections {
            for r in &sec.rows {
                let mut rec = vec![sec.name.clone(), r.category.clone()];
                rec.extend(r.by_gender.iter().map(|n| n.to_string()));
                rec.extend([r.total.to_string(), format!("{:.4}", r.percent)]);
                w.write_record(&rec)?;
            }
        }
        let mut rec = vec!["Total".to_string(), String::new()];
        rec.extend(self.gender_totals.iter().map(|n| n.to_string()));
        rec.extend([self.total.to_string(), "100.0000".to_string()]);
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

pub fn presence_table(grid: &HourlyGrid) -> Vec<VariablePresence> {
    summarize_missingness(grid)
}

pub fn render_presence_text(table: &[VariablePresence]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<32} {:>10} {:>10} {:>9} {:>12} {:>12}",
        "variable", "present", "rows", "percent", "mean", "std"
    );
    for p in table {
        let num = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            s,
            "{:<32} {:>10} {:>10} {:>8.2}% {:>12} {:>12}",
            p.variable.as_str(),
            p.present_rows,
            p.total_rows,
            p.presence,
            num(p.mean),
            num(p.std)
        );
    }
    s
}

pub fn write_presence_csv(table: &[VariablePresence], path: &Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variable", "present_rows", "total_rows", "presence", "mean", "std"])?;
    for p in table {
        let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            p.variable.as_str().to_string(),
            p.present_rows.to_string(),
            p.total_rows.to_string(),
            p.presence.to_string(),
            num(p.mean),
            num(p.std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::parse_timestamp;

    fn row(i: i64, gender: &str, eth: &str, age: i64) -> CohortRow {
        let t = parse_timestamp("2101-01-01 00:00:00").unwrap();
        CohortRow {
            subject_id: i,
            hadm_id: i,
            icustay_id: i,
            age,
            gender: gender.into(),
            ethnicity: eth.into(),
            insurance: "Private".into(),
            admission_type: "EMERGENCY".into(),
            first_careunit: "MICU".into(),
            admittime: t,
            dischtime: t,
            intime: t,
            outtime: t,
            mort_icu: false,
            mort_hosp: false,
            los_icu_hours: 24.0,
        }
    }

    #[test]
    fn cells_partition_the_cohort() {
        let cohort = Cohort::from_rows(vec![
            row(1, "F", "WHITE", 20),
            row(2, "M", "WHITE", 45),
            row(3, "M", "ASIAN", 300),
            row(4, "F", "WHITE", 65),
        ]);
        let s = cohort_summary(&cohort);
        assert_eq!(s.genders, vec!["F", "M"]);
        assert_eq!(s.total, 4);
        for sec in &s.sections {
            let sum: usize = sec.rows.iter().map(|r| r.total).sum();
            assert_eq!(sum, 4, "{}", sec.name);
            let pct: f64 = sec.rows.iter().map(|r| r.percent).sum();
            assert!((pct - 100.0).abs() < 1e-9);
        }
        let eth = &s.sections[0];
        assert_eq!(eth.rows[0].category, "ASIAN");
        assert_eq!(eth.rows[1].by_gender, vec![2, 1]);
        let age = &s.sections[1];
        assert_eq!(
            age.rows.iter().map(|r| r.total).collect::<Vec<_>>(),
            vec![1, 1, 1, 1]
        );
        assert_eq!(age.rows[3].category, ">70");
        assert!(s.render_text().contains("Ethnicity"));
    }
}
