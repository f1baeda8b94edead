use std::collections::BTreeMap;
use std::path::Path;

use icu_extract::cohort::ExclusionCounts;
use icu_extract::ingest::{AttachReport, TableCounts};
use icu_extract::timeseries::{OutlierReport, VariableCounts};
use icu_extract::ExtractConfig;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce and audit one extraction. Apart from
/// `wall_clock_seconds`, two runs on the same inputs produce identical
/// manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub config: ExtractConfig,
    pub config_hash: String,
    /// Resource file name to SHA-256; bundled resources are prefixed
    /// `builtin:`.
    pub resources: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub input_counts: TableCounts,
    pub lab_attach: AttachReport,
    pub cohort_size: usize,
    pub exclusions: ExclusionCounts,
    pub variables_kept: Vec<String>,
    pub variables_dropped: Vec<String>,
    pub grid_rows: usize,
    pub grid_cells: usize,
    pub outlier_totals: VariableCounts,
    pub outlier_report: OutlierReport,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_json())
    }
}

/// A manifest's JSON with the wall-clock field removed, for comparing runs.
pub fn without_timings(json: &str) -> serde_json::Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_clock_seconds");
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timings_are_ignored_in_comparisons() {
        let a = r#"{"cohort_size": 3, "wall_clock_seconds": {"ingest": 0.5}}"#;
        let b = r#"{"cohort_size": 3, "wall_clock_seconds": {"ingest": 1.25}}"#;
        let c = r#"{"cohort_size": 4, "wall_clock_seconds": {"ingest": 0.5}}"#;
        assert_eq!(without_timings(a).unwrap(), without_timings(b).unwrap());
        assert_ne!(without_timings(a).unwrap(), without_timings(c).unwrap());
    }
}
