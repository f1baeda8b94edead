//! Cohort extraction and hourly time-series preparation for ICU event tables.
//!
//! The pipeline turns raw relational tables (patients, admissions, ICU stays,
//! chart/lab events and treatment events) into:
//!
//! * a static `patients` table for a first-stay adult cohort,
//! * hourly `vitals_labs` aggregates after unit conversion and outlier
//!   correction, grouped by a configurable ItemID taxonomy,
//! * hourly binary `interventions` indicators,
//! * supervised samples for fixed-window outcome prediction and sliding-window
//!   intervention onset/wean prediction.
//!
//! [`synthgen`] produces schema-conformant synthetic inputs together with the
//! answers the pipeline is expected to compute from them.

pub mod benchprep;
pub mod cohort;
pub mod eval;
pub mod ingest;
pub mod interventions;
pub mod report;
pub mod resources;
pub mod synthgen;
pub mod tables;
pub mod time;
pub mod timeseries;

pub use cohort::{select_cohort, Cohort, CohortRow};
pub use ingest::{load_source_dataset, SourceDataset};
pub use interventions::{build_intervention_grid, Intervention, InterventionGrid};
pub use resources::{ExtractConfig, ItemMap, RangeTable, VariableKey};
pub use timeseries::{aggregate_hourly, HourlyGrid, OutlierReport};
