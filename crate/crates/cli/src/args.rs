use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icu_extract::interventions::Intervention;
use icu_extract::resources::parse_bool;

#[derive(Debug, Parser)]
#[command(name = "icu-extract", version, about = "ICU event tables to hourly cohort tables and benchmark samples")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source directory with ground_truth.json.
    Gensynth(GensynthArgs),
    /// Build patients, vitals_labs, vitals_labs_mean and interventions tables.
    Extract(ExtractArgs),
    /// Build fixed or dynamic benchmark samples from extracted tables.
    Prep(PrepArgs),
    /// Train and score the logistic-regression baseline.
    Eval(EvalArgs),
    /// Print the cohort cross-tab and variable presence table.
    Report(ReportArgs),
}

fn bool_arg(s: &str) -> Result<bool, String> {
    parse_bool(s).ok_or_else(|| format!("expected true or false, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct GensynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub n_subjects: usize,
    #[arg(long)]
    pub mortality_signal: Option<f64>,
    /// JSON file with generator parameters; flags override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ExtractArgs {
    #[arg(long)]
    pub source_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Directory with itemid_to_variable_map.csv and variable_ranges.csv;
    /// the bundled files are used when omitted.
    #[arg(long)]
    pub resources_dir: Option<PathBuf>,
    /// key=value file of extraction settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub min_age: Option<f64>,
    #[arg(long)]
    pub min_duration: Option<f64>,
    #[arg(long)]
    pub max_duration: Option<f64>,
    #[arg(long, value_parser = bool_arg)]
    pub group_by_level2: Option<bool>,
    #[arg(long)]
    pub min_percent: Option<f64>,
}

impl ExtractArgs {
    pub fn new(source_dir: PathBuf, out_dir: PathBuf) -> Self {
        ExtractArgs {
            source_dir,
            out_dir,
            resources_dir: None,
            config: None,
            min_age: None,
            min_duration: None,
            max_duration: None,
            group_by_level2: None,
            min_percent: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrepTask {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Vent,
    Vaso,
}

impl From<Target> for Intervention {
    fn from(t: Target) -> Self {
        match t {
            Target::Vent => Intervention::Vent,
            Target::Vaso => Intervention::Vaso,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct PrepArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    pub source_dir: PathBuf,
    /// Defaults to the extract directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: PrepTask,
    #[arg(long, value_enum, default_value_t = Target::Vent)]
    pub target: Target,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.70)]
    pub train: f64,
    #[arg(long, default_value_t = 0.15)]
    pub val: f64,
    #[arg(long, default_value_t = 0.15)]
    pub test: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Logreg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EvalTask {
    MortIcu,
    MortHosp,
    Los3,
    Los7,
    /// Four-class intervention windows from samples_dynamic.csv.
    Intervention,
}

impl EvalTask {
    pub fn label_column(self) -> Option<&'static str> {
        match self {
            EvalTask::MortIcu => Some("mort_icu"),
            EvalTask::MortHosp => Some("mort_hosp"),
            EvalTask::Los3 => Some("los3"),
            EvalTask::Los7 => Some("los7"),
            EvalTask::Intervention => None,
        }
    }

    pub fn name(self) -> &'static str {
        self.label_column().unwrap_or("intervention")
    }
}

#[derive(Debug, Args, Clone)]
pub struct EvalArgs {
    /// Directory holding samples_fixed.csv or samples_dynamic.csv.
    #[arg(long)]
    pub source_dir: PathBuf,
    /// Defaults to the samples directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Baseline::Logreg)]
    pub baseline: Baseline,
    #[arg(long, value_enum)]
    pub task: EvalTask,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    #[arg(long, default_value_t = 300)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Recorded in the metrics file; training is deterministic without it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct ReportArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    pub source_dir: PathBuf,
    /// Defaults to the extract directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_extract_overrides() {
        let cli = Cli::try_parse_from([
            "icu-extract",
            "--threads",
            "2",
            "extract",
            "--source-dir",
            "in",
            "--out-dir",
            "out",
            "--min-age",
            "18",
            "--group-by-level2",
            "false",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(2));
        let Command::Extract(a) = cli.command else { panic!("not extract") };
        assert_eq!(a.min_age, Some(18.0));
        assert_eq!(a.group_by_level2, Some(false));
        assert_eq!(a.max_duration, None);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |args: &[&str]| Cli::try_parse_from(args).is_err();
        assert!(bad(&["icu-extract", "extract", "--source-dir", "a", "--out-dir", "b", "--group-by-level2", "maybe"]));
        assert!(bad(&["icu-extract", "prep", "--source-dir", "a", "--task", "weekly"]));
        assert!(bad(&["icu-extract", "eval", "--source-dir", "a", "--task", "los"]));
    }

    #[test]
    fn eval_task_columns() {
        let cli = Cli::try_parse_from(["icu-extract", "eval", "--source-dir", "a", "--task", "mort_hosp"]).unwrap();
        let Command::Eval(a) = cli.command else { panic!("not eval") };
        assert_eq!(a.task.label_column(), Some("mort_hosp"));
        assert_eq!(EvalTask::Intervention.label_column(), None);
        assert_eq!(EvalTask::Intervention.name(), "intervention");
        assert_eq!(Intervention::from(Target::Vaso), Intervention::Vaso);
    }
}
