use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use icu_extract::benchprep::{
    build_fixed_samples, compute_train_stats, split_cohort, write_dynamic_samples, write_fixed_samples,
    DynamicOptions, DynamicPlan, FixedOptions, PrepSidecar, SampleTable, SplitRatios, WindowLabel,
};
use icu_extract::eval::{
    auprc, auroc, classify_metrics, macro_auroc, predict_one_vs_rest, train_logreg, train_one_vs_rest,
    ClassifyMetrics, LogRegOptions, Standardizer,
};
use icu_extract::ingest::{
    attach_stay_to_lab_events, load_source_dataset, ADMISSIONS_FILE, EVENTS_FILE, INTERVENTION_EVENTS_FILE,
    PATIENTS_FILE, STAYS_FILE,
};
use icu_extract::report::{cohort_summary, presence_table, render_presence_text, write_presence_csv, CohortSummary};
use icu_extract::resources::{
    default_item_map, default_variable_ranges, load_item_map, load_variable_ranges, DEFAULT_ITEM_MAP,
    DEFAULT_VARIABLE_RANGES, ITEM_MAP_FILE, VARIABLE_RANGES_FILE,
};
use icu_extract::synthgen::{generate_to_dir, GenParams};
use icu_extract::tables::{
    read_interventions, read_patients, read_vitals_labs, write_interventions, write_patients, write_vitals_labs,
    INTERVENTIONS_TABLE, PATIENTS_TABLE, VITALS_LABS_MEAN_TABLE, VITALS_LABS_TABLE,
};
use icu_extract::timeseries::filter_missingness;
use icu_extract::{aggregate_hourly, build_intervention_grid, select_cohort, ExtractConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{Command, EvalArgs, EvalTask, ExtractArgs, GensynthArgs, PrepArgs, PrepTask, ReportArgs};
use crate::digest::{sha256_file, sha256_hex};
use crate::error::{CliError, ErrorKind, Staged};
use crate::manifest::RunManifest;

pub const SAMPLES_FIXED_FILE: &str = "samples_fixed.csv";
pub const SAMPLES_DYNAMIC_FILE: &str = "samples_dynamic.csv";
pub const COHORT_SUMMARY_FILE: &str = "cohort_summary.csv";
pub const PRESENCE_FILE: &str = "variable_presence.csv";

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gensynth(a) => {
            let truth = cmd_gensynth(&a)?;
            println!(
                "wrote {} stays ({} included) and {} events to {}",
                truth.stays.len(),
                truth.included().count(),
                truth.total_events + truth.labs_dropped,
                a.out_dir.display()
            );
        }
        Command::Extract(a) => {
            let m = cmd_extract(&a)?;
            println!(
                "cohort {} stays, {} grid rows, {} variables ({} dropped); outputs in {}",
                m.cohort_size,
                m.grid_rows,
                m.variables_kept.len(),
                m.variables_dropped.len(),
                a.out_dir.display()
            );
        }
        Command::Prep(a) => {
            let (path, n) = cmd_prep(&a)?;
            println!("wrote {n} samples to {}", path.display());
        }
        Command::Eval(a) => {
            let (path, m) = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
            println!("metrics written to {}", path.display());
        }
        Command::Report(a) => {
            let (summary, presence) = cmd_report(&a)?;
            print!("{}", summary.render_text());
            println!();
            print!("{presence}");
        }
    }
    Ok(())
}

fn create_dir(dir: &Path, stage: &'static str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::internal(stage, anyhow!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_gensynth(a: &GensynthArgs) -> Result<icu_extract::synthgen::GroundTruth, CliError> {
    let mut params = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).stage("gensynth", ErrorKind::Config)?;
            serde_json::from_str::<GenParams>(&text).stage("gensynth", ErrorKind::Config)?
        }
        None => GenParams::default(),
    };
    params.seed = a.seed;
    params.n_subjects = a.n_subjects;
    if let Some(s) = a.mortality_signal {
        params.mortality_signal = s;
    }
    params.validate().stage("gensynth", ErrorKind::Config)?;
    create_dir(&a.out_dir, "gensynth")?;
    generate_to_dir(&params, &a.out_dir).stage("gensynth", ErrorKind::Internal)
}

/// Settings from the defaults, then the config file, then flags.
pub fn resolve_config(a: &ExtractArgs) -> Result<ExtractConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config("config", anyhow!("{}: {e}", p.display())))?;
            ExtractConfig::from_kv_str(&text).stage("config", ErrorKind::Config)?
        }
        None => ExtractConfig::default(),
    };
    if let Some(v) = a.min_age {
        cfg.min_age = v;
    }
    if let Some(v) = a.min_duration {
        cfg.min_duration = v;
    }
    if let Some(v) = a.max_duration {
        cfg.max_duration = v;
    }
    if let Some(v) = a.group_by_level2 {
        cfg.group_by_level2 = v;
    }
    if let Some(v) = a.min_percent {
        cfg.min_percent = v;
    }
    cfg.validate().stage("config", ErrorKind::Config)?;
    Ok(cfg)
}

fn digests(dir: &Path, names: &[&str], stage: &'static str) -> Result<BTreeMap<String, String>, CliError> {
    names
        .par_iter()
        .map(|n| {
            sha256_file(&dir.join(n))
                .map(|d| (n.to_string(), d))
                .map_err(|e| CliError::internal(stage, anyhow!("{n}: {e}")))
        })
        .collect()
}

pub fn cmd_extract(a: &ExtractArgs) -> Result<RunManifest, CliError> {
    let mut clock = BTreeMap::new();
    let mut t = Instant::now();
    let mut lap = |clock: &mut BTreeMap<String, f64>, stage: &str| {
        clock.insert(stage.to_string(), t.elapsed().as_secs_f64());
        t = Instant::now();
    };

    let cfg = resolve_config(a)?;
    let (item_map, ranges, resources) = match &a.resources_dir {
        Some(dir) => {
            let m = load_item_map(&dir.join(ITEM_MAP_FILE)).stage("resources", ErrorKind::Config)?;
            let r = load_variable_ranges(&dir.join(VARIABLE_RANGES_FILE)).stage("resources", ErrorKind::Config)?;
            (m, r, digests(dir, &[ITEM_MAP_FILE, VARIABLE_RANGES_FILE], "resources")?)
        }
        None => (
            default_item_map(),
            default_variable_ranges(),
            BTreeMap::from([
                (ITEM_MAP_FILE.to_string(), format!("builtin:{}", sha256_hex(DEFAULT_ITEM_MAP.as_bytes()))),
                (
                    VARIABLE_RANGES_FILE.to_string(),
                    format!("builtin:{}", sha256_hex(DEFAULT_VARIABLE_RANGES.as_bytes())),
                ),
            ]),
        ),
    };
    lap(&mut clock, "resources");

    let ds = load_source_dataset(&a.source_dir).stage("ingest", ErrorKind::Data)?;
    let inputs = digests(
        &a.source_dir,
        &[PATIENTS_FILE, ADMISSIONS_FILE, STAYS_FILE, EVENTS_FILE, INTERVENTION_EVENTS_FILE],
        "ingest",
    )?;
    let input_counts = ds.counts();
    lap(&mut clock, "ingest");

    let cohort = select_cohort(&ds, &cfg);
    lap(&mut clock, "cohort");

    let (events, lab_attach) = attach_stay_to_lab_events(ds.events, &ds.stays);
    let (grid, outlier_report) = aggregate_hourly(&events, &cohort, &item_map, &ranges, &cfg);
    drop(events);
    let (grid, dropped) = filter_missingness(grid, cfg.min_percent);
    lap(&mut clock, "timeseries");

    let interventions = build_intervention_grid(&ds.intervention_events, &cohort);
    lap(&mut clock, "interventions");

    create_dir(&a.out_dir, "write")?;
    let out = &a.out_dir;
    let w = |r: Result<(), icu_extract::tables::TableError>| r.stage("write", ErrorKind::Internal);
    let ((r1, r2), (r3, r4)) = rayon::join(
        || {
            (
                write_patients(&cohort, &out.join(PATIENTS_TABLE)),
                write_vitals_labs(&grid, &out.join(VITALS_LABS_TABLE), true),
            )
        },
        || {
            (
                write_vitals_labs(&grid, &out.join(VITALS_LABS_MEAN_TABLE), false),
                write_interventions(&interventions, &out.join(INTERVENTIONS_TABLE)),
            )
        },
    );
    w(r1)?;
    w(r2)?;
    w(r3)?;
    w(r4)?;
    let outputs = digests(
        out,
        &[PATIENTS_TABLE, VITALS_LABS_TABLE, VITALS_LABS_MEAN_TABLE, INTERVENTIONS_TABLE],
        "write",
    )?;
    lap(&mut clock, "write");

    let manifest = RunManifest {
        tool: format!("icu-extract {}", env!("CARGO_PKG_VERSION")),
        config_hash: sha256_hex(cfg.canonical_string().as_bytes()),
        config: cfg,
        resources,
        inputs,
        input_counts,
        lab_attach,
        cohort_size: cohort.rows.len(),
        exclusions: cohort.exclusions,
        variables_kept: grid.variables.iter().map(|v| v.0.clone()).collect(),
        variables_dropped: dropped.into_iter().map(|v| v.0).collect(),
        grid_rows: grid.row_count(),
        grid_cells: grid.cell_count(),
        outlier_totals: outlier_report.totals(),
        outlier_report,
        outputs,
        wall_clock_seconds: clock,
    };
    manifest.write(out).stage("manifest", ErrorKind::Internal)?;
    Ok(manifest)
}

fn require(dir: &Path, name: &str, stage: &'static str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::data(stage, anyhow!("missing table {}", p.display())))
    }
}

fn extract_config_hash(dir: &Path) -> String {
    std::fs::read_to_string(dir.join(crate::manifest::MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string))
        .unwrap_or_default()
}

/// Writes the samples file and its JSON sidecar; returns the samples path and
/// sample count.
pub fn cmd_prep(a: &PrepArgs) -> Result<(PathBuf, usize), CliError> {
    const STAGE: &str = "prep";
    let cohort = read_patients(&require(&a.source_dir, PATIENTS_TABLE, STAGE)?).stage(STAGE, ErrorKind::Data)?;
    let grid = read_vitals_labs(&require(&a.source_dir, VITALS_LABS_TABLE, STAGE)?).stage(STAGE, ErrorKind::Data)?;
    let ratios = SplitRatios {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let split = split_cohort(&cohort, ratios, a.seed).stage(STAGE, ErrorKind::Config)?;
    let hour_limit = match a.task {
        PrepTask::Fixed => Some(FixedOptions::default().window_hours),
        PrepTask::Dynamic => None,
    };
    let stats = compute_train_stats(&grid, &cohort, &split, hour_limit);
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.source_dir.clone());
    create_dir(&out_dir, STAGE)?;
    let canonical = format!(
        "extract={}\ntask={:?}\ntarget={:?}\nseed={}\nratios={},{},{}\n",
        extract_config_hash(&a.source_dir),
        a.task,
        a.target,
        a.seed,
        a.train,
        a.val,
        a.test
    );
    let mut sidecar = PrepSidecar {
        task: format!("{:?}", a.task).to_lowercase(),
        target: None,
        config_hash: sha256_hex(canonical.as_bytes()),
        split,
        train_stats: stats,
        sentinel: 0.0,
        fixed: None,
        dynamic: None,
        n_samples: 0,
    };
    let path = match a.task {
        PrepTask::Fixed => {
            let opts = FixedOptions::default();
            let set = build_fixed_samples(&grid, &cohort, &sidecar.split, &sidecar.train_stats, &opts)
                .stage(STAGE, ErrorKind::Data)?;
            let p = out_dir.join(SAMPLES_FIXED_FILE);
            write_fixed_samples(&set, &p).stage(STAGE, ErrorKind::Internal)?;
            sidecar.sentinel = opts.sentinel;
            sidecar.fixed = Some(opts);
            sidecar.n_samples = set.samples.len();
            p
        }
        PrepTask::Dynamic => {
            let iv = read_interventions(&require(&a.source_dir, INTERVENTIONS_TABLE, STAGE)?)
                .stage(STAGE, ErrorKind::Data)?;
            let opts = DynamicOptions::default();
            let plan = DynamicPlan::new(&grid, &cohort, &sidecar.split, a.target.into(), opts)
                .stage(STAGE, ErrorKind::Data)?;
            let p = out_dir.join(SAMPLES_DYNAMIC_FILE);
            sidecar.n_samples =
                write_dynamic_samples(&plan, &grid, &iv, &cohort, &sidecar.split, &sidecar.train_stats, &p)
                    .stage(STAGE, ErrorKind::Data)?;
            sidecar.sentinel = opts.sentinel;
            sidecar.target = Some(a.target.into());
            sidecar.dynamic = Some(plan);
            p
        }
    };
    let json = serde_json::to_string_pretty(&sidecar).stage(STAGE, ErrorKind::Internal)? + "\n";
    std::fs::write(path.with_extension("json"), json).stage(STAGE, ErrorKind::Internal)?;
    Ok((path, sidecar.n_samples))
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BinaryMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub threshold: f64,
    #[serde(flatten)]
    pub at_threshold: ClassifyMetrics,
    pub test_positives: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MulticlassMetrics {
    pub macro_auroc: f64,
    pub accuracy: f64,
    pub test_class_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub baseline: String,
    pub task: String,
    pub samples: String,
    pub options: LogRegOptions,
    pub seed: u64,
    pub sizes: SplitSizes,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiclass: Option<MulticlassMetrics>,
}

/// Fits on the train split and scores the test split.
pub fn cmd_eval(a: &EvalArgs) -> Result<(PathBuf, EvalReport), CliError> {
    const STAGE: &str = "eval";
    let file = if a.task == EvalTask::Intervention {
        SAMPLES_DYNAMIC_FILE
    } else {
        SAMPLES_FIXED_FILE
    };
    let table = SampleTable::read(&require(&a.source_dir, file, STAGE)?).stage(STAGE, ErrorKind::Data)?;
    let idx = |s: icu_extract::benchprep::Split| -> Vec<usize> {
        (0..table.splits.len()).filter(|&i| table.splits[i] == s).collect()
    };
    use icu_extract::benchprep::Split;
    let (train, val, test) = (idx(Split::Train), idx(Split::Val), idx(Split::Test));
    if train.is_empty() || test.is_empty() {
        return Err(CliError::data(STAGE, anyhow!("train and test splits must be non-empty")));
    }
    let raw_train: Vec<Vec<f64>> = train.iter().map(|&i| table.features[i].clone()).collect();
    let scaler = Standardizer::fit(&raw_train);
    let xs_train: Vec<Vec<f64>> = raw_train.par_iter().map(|x| scaler.apply(x)).collect();
    drop(raw_train);
    let xs_test: Vec<Vec<f64>> = test.par_iter().map(|&i| scaler.apply(&table.features[i])).collect();
    let options = LogRegOptions {
        l2: a.l2,
        learning_rate: None,
        iterations: a.iterations,
    };
    let mut report = EvalReport {
        baseline: "logreg".into(),
        task: a.task.name().into(),
        samples: file.into(),
        options,
        seed: a.seed,
        sizes: SplitSizes {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        binary: None,
        multiclass: None,
    };
    match a.task.label_column() {
        Some(col) => {
            let labels = table
                .binary_labels
                .get(col)
                .ok_or_else(|| CliError::data(STAGE, anyhow!("{file} has no {col} column")))?;
            let y_train: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
            let y_test: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
            let model = train_logreg(&xs_train, &y_train, &options).stage(STAGE, ErrorKind::Data)?;
            let scores = model.predict_all(&xs_test);
            report.binary = Some(BinaryMetrics {
                auroc: auroc(&scores, &y_test).stage(STAGE, ErrorKind::Data)?,
                auprc: auprc(&scores, &y_test).stage(STAGE, ErrorKind::Data)?,
                threshold: a.threshold,
                at_threshold: classify_metrics(&scores, &y_test, a.threshold).stage(STAGE, ErrorKind::Data)?,
                test_positives: y_test.iter().filter(|&&y| y == 1).count(),
            });
        }
        None => {
            let labels = table
                .window_labels
                .as_ref()
                .ok_or_else(|| CliError::data(STAGE, anyhow!("{file} has no label column")))?;
            let y_train: Vec<WindowLabel> = train.iter().map(|&i| labels[i]).collect();
            let y_test: Vec<WindowLabel> = test.iter().map(|&i| labels[i]).collect();
            let models = train_one_vs_rest(&xs_train, &y_train, &options).stage(STAGE, ErrorKind::Data)?;
            let probs: Vec<[f64; 4]> = xs_test.par_iter().map(|x| predict_one_vs_rest(&models, x)).collect();
            let correct = probs
                .iter()
                .zip(&y_test)
                .filter(|(p, y)| {
                    let best = (0..4).max_by(|&i, &j| p[i].total_cmp(&p[j]).then(j.cmp(&i))).unwrap();
                    best == y.index()
                })
                .count();
            let mut counts = BTreeMap::new();
            for y in &y_test {
                *counts.entry(y.as_str().to_string()).or_insert(0) += 1;
            }
            report.multiclass = Some(MulticlassMetrics {
                macro_auroc: macro_auroc(&probs, &y_test).stage(STAGE, ErrorKind::Data)?,
                accuracy: correct as f64 / y_test.len() as f64,
                test_class_counts: counts,
            });
        }
    }
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.source_dir.clone());
    create_dir(&out_dir, STAGE)?;
    let path = out_dir.join(format!("metrics_{}.json", a.task.name()));
    let json = serde_json::to_string_pretty(&report).stage(STAGE, ErrorKind::Internal)? + "\n";
    std::fs::write(&path, json).stage(STAGE, ErrorKind::Internal)?;
    Ok((path, report))
}

/// Builds the cross-tab and presence table, writes both as CSV and returns
/// the summary with the rendered presence table.
pub fn cmd_report(a: &ReportArgs) -> Result<(CohortSummary, String), CliError> {
    const STAGE: &str = "report";
    let cohort = read_patients(&require(&a.source_dir, PATIENTS_TABLE, STAGE)?).stage(STAGE, ErrorKind::Data)?;
    let grid = read_vitals_labs(&require(&a.source_dir, VITALS_LABS_TABLE, STAGE)?).stage(STAGE, ErrorKind::Data)?;
    let summary = cohort_summary(&cohort);
    let presence = presence_table(&grid);
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.source_dir.clone());
    create_dir(&out_dir, STAGE)?;
    summary
        .write_csv(&out_dir.join(COHORT_SUMMARY_FILE))
        .stage(STAGE, ErrorKind::Internal)?;
    write_presence_csv(&presence, &out_dir.join(PRESENCE_FILE)).stage(STAGE, ErrorKind::Internal)?;
    Ok((summary, render_presence_text(&presence)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("extract.conf");
        std::fs::write(&cfg_path, "min_age = 18\nmax_duration = 120\n").unwrap();
        let mut a = ExtractArgs::new(dir.path().into(), dir.path().join("out"));
        a.config = Some(cfg_path);
        a.max_duration = Some(200.0);
        let cfg = resolve_config(&a).unwrap();
        assert_eq!(cfg.min_age, 18.0);
        assert_eq!(cfg.max_duration, 200.0);
        assert_eq!(cfg.min_duration, ExtractConfig::default().min_duration);

        a.min_duration = Some(500.0);
        assert_eq!(resolve_config(&a).unwrap_err().kind, ErrorKind::Config);
        a.config = Some(dir.path().join("missing.conf"));
        assert_eq!(resolve_config(&a).unwrap_err().kind, ErrorKind::Config);
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let e = cmd_extract(&ExtractArgs::new(dir.path().into(), dir.path().join("out"))).unwrap_err();
        assert_eq!((e.stage, e.kind), ("ingest", ErrorKind::Data));
        let e = cmd_report(&ReportArgs {
            source_dir: dir.path().into(),
            out_dir: None,
        })
        .unwrap_err();
        assert_eq!(e.kind, ErrorKind::Data);
    }

    #[test]
    fn bad_resources_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let res = dir.path().join("res");
        std::fs::create_dir_all(&res).unwrap();
        std::fs::write(res.join(ITEM_MAP_FILE), "not,a,map\n").unwrap();
        let mut a = ExtractArgs::new(dir.path().into(), dir.path().join("out"));
        a.resources_dir = Some(res);
        assert_eq!(cmd_extract(&a).unwrap_err().kind, ErrorKind::Config);
    }
}
