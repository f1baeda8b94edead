use icu_extract::benchprep::{
    build_dynamic_samples, build_fixed_samples, compute_train_stats, split_cohort, DynamicOptions, FixedOptions,
    SplitRatios,
};
use icu_extract::ingest::{attach_stay_to_lab_events, load_source_dataset, write_source_dataset};
use icu_extract::interventions::Intervention;
use icu_extract::resources::{default_item_map, default_variable_ranges};
use icu_extract::synthgen::{generate, verify, GenParams};
use icu_extract::{aggregate_hourly, build_intervention_grid, select_cohort, ExtractConfig};

fn params() -> GenParams {
    GenParams {
        n_subjects: 300,
        seed: 11,
        clamp_rate: 0.02,
        drop_rate: 0.02,
        ..Default::default()
    }
}

#[test]
fn pipeline_reproduces_ground_truth_through_files() {
    let (ds, truth) = generate(&params()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_source_dataset(&ds, dir.path()).unwrap();
    let loaded = load_source_dataset(dir.path()).unwrap();
    assert_eq!(loaded.counts(), ds.counts());

    let cfg = ExtractConfig::default();
    let (events, attach) = attach_stay_to_lab_events(loaded.events.clone(), &loaded.stays);
    let cohort = select_cohort(&loaded, &cfg);
    let (grid, report) = aggregate_hourly(
        &events,
        &cohort,
        &default_item_map(),
        &default_variable_ranges(),
        &cfg,
    );
    let iv = build_intervention_grid(&loaded.intervention_events, &cohort);
    let diff = verify(&truth, &cohort, &grid, &report, &iv, &attach, 1e-9);
    assert!(diff.is_empty(), "{diff:#?}");
    assert!(diff.cells_compared > 1000);
    assert!(truth.total_clamped() > 0 && truth.total_dropped() > 0);
}

#[test]
fn samples_build_on_synthetic_cohort() {
    let (ds, _) = generate(&params()).unwrap();
    let cfg = ExtractConfig::default();
    let (events, _) = attach_stay_to_lab_events(ds.events.clone(), &ds.stays);
    let cohort = select_cohort(&ds, &cfg);
    let (grid, _) = aggregate_hourly(&events, &cohort, &default_item_map(), &default_variable_ranges(), &cfg);
    let iv = build_intervention_grid(&ds.intervention_events, &cohort);
    let split = split_cohort(&cohort, SplitRatios::default(), 5).unwrap();
    let stats = compute_train_stats(&grid, &cohort, &split, Some(24));

    let fixed = build_fixed_samples(&grid, &cohort, &split, &stats, &FixedOptions::default()).unwrap();
    let eligible = grid.stays.iter().filter(|s| s.n_hours >= 30).count();
    assert_eq!(fixed.samples.len(), eligible);
    assert!(fixed.samples.iter().all(|s| s.features.iter().all(|x| x.is_finite())));

    let (_, dynamic) =
        build_dynamic_samples(&grid, &iv, &cohort, &split, &stats, Intervention::Vent, DynamicOptions::default())
            .unwrap();
    let expected: usize = grid.stays.iter().map(|s| s.n_hours.saturating_sub(15)).sum();
    assert_eq!(dynamic.len(), expected);
    let mut labels = std::collections::BTreeSet::new();
    for s in &dynamic {
        labels.insert(s.label);
    }
    assert_eq!(labels.len(), 4, "every window class should occur");
}
