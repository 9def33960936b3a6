use repp_core::induced::InducingSpec;
use repp_harness::config::{ExperimentConfig, Mode};
use repp_harness::experiment::compare_full_vs_induced;

fn config(inducing: InducingSpec) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(include_str!("../configs/smoke.json")).unwrap();
    cfg.mode = Mode::Induced;
    cfg.inducing = Some(inducing);
    cfg.induced.kac_samples = 0;
    cfg.induced.tail_samples = 0;
    cfg.induced.lifted_starts = 0;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn inducing_on_the_whole_space_changes_nothing() {
    let rows = compare_full_vs_induced(&config(InducingSpec::All)).unwrap();
    assert_eq!(rows.len(), 3);
    for (cell, t, tv) in rows {
        assert_eq!(tv, 0.0, "cell {cell}, t = {t}");
    }
}

#[test]
fn proper_inducing_sets_stay_close_to_the_full_map() {
    let rows = compare_full_vs_induced(&config(InducingSpec::Component { ids: vec![0] })).unwrap();
    assert_eq!(rows.len(), 3);
    for (cell, t, tv) in rows {
        assert!((0.0..0.15).contains(&tv), "cell {cell}, t = {t}: {tv}");
    }
}

#[test]
fn full_map_configs_are_rejected() {
    let cfg = ExperimentConfig::from_json(include_str!("../configs/smoke.json")).unwrap();
    assert!(compare_full_vs_induced(&cfg).is_err());
}
