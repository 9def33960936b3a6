mod common;

use proptest::prelude::*;
use repp_core::geometry::PhasePoint;
use repp_core::measure::{map_chunks, MeasureModel};
use repp_core::repp::{repp_count, simulate_exceedances, threshold_for_tau, EventSeries, ReppError};
use repp_core::SeedTree;

fn series(mut raw: Vec<u64>, mass: f64) -> EventSeries {
    raw.sort_unstable();
    raw.dedup();
    let horizon = raw.last().map_or(0, |j| j + 1);
    EventSeries::from_raw(raw, mass, horizon)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn threshold_solves_the_mass_equation(t in 0usize..3, c in 0usize..4, u in 0.01..0.99f64,
                                          th in -1.4..1.4f64, e in 3.0..8.0f64, tau in 0.05..5.0f64) {
        let (_, table) = &common::all_tables()[t];
        let mm = MeasureModel::new(table);
        let c = c % table.components().len();
        let zeta = PhasePoint::new(c, u * table.components()[c].length, th);
        let n = 10f64.powf(e) as u64;
        match threshold_for_tau(&mm, n, tau, &zeta) {
            Ok(ts) => {
                let back = n as f64 * mm.ball_measure(&zeta, ts.radius_n).unwrap();
                prop_assert!((back / tau - 1.0).abs() < 1e-6);
                prop_assert!((ts.v_n * ts.ball_mass - 1.0).abs() < 1e-12);
                prop_assert!((ts.u_n + ts.radius_n.ln()).abs() < 1e-12);
            }
            Err(ReppError::Infeasible { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn counts_add_over_adjacent_windows(raw in prop::collection::vec(0u64..10_000, 0..200),
                                        mass in 1e-4..1e-2f64, a in 0.0..50.0f64, l1 in 0.0..20.0f64, l2 in 0.0..20.0f64) {
        let es = series(raw, mass);
        let (b, c) = (a + l1, a + l1 + l2);
        let whole = repp_count(&es, &[(a, c)]).unwrap();
        let parts = repp_count(&es, &[(a, b)]).unwrap() + repp_count(&es, &[(b, c)]).unwrap();
        prop_assert_eq!(whole, parts);
        prop_assert_eq!(repp_count(&es, &[(a, b), (b, c)]).unwrap(), whole);
    }

    #[test]
    fn counts_are_monotone_under_nesting(raw in prop::collection::vec(0u64..10_000, 0..200),
                                         mass in 1e-4..1e-2f64, a in 0.0..50.0f64, l in 0.0..20.0f64,
                                         da in 0.0..5.0f64, db in 0.0..5.0f64) {
        let es = series(raw, mass);
        let inner = repp_count(&es, &[(a, a + l)]).unwrap();
        let outer = repp_count(&es, &[((a - da).max(0.0), a + l + db)]).unwrap();
        prop_assert!(inner <= outer);
        prop_assert!(outer as usize <= es.len());
    }

    #[test]
    fn counting_matches_a_direct_scan(raw in prop::collection::vec(0u64..10_000, 0..200),
                                      mass in 1e-4..1e-2f64, a in 0.0..50.0f64, l in 0.0..50.0f64) {
        let es = series(raw, mass);
        let direct = es.raw_times.iter().filter(|&&j| {
            let g = j as f64 * mass;
            g >= a && g < a + l
        }).count() as u64;
        prop_assert_eq!(repp_count(&es, &[(a, a + l)]).unwrap(), direct);
    }
}

#[test]
fn mean_count_is_calibrated() {
    // E N([0, t)) = ceil(t v_n) mu(U_n) for mu-distributed starts, by invariance
    let table = common::finite_horizon();
    let mm = MeasureModel::new(&table);
    let zeta = PhasePoint::new(1, 0.9, 0.3);
    let ts = threshold_for_tau(&mm, 1_000, 1.0, &zeta).unwrap();
    let t = 1.0;
    let horizon = (t * ts.v_n).ceil() as u64;
    let reps = 4_000;
    let counts: Vec<u64> = map_chunks(reps, &SeedTree::new(5), |rng, len| {
        (0..len)
            .map(|_| loop {
                if let Ok(es) = simulate_exceedances(&table, &ts, &mm.sample(rng), horizon) {
                    break repp_count(&es, &[(0.0, t)]).unwrap();
                }
            })
            .collect::<Vec<_>>()
    })
    .concat();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expected = horizon as f64 * ts.ball_mass;
    assert!((mean - expected).abs() < 4.0 * (var / n).sqrt(), "mean {mean} vs {expected}");
}
