use proptest::prelude::*;
use repp_core::geometry::{BilliardTable, PhasePoint};
use repp_harness::oracle::{collision_oracle, discrepancy};
use repp_harness::tables;

fn table(t: usize) -> BilliardTable {
    tables::build(&[tables::two_disk_spec(), tables::finite_horizon_spec(), tables::stadium_spec()][t])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_agrees_with_the_marching_oracle(t in 0usize..3, c in 0usize..4, u in 0.0..1.0f64, th in -1.5..1.5f64) {
        let table = table(t);
        let c = c % table.components().len();
        let p = PhasePoint::new(c, u * table.components()[c].length, th);
        prop_assume!(table.billiard_map(&p).is_ok());
        let d = discrepancy(&table, &p);
        prop_assume!(d.is_some());
        let d = d.unwrap();
        prop_assert!(d < 1e-9, "discrepancy {d}");
    }
}

#[test]
fn oracle_flight_matches_the_kernel() {
    let table = table(2);
    let p = PhasePoint::new(1, 1.0, 0.4);
    let hit = collision_oracle(&table, &p).unwrap();
    let e = table.billiard_map(&p).unwrap();
    assert!((hit.flight_time - e.flight_time).abs() < 1e-9);
    assert!(table.phase_distance(&hit.outgoing, &e.outgoing) < 1e-9);
}
