//! Reference tables used by the acceptance suite and the example configs.

use std::f64::consts::PI;

use repp_core::geometry::{BilliardTable, PhasePoint, ScattererSpec, TableSpec};

/// Radii of the finite-horizon table: a disk at the cell corner and one at the center.
pub const CORNER_RADIUS: f64 = 0.26;
pub const CENTER_RADIUS: f64 = 0.44;

/// Two disks of radius 0.2 at `(0.25, 0.5)` and `(0.75, 0.5)`; has open corridors.
pub fn two_disk_spec() -> TableSpec {
    TableSpec::Lorentz {
        scatterers: vec![
            ScattererSpec { cx: 0.25, cy: 0.5, radius: 0.2 },
            ScattererSpec { cx: 0.75, cy: 0.5, radius: 0.2 },
        ],
    }
}

/// Disks at `(0, 0)` and `(0.5, 0.5)` that block every corridor.
pub fn finite_horizon_spec() -> TableSpec {
    TableSpec::Lorentz {
        scatterers: vec![
            ScattererSpec { cx: 0.0, cy: 0.0, radius: CORNER_RADIUS },
            ScattererSpec { cx: 0.5, cy: 0.5, radius: CENTER_RADIUS },
        ],
    }
}

pub fn stadium_spec() -> TableSpec {
    TableSpec::Stadium { a: 1.0, r: 1.0 }
}

pub fn build(spec: &TableSpec) -> BilliardTable {
    BilliardTable::from_spec(spec).expect("reference tables are valid")
}

/// Point of the period-2 orbit on the center disk of the finite-horizon table,
/// bouncing along the diagonal towards the corner disk.
pub fn finite_horizon_periodic_point() -> PhasePoint {
    PhasePoint::new(1, CENTER_RADIUS * 1.25 * PI, 0.0)
}
