#![allow(dead_code)]

use repp_core::geometry::{BilliardTable, Scatterer, Vec2};

pub fn two_disk() -> BilliardTable {
    BilliardTable::lorentz(vec![
        Scatterer { center: Vec2::new(0.25, 0.5), radius: 0.2 },
        Scatterer { center: Vec2::new(0.75, 0.5), radius: 0.2 },
    ])
    .unwrap()
}

pub fn finite_horizon() -> BilliardTable {
    BilliardTable::lorentz(vec![
        Scatterer { center: Vec2::new(0.0, 0.0), radius: 0.26 },
        Scatterer { center: Vec2::new(0.5, 0.5), radius: 0.44 },
    ])
    .unwrap()
}

pub fn stadium() -> BilliardTable {
    BilliardTable::stadium(1.0, 1.0).unwrap()
}

pub fn all_tables() -> Vec<(&'static str, BilliardTable)> {
    vec![("two_disk", two_disk()), ("finite_horizon", finite_horizon()), ("stadium", stadium())]
}
