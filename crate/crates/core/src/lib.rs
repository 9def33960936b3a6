//! Planar billiard maps (periodic Lorentz gases and Bunimovich stadia), their
//! invariant measure, and the rare-event point processes obtained by counting
//! visits of an orbit to a shrinking ball in phase space.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: tables, the collision map and phase-space distance.
//! * [`measure`]: the invariant measure `c cos(theta) dr dtheta`, sampling and ball masses.
//! * [`repp`]: thresholds, exceedance extraction and point-process counting.
//! * [`induced`]: first-return induced systems, Kac checks and return-time tails.
//! * [`stats`]: goodness-of-fit tests and Monte Carlo diagnostics.
//!
//! Randomness flows exclusively through [`rng::SeedTree`], so every estimate is
//! reproducible from a single `u64` seed regardless of the number of worker threads.

pub mod geometry;
pub mod induced;
pub mod measure;
pub mod quadrature;
pub mod repp;
pub mod rng;
pub mod stats;

pub use geometry::{BilliardTable, GeometryError, PhasePoint, Vec2};
pub use measure::MeasureModel;
pub use rng::SeedTree;
