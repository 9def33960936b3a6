//! Shrinking-ball observables, threshold schedules and exceedance point processes.
//!
//! The observable is `phi(x) = -ln d(x, zeta)`, so `phi(x) > u` iff `x` lies in
//! the open ball `B(zeta, e^{-u})`. Exceedances are always detected through the
//! distance comparison; `phi` itself is only exposed for reporting.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BilliardTable, BoundaryState, GeometryError, PhasePoint, Vec2};
use crate::measure::{MeasureError, MeasureModel};

/// Relative accuracy of `n mu(U_n) = tau` demanded from the root finder.
pub const THRESHOLD_RTOL: f64 = 1e-9;

/// Fraction of the injectivity radius used as the largest admissible ball.
const MAX_BALL_FRACTION: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReppError {
    #[error("tau / n = {needed:e} exceeds the largest admissible ball mass {available:e}")]
    Infeasible { needed: f64, available: f64 },
    #[error("target has theta = {0} on the boundary of phase space")]
    NonGenericTarget(f64),
    #[error("need at least {needed} events, got {got}")]
    TooFewEvents { needed: usize, got: usize },
    #[error("intervals [{0}, {1}) and [{2}, {3}) overlap")]
    OverlappingIntervals(f64, f64, f64, f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{restarts} consecutive degenerate restarts: {last}")]
    TooManyRestarts { restarts: u32, last: GeometryError },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `phi(p) = -ln d(p, zeta)`, with `+inf` at `zeta` and `-inf` across components.
pub fn observable(table: &BilliardTable, p: &PhasePoint, zeta: &PhasePoint) -> f64 {
    let d = table.phase_distance(p, zeta);
    if d.is_infinite() {
        f64::NEG_INFINITY
    } else {
        -d.ln()
    }
}

/// The parameters `(n, tau, zeta, u_n, v_n)` of one rare-event experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub n: u64,
    pub tau: f64,
    pub zeta: PhasePoint,
    pub u_n: f64,
    /// `1 / mu(U_n)`.
    pub v_n: f64,
    /// `e^{-u_n}`.
    pub radius_n: f64,
    /// `mu(U_n)` from quadrature.
    pub ball_mass: f64,
}

impl ThresholdSchedule {
    /// `j mu(U_n)`.
    #[inline]
    pub fn rescale(&self, j: u64) -> f64 {
        j as f64 * self.ball_mass
    }

    pub fn target(&self, table: &BilliardTable) -> Result<BallTarget, GeometryError> {
        BallTarget::new(table, self.zeta, self.radius_n)
    }
}

/// Radius `s` with `mu(B(zeta, s)) = mass`, to relative accuracy [`THRESHOLD_RTOL`].
pub fn radius_for_mass(mm: &MeasureModel<'_>, zeta: &PhasePoint, mass: f64) -> Result<f64, ReppError> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(ReppError::InvalidArgument(format!("ball mass must be positive, got {mass}")));
    }
    mm.table().validate_point(zeta)?;
    if zeta.theta.abs() >= FRAC_PI_2 {
        return Err(ReppError::NonGenericTarget(zeta.theta));
    }
    let s_max = mm.injectivity_radius(zeta)? * MAX_BALL_FRACTION;
    let available = if s_max > 0.0 { mm.ball_measure(zeta, s_max)? } else { 0.0 };
    if mass > available {
        return Err(ReppError::Infeasible { needed: mass, available });
    }
    // g(x) = ln mu(B(zeta, e^x)) - ln mass is increasing and close to linear
    // with slope 2 for small balls, so Illinois regula falsi converges fast
    let g = |x: f64| -> Result<f64, ReppError> { Ok(mm.ball_measure(zeta, x.exp())?.ln() - mass.ln()) };
    let guess = (mass / (mm.c_m() * std::f64::consts::PI * zeta.theta.cos())).sqrt();
    let mut hi = s_max.ln();
    let mut g_hi = g(hi)?;
    if g_hi.abs() <= THRESHOLD_RTOL {
        return Ok(s_max);
    }
    let mut lo = guess.min(s_max).ln() - 1.0;
    let mut g_lo = g(lo)?;
    while g_lo >= 0.0 {
        hi = lo;
        g_hi = g_lo;
        lo -= 2.0;
        g_lo = g(lo)?;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let x = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
        let gx = g(x)?;
        if gx.abs() <= THRESHOLD_RTOL || (hi - lo) < 1e-15 {
            return Ok(x.exp());
        }
        if gx < 0.0 {
            lo = x;
            g_lo = gx;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            g_hi = gx;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(((lo + hi) / 2.0).exp())
}

/// Solves `n mu(B(zeta, e^{-u})) = tau` for `u`.
pub fn threshold_for_tau(
    mm: &MeasureModel<'_>,
    n: u64,
    tau: f64,
    zeta: &PhasePoint,
) -> Result<ThresholdSchedule, ReppError> {
    if n == 0 {
        return Err(ReppError::InvalidArgument("n must be at least 1".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ReppError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let radius_n = radius_for_mass(mm, zeta, tau / n as f64)?;
    let ball_mass = mm.ball_measure(zeta, radius_n)?;
    Ok(ThresholdSchedule {
        n,
        tau,
        zeta: *zeta,
        u_n: -radius_n.ln(),
        v_n: 1.0 / ball_mass,
        radius_n,
        ball_mass,
    })
}

/// Membership test for `B(zeta, radius)` on ambient states.
///
/// A chord prefilter (chord length never exceeds arc length) rejects most
/// states before the chart coordinates are computed.
#[derive(Clone, Copy, Debug)]
pub struct BallTarget {
    pub zeta: PhasePoint,
    pub radius: f64,
    anchor: Vec2,
}

impl BallTarget {
    pub fn new(table: &BilliardTable, zeta: PhasePoint, radius: f64) -> Result<Self, GeometryError> {
        let anchor = table.state_of(&zeta)?.pos;
        Ok(Self { zeta, radius, anchor })
    }

    #[inline]
    pub fn contains(&self, table: &BilliardTable, s: &BoundaryState) -> bool {
        if s.component != self.zeta.component {
            return false;
        }
        if (s.pos - self.anchor).norm_sq() >= self.radius * self.radius {
            return false;
        }
        let theta = table.theta_of(s);
        if (theta - self.zeta.theta).abs() >= self.radius {
            return false;
        }
        table.phase_distance(&table.chart(s), &self.zeta) < self.radius
    }
}

/// Exceedance times of one orbit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSeries {
    pub raw_times: Vec<u64>,
    pub rescaled_times: Vec<f64>,
    /// Number of simulated indices; times `0..horizon` were inspected.
    pub horizon: u64,
    pub restarts: u32,
}

impl EventSeries {
    pub fn from_raw(raw_times: Vec<u64>, ball_mass: f64, horizon: u64) -> Self {
        let rescaled_times = raw_times.iter().map(|&j| j as f64 * ball_mass).collect();
        Self { raw_times, rescaled_times, horizon, restarts: 0 }
    }

    pub fn len(&self) -> usize {
        self.raw_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_times.is_empty()
    }
}

/// Iterates `T` from `x0` and records every `j` with `T^j x0` in `U_n`.
///
/// Simulation stops at `max_horizon`, or earlier once at least `min_horizon`
/// indices were inspected and `min_events` events were seen.
pub fn exceedances_until(
    table: &BilliardTable,
    ts: &ThresholdSchedule,
    x0: &PhasePoint,
    min_horizon: u64,
    min_events: usize,
    max_horizon: u64,
) -> Result<EventSeries, GeometryError> {
    let target = ts.target(table)?;
    let mut state = table.state_of(x0)?;
    let mut raw = Vec::new();
    let mut j = 0u64;
    while j < max_horizon {
        if target.contains(table, &state) {
            raw.push(j);
        }
        j += 1;
        if j >= min_horizon && raw.len() >= min_events {
            break;
        }
        if j < max_horizon {
            state = table.step(&state)?.0;
        }
    }
    Ok(EventSeries::from_raw(raw, ts.ball_mass, j))
}

/// Exceedance times `j` in `[0, horizon)` of the orbit of `x0`.
pub fn simulate_exceedances(
    table: &BilliardTable,
    ts: &ThresholdSchedule,
    x0: &PhasePoint,
    horizon: u64,
) -> Result<EventSeries, GeometryError> {
    exceedances_until(table, ts, x0, horizon, 0, horizon)
}

/// Runs `attempt` on fresh initial conditions until it avoids a degenerate
/// collision, counting the restarts.
pub fn with_restarts<T, D, F>(max_restarts: u32, mut draw: D, mut attempt: F) -> Result<(T, u32), ReppError>
where
    D: FnMut() -> PhasePoint,
    F: FnMut(&PhasePoint) -> Result<T, GeometryError>,
{
    let mut restarts = 0u32;
    loop {
        let x0 = draw();
        match attempt(&x0) {
            Ok(v) => return Ok((v, restarts)),
            Err(e) if e.is_degenerate() => {
                restarts += 1;
                if restarts > max_restarts {
                    return Err(ReppError::TooManyRestarts { restarts, last: e });
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Sorts and checks a union of half-open intervals, dropping empty ones.
pub fn normalize_intervals(intervals: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, ReppError> {
    let mut v: Vec<(f64, f64)> = intervals.iter().copied().filter(|(a, b)| a < b).collect();
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    for w in v.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ReppError::OverlappingIntervals(w[0].0, w[0].1, w[1].0, w[1].1));
        }
    }
    Ok(v)
}

/// `N_n(J)`: number of events whose rescaled time `j mu(U_n)` lies in `J`.
pub fn repp_count(es: &EventSeries, intervals: &[(f64, f64)]) -> Result<u64, ReppError> {
    let j = normalize_intervals(intervals)?;
    let times = &es.rescaled_times;
    Ok(j.iter()
        .map(|&(a, b)| (times.partition_point(|&g| g < b) - times.partition_point(|&g| g < a)) as u64)
        .sum())
}

/// Successive differences of the rescaled event times.
pub fn interarrivals(es: &EventSeries) -> Result<Vec<f64>, ReppError> {
    if es.len() < 2 {
        return Err(ReppError::TooFewEvents { needed: 2, got: es.len() });
    }
    Ok(es.rescaled_times.windows(2).map(|w| w[1] - w[0]).collect())
}

/// `min_{0 <= i < j <= n0} d(T^i zeta, T^j zeta)`.
pub fn min_orbit_separation(table: &BilliardTable, zeta: &PhasePoint, n0: usize) -> Result<f64, ReppError> {
    if n0 < 2 {
        return Err(ReppError::InvalidArgument(format!("n0 must be at least 2, got {n0}")));
    }
    let mut state = table.state_of(zeta)?;
    let mut orbit = vec![*zeta];
    for _ in 0..n0 {
        state = table.step(&state)?.0;
        orbit.push(table.chart(&state));
    }
    let mut best = f64::INFINITY;
    for i in 0..orbit.len() {
        for j in i + 1..orbit.len() {
            best = best.min(table.phase_distance(&orbit[i], &orbit[j]));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Scatterer;
    use crate::rng::SeedTree;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn two_disk() -> BilliardTable {
        BilliardTable::lorentz(vec![
            Scatterer { center: Vec2::new(0.25, 0.5), radius: 0.2 },
            Scatterer { center: Vec2::new(0.75, 0.5), radius: 0.2 },
        ])
        .unwrap()
    }

    fn series(rescaled: &[f64]) -> EventSeries {
        EventSeries {
            raw_times: (0..rescaled.len() as u64).collect(),
            rescaled_times: rescaled.to_vec(),
            horizon: 100,
            restarts: 0,
        }
    }

    #[test]
    fn observable_values() {
        let t = two_disk();
        let z = PhasePoint::new(0, 0.3, 0.1);
        assert_eq!(observable(&t, &z, &z), f64::INFINITY);
        assert_relative_eq!(observable(&t, &PhasePoint::new(0, 0.3, 1.1), &z), 0.0, epsilon = 1e-15);
        let p = PhasePoint::new(0, 0.3, 0.1 + (-5.0f64).exp());
        assert_relative_eq!(observable(&t, &p, &z), 5.0, epsilon = 1e-9);
        assert_eq!(observable(&t, &PhasePoint::new(1, 0.3, 0.1), &z), f64::NEG_INFINITY);
    }

    #[test]
    fn threshold_matches_small_ball_closed_form() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let z = PhasePoint::new(0, 0.5, 0.0);
        let ts = threshold_for_tau(&mm, 1_000_000, 1.0, &z).unwrap();
        let closed = 0.5 * (1e6 * std::f64::consts::PI * mm.c_m()).ln();
        assert!((ts.u_n - closed).abs() < 1e-3, "{} vs {}", ts.u_n, closed);
        assert_relative_eq!(ts.v_n * ts.ball_mass, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn threshold_is_exact_for_random_inputs() {
        let t = BilliardTable::stadium(1.0, 1.0).unwrap();
        let mm = MeasureModel::new(&t);
        let mut rng = SeedTree::new(11).rng();
        let mut checked = 0;
        while checked < 10 {
            let z = mm.sample(&mut rng);
            let n = 10u64.pow(rng.random_range(3..7));
            let tau = rng.random_range(0.1..5.0);
            match threshold_for_tau(&mm, n, tau, &z) {
                Ok(ts) => {
                    let back = n as f64 * mm.ball_measure(&z, ts.radius_n).unwrap();
                    assert!((back / tau - 1.0).abs() < 1e-6);
                    checked += 1;
                }
                Err(ReppError::Infeasible { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn threshold_errors() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let z = PhasePoint::new(0, 0.5, FRAC_PI_2);
        assert!(matches!(threshold_for_tau(&mm, 100, 1.0, &z), Err(ReppError::NonGenericTarget(_))));
        let z = PhasePoint::new(0, 0.5, 0.0);
        assert!(matches!(threshold_for_tau(&mm, 1, 1.0, &z), Err(ReppError::Infeasible { .. })));
        assert!(threshold_for_tau(&mm, 0, 1.0, &z).is_err());
        assert!(threshold_for_tau(&mm, 10, -1.0, &z).is_err());
    }

    #[test]
    fn doubling_n_shrinks_radius() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let z = PhasePoint::new(1, 0.7, -0.4);
        let a = threshold_for_tau(&mm, 1000, 1.0, &z).unwrap();
        let b = threshold_for_tau(&mm, 2000, 1.0, &z).unwrap();
        assert!(b.radius_n < a.radius_n);
    }

    #[test]
    fn start_at_target_is_an_event() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let z = PhasePoint::new(0, 0.5, 0.3);
        let ts = threshold_for_tau(&mm, 10_000, 1.0, &z).unwrap();
        let es = simulate_exceedances(&t, &ts, &z, 10_000).unwrap();
        assert_eq!(es.raw_times.first(), Some(&0));
        assert_eq!(es.horizon, 10_000);
    }

    #[test]
    fn periodic_orbit_away_from_target_has_no_events() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        // disk 0 at r = 0 faces disk 1 across the gap: a period-2 orbit
        let x0 = PhasePoint::new(0, 0.0, 0.0);
        let z = PhasePoint::new(0, 0.0, 0.2);
        let ts = threshold_for_tau(&mm, 100_000, 1.0, &z).unwrap();
        assert!(ts.radius_n < 0.2);
        let es = simulate_exceedances(&t, &ts, &x0, 1000).unwrap();
        assert!(es.is_empty());
    }

    #[test]
    fn counting_examples() {
        let es = series(&[0.3, 1.2, 2.5]);
        assert_eq!(repp_count(&es, &[(0.0, 2.0)]).unwrap(), 2);
        assert_eq!(repp_count(&es, &[]).unwrap(), 0);
        let es = series(&[0.5, 1.5, 2.5]);
        assert_eq!(repp_count(&es, &[(2.0, 3.0), (0.0, 1.0)]).unwrap(), 2);
        assert!(matches!(
            repp_count(&es, &[(0.0, 2.0), (1.0, 3.0)]),
            Err(ReppError::OverlappingIntervals(..))
        ));
    }

    #[test]
    fn interarrival_examples() {
        let gaps = interarrivals(&series(&[1.0, 1.5, 3.5])).unwrap();
        assert_eq!(gaps, vec![0.5, 2.0]);
        assert!(matches!(interarrivals(&series(&[1.0])), Err(ReppError::TooFewEvents { .. })));
    }

    #[test]
    fn orbit_separation() {
        let t = two_disk();
        let periodic = PhasePoint::new(0, 0.0, 0.0);
        assert!(min_orbit_separation(&t, &periodic, 2).unwrap() < 1e-12);
        let generic = PhasePoint::new(0, 0.37, 0.41);
        assert!(min_orbit_separation(&t, &generic, 10).unwrap() > 0.0);
        assert!(min_orbit_separation(&t, &generic, 1).is_err());
    }

    #[test]
    fn restarts_are_counted() {
        let mut calls = 0;
        let (v, restarts) = with_restarts(
            5,
            || PhasePoint::new(0, 0.0, 0.0),
            |_| {
                calls += 1;
                if calls < 3 {
                    Err(GeometryError::TangentialCollision(0.0))
                } else {
                    Ok(7)
                }
            },
        )
        .unwrap();
        assert_eq!((v, restarts), (7, 2));
        let r: Result<(u8, u32), _> =
            with_restarts(1, || PhasePoint::new(0, 0.0, 0.0), |_| Err(GeometryError::TangentialCollision(0.0)));
        assert!(matches!(r, Err(ReppError::TooManyRestarts { .. })));
    }
}
