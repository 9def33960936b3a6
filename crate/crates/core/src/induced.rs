//! First-return induced systems `F = T^{r_M}` on a subset `M` of phase space.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BilliardTable, BoundaryState, GeometryError, PhasePoint, TableKind};
use crate::measure::{binomial, map_chunks, MeasureError, MeasureModel};
use crate::repp::{BallTarget, EventSeries, ThresholdSchedule};
use crate::rng::SeedTree;

pub const DEFAULT_RETURN_CAP: u64 = 10_000_000;

/// Default number of `mu`-draws allowed per accepted `mu_M` sample.
pub const DEFAULT_REJECTION_BUDGET: u64 = 1_000_000;

/// Consecutive degenerate orbits tolerated before a sampler gives up.
const MAX_RESTARTS: u32 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InducedError {
    #[error("return time exceeded the cap {cap} ({censored} censored samples)")]
    ReturnCapExceeded { cap: u64, censored: u64 },
    #[error("point {0:?} is not in the inducing set")]
    NotInBase(PhasePoint),
    #[error("no point of the inducing set after {0} draws")]
    RejectionBudgetExceeded(u64),
    #[error("need {needed} returns, got {got}")]
    InsufficientEvents { needed: usize, got: usize },
    #[error("ball of radius {0} around the target is not contained in the inducing set")]
    BallNotInBase(f64),
    #[error("invalid inducing set: {0}")]
    InvalidSpec(String),
    #[error("{0} consecutive degenerate orbits")]
    TooManyRestarts(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Named inducing sets as they appear in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum InducingSpec {
    All,
    HalfSpaceTheta { min: f64, max: f64 },
    Component { ids: Vec<usize> },
    StadiumArcs,
}

/// `(start, F(start), r_M(start))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnRecord {
    pub start: PhasePoint,
    pub end: PhasePoint,
    pub r_m: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KacCheck {
    pub mean_return: f64,
    pub mean_stderr: f64,
    /// Acceptance rate of the rejection sampler.
    pub mass_hat: f64,
    pub mass_stderr: f64,
    pub inv_mass: f64,
    pub inv_mass_stderr: f64,
    pub z_score: f64,
    pub n_samples: u64,
    pub draws: u64,
    pub restarts: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub n: u64,
    pub survival: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCurve {
    pub points: Vec<TailPoint>,
    pub n_samples: u64,
    pub restarts: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedReturn {
    /// Base-map return time `tau^j`.
    pub base: u64,
    /// Induced-map return time `hat tau^j`.
    pub induced: u64,
    pub rel_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedComparison {
    pub max_rel_dev: f64,
    pub c: f64,
    pub returns: Vec<LiftedReturn>,
}

/// Exceedances of one base orbit seen by `T` and by `F`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub base: EventSeries,
    pub induced: EventSeries,
}

/// Stopping rule for [`InducedSystem::paired_exceedances`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedStop {
    pub min_base_horizon: u64,
    pub min_induced_horizon: u64,
    pub min_induced_events: usize,
    pub max_base_horizon: u64,
}

/// A table together with an inducing set `M` and a cap on return times.
#[derive(Clone, Debug)]
pub struct InducedSystem<'t> {
    table: &'t BilliardTable,
    spec: InducingSpec,
    mask: Vec<bool>,
    theta_min: f64,
    theta_max: f64,
    return_cap: u64,
    rejection_budget: u64,
}

impl<'t> InducedSystem<'t> {
    pub fn new(table: &'t BilliardTable, spec: InducingSpec) -> Result<Self, InducedError> {
        let n = table.components().len();
        let (mut mask, mut theta_min, mut theta_max) = (vec![true; n], -FRAC_PI_2, FRAC_PI_2);
        match &spec {
            InducingSpec::All => {}
            InducingSpec::HalfSpaceTheta { min, max } => {
                if !(min < max) {
                    return Err(InducedError::InvalidSpec(format!("empty theta range [{min}, {max}]")));
                }
                theta_min = min.max(-FRAC_PI_2);
                theta_max = max.min(FRAC_PI_2);
                if theta_min >= theta_max {
                    return Err(InducedError::InvalidSpec(format!("theta range [{min}, {max}] misses phase space")));
                }
            }
            InducingSpec::Component { ids } => {
                if ids.is_empty() {
                    return Err(InducedError::InvalidSpec("no component ids".into()));
                }
                mask = vec![false; n];
                for &id in ids {
                    if id >= n {
                        return Err(InducedError::InvalidSpec(format!("no component {id}")));
                    }
                    mask[id] = true;
                }
            }
            InducingSpec::StadiumArcs => {
                if table.kind() != TableKind::Stadium {
                    return Err(InducedError::InvalidSpec("stadium_arcs needs a stadium table".into()));
                }
                mask = vec![false; n];
                for id in table.stadium_arcs() {
                    mask[id] = true;
                }
            }
        }
        Ok(Self {
            table,
            spec,
            mask,
            theta_min,
            theta_max,
            return_cap: DEFAULT_RETURN_CAP,
            rejection_budget: DEFAULT_REJECTION_BUDGET,
        })
    }

    pub fn with_return_cap(mut self, cap: u64) -> Self {
        self.return_cap = cap.max(1);
        self
    }

    pub fn with_rejection_budget(mut self, budget: u64) -> Self {
        self.rejection_budget = budget.max(1);
        self
    }

    pub fn table(&self) -> &'t BilliardTable {
        self.table
    }

    pub fn spec(&self) -> &InducingSpec {
        &self.spec
    }

    pub fn return_cap(&self) -> u64 {
        self.return_cap
    }

    pub fn is_trivial(&self) -> bool {
        self.spec == InducingSpec::All
    }

    #[inline]
    pub fn contains(&self, p: &PhasePoint) -> bool {
        self.mask.get(p.component).copied().unwrap_or(false)
            && p.theta >= self.theta_min
            && p.theta <= self.theta_max
    }

    #[inline]
    pub fn contains_state(&self, s: &BoundaryState) -> bool {
        if !self.mask[s.component] {
            return false;
        }
        if self.theta_min <= -FRAC_PI_2 && self.theta_max >= FRAC_PI_2 {
            return true;
        }
        let theta = self.table.theta_of(s);
        theta >= self.theta_min && theta <= self.theta_max
    }

    /// `mu(M)` in closed form: the boundary fraction times the `theta`-marginal mass.
    pub fn exact_mass(&self) -> f64 {
        let total = self.table.total_boundary_length();
        let length: f64 = self
            .table
            .components()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| c.length)
            .sum();
        length / total * 0.5 * (self.theta_max.sin() - self.theta_min.sin())
    }

    /// Whether the chart ball `B(zeta, radius)` lies inside `M`.
    pub fn contains_ball(&self, zeta: &PhasePoint, radius: f64) -> bool {
        let lo = (zeta.theta - radius).max(-FRAC_PI_2);
        let hi = (zeta.theta + radius).min(FRAC_PI_2);
        self.contains(zeta) && lo >= self.theta_min && hi <= self.theta_max
    }

    /// Iterates `T` from `s` until the orbit enters `M`; returns the state and `r_M`.
    pub fn return_state(&self, s: &BoundaryState) -> Result<(BoundaryState, u64), InducedError> {
        let mut state = *s;
        for j in 1..=self.return_cap {
            state = self.table.step(&state)?.0;
            if self.contains_state(&state) {
                return Ok((state, j));
            }
        }
        Err(InducedError::ReturnCapExceeded { cap: self.return_cap, censored: 1 })
    }

    /// `r_M(x) = min { j >= 1 : T^j x in M }`.
    pub fn hitting_time(&self, x: &PhasePoint) -> Result<u64, InducedError> {
        let s = self.table.state_of(x)?;
        Ok(self.return_state(&s)?.1)
    }

    pub fn induced_step(&self, x: &PhasePoint) -> Result<ReturnRecord, InducedError> {
        if !self.contains(x) {
            return Err(InducedError::NotInBase(*x));
        }
        let s = self.table.state_of(x)?;
        let (end, r_m) = self.return_state(&s)?;
        Ok(ReturnRecord { start: *x, end: self.table.chart(&end), r_m })
    }

    /// One draw from `mu_M` by rejection from `mu`, with the number of draws used.
    pub fn sample_mu_m<R: Rng + ?Sized>(
        &self,
        mm: &MeasureModel<'_>,
        rng: &mut R,
    ) -> Result<(PhasePoint, u64), InducedError> {
        for draws in 1..=self.rejection_budget {
            let p = mm.sample(rng);
            if self.contains(&p) {
                return Ok((p, draws));
            }
        }
        Err(InducedError::RejectionBudgetExceeded(self.rejection_budget))
    }

    /// A `mu_M` draw whose return time is defined, redrawing on degenerate orbits.
    fn sample_with_return<R: Rng + ?Sized>(
        &self,
        mm: &MeasureModel<'_>,
        rng: &mut R,
        cap: u64,
    ) -> Result<ReturnDraw, InducedError> {
        let mut draws = 0;
        for restarts in 0..=MAX_RESTARTS {
            let (p, d) = self.sample_mu_m(mm, rng)?;
            draws += d;
            let mut state = self.table.state_of(&p)?;
            let mut r = None;
            let mut degenerate = false;
            for j in 1..=cap {
                match self.table.step(&state) {
                    Ok((next, _)) => state = next,
                    Err(e) if e.is_degenerate() => {
                        degenerate = true;
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
                if self.contains_state(&state) {
                    r = Some(j);
                    break;
                }
            }
            if !degenerate {
                return Ok(ReturnDraw { r_m: r, draws, restarts: restarts as u64 });
            }
        }
        Err(InducedError::TooManyRestarts(MAX_RESTARTS))
    }

    /// Compares the mean return time under `mu_M` with the inverse acceptance
    /// rate of the `mu_M` sampler; both estimate `1 / mu(M)`.
    pub fn kac_check(&self, mm: &MeasureModel<'_>, n_samples: usize, seeds: &SeedTree) -> Result<KacCheck, InducedError> {
        if n_samples < 2 {
            return Err(InducedError::InsufficientEvents { needed: 2, got: n_samples });
        }
        let parts = map_chunks(n_samples, seeds, |rng, len| -> Result<[u128; 5], InducedError> {
            let mut acc = [0u128; 5];
            for _ in 0..len {
                let d = self.sample_with_return(mm, rng, self.return_cap)?;
                match d.r_m {
                    Some(r) => {
                        acc[0] += r as u128;
                        acc[1] += (r as u128) * (r as u128);
                    }
                    None => acc[4] += 1,
                }
                acc[2] += d.draws as u128;
                acc[3] += d.restarts as u128;
            }
            Ok(acc)
        });
        let mut tot = [0u128; 5];
        for p in parts {
            for (t, v) in tot.iter_mut().zip(p?) {
                *t += v;
            }
        }
        if tot[4] > 0 {
            return Err(InducedError::ReturnCapExceeded { cap: self.return_cap, censored: tot[4] as u64 });
        }
        let n = n_samples as f64;
        let mean = tot[0] as f64 / n;
        let var = ((tot[1] as f64 - n * mean * mean) / (n - 1.0)).max(0.0);
        let mean_stderr = (var / n).sqrt();
        let draws = tot[2] as u64;
        let (mass_hat, mass_stderr) = binomial(n_samples, draws as usize);
        let inv_mass = 1.0 / mass_hat;
        let inv_mass_stderr = mass_stderr / (mass_hat * mass_hat);
        let se = (mean_stderr * mean_stderr + inv_mass_stderr * inv_mass_stderr).sqrt();
        let diff = (mean - inv_mass).abs();
        let z_score = if se > 0.0 {
            diff / se
        } else if diff < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        Ok(KacCheck {
            mean_return: mean,
            mean_stderr,
            mass_hat,
            mass_stderr,
            inv_mass,
            inv_mass_stderr,
            z_score,
            n_samples: n_samples as u64,
            draws,
            restarts: tot[3] as u64,
        })
    }

    /// Empirical survival function `n -> mu_M(r_M > n)` for `n = 0..=n_max`.
    ///
    /// Orbits are followed for at most `n_max + 1` steps, so no return time is
    /// censored below `n_max`.
    pub fn return_tail(
        &self,
        mm: &MeasureModel<'_>,
        n_samples: usize,
        n_max: u64,
        seeds: &SeedTree,
    ) -> Result<TailCurve, InducedError> {
        let cap = n_max.saturating_add(1).min(self.return_cap);
        let parts = map_chunks(n_samples, seeds, |rng, len| -> Result<(Vec<u64>, u64), InducedError> {
            let mut hist = vec![0u64; n_max as usize + 2];
            let mut restarts = 0;
            for _ in 0..len {
                let d = self.sample_with_return(mm, rng, cap)?;
                restarts += d.restarts;
                let r = d.r_m.map_or(n_max + 1, |r| r.min(n_max + 1));
                hist[r as usize] += 1;
            }
            Ok((hist, restarts))
        });
        let mut hist = vec![0u64; n_max as usize + 2];
        let mut restarts = 0;
        for p in parts {
            let (h, r) = p?;
            restarts += r;
            for (a, b) in hist.iter_mut().zip(h) {
                *a += b;
            }
        }
        // survival(n) = #{r > n}
        let mut above = n_samples as u64;
        let mut points = Vec::with_capacity(n_max as usize + 1);
        for n in 0..=n_max {
            above -= hist[n as usize];
            let (survival, stderr) = binomial(above as usize, n_samples);
            points.push(TailPoint { n, survival, stderr });
        }
        Ok(TailCurve { points, n_samples: n_samples as u64, restarts })
    }

    /// Follows a base orbit started at `x0` in `U_n` and records the first `k`
    /// returns to `U_n` under `T` and under `F`, compared through `c = 1 / mass`.
    pub fn lifted_return_comparison(
        &self,
        ts: &ThresholdSchedule,
        x0: &PhasePoint,
        k: usize,
        mass: f64,
        max_base_steps: u64,
    ) -> Result<LiftedComparison, InducedError> {
        if !self.contains_ball(&ts.zeta, ts.radius_n) {
            return Err(InducedError::BallNotInBase(ts.radius_n));
        }
        let target = BallTarget::new(self.table, ts.zeta, ts.radius_n)?;
        let c = 1.0 / mass;
        let mut state = self.table.state_of(x0)?;
        let mut returns = Vec::with_capacity(k);
        let (mut induced, mut since_base) = (0u64, 0u64);
        let mut max_rel_dev: f64 = 0.0;
        for j in 1..=max_base_steps {
            state = self.table.step(&state)?.0;
            since_base += 1;
            if !self.contains_state(&state) {
                if since_base >= self.return_cap {
                    return Err(InducedError::ReturnCapExceeded { cap: self.return_cap, censored: 1 });
                }
                continue;
            }
            since_base = 0;
            induced += 1;
            if target.contains(self.table, &state) {
                let rel_dev = (j as f64 - c * induced as f64).abs() / induced as f64;
                max_rel_dev = max_rel_dev.max(rel_dev);
                returns.push(LiftedReturn { base: j, induced, rel_dev });
                if returns.len() == k {
                    return Ok(LiftedComparison { max_rel_dev, c, returns });
                }
            }
        }
        Err(InducedError::InsufficientEvents { needed: k, got: returns.len() })
    }

    /// Exceedances of `U_n` along one base orbit from `x0 in M`, indexed both by
    /// base time `j` (rescaled by `mu(U_n)`) and by induced time `i` (rescaled by
    /// `mu(U_n) / mass`).
    pub fn paired_exceedances(
        &self,
        ts: &ThresholdSchedule,
        mass: f64,
        x0: &PhasePoint,
        stop: PairedStop,
    ) -> Result<PairedSeries, InducedError> {
        if !self.contains(x0) {
            return Err(InducedError::NotInBase(*x0));
        }
        let target = BallTarget::new(self.table, ts.zeta, ts.radius_n)?;
        let mut state = self.table.state_of(x0)?;
        let (mut base_raw, mut ind_raw) = (Vec::new(), Vec::new());
        let (mut j, mut i, mut since_base) = (0u64, 0u64, 0u64);
        let mut induced_horizon = 0u64;
        let ball_in_base = self.contains_ball(&ts.zeta, ts.radius_n);
        loop {
            let in_base = j == 0 || self.contains_state(&state);
            let hit = (in_base || !ball_in_base) && target.contains(self.table, &state);
            if hit {
                base_raw.push(j);
            }
            if in_base {
                if j > 0 {
                    i += 1;
                }
                if hit {
                    ind_raw.push(i);
                }
                induced_horizon = i + 1;
                since_base = 0;
            } else {
                since_base += 1;
                if since_base > self.return_cap {
                    return Err(InducedError::ReturnCapExceeded { cap: self.return_cap, censored: 1 });
                }
            }
            j += 1;
            let done = j >= stop.min_base_horizon
                && induced_horizon >= stop.min_induced_horizon
                && ind_raw.len() >= stop.min_induced_events;
            if done || j >= stop.max_base_horizon {
                break;
            }
            state = self.table.step(&state)?.0;
        }
        let base = EventSeries::from_raw(base_raw, ts.ball_mass, j);
        let induced = EventSeries::from_raw(ind_raw, ts.ball_mass / mass, induced_horizon);
        Ok(PairedSeries { base, induced })
    }
}

struct ReturnDraw {
    r_m: Option<u64>,
    draws: u64,
    restarts: u64,
}
