//! The invariant measure `dmu = c cos(theta) dr dtheta` of the billiard map.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{BilliardTable, GeometryError, PhasePoint};
use crate::quadrature;
use crate::rng::{SeedTree, StreamRng};

/// Relative accuracy of ball and annulus masses.
pub const QUAD_TOL: f64 = 1e-10;

/// Samples per rayon work item in Monte Carlo loops.
pub const MC_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("ball radius {radius} not below the injectivity radius {limit}")]
    BallTooLarge { radius: f64, limit: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The normalised invariant measure of a table.
#[derive(Clone, Copy, Debug)]
pub struct MeasureModel<'t> {
    table: &'t BilliardTable,
    c_m: f64,
}

/// `theta` with marginal density `cos(theta) / 2`, from a uniform `u` in `[0, 1)`.
#[inline]
pub fn theta_from_uniform(u: f64) -> f64 {
    (2.0 * u - 1.0).clamp(-1.0, 1.0).asin()
}

/// Cumulative distribution of the `theta` marginal.
pub fn theta_cdf(theta: f64) -> f64 {
    0.5 * (1.0 + theta.sin())
}

impl<'t> MeasureModel<'t> {
    pub fn new(table: &'t BilliardTable) -> Self {
        Self { table, c_m: 1.0 / (2.0 * table.total_boundary_length()) }
    }

    pub fn table(&self) -> &'t BilliardTable {
        self.table
    }

    /// Normalising constant `1 / (2 |Γ|)`.
    pub fn c_m(&self) -> f64 {
        self.c_m
    }

    /// `c |Γ| ∫cos = 2 c |Γ|`; equals one by construction.
    pub fn total_mass(&self) -> f64 {
        self.c_m * self.table.total_boundary_length() * 2.0
    }

    pub fn density(&self, p: &PhasePoint) -> f64 {
        self.c_m * p.theta.cos().max(0.0)
    }

    /// Maps a position along the concatenated boundary to `(component, r)`.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let comps = self.table.components();
        let mut rest = s;
        for (id, c) in comps.iter().enumerate() {
            if rest < c.length {
                return (id, rest);
            }
            rest -= c.length;
        }
        // s landed on |Γ| through rounding
        let last = comps.len() - 1;
        (last, (comps[last].length * (1.0 - f64::EPSILON)).max(0.0))
    }

    /// One draw from `mu`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhasePoint {
        let s = rng.random::<f64>() * self.table.total_boundary_length();
        let (component, r) = self.locate(s);
        PhasePoint { component, r, theta: theta_from_uniform(rng.random::<f64>()) }
    }

    pub fn injectivity_radius(&self, zeta: &PhasePoint) -> Result<f64, MeasureError> {
        let c = self.table.validate_point(zeta)?;
        Ok(c.injectivity_radius(zeta.r))
    }

    fn check_radius(&self, zeta: &PhasePoint, s: f64) -> Result<(), MeasureError> {
        let limit = self.injectivity_radius(zeta)?;
        if !(s >= 0.0) || (s > 0.0 && s >= limit) {
            return Err(MeasureError::BallTooLarge { radius: s, limit });
        }
        Ok(())
    }

    /// `mu(B(zeta, s))` by quadrature over horizontal chords of the chart ball,
    /// clipped to `|theta| <= pi/2`.
    pub fn ball_measure(&self, zeta: &PhasePoint, s: f64) -> Result<f64, MeasureError> {
        self.check_radius(zeta, s)?;
        Ok(self.c_m * chord_integral(zeta.theta, s))
    }

    /// `mu` of the shell `r <= d(zeta, .) <= r + eps`.
    pub fn annulus_measure(&self, zeta: &PhasePoint, r: f64, eps: f64) -> Result<f64, MeasureError> {
        self.check_radius(zeta, r + eps)?;
        Ok(self.c_m * (chord_integral(zeta.theta, r + eps) - chord_integral(zeta.theta, r)))
    }

    /// Whether `p` lies in the open ball `B(zeta, s)`.
    #[inline]
    pub fn in_ball(&self, p: &PhasePoint, zeta: &PhasePoint, s: f64) -> bool {
        self.table.phase_distance(p, zeta) < s
    }

    /// Monte Carlo estimate of `mu(B(zeta, s))` with its binomial standard error.
    pub fn ball_measure_mc(
        &self,
        zeta: &PhasePoint,
        s: f64,
        samples: usize,
        seeds: &SeedTree,
    ) -> Result<(f64, f64), MeasureError> {
        self.check_radius(zeta, s)?;
        if s == 0.0 || samples == 0 {
            return Ok((0.0, 0.0));
        }
        let hits: usize = map_chunks(samples, seeds, |rng, len| {
            (0..len).filter(|_| self.in_ball(&self.sample(rng), zeta, s)).count()
        })
        .into_iter()
        .sum();
        Ok(binomial(hits, samples))
    }

    /// Exact draw from `mu` conditioned on `B(zeta, s)`.
    pub fn sample_in_ball<R: Rng + ?Sized>(&self, zeta: &PhasePoint, s: f64, rng: &mut R) -> PhasePoint {
        let comp = &self.table.components()[zeta.component];
        let lo = (zeta.theta - s).max(-FRAC_PI_2);
        let hi = (zeta.theta + s).min(FRAC_PI_2);
        let cos_max = if lo <= 0.0 && hi >= 0.0 { 1.0 } else { lo.abs().min(hi.abs()).cos() };
        loop {
            let dr = s * (2.0 * rng.random::<f64>() - 1.0);
            let dt = s * (2.0 * rng.random::<f64>() - 1.0);
            if dr * dr + dt * dt >= s * s {
                continue;
            }
            let theta = zeta.theta + dt;
            if theta.abs() > FRAC_PI_2 {
                continue;
            }
            if rng.random::<f64>() * cos_max >= theta.cos() {
                continue;
            }
            let mut r = zeta.r + dr;
            if comp.periodic {
                r = r.rem_euclid(comp.length);
                if r >= comp.length {
                    r = 0.0;
                }
            }
            return PhasePoint { component: zeta.component, r, theta };
        }
    }
}

/// `∬_{B(0,s) centred at theta0} cos(theta) dr dtheta`, clipped to `|theta| <= pi/2`.
///
/// Substituting `y = s sin(psi)` for the offset in `theta` turns the chord
/// length `2 sqrt(s^2 - y^2)` into a smooth integrand.
pub fn chord_integral(theta0: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let ylo = (-FRAC_PI_2 - theta0).max(-s);
    let yhi = (FRAC_PI_2 - theta0).min(s);
    if ylo >= yhi {
        return 0.0;
    }
    let plo = (ylo / s).clamp(-1.0, 1.0).asin();
    let phi = (yhi / s).clamp(-1.0, 1.0).asin();
    let f = |psi: f64| {
        let (sp, cp) = psi.sin_cos();
        2.0 * s * s * cp * cp * (theta0 + s * sp).cos()
    };
    quadrature::integrate(f, plo, phi, QUAD_TOL)
}

/// `(p_hat, sqrt(p_hat (1 - p_hat) / n))`.
pub fn binomial(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Splits `n` samples into fixed-size chunks `(chunk index, length)`.
pub fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(MC_CHUNK))
        .map(|i| (i, MC_CHUNK.min(n - i * MC_CHUNK)))
        .collect()
}

/// Runs `f(rng, len)` on every chunk of `n` work items in parallel.
///
/// Chunk `i` draws from `seeds.child(i)` and results are returned in chunk
/// order, so reductions do not depend on the thread count.
pub fn map_chunks<T, F>(n: usize, seeds: &SeedTree, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut StreamRng, usize) -> T + Sync,
{
    chunks(n)
        .into_par_iter()
        .map(|(chunk, len)| f(&mut seeds.child(chunk as u64).rng(), len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Scatterer, Vec2};
    use std::f64::consts::PI;

    fn two_disk() -> BilliardTable {
        BilliardTable::lorentz(vec![
            Scatterer { center: Vec2::new(0.25, 0.5), radius: 0.2 },
            Scatterer { center: Vec2::new(0.75, 0.5), radius: 0.2 },
        ])
        .unwrap()
    }

    #[test]
    fn normalisation_and_density() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        assert!((mm.total_mass() - 1.0).abs() < 1e-12);
        assert!((mm.c_m() - 1.0 / (1.6 * PI)).abs() < 1e-15);
        assert!((mm.c_m() - 0.19894).abs() < 1e-5);
        assert!(mm.density(&PhasePoint::new(0, 0.1, FRAC_PI_2)) < 1e-16);
        assert!(mm.density(&PhasePoint::new(0, 0.1, -FRAC_PI_2)) < 1e-16);
        assert!((mm.density(&PhasePoint::new(0, 0.1, 0.0)) - mm.c_m()).abs() < 1e-15);
        assert!((mm.density(&PhasePoint::new(0, 0.1, PI / 3.0)) - mm.c_m() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn theta_transform_endpoints() {
        assert_eq!(theta_from_uniform(0.5), 0.0);
        assert!((theta_from_uniform(1.0 - 1e-12) - FRAC_PI_2).abs() < 2e-6);
        assert!((theta_cdf(theta_from_uniform(0.3)) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn total_integral_is_one() {
        // the full theta range as a "ball" of radius pi/2 around theta = 0, per unit r
        let v = chord_integral(0.0, 10.0);
        // a disk of radius 10 clipped to |theta| <= pi/2 has chords 2 sqrt(100 - y^2)
        let oracle = quadrature::integrate(|y: f64| 2.0 * (100.0 - y * y).sqrt() * y.cos(), -FRAC_PI_2, FRAC_PI_2, 1e-12);
        assert!((v - oracle).abs() < 1e-9 * oracle);
    }

    #[test]
    fn small_ball_matches_expansion() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let zeta = PhasePoint::new(0, 0.3, 0.0);
        let s = 1e-3;
        let mu = mm.ball_measure(&zeta, s).unwrap();
        let approx = mm.c_m() * PI * s * s;
        assert!((mu / approx - 1.0).abs() < 1e-3, "{mu} vs {approx}");
        assert!((approx - 6.25e-7).abs() < 1e-9);
        assert_eq!(mm.ball_measure(&zeta, 0.0).unwrap(), 0.0);

        let grazing = PhasePoint::new(0, 0.3, FRAC_PI_2 - 1e-4);
        assert!(mm.ball_measure(&grazing, s).unwrap() < approx);
    }

    #[test]
    fn ball_measure_is_monotone_and_additive() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let zeta = PhasePoint::new(1, 0.9, 1.2);
        let mut last = 0.0;
        for k in 1..60 {
            let s = 0.01 * k as f64;
            let m = mm.ball_measure(&zeta, s).unwrap();
            assert!(m >= last);
            last = m;
        }
        let (s1, s2) = (0.1, 0.17);
        let diff = mm.ball_measure(&zeta, s2).unwrap() - mm.ball_measure(&zeta, s1).unwrap();
        // independent route: integrate cos over the annulus in polar coordinates
        let polar = mm.c_m()
            * quadrature::integrate(
                |rho: f64| {
                    rho * quadrature::integrate(
                        |phi: f64| {
                            let th = zeta.theta + rho * phi.sin();
                            if th.abs() <= FRAC_PI_2 { th.cos() } else { 0.0 }
                        },
                        0.0,
                        2.0 * PI,
                        1e-12,
                    )
                },
                s1,
                s2,
                1e-11,
            );
        assert!((diff / polar - 1.0).abs() < 1e-6, "{diff} vs {polar}");
        let ann = mm.annulus_measure(&zeta, s1, s2 - s1).unwrap();
        assert!((ann / diff - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ball_too_large() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let zeta = PhasePoint::new(0, 0.3, 0.0);
        let diameter = t.components()[0].length;
        assert!(matches!(mm.ball_measure(&zeta, diameter), Err(MeasureError::BallTooLarge { .. })));
        assert!(matches!(
            mm.ball_measure_mc(&zeta, diameter, 10, &SeedTree::new(1)),
            Err(MeasureError::BallTooLarge { .. })
        ));
        assert_eq!(mm.ball_measure_mc(&zeta, 0.0, 10, &SeedTree::new(1)).unwrap(), (0.0, 0.0));

        let st = BilliardTable::stadium(1.0, 1.0).unwrap();
        let mm = MeasureModel::new(&st);
        // 0.1 from the end of the bottom segment
        let zeta = PhasePoint::new(0, 1.9, 0.0);
        assert!(mm.ball_measure(&zeta, 0.09).is_ok());
        assert!(mm.ball_measure(&zeta, 0.11).is_err());
    }

    #[test]
    fn ball_sampler_stays_in_ball() {
        let t = two_disk();
        let mm = MeasureModel::new(&t);
        let zeta = PhasePoint::new(0, 0.001, 1.5);
        let mut rng = SeedTree::new(9).rng();
        for _ in 0..2000 {
            let p = mm.sample_in_ball(&zeta, 0.1, &mut rng);
            assert!(t.validate_point(&p).is_ok());
            assert!(mm.in_ball(&p, &zeta, 0.1));
        }
    }
}
