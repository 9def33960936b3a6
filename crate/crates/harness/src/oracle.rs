//! Brute-force reference for the collision map: march along the ray with a
//! fixed step until the point enters an obstacle, then bisect.

use std::f64::consts::{PI, TAU};

use repp_core::geometry::{BilliardTable, PhasePoint, TableSpec, Vec2};

/// Marching step along the ray.
pub const MARCH_STEP: f64 = 1e-4;

/// Half-width of the block of torus cells scanned around the launch cell.
pub const BLOCK: i32 = 3;

/// Bisection stops once the bracket is this short.
const BISECT_TOL: f64 = 1e-15;

/// Outgoing state of the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleHit {
    pub outgoing: PhasePoint,
    pub flight_time: f64,
}

struct Disk {
    component: usize,
    center: Vec2,
    radius: f64,
}

fn bisect(mut lo: f64, mut hi: f64, inside: impl Fn(f64) -> bool) -> f64 {
    while hi - lo > BISECT_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if inside(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn reflect_chart(table: &BilliardTable, component: usize, r: f64, normal: Vec2, v: Vec2) -> PhasePoint {
    let out = v - normal * (2.0 * v.dot(normal));
    let theta = normal.cross(out).atan2(normal.dot(out));
    let len = table.components()[component].length;
    PhasePoint::new(component, r.clamp(0.0, len), theta)
}

fn lorentz(table: &BilliardTable, scatterers: &[repp_core::geometry::ScattererSpec], p: &PhasePoint) -> Option<OracleHit> {
    let (pos, v) = table.embed(p).ok()?;
    let (cx, cy) = (pos.x.floor(), pos.y.floor());
    let mut disks = Vec::new();
    for i in -BLOCK..=BLOCK {
        for j in -BLOCK..=BLOCK {
            for (component, s) in scatterers.iter().enumerate() {
                let center = Vec2::new(s.cx + cx + i as f64, s.cy + cy + j as f64);
                let w = center - pos;
                // coarse filter: the ray line must pass within radius + step
                if w.cross(v).abs() <= s.radius + MARCH_STEP && w.dot(v) > -s.radius {
                    disks.push(Disk { component, center, radius: s.radius });
                }
            }
        }
    }
    let at = |t: f64| pos + v * t;
    let inside_any = |x: Vec2| disks.iter().position(|d| (x - d.center).norm_sq() < d.radius * d.radius);
    let in_block = |x: Vec2| {
        let b = BLOCK as f64;
        x.x >= cx - b && x.x < cx + b + 1.0 && x.y >= cy - b && x.y < cy + b + 1.0
    };
    let mut t = MARCH_STEP;
    while in_block(at(t)) {
        if let Some(k) = inside_any(at(t)) {
            let d = &disks[k];
            let hit_t = bisect(t - MARCH_STEP, t, |s| (at(s) - d.center).norm_sq() < d.radius * d.radius);
            let normal = (at(hit_t) - d.center).normalized();
            let r = (d.radius * normal.angle()).rem_euclid(TAU * d.radius);
            let r = if r >= TAU * d.radius { 0.0 } else { r };
            return Some(OracleHit { outgoing: reflect_chart(table, d.component, r, normal, v), flight_time: hit_t });
        }
        t += MARCH_STEP;
    }
    None
}

fn stadium(table: &BilliardTable, a: f64, big_r: f64, p: &PhasePoint) -> Option<OracleHit> {
    let (pos, v) = table.embed(p).ok()?;
    let inside = |x: Vec2| {
        if x.x.abs() <= a {
            x.y.abs() < big_r
        } else {
            let dx = x.x.abs() - a;
            dx * dx + x.y * x.y < big_r * big_r
        }
    };
    let at = |t: f64| pos + v * t;
    let max_t = 2.0 * (a + big_r) + 1.0;
    let mut t = MARCH_STEP;
    while t < max_t {
        if !inside(at(t)) {
            let hit_t = bisect(t - MARCH_STEP, t, |s| !inside(at(s)));
            let x = at(hit_t);
            let (component, r, normal) = if x.x.abs() <= a {
                if x.y < 0.0 {
                    (0, x.x + a, Vec2::new(0.0, 1.0))
                } else {
                    (2, a - x.x, Vec2::new(0.0, -1.0))
                }
            } else if x.x > 0.0 {
                let u = (x - Vec2::new(a, 0.0)).normalized();
                (1, big_r * (u.angle() + PI / 2.0), -u)
            } else {
                let u = (x - Vec2::new(-a, 0.0)).normalized();
                (3, big_r * (u.angle() - PI / 2.0).rem_euclid(TAU), -u)
            };
            return Some(OracleHit { outgoing: reflect_chart(table, component, r, normal, v), flight_time: hit_t });
        }
        t += MARCH_STEP;
    }
    None
}

/// The image of `p` under the collision map, or `None` if the ray leaves the
/// scanned region (Lorentz tables) or `p` is invalid.
pub fn collision_oracle(table: &BilliardTable, p: &PhasePoint) -> Option<OracleHit> {
    match table.spec() {
        TableSpec::Lorentz { scatterers } => lorentz(table, &scatterers, p),
        TableSpec::Stadium { a, r } => stadium(table, a, r, p),
    }
}

/// Largest coordinate discrepancy between the oracle and the kernel at `p`;
/// `None` when the oracle has no hit, `+inf` when the components differ.
pub fn discrepancy(table: &BilliardTable, p: &PhasePoint) -> Option<f64> {
    let o = collision_oracle(table, p)?;
    let k = match table.billiard_map(p) {
        Ok(k) => k,
        Err(_) => return Some(f64::INFINITY),
    };
    if o.outgoing.component != k.outgoing.component {
        return Some(f64::INFINITY);
    }
    let c = &table.components()[o.outgoing.component];
    let dr = c.arc_distance(o.outgoing.r, k.outgoing.r);
    let dt = (o.outgoing.theta - k.outgoing.theta).abs();
    let df = (o.flight_time - k.flight_time).abs();
    Some(dr.max(dt).max(df))
}
