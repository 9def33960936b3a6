//! Billiard tables and the collision map.
//!
//! Phase space is `M = Γ × [-π/2, π/2]`: a point is a boundary component, an
//! arc-length coordinate `r` on it and the angle `theta` between the outgoing
//! velocity and the normal `n(r)` that points into the billiard domain.
//!
//! Conventions used everywhere in this crate:
//!
//! * `r` increases counterclockwise along each component (around the scatterer
//!   center for Lorentz-gas disks, along the boundary of the domain for stadia);
//! * `theta` is measured from `n(r)` and is positive counterclockwise, so the
//!   velocity is `n(r)` rotated by `theta`;
//! * scatterer circles are periodic in `r`; the four stadium pieces are not.
//!
//! The orbit kernel ([`BilliardTable::step`]) works on ambient coordinates
//! ([`BoundaryState`]) and only converts to chart coordinates on demand.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Collisions with `|cos theta|` below this are treated as tangential.
pub const TANGENCY_TOL: f64 = 1e-12;

/// Relative tolerance on the ray/circle discriminant (`disc / radius²`).
pub const ROOT_TOL: f64 = 1e-26;

/// Default number of torus cells a single free flight may cross.
pub const DEFAULT_UNFOLD_CAP: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid phase point: {0}")]
    InvalidPhasePoint(String),
    #[error("tangential collision (|cos theta| = {0:e})")]
    TangentialCollision(f64),
    #[error("no collision within {0} torus cells")]
    HorizonCapExceeded(u64),
    #[error("ray/boundary discriminant within root tolerance ({0:e})")]
    NumericalDegeneracy(f64),
}

impl GeometryError {
    /// Degenerate events live on a null set; orbit streams restart on them.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            GeometryError::TangentialCollision(_) | GeometryError::NumericalDegeneracy(_)
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableError {
    #[error("scatterer {index}: radius must be positive, got {radius}")]
    NonPositiveRadius { index: usize, radius: f64 },
    #[error("scatterer {index}: center ({x}, {y}) outside the unit cell [0,1)^2")]
    CenterOutsideCell { index: usize, x: f64, y: f64 },
    #[error("scatterers {first} and {second} overlap (torus distance {distance} <= {radii})")]
    Overlap { first: usize, second: usize, distance: f64, radii: f64 },
    #[error("a Lorentz gas needs at least one scatterer")]
    Empty,
    #[error("stadium parameters must be positive, got a = {a}, R = {r}")]
    BadStadium { a: f64, r: f64 },
    #[error("table file: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3d cross product.
    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn normalized(self) -> Vec2 {
        self * (1.0 / self.norm())
    }

    /// Counterclockwise rotation by `angle`.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// A collision coordinate `(component, r, theta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct PhasePoint {
    pub component: usize,
    pub r: f64,
    pub theta: f64,
}

impl PhasePoint {
    pub const fn new(component: usize, r: f64, theta: f64) -> Self {
        Self { component, r, theta }
    }
}

/// Time reversal `(c, r, theta) -> (c, r, -theta)`.
pub fn time_reversal(p: PhasePoint) -> PhasePoint {
    PhasePoint { theta: -p.theta, ..p }
}

/// Specular reflection `v - 2 (v.n) n` of an incoming unit velocity.
pub fn reflect(v: Vec2, n: Vec2) -> Result<Vec2, GeometryError> {
    let vn = v.dot(n);
    if vn.abs() < TANGENCY_TOL {
        return Err(GeometryError::TangentialCollision(vn.abs()));
    }
    Ok(v - n * (2.0 * vn))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Scatterer boundary; the normal points away from the center.
    Circle { center: Vec2, radius: f64 },
    /// Straight wall starting at `start` with unit direction `dir`; the normal is
    /// `dir` rotated by +90 degrees.
    Segment { start: Vec2, dir: Vec2 },
    /// Concave wall on a circle, traversed counterclockwise from `start_angle`;
    /// the normal points towards the center.
    Arc { center: Vec2, radius: f64, start_angle: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub shape: Shape,
    pub length: f64,
    /// Whether `r` wraps around (closed curve).
    pub periodic: bool,
}

impl Component {
    fn frame(&self, r: f64) -> (Vec2, Vec2) {
        match self.shape {
            Shape::Circle { center, radius } => {
                let n = Vec2::from_angle(r / radius);
                (center + n * radius, n)
            }
            Shape::Segment { start, dir } => (start + dir * r, Vec2::new(-dir.y, dir.x)),
            Shape::Arc { center, radius, start_angle } => {
                let u = Vec2::from_angle(start_angle + r / radius);
                (center + u * radius, -u)
            }
        }
    }

    /// Arc-length coordinate of a boundary point given its normal.
    fn arclength(&self, pos: Vec2, normal: Vec2) -> f64 {
        let r = match self.shape {
            Shape::Circle { radius, .. } => {
                let phi = normal.angle();
                let r = radius * phi;
                if r < 0.0 {
                    r + self.length
                } else {
                    r
                }
            }
            Shape::Segment { start, dir } => (pos - start).dot(dir),
            Shape::Arc { radius, start_angle, .. } => {
                let mut a = (-normal).angle() - start_angle;
                a = a.rem_euclid(TAU);
                // points at the very start of the arc may land just below 2π
                if a > TAU - 1e-9 {
                    a -= TAU;
                }
                radius * a
            }
        };
        if self.periodic {
            if r >= self.length {
                r - self.length
            } else {
                r
            }
        } else {
            r.clamp(0.0, self.length)
        }
    }

    /// Largest ball radius that keeps a chart ball around `r` inside this component.
    pub fn injectivity_radius(&self, r: f64) -> f64 {
        if self.periodic {
            0.5 * self.length
        } else {
            r.min(self.length - r).max(0.0)
        }
    }

    /// Arc-length separation, wrapping on periodic components.
    pub fn arc_distance(&self, r1: f64, r2: f64) -> f64 {
        let d = (r1 - r2).abs();
        if self.periodic {
            let d = d % self.length;
            d.min(self.length - d)
        } else {
            d
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    LorentzGas,
    Stadium,
}

/// JSON description of a table, as read from table files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TableSpec {
    Lorentz { scatterers: Vec<ScattererSpec> },
    Stadium {
        a: f64,
        #[serde(rename = "R")]
        r: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ScattererSpec {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// A scatterer copy that may intersect the unit cell, in unit-cell coordinates.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    component: usize,
    center: Vec2,
    /// Integer translate from the base scatterer center to this copy.
    offset: Vec2,
    radius: f64,
}

#[derive(Clone, Debug)]
enum Layout {
    Lorentz { scatterers: Vec<Scatterer>, candidates: Vec<Candidate> },
    Stadium { a: f64, r: f64 },
}

/// Immutable description of a billiard table.
#[derive(Clone, Debug)]
pub struct BilliardTable {
    layout: Layout,
    components: Vec<Component>,
    total_length: f64,
    unfold_cap: u64,
}

/// Ambient state right after a collision: boundary point, outgoing velocity and
/// the normal at the collision point.
///
/// For Lorentz gases `pos` is expressed relative to the base copy of the
/// scatterer (so it may lie slightly outside the unit cell).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryState {
    pub component: usize,
    pub pos: Vec2,
    pub vel: Vec2,
    pub normal: Vec2,
}

/// Result of a free flight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub component: usize,
    /// Collision point, folded back onto the base copy of the component.
    pub point: Vec2,
    /// Normal at the collision point, pointing into the billiard domain.
    pub normal: Vec2,
    pub flight_time: f64,
    /// Torus cells crossed during the flight (0 for stadia).
    pub unfold_cells: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionEvent {
    pub outgoing: PhasePoint,
    pub flight_time: f64,
    pub unfold_cells: u64,
}

impl BilliardTable {
    pub fn lorentz(scatterers: Vec<Scatterer>) -> Result<Self, TableError> {
        if scatterers.is_empty() {
            return Err(TableError::Empty);
        }
        for (index, s) in scatterers.iter().enumerate() {
            if !(s.radius > 0.0) || !s.radius.is_finite() {
                return Err(TableError::NonPositiveRadius { index, radius: s.radius });
            }
            let inside = |v: f64| (0.0..1.0).contains(&v);
            if !inside(s.center.x) || !inside(s.center.y) {
                return Err(TableError::CenterOutsideCell {
                    index,
                    x: s.center.x,
                    y: s.center.y,
                });
            }
        }
        for i in 0..scatterers.len() {
            for j in i..scatterers.len() {
                let (a, b) = (scatterers[i], scatterers[j]);
                let radii = a.radius + b.radius;
                let mut distance = f64::INFINITY;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        if i == j && dx == 0 && dy == 0 {
                            continue;
                        }
                        let d = (a.center - b.center - Vec2::new(dx as f64, dy as f64)).norm();
                        distance = distance.min(d);
                    }
                }
                if distance <= radii {
                    return Err(TableError::Overlap { first: i, second: j, distance, radii });
                }
            }
        }

        let components: Vec<Component> = scatterers
            .iter()
            .map(|s| Component {
                shape: Shape::Circle { center: s.center, radius: s.radius },
                length: TAU * s.radius,
                periodic: true,
            })
            .collect();

        let mut candidates = Vec::new();
        for (component, s) in scatterers.iter().enumerate() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let offset = Vec2::new(dx as f64, dy as f64);
                    let c = s.center + offset;
                    // closest point of the closed unit square to the copy center
                    let q = Vec2::new(c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0));
                    if (q - c).norm() <= s.radius {
                        candidates.push(Candidate { component, center: c, offset, radius: s.radius });
                    }
                }
            }
        }

        let total_length = components.iter().map(|c| c.length).sum();
        Ok(Self {
            layout: Layout::Lorentz { scatterers, candidates },
            components,
            total_length,
            unfold_cap: DEFAULT_UNFOLD_CAP,
        })
    }

    /// Bunimovich stadium: straight half-length `a`, cap radius `r`, centered at
    /// the origin. Components: bottom segment, right arc, top segment, left arc.
    pub fn stadium(a: f64, r: f64) -> Result<Self, TableError> {
        if !(a > 0.0 && r > 0.0) || !a.is_finite() || !r.is_finite() {
            return Err(TableError::BadStadium { a, r });
        }
        let components = vec![
            Component {
                shape: Shape::Segment { start: Vec2::new(-a, -r), dir: Vec2::new(1.0, 0.0) },
                length: 2.0 * a,
                periodic: false,
            },
            Component {
                shape: Shape::Arc { center: Vec2::new(a, 0.0), radius: r, start_angle: -FRAC_PI_2 },
                length: PI * r,
                periodic: false,
            },
            Component {
                shape: Shape::Segment { start: Vec2::new(a, r), dir: Vec2::new(-1.0, 0.0) },
                length: 2.0 * a,
                periodic: false,
            },
            Component {
                shape: Shape::Arc { center: Vec2::new(-a, 0.0), radius: r, start_angle: FRAC_PI_2 },
                length: PI * r,
                periodic: false,
            },
        ];
        let total_length = components.iter().map(|c| c.length).sum();
        Ok(Self { layout: Layout::Stadium { a, r }, components, total_length, unfold_cap: DEFAULT_UNFOLD_CAP })
    }

    pub fn from_spec(spec: &TableSpec) -> Result<Self, TableError> {
        match spec {
            TableSpec::Lorentz { scatterers } => Self::lorentz(
                scatterers
                    .iter()
                    .map(|s| Scatterer { center: Vec2::new(s.cx, s.cy), radius: s.radius })
                    .collect(),
            ),
            TableSpec::Stadium { a, r } => Self::stadium(*a, *r),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TableError> {
        let spec: TableSpec = serde_json::from_str(text).map_err(|e| TableError::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn spec(&self) -> TableSpec {
        match &self.layout {
            Layout::Lorentz { scatterers, .. } => TableSpec::Lorentz {
                scatterers: scatterers
                    .iter()
                    .map(|s| ScattererSpec { cx: s.center.x, cy: s.center.y, radius: s.radius })
                    .collect(),
            },
            Layout::Stadium { a, r } => TableSpec::Stadium { a: *a, r: *r },
        }
    }

    pub fn with_unfold_cap(mut self, cap: u64) -> Self {
        self.unfold_cap = cap;
        self
    }

    pub fn unfold_cap(&self) -> u64 {
        self.unfold_cap
    }

    pub fn kind(&self) -> TableKind {
        match self.layout {
            Layout::Lorentz { .. } => TableKind::LorentzGas,
            Layout::Stadium { .. } => TableKind::Stadium,
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, id: usize) -> Option<&Component> {
        self.components.get(id)
    }

    /// `|Γ|`, the total boundary length.
    pub fn total_boundary_length(&self) -> f64 {
        self.total_length
    }

    pub fn scatterers(&self) -> &[Scatterer] {
        match &self.layout {
            Layout::Lorentz { scatterers, .. } => scatterers,
            Layout::Stadium { .. } => &[],
        }
    }

    /// Ids of the two semicircular caps of a stadium (empty for Lorentz gases).
    pub fn stadium_arcs(&self) -> Vec<usize> {
        match self.layout {
            Layout::Stadium { .. } => vec![1, 3],
            Layout::Lorentz { .. } => Vec::new(),
        }
    }

    pub fn validate_point(&self, p: &PhasePoint) -> Result<&Component, GeometryError> {
        let c = self.components.get(p.component).ok_or_else(|| {
            GeometryError::InvalidPhasePoint(format!("no component {}", p.component))
        })?;
        if !(p.r >= 0.0 && p.r < c.length) {
            return Err(GeometryError::InvalidPhasePoint(format!(
                "r = {} outside [0, {})",
                p.r, c.length
            )));
        }
        if !(p.theta >= -FRAC_PI_2 && p.theta <= FRAC_PI_2) {
            return Err(GeometryError::InvalidPhasePoint(format!(
                "theta = {} outside [-pi/2, pi/2]",
                p.theta
            )));
        }
        Ok(c)
    }

    /// Boundary point and unit velocity of a phase point.
    pub fn embed(&self, p: &PhasePoint) -> Result<(Vec2, Vec2), GeometryError> {
        let s = self.state_of(p)?;
        Ok((s.pos, s.vel))
    }

    pub fn state_of(&self, p: &PhasePoint) -> Result<BoundaryState, GeometryError> {
        let c = self.validate_point(p)?;
        let (pos, normal) = c.frame(p.r);
        Ok(BoundaryState { component: p.component, pos, vel: normal.rotate(p.theta), normal })
    }

    /// Chart coordinates of a post-collision state.
    pub fn chart(&self, s: &BoundaryState) -> PhasePoint {
        let c = &self.components[s.component];
        let r = c.arclength(s.pos, s.normal);
        let theta = s.normal.cross(s.vel).atan2(s.normal.dot(s.vel)).clamp(-FRAC_PI_2, FRAC_PI_2);
        PhasePoint { component: s.component, r, theta }
    }

    /// Outgoing angle of a state without computing `r`.
    #[inline]
    pub fn theta_of(&self, s: &BoundaryState) -> f64 {
        s.normal.cross(s.vel).atan2(s.normal.dot(s.vel)).clamp(-FRAC_PI_2, FRAC_PI_2)
    }

    /// First boundary point hit by the ray `position + t velocity`, `t > 0`.
    pub fn next_collision(&self, position: Vec2, velocity: Vec2) -> Result<Hit, GeometryError> {
        match &self.layout {
            Layout::Lorentz { scatterers, candidates } => {
                self.lorentz_flight(scatterers, candidates, position, velocity)
            }
            Layout::Stadium { a, r } => stadium_flight(*a, *r, position, velocity),
        }
    }

    fn lorentz_flight(
        &self,
        scatterers: &[Scatterer],
        candidates: &[Candidate],
        position: Vec2,
        v: Vec2,
    ) -> Result<Hit, GeometryError> {
        let cell0 = Vec2::new(position.x.floor(), position.y.floor());
        let local = position - cell0;

        let (step_x, mut t_max_x, t_delta_x) = axis_setup(local.x, v.x);
        let (step_y, mut t_max_y, t_delta_y) = axis_setup(local.y, v.y);
        let (mut ix, mut iy) = (0.0f64, 0.0f64);
        let mut cells = 0u64;

        let mut best_t = f64::INFINITY;
        let mut best: Option<(usize, Vec2)> = None;
        let mut degenerate_t = f64::INFINITY;
        let mut degenerate_disc = 0.0;

        loop {
            let shift = Vec2::new(ix, iy);
            for cand in candidates {
                let w = local - (cand.center + shift);
                let b = w.dot(v);
                if b >= 0.0 {
                    continue;
                }
                let r2 = cand.radius * cand.radius;
                let disc = b * b - (w.norm_sq() - r2);
                if disc.abs() <= ROOT_TOL * r2 {
                    if -b < degenerate_t {
                        degenerate_t = -b;
                        degenerate_disc = disc;
                    }
                    continue;
                }
                if disc < 0.0 {
                    continue;
                }
                let t = -b - disc.sqrt();
                if t > 0.0 && t < best_t {
                    best_t = t;
                    best = Some((cand.component, cand.offset + shift));
                }
            }
            let t_exit = t_max_x.min(t_max_y);
            if best_t.min(degenerate_t) <= t_exit {
                break;
            }
            if t_max_x < t_max_y {
                ix += step_x;
                t_max_x += t_delta_x;
            } else {
                iy += step_y;
                t_max_y += t_delta_y;
            }
            cells += 1;
            if cells > self.unfold_cap {
                return Err(GeometryError::HorizonCapExceeded(self.unfold_cap));
            }
        }

        if degenerate_t <= best_t {
            return Err(GeometryError::NumericalDegeneracy(degenerate_disc));
        }
        let (component, offset) = best.expect("loop exits only with a hit");
        let s = scatterers[component];
        // w relative to the hit copy's center, in local coordinates
        let w = local + v * best_t - (s.center + offset);
        let normal = w.normalized();
        Ok(Hit {
            component,
            point: s.center + normal * s.radius,
            normal,
            flight_time: best_t,
            unfold_cells: cells,
        })
    }

    /// One application of the collision map on ambient states.
    #[inline]
    pub fn step(&self, s: &BoundaryState) -> Result<(BoundaryState, Hit), GeometryError> {
        let hit = self.next_collision(s.pos, s.vel)?;
        let vn = s.vel.dot(hit.normal);
        if vn.abs() < TANGENCY_TOL {
            return Err(GeometryError::TangentialCollision(vn.abs()));
        }
        let mut vel = s.vel - hit.normal * (2.0 * vn);
        let speed_sq = vel.norm_sq();
        debug_assert!((speed_sq.sqrt() - 1.0).abs() < 1e-12, "speed drift {}", speed_sq.sqrt());
        if (speed_sq - 1.0).abs() > 1e-14 {
            vel = vel * (1.0 / speed_sq.sqrt());
        }
        Ok((BoundaryState { component: hit.component, pos: hit.point, vel, normal: hit.normal }, hit))
    }

    /// The billiard map `T(r, theta) = (r1, theta1)`.
    pub fn billiard_map(&self, p: &PhasePoint) -> Result<CollisionEvent, GeometryError> {
        if p.theta.cos().abs() < TANGENCY_TOL {
            self.validate_point(p)?;
            return Err(GeometryError::TangentialCollision(p.theta.cos().abs()));
        }
        let s = self.state_of(p)?;
        let (next, hit) = self.step(&s)?;
        Ok(CollisionEvent { outgoing: self.chart(&next), flight_time: hit.flight_time, unfold_cells: hit.unfold_cells })
    }

    /// Euclidean distance in chart coordinates; `+inf` across components.
    pub fn phase_distance(&self, p1: &PhasePoint, p2: &PhasePoint) -> f64 {
        if p1.component != p2.component {
            return f64::INFINITY;
        }
        let dr = self.components[p1.component].arc_distance(p1.r, p2.r);
        let dt = p1.theta - p2.theta;
        (dr * dr + dt * dt).sqrt()
    }
}

fn axis_setup(local: f64, v: f64) -> (f64, f64, f64) {
    if v > 0.0 {
        (1.0, (1.0 - local) / v, 1.0 / v)
    } else if v < 0.0 {
        (-1.0, local / -v, -1.0 / v)
    } else {
        (0.0, f64::INFINITY, f64::INFINITY)
    }
}

fn stadium_flight(a: f64, rad: f64, p: Vec2, v: Vec2) -> Result<Hit, GeometryError> {
    // The stadium is convex, so the first admissible boundary point is the only one.
    if v.y != 0.0 {
        let (wall_y, component, normal) =
            if v.y < 0.0 { (-rad, 0, Vec2::new(0.0, 1.0)) } else { (rad, 2, Vec2::new(0.0, -1.0)) };
        let t = (wall_y - p.y) / v.y;
        let x = p.x + t * v.x;
        if t > 0.0 && (-a..=a).contains(&x) {
            return Ok(Hit { component, point: Vec2::new(x, wall_y), normal, flight_time: t, unfold_cells: 0 });
        }
    }

    let r2 = rad * rad;
    for (component, cx) in [(1usize, a), (3usize, -a)] {
        // a ray that starts on the far side of x = cx and moves away cannot reach this cap
        if (component == 1 && p.x <= a && v.x <= 0.0) || (component == 3 && p.x >= -a && v.x >= 0.0) {
            continue;
        }
        let w = Vec2::new(p.x - cx, p.y);
        let b = w.dot(v);
        let disc = b * b - (w.norm_sq() - r2);
        if disc.abs() <= ROOT_TOL * r2 {
            // only a problem if the grazing point is actually on the cap
            let x = p.x - b * v.x;
            if (component == 1 && x >= a) || (component == 3 && x <= -a) {
                return Err(GeometryError::NumericalDegeneracy(disc));
            }
            continue;
        }
        if disc < 0.0 {
            continue;
        }
        let t = -b + disc.sqrt();
        let hit = p + v * t;
        let on_cap = if component == 1 { hit.x >= a } else { hit.x <= -a };
        if on_cap && t > 0.0 {
            let normal = (Vec2::new(cx, 0.0) - hit) * (1.0 / rad);
            return Ok(Hit {
                component,
                point: Vec2::new(cx, 0.0) - normal * rad,
                normal,
                flight_time: t,
                unfold_cells: 0,
            });
        }
    }

    // only reachable from points outside the table
    Err(GeometryError::InvalidPhasePoint(format!("ray from {p} leaves the stadium")))
}
