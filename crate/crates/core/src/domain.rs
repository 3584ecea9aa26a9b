//! Value types shared by every stage: the horizontal domain, the dual
//! measure, weights, quadrature resolution and the run configuration.
//!
//! Everything here is dimensionless and immutable once constructed.

use serde::{Deserialize, Serialize};

use crate::dynamics::AnalyticInitialData;
use crate::error::{Error, Result};
use crate::solver::{InitMode, SolverMethod};

pub type Vec3 = [f64; 3];

/// Relative tolerance on the total mass of a cloud.
pub const MASS_SUM_TOL: f64 = 1e-12;

/// Default merge radius as a fraction of the domain diameter.
pub const MERGE_REL_TOL: f64 = 1e-9;

#[inline]
pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn dist3(a: &Vec3, b: &Vec3) -> f64 {
    norm3(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// The rotation `J(v) = (-v2, v1, 0)`.
#[inline]
pub fn rot_j(v: &Vec3) -> Vec3 {
    [-v[1], v[0], 0.0]
}

/// `q(x1, x2) = (x1^2 + x2^2) / 2`, the quadratic the potential is compared
/// against on the free surface.
#[inline]
pub fn half_sq(x1: f64, x2: f64) -> f64 {
    0.5 * (x1 * x1 + x2 * x2)
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
    area: f64,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::TooFewVertices(n));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polygon"));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0.0 {
                return Err(Error::NonConvexPolygon((i + 1) % n));
            }
        }
        let area = 0.5
            * (0..n)
                .map(|i| {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    a[0] * b[1] - a[1] * b[0]
                })
                .sum::<f64>();
        if area <= 0.0 {
            return Err(Error::DegeneratePolygon(area));
        }
        // a convex ccw polygon with positive turns can still wind twice
        let turning: f64 = (0..n)
            .map(|i| {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                let c = vertices[(i + 2) % n];
                let e1 = (b[0] - a[0], b[1] - a[1]);
                let e2 = (c[0] - b[0], c[1] - b[1]);
                (e1.0 * e2.1 - e1.1 * e2.0).atan2(e1.0 * e2.0 + e1.1 * e2.1)
            })
            .sum();
        if (turning - std::f64::consts::TAU).abs() > 1e-6 {
            return Err(Error::NonConvexPolygon(0));
        }
        Ok(Self { vertices, area })
    }

    pub fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn unit_square() -> Self {
        Self::rectangle(0.0, 1.0, 0.0, 1.0).expect("unit square is convex")
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    /// Closed membership test; points on an edge count as inside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        let scale = self.diameter().max(1.0);
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            cross >= -1e-12 * scale * len
        })
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// `max |x|` over the polygon, attained at a vertex.
    pub fn max_abs(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.vertices {
            for b in &self.vertices {
                d = d.max((a[0] - b[0]).hypot(a[1] - b[1]));
            }
        }
        d
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainInput {
    omega2_polygon: Vec<[f64; 2]>,
    delta: f64,
    cap_height: f64,
    horizontal_radius: f64,
}

/// Horizontal region, slab and cap. The derived quantities are filled in at
/// construction and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainInput", into = "DomainInput")]
pub struct DomainSpec {
    polygon: ConvexPolygon,
    delta: f64,
    cap_height: f64,
    horizontal_radius: f64,
    area: f64,
    max_abs_x: f64,
    diam: f64,
}

impl TryFrom<DomainInput> for DomainSpec {
    type Error = Error;

    fn try_from(raw: DomainInput) -> Result<Self> {
        DomainSpec::new(
            ConvexPolygon::new(raw.omega2_polygon)?,
            raw.delta,
            raw.cap_height,
            raw.horizontal_radius,
        )
    }
}

impl From<DomainSpec> for DomainInput {
    fn from(d: DomainSpec) -> Self {
        DomainInput {
            omega2_polygon: d.polygon.vertices,
            delta: d.delta,
            cap_height: d.cap_height,
            horizontal_radius: d.horizontal_radius,
        }
    }
}

impl DomainSpec {
    pub fn new(
        polygon: ConvexPolygon,
        delta: f64,
        cap_height: f64,
        horizontal_radius: f64,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidSlab(delta));
        }
        if !cap_height.is_finite() || !horizontal_radius.is_finite() {
            return Err(Error::NonFinite("domain"));
        }
        let area = polygon.area();
        let max_abs_x = polygon.max_abs();
        let diam = polygon.diameter();
        if horizontal_radius < max_abs_x {
            return Err(Error::RadiusTooSmall {
                radius: horizontal_radius,
                max_abs_x,
            });
        }
        let threshold = cap_threshold(area, max_abs_x, horizontal_radius, delta, diam);
        if !(cap_height > threshold) {
            return Err(Error::CapTooLow {
                cap: cap_height,
                threshold,
            });
        }
        Ok(Self {
            polygon,
            delta,
            cap_height,
            horizontal_radius,
            area,
            max_abs_x,
            diam,
        })
    }

    pub fn polygon(&self) -> &ConvexPolygon {
        &self.polygon
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn cap_height(&self) -> f64 {
        self.cap_height
    }
    pub fn horizontal_radius(&self) -> f64 {
        self.horizontal_radius
    }
    pub fn area(&self) -> f64 {
        self.area
    }
    pub fn max_abs_x(&self) -> f64 {
        self.max_abs_x
    }
    pub fn diam(&self) -> f64 {
        self.diam
    }

    /// Slab `[-1/delta, -delta]` for the third dual coordinate.
    pub fn slab(&self) -> (f64, f64) {
        (-1.0 / self.delta, -self.delta)
    }

    /// Lower bound the cap must strictly exceed.
    pub fn cap_threshold(&self) -> f64 {
        cap_threshold(
            self.area,
            self.max_abs_x,
            self.horizontal_radius,
            self.delta,
            self.diam,
        )
    }

    pub fn with_cap_height(&self, cap_height: f64) -> Result<Self> {
        Self::new(
            self.polygon.clone(),
            self.delta,
            cap_height,
            self.horizontal_radius,
        )
    }
}

/// `2/|Omega2| + (2 max|x| + S)/delta * diam`, where `S = 2D` bounds
/// `|y1| + |y2|` over the disc of radius `D`.
pub fn cap_threshold(area: f64, max_abs_x: f64, radius: f64, delta: f64, diam: f64) -> f64 {
    2.0 / area + (2.0 * max_abs_x + 2.0 * radius) / delta * diam
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudInput {
    points: Vec<Vec3>,
    masses: Vec<f64>,
}

/// Weighted atoms `y_i` of the dual measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CloudInput")]
pub struct DiracCloud {
    points: Vec<Vec3>,
    masses: Vec<f64>,
}

impl TryFrom<CloudInput> for DiracCloud {
    type Error = Error;
    fn try_from(raw: CloudInput) -> Result<Self> {
        DiracCloud::new(raw.points, raw.masses)
    }
}

impl DiracCloud {
    /// Checks finiteness, positivity and normalization. Slab and radius
    /// membership depend on the domain; see [`DiracCloud::check_support`].
    pub fn new(points: Vec<Vec3>, masses: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.len() != masses.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                found: masses.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("points"));
        }
        for (index, &mass) in masses.iter().enumerate() {
            if !(mass > 0.0) || !mass.is_finite() {
                return Err(Error::NonPositiveMass { index, mass });
            }
        }
        let sum: f64 = masses.iter().sum();
        if (sum - 1.0).abs() > MASS_SUM_TOL {
            return Err(Error::MassNormalization(sum));
        }
        Ok(Self { points, masses })
    }

    /// Uniform masses `1/N`.
    pub fn uniform(points: Vec<Vec3>) -> Result<Self> {
        let n = points.len();
        let masses = vec![1.0 / n as f64; n];
        Self::new(points, masses)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Same masses, new positions.
    pub fn with_points(&self, points: Vec<Vec3>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::LengthMismatch {
                expected: self.points.len(),
                found: points.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("points"));
        }
        Ok(Self {
            points,
            masses: self.masses.clone(),
        })
    }

    pub fn check_support(&self, domain: &DomainSpec) -> Result<()> {
        let (lo, hi) = domain.slab();
        for (index, y) in self.points.iter().enumerate() {
            if y[2] < lo || y[2] > hi {
                return Err(Error::SlabViolation {
                    index,
                    y3: y[2],
                    lo,
                    hi,
                });
            }
            let radius = y[0].hypot(y[1]);
            if radius > domain.horizontal_radius() {
                return Err(Error::RadiusViolation {
                    index,
                    radius,
                    limit: domain.horizontal_radius(),
                });
            }
        }
        Ok(())
    }

    /// Largest horizontal radius `|(y1, y2)|`.
    pub fn support_radius(&self) -> f64 {
        self.points
            .iter()
            .map(|y| y[0].hypot(y[1]))
            .fold(0.0, f64::max)
    }

    /// `max_i (|y_i1| + |y_i2|)`.
    pub fn max_horizontal_l1(&self) -> f64 {
        self.points
            .iter()
            .map(|y| y[0].abs() + y[1].abs())
            .fold(0.0, f64::max)
    }

    /// Second moment `sum nu_i |y_i|^2`.
    pub fn second_moment(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .map(|(y, m)| m * dot3(y, y))
            .sum()
    }

    /// Merges atoms closer than `eps` (single linkage), summing masses and
    /// placing the merged atom at the mass-weighted mean. Index order of the
    /// surviving atoms follows their first member.
    pub fn merge_coincident(&self, eps: f64) -> DiracCloud {
        let n = self.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if dist3(&self.points[i], &self.points[j]) <= eps {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi] = lo;
                    }
                }
            }
        }
        let mut slot = vec![usize::MAX; n];
        let mut points: Vec<Vec3> = Vec::new();
        let mut masses: Vec<f64> = Vec::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = points.len();
                points.push([0.0; 3]);
                masses.push(0.0);
            }
            let s = slot[r];
            let m = self.masses[i];
            for k in 0..3 {
                points[s][k] += m * self.points[i][k];
            }
            masses[s] += m;
        }
        if points.len() == n {
            return self.clone();
        }
        for (p, m) in points.iter_mut().zip(&masses) {
            for v in p.iter_mut() {
                *v /= m;
            }
        }
        DiracCloud { points, masses }
    }
}

/// Dual potentials `R_i`, aligned with a cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>, cloud: &DiracCloud) -> Result<Self> {
        if weights.len() != cloud.len() {
            return Err(Error::LengthMismatch {
                expected: cloud.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(Self(weights))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// `R_i = (y_i1^2 + y_i2^2)/2`.
    pub fn quadratic(cloud: &DiracCloud) -> Self {
        Self(cloud.points().iter().map(|y| half_sq(y[0], y[1])).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureRule {
    /// 2x2 Gauss-Legendre nodes per grid cell.
    #[default]
    Gauss2,
    /// One node at each grid cell midpoint.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    pub columns_per_axis: usize,
    #[serde(default)]
    pub rule: QuadratureRule,
}

impl QuadratureSpec {
    pub const MIN_COLUMNS: usize = 8;

    pub fn new(columns_per_axis: usize) -> Result<Self> {
        let q = Self {
            columns_per_axis,
            rule: QuadratureRule::default(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_rule(mut self, rule: QuadratureRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns_per_axis < Self::MIN_COLUMNS {
            return Err(Error::InvalidConfig(format!(
                "quadrature.columns_per_axis = {} must be at least {}",
                self.columns_per_axis,
                Self::MIN_COLUMNS
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Explicit(DiracCloud),
    Analytic(AnalyticInitialData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            stride: 1,
        }
    }
}

fn default_stride() -> usize {
    1
}

/// Particle reconstruction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            particles: default_particles(),
            seed: 0,
            histogram_bins: default_bins(),
        }
    }
}

fn default_particles() -> usize {
    1000
}
fn default_bins() -> usize {
    8
}

fn default_max_iter() -> usize {
    5000
}

fn default_tol() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub domain: DomainSpec,
    pub initial: InitialCondition,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_max_iter")]
    pub solver_max_iter: usize,
    #[serde(default)]
    pub solver_init: InitMode,
    #[serde(default)]
    pub solver_method: SolverMethod,
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub trace: TraceSpec,
    #[serde(default)]
    pub stop_at_equilibrium: bool,
}

/// Checks every cross-field invariant of a parsed configuration. Applying it
/// to an already validated config returns an equal config.
pub fn validate_config(cfg: SimConfig) -> Result<SimConfig> {
    let d = &cfg.domain;
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "dt = {} must be positive",
            cfg.dt
        )));
    }
    if !(cfg.solver_tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "solver_tol = {} must be positive",
            cfg.solver_tol
        )));
    }
    if cfg.solver_max_iter == 0 {
        return Err(Error::InvalidConfig(
            "solver_max_iter must be positive".into(),
        ));
    }
    if cfg.output.stride == 0 {
        return Err(Error::InvalidConfig(
            "output.stride must be positive".into(),
        ));
    }
    cfg.quadrature.validate()?;
    // |w| = |y_h - c_h| <= D + max|x|
    let speed_bound = d.horizontal_radius() + d.max_abs_x();
    if cfg.dt * speed_bound > 0.5 * d.diam() {
        return Err(Error::InvalidConfig(format!(
            "dt = {} violates the sanity bound dt * (D + max|x|) <= diam/2 = {}",
            cfg.dt,
            0.5 * d.diam()
        )));
    }
    match &cfg.initial {
        InitialCondition::Explicit(cloud) => cloud.check_support(d)?,
        InitialCondition::Analytic(data) => data.validate(d)?,
    }
    Ok(cfg)
}
