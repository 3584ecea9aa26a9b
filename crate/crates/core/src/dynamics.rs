//! Time marching of the dual measure. Each atom moves with the rotated
//! displacement to its cell centroid, `w_i = J(y_i - c_i)`, and the dual
//! problem is re-solved at the new positions.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    half_sq, rot_j, validate_config, DiracCloud, DomainSpec, InitialCondition, QuadratureSpec,
    Scheme, SimConfig, Vec3, WeightVector, MERGE_REL_TOL,
};
use crate::error::{Error, Result};
use crate::geometry::{
    decompose, height_l2_sq_bound, height_sup_bound, lipschitz_h_check, CellStats, QuadratureGrid,
};
use crate::solver::{solve_converged, Solution, SolveReport, SolverSettings};

/// Velocities at or below this are treated as a relative equilibrium.
pub const EQUILIBRIUM_SPEED: f64 = 1e-10;

/// Quadrature resolution used to normalize analytic initial data.
const ANALYTIC_COLUMNS: usize = 256;

/// Convex quadratic initial potential
/// `P0(x) = alpha x1^2/2 + beta x2^2/2 + gamma . (x1, x2) + b3 x3 + c`,
/// with `c` fixed so that the free surface encloses unit volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticInitialData {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub gamma: [f64; 2],
    pub b3: f64,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AnalyticInitialData {
    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        let vals = [self.alpha, self.beta, self.gamma[0], self.gamma[1], self.b3];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("analytic initial data"));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "analytic data needs alpha, beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        let (lo, hi) = domain.slab();
        if self.b3 < lo || self.b3 > hi {
            return Err(Error::SlabViolation {
                index: 0,
                y3: self.b3,
                lo,
                hi,
            });
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig(
                "analytic data needs samples >= 1".into(),
            ));
        }
        // the horizontal gradient is affine, so its largest norm sits at a vertex
        for v in domain.polygon().vertices() {
            let y = self.gradient(&[v[0], v[1], 0.0]);
            let radius = y[0].hypot(y[1]);
            if radius > domain.horizontal_radius() {
                return Err(Error::RadiusViolation {
                    index: 0,
                    radius,
                    limit: domain.horizontal_radius(),
                });
            }
        }
        Ok(())
    }

    /// `grad P0`; independent of `c`.
    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        [
            self.alpha * x[0] + self.gamma[0],
            self.beta * x[1] + self.gamma[1],
            self.b3,
        ]
    }

    /// Resolves the additive constant and the height maximum.
    pub fn profile(&self, domain: &DomainSpec) -> Result<AnalyticProfile> {
        self.validate(domain)?;
        let grid = QuadratureGrid::new(domain, &QuadratureSpec::new(ANALYTIC_COLUMNS)?)?;
        let mut prof = AnalyticProfile {
            data: self.clone(),
            constant: 0.0,
            max_height: 0.0,
        };
        let volume = |p: &AnalyticProfile| -> f64 {
            grid.nodes()
                .iter()
                .map(|n| n.weight * p.height(n.x[0], n.x[1]))
                .sum()
        };
        // volume is nondecreasing in c; bracket then bisect
        let (mut lo, mut hi) = (-1.0, 1.0);
        loop {
            prof.constant = lo;
            if volume(&prof) < 1.0 {
                break;
            }
            lo *= 2.0;
        }
        loop {
            prof.constant = hi;
            if volume(&prof) > 1.0 {
                break;
            }
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::InvalidConfig(
                    "analytic data cannot enclose unit volume".into(),
                ));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            prof.constant = mid;
            if volume(&prof) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        prof.constant = 0.5 * (lo + hi);
        prof.max_height = prof.height_max_over(domain);
        if !(prof.max_height > 0.0) {
            return Err(Error::InvalidConfig(
                "analytic data gives an empty fluid region".into(),
            ));
        }
        Ok(prof)
    }
}

/// Normalized analytic data.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticProfile {
    pub data: AnalyticInitialData,
    pub constant: f64,
    pub max_height: f64,
}

impl AnalyticProfile {
    pub fn potential(&self, x: &Vec3) -> f64 {
        let d = &self.data;
        0.5 * d.alpha * x[0] * x[0]
            + 0.5 * d.beta * x[1] * x[1]
            + d.gamma[0] * x[0]
            + d.gamma[1] * x[1]
            + d.b3 * x[2]
            + self.constant
    }

    /// `P0(x1, x2, 0) - q(x1, x2)`
    fn surface_excess(&self, x1: f64, x2: f64) -> f64 {
        self.potential(&[x1, x2, 0.0]) - half_sq(x1, x2)
    }

    /// `h0 = max(0, (P0(x1, x2, 0) - q) / -b3)`.
    pub fn height(&self, x1: f64, x2: f64) -> f64 {
        (self.surface_excess(x1, x2) / -self.data.b3).max(0.0)
    }

    /// Exact maximum of `h0` over the polygon: the excess is a separable
    /// quadratic, so the maximum is at a vertex, an edge critical point or
    /// the interior critical point.
    fn height_max_over(&self, domain: &DomainSpec) -> f64 {
        let d = &self.data;
        let (ca, cb) = (d.alpha - 1.0, d.beta - 1.0);
        let poly = domain.polygon();
        let vs = poly.vertices();
        let mut best = f64::NEG_INFINITY;
        let mut consider = |x1: f64, x2: f64| best = best.max(self.surface_excess(x1, x2));
        for (k, a) in vs.iter().enumerate() {
            consider(a[0], a[1]);
            let b = vs[(k + 1) % vs.len()];
            let e = [b[0] - a[0], b[1] - a[1]];
            // f(a + t e) = A t^2 + B t + const
            let aa = 0.5 * (ca * e[0] * e[0] + cb * e[1] * e[1]);
            let bb = ca * a[0] * e[0] + cb * a[1] * e[1] + d.gamma[0] * e[0] + d.gamma[1] * e[1];
            if aa < 0.0 {
                let t = -bb / (2.0 * aa);
                if t > 0.0 && t < 1.0 {
                    consider(a[0] + t * e[0], a[1] + t * e[1]);
                }
            }
        }
        if ca < 0.0 && cb < 0.0 {
            let c = [-d.gamma[0] / ca, -d.gamma[1] / cb];
            if poly.contains(c) {
                consider(c[0], c[1]);
            }
        }
        (best / -d.b3).max(0.0)
    }

    /// Uniform points in the initial fluid region by rejection.
    pub fn sample_fluid(
        &self,
        domain: &DomainSpec,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec3>> {
        let (lo, hi) = domain.polygon().bounding_box();
        let budget = count.saturating_mul(10_000).max(100_000);
        let mut out = Vec::with_capacity(count);
        let mut draws = 0usize;
        while out.len() < count {
            if draws >= budget {
                return Err(Error::RejectionFailed(draws));
            }
            draws += 1;
            let x1 = rng.gen_range(lo[0]..hi[0]);
            let x2 = rng.gen_range(lo[1]..hi[1]);
            let x3 = rng.gen_range(0.0..self.max_height);
            if domain.polygon().contains([x1, x2]) && x3 < self.height(x1, x2) {
                out.push([x1, x2, x3]);
            }
        }
        Ok(out)
    }
}

/// Samples `y_p = grad P0(x_p)` for `x_p` uniform in the initial fluid
/// region, each with mass `1/N`.
pub fn sample_initial_cloud(data: &AnalyticInitialData, domain: &DomainSpec) -> Result<DiracCloud> {
    let prof = data.profile(domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    let xs = prof.sample_fluid(domain, data.samples, &mut rng)?;
    DiracCloud::uniform(xs.iter().map(|x| data.gradient(x)).collect())
}

/// `w_i = J(y_i - c_i)`; fails on an empty cell.
pub fn velocity_field(cloud: &DiracCloud, stats: &CellStats) -> Result<Vec<Vec3>> {
    cloud
        .points()
        .iter()
        .zip(&stats.cells)
        .enumerate()
        .map(|(i, (y, cell))| {
            let c = cell.centroid().ok_or(Error::EmptyCell(i))?;
            Ok(rot_j(&[y[0] - c[0], y[1] - c[1], y[2] - c[2]]))
        })
        .collect()
}

fn horizontal_norm(v: &Vec3) -> f64 {
    v[0].hypot(v[1])
}

/// Mass-weighted mean speed `sum_i nu_i |w_i|`.
pub fn weighted_speed(cloud: &DiracCloud, w: &[Vec3]) -> f64 {
    cloud
        .masses()
        .iter()
        .zip(w)
        .map(|(m, v)| m * horizontal_norm(v))
        .sum()
}

/// `sqrt(sum_i nu_i |w_i|^2)`
pub fn velocity_l2(cloud: &DiracCloud, w: &[Vec3]) -> f64 {
    cloud
        .masses()
        .iter()
        .zip(w)
        .map(|(m, v)| m * (v[0] * v[0] + v[1] * v[1]))
        .sum::<f64>()
        .sqrt()
}

/// `2 (max|x| + W2(nu, delta_0))`, the a-priori bound on the velocity in `L^2(nu)`.
pub fn velocity_l2_bound(domain: &DomainSpec, cloud: &DiracCloud) -> f64 {
    2.0 * (domain.max_abs_x() + cloud.second_moment().sqrt())
}

/// `D + max|x|`, the bound on `sum_i nu_i |w_i|` and hence on the W1 speed
/// of the dual measure.
pub fn w1_speed_bound(domain: &DomainSpec) -> f64 {
    domain.horizontal_radius() + domain.max_abs_x()
}

/// A-priori bounds of a state against their measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub height_max: f64,
    pub height_bound: f64,
    pub slope_max: f64,
    pub slope_bound: f64,
    pub height_l2: f64,
    pub height_l2_bound: f64,
    pub velocity_l2: f64,
    pub velocity_l2_bound: f64,
    pub speed: f64,
    pub speed_bound: f64,
}

/// Relative slack for roundoff in the measured side of each bound. Heights
/// are exact at the nodes, so no discretization allowance is needed.
pub const BOUND_SLACK: f64 = 1e-9;

impl BoundsReport {
    pub fn evaluate(domain: &DomainSpec, grid: &QuadratureGrid, state: &SimState) -> Result<Self> {
        let w = state.velocities()?;
        let lip = lipschitz_h_check(&state.stats.height_field, grid, &state.cloud, domain);
        Ok(Self {
            height_max: state.stats.max_height(),
            height_bound: height_sup_bound(domain, &state.cloud),
            slope_max: lip.max_discrete_gradient,
            slope_bound: lip.bound,
            height_l2: state.stats.height_sq.sqrt(),
            height_l2_bound: height_l2_sq_bound(domain, &state.cloud).sqrt(),
            velocity_l2: velocity_l2(&state.cloud, &w),
            velocity_l2_bound: velocity_l2_bound(domain, &state.cloud),
            speed: weighted_speed(&state.cloud, &w),
            speed_bound: w1_speed_bound(domain),
        })
    }

    /// Names of the violated bounds.
    pub fn violations(&self) -> Vec<&'static str> {
        let ok = |m: f64, b: f64| m <= b * (1.0 + BOUND_SLACK);
        let mut v = Vec::new();
        for (name, m, b) in [
            ("height", self.height_max, self.height_bound),
            ("slope", self.slope_max, self.slope_bound),
            ("height_l2", self.height_l2, self.height_l2_bound),
            ("velocity_l2", self.velocity_l2, self.velocity_l2_bound),
            ("speed", self.speed, self.speed_bound),
        ] {
            if !ok(m, b) {
                v.push(name);
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub time: f64,
    pub step: usize,
    pub cloud: DiracCloud,
    pub weights: WeightVector,
    pub stats: CellStats,
    pub report: SolveReport,
    /// running support-radius allowance
    pub allowed_radius: f64,
    /// largest `sum nu |w|` used by the step that produced this state
    pub step_speed: f64,
    /// running maximum of `step_speed`
    pub peak_speed: f64,
}

/// Per-run quantities a restart needs besides positions and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry {
    pub step: usize,
    pub allowed_radius: f64,
    pub step_speed: f64,
    pub peak_speed: f64,
    pub report: SolveReport,
}

impl SimState {
    pub fn energy(&self) -> f64 {
        self.stats.primal_energy
    }

    pub fn mass_error(&self) -> f64 {
        (self.stats.total_volume - 1.0).abs()
    }

    pub fn velocities(&self) -> Result<Vec<Vec3>> {
        velocity_field(&self.cloud, &self.stats)
    }
}

/// Everything a run needs besides its state.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub domain: DomainSpec,
    pub grid: QuadratureGrid,
    pub settings: SolverSettings,
    pub scheme: Scheme,
    pub dt: f64,
    pub stop_at_equilibrium: bool,
}

impl Simulator {
    pub fn new(
        domain: DomainSpec,
        quadrature: &QuadratureSpec,
        settings: SolverSettings,
        scheme: Scheme,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!("dt = {dt} must be positive")));
        }
        let grid = QuadratureGrid::new(&domain, quadrature)?;
        Ok(Self {
            domain,
            grid,
            settings,
            scheme,
            dt,
            stop_at_equilibrium: false,
        })
    }

    pub fn from_config(cfg: &SimConfig) -> Result<Self> {
        let cfg = validate_config(cfg.clone())?;
        let settings = SolverSettings::new(
            cfg.solver_tol,
            cfg.solver_max_iter,
            cfg.domain.delta(),
            cfg.domain.cap_height(),
        )
        .with_method(cfg.solver_method);
        let mut sim = Self::new(
            cfg.domain.clone(),
            &cfg.quadrature,
            settings,
            cfg.scheme,
            cfg.dt,
        )?;
        sim.stop_at_equilibrium = cfg.stop_at_equilibrium;
        Ok(sim)
    }

    /// Initial cloud of a configuration, with coincident atoms merged.
    pub fn initial_cloud(&self, initial: &InitialCondition) -> Result<DiracCloud> {
        let cloud = match initial {
            InitialCondition::Explicit(c) => c.clone(),
            InitialCondition::Analytic(data) => sample_initial_cloud(data, &self.domain)?,
        };
        let merged = cloud.merge_coincident(MERGE_REL_TOL * self.domain.diam());
        if merged.len() != cloud.len() {
            warn!("merged {} coincident atoms", cloud.len() - merged.len());
        }
        merged.check_support(&self.domain)?;
        Ok(merged)
    }

    pub fn initial_state(&self, cloud: DiracCloud, init: &WeightVector) -> Result<SimState> {
        cloud.check_support(&self.domain)?;
        let sol = solve_converged(&cloud, init, &self.grid, &self.settings)?;
        let allowed_radius = cloud.support_radius();
        let state = SimState {
            time: 0.0,
            step: 0,
            cloud,
            weights: sol.weights,
            stats: sol.stats,
            report: sol.report,
            allowed_radius,
            step_speed: 0.0,
            peak_speed: 0.0,
        };
        self.dt_guidance(&state)?;
        Ok(state)
    }

    /// Rebuilds a state from persisted positions and weights; the cell
    /// statistics are a deterministic function of both.
    pub fn resume(
        &self,
        cloud: DiracCloud,
        weights: WeightVector,
        carry: Carry,
    ) -> Result<SimState> {
        let stats = decompose(&cloud, &weights, &self.grid)?;
        Ok(SimState {
            time: carry.step as f64 * self.dt,
            step: carry.step,
            cloud,
            weights,
            stats,
            report: carry.report,
            allowed_radius: carry.allowed_radius,
            step_speed: carry.step_speed,
            peak_speed: carry.peak_speed,
        })
    }

    fn dt_guidance(&self, state: &SimState) -> Result<()> {
        let w = state.velocities()?;
        let wmax = w.iter().map(horizontal_norm).fold(0.0, f64::max);
        let extent = state
            .stats
            .cells
            .iter()
            .map(|c| c.footprint.sqrt())
            .fold(f64::INFINITY, f64::min);
        if wmax > 0.0 && self.dt > 0.1 * extent / wmax {
            warn!(
                "dt = {} exceeds the accuracy guidance 0.1 * min cell extent / max|w| = {:.3e}",
                self.dt,
                0.1 * extent / wmax
            );
        }
        Ok(())
    }

    fn solve_at(
        &self,
        base: &DiracCloud,
        points: Vec<Vec3>,
        warm: &WeightVector,
    ) -> Result<(DiracCloud, Solution)> {
        let cloud = base.with_points(points)?;
        cloud.check_support(&self.domain)?;
        let sol = solve_converged(&cloud, warm, &self.grid, &self.settings)?;
        Ok((cloud, sol))
    }

    fn displaced(points: &[Vec3], vel: &[Vec3], h: f64) -> Vec<Vec3> {
        // only horizontals move, so the third coordinate is copied exactly
        points
            .iter()
            .zip(vel)
            .map(|(y, v)| [y[0] + h * v[0], y[1] + h * v[1], y[2]])
            .collect()
    }

    pub fn step(&self, state: &SimState) -> Result<SimState> {
        let dt = self.dt;
        let m = self.domain.max_abs_x();
        let y = state.cloud.points();
        let k1 = state.velocities()?;
        let (points, speed, allowed) = match self.scheme {
            Scheme::Euler => {
                let wmax = k1.iter().map(horizontal_norm).fold(0.0, f64::max);
                let a = state.allowed_radius;
                let allowed = (a * a + 2.0 * dt * a * m + dt * dt * wmax * wmax).sqrt();
                (
                    Self::displaced(y, &k1, dt),
                    weighted_speed(&state.cloud, &k1),
                    allowed,
                )
            }
            Scheme::Rk4 => {
                let mut warm = state.weights.clone();
                let mut stages = vec![k1];
                for h in [0.5 * dt, 0.5 * dt, dt] {
                    let (c, sol) = self.solve_at(
                        &state.cloud,
                        Self::displaced(y, stages.last().unwrap(), h),
                        &warm,
                    )?;
                    let k = velocity_field(&c, &sol.stats)?;
                    warm = sol.weights;
                    stages.push(k);
                }
                let combo: Vec<Vec3> = (0..y.len())
                    .map(|i| {
                        let mut v = [0.0; 3];
                        for (s, wgt) in stages.iter().zip([1.0, 2.0, 2.0, 1.0]) {
                            v[0] += wgt * s[i][0];
                            v[1] += wgt * s[i][1];
                        }
                        [v[0] / 6.0, v[1] / 6.0, 0.0]
                    })
                    .collect();
                let kmax = stages
                    .iter()
                    .flatten()
                    .map(horizontal_norm)
                    .fold(0.0, f64::max);
                let speed = stages
                    .iter()
                    .map(|s| weighted_speed(&state.cloud, s))
                    .fold(0.0, f64::max);
                let a = state.allowed_radius;
                let allowed =
                    (a * a + 2.0 * dt * a * (m + dt * kmax) + dt * dt * kmax * kmax).sqrt();
                (Self::displaced(y, &combo, dt), speed, allowed)
            }
        };
        let next_step = state.step + 1;
        let cloud = state.cloud.with_points(points)?;
        let radius = cloud.support_radius();
        if radius > allowed * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::SupportGrowth {
                radius,
                allowed,
                step: next_step,
            });
        }
        let d = self.domain.horizontal_radius();
        if radius > 0.9 * d {
            warn!("support radius {radius:.6} approaches D = {d}");
        }
        let (cloud, sol) = self.solve_at(&state.cloud, cloud.points().to_vec(), &state.weights)?;
        Ok(SimState {
            time: next_step as f64 * dt,
            step: next_step,
            cloud,
            weights: sol.weights,
            stats: sol.stats,
            report: sol.report,
            allowed_radius: allowed.max(radius),
            step_speed: speed,
            peak_speed: state.peak_speed.max(speed),
        })
    }

    /// Advances `steps` times, handing every state whose step is a multiple
    /// of `stride` (plus the last one) to `sink`.
    pub fn run(
        &self,
        mut state: SimState,
        steps: usize,
        stride: usize,
        mut sink: impl FnMut(&SimState) -> Result<()>,
    ) -> Result<SimState> {
        let stride = stride.max(1);
        if state.step.is_multiple_of(stride) {
            sink(&state)?;
        }
        let target = state.step + steps;
        while state.step < target {
            let next = self.step(&state)?;
            state = next;
            let w = state.velocities()?;
            let wmax = w.iter().map(horizontal_norm).fold(0.0, f64::max);
            info!(
                "step {} t = {:.6} E = {:.12e} |r| = {:.2e} iters = {}",
                state.step,
                state.time,
                state.stats.primal_energy,
                state.report.residual_inf,
                state.report.iterations
            );
            let at_eq = wmax <= EQUILIBRIUM_SPEED;
            if at_eq {
                info!("relative equilibrium reached at step {}", state.step);
            }
            let last = state.step == target || (at_eq && self.stop_at_equilibrium);
            if state.step.is_multiple_of(stride) || last {
                sink(&state)?;
            }
            if at_eq && self.stop_at_equilibrium {
                break;
            }
        }
        Ok(state)
    }
}

/// Runs a configuration to completion and keeps every emitted state.
pub fn simulate(cfg: &SimConfig) -> Result<Vec<SimState>> {
    let sim = Simulator::from_config(cfg)?;
    let cloud = sim.initial_cloud(&cfg.initial)?;
    let init = cfg.solver_init.weights(&cloud);
    let state = sim.initial_state(cloud, &init)?;
    let mut out = Vec::new();
    sim.run(state, cfg.steps, cfg.output.stride, |s| {
        out.push(s.clone());
        Ok(())
    })?;
    Ok(out)
}
