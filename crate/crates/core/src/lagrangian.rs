//! Physical-space reconstruction from a dual trajectory. Fluid particles are
//! labelled once by the atom whose cell holds them at `t = 0`; afterwards a
//! particle sits at its atom's cell centroid and carries `Z = y_atom`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{dot3, rot_j, DiracCloud, DomainSpec, Vec3, WeightVector};
use crate::dynamics::SimState;
use crate::error::{Error, Result};
use crate::geometry::{evaluate_potential, height_upper_bound, surface_height, QuadratureGrid};

/// Particles with their time-invariant atom labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    /// positions at `t = 0`
    pub positions: Vec<Vec3>,
    /// `i(p)`, the discrete `grad P0(x_p)`
    pub cells: Vec<usize>,
    pub mass: f64,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Particles per atom.
    pub fn counts(&self, atoms: usize) -> Vec<usize> {
        let mut c = vec![0; atoms];
        for &i in &self.cells {
            c[i] += 1;
        }
        c
    }
}

const REJECTION_BUDGET: usize = 10_000;

/// Rejection sampler for points of `Omega_h`, optionally restricted to one
/// cell.
struct FluidSampler<'a> {
    cloud: &'a DiracCloud,
    weights: &'a WeightVector,
    domain: &'a DomainSpec,
    lo: [f64; 2],
    hi: [f64; 2],
    top: f64,
}

impl<'a> FluidSampler<'a> {
    fn new(cloud: &'a DiracCloud, weights: &'a WeightVector, domain: &'a DomainSpec) -> Self {
        let (lo, hi) = domain.polygon().bounding_box();
        Self {
            cloud,
            weights,
            domain,
            lo,
            hi,
            top: height_upper_bound(cloud, weights, domain),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cell: Option<usize>) -> Result<Vec3> {
        if self.top <= 0.0 {
            return Err(Error::RejectionFailed(0));
        }
        for _ in 0..REJECTION_BUDGET.max(100 * self.cloud.len()) {
            let x = [
                rng.gen_range(self.lo[0]..self.hi[0]),
                rng.gen_range(self.lo[1]..self.hi[1]),
                rng.gen_range(0.0..self.top),
            ];
            if !self.domain.polygon().contains([x[0], x[1]]) {
                continue;
            }
            if let Some(i) = cell {
                if evaluate_potential(self.cloud, self.weights, &x).1 != i {
                    continue;
                }
            }
            let h = surface_height(
                self.cloud,
                self.weights,
                [x[0], x[1]],
                self.domain.cap_height(),
            )?;
            if x[2] < h {
                return Ok(x);
            }
        }
        Err(Error::RejectionFailed(REJECTION_BUDGET))
    }
}

/// `count` points uniform in the fluid region of `(cloud, weights)`.
pub fn sample_particles(
    cloud: &DiracCloud,
    weights: &WeightVector,
    domain: &DomainSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let sampler = FluidSampler::new(cloud, weights, domain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sampler.draw(&mut rng, None)).collect()
}

/// Labels each particle by the first maximizer of `x . y_i - R_i`.
/// Particles must lie strictly below the initial free surface.
pub fn assign_particles(
    positions: Vec<Vec3>,
    cloud: &DiracCloud,
    weights: &WeightVector,
    domain: &DomainSpec,
) -> Result<ParticleSet> {
    let cells = positions
        .par_iter()
        .enumerate()
        .map(|(p, x)| {
            let h = surface_height(cloud, weights, [x[0], x[1]], domain.cap_height())?;
            if !(x[2] >= 0.0 && x[2] < h) {
                return Err(Error::ParticleAboveSurface(p));
            }
            Ok(evaluate_potential(cloud, weights, x).1)
        })
        .collect::<Result<Vec<_>>>()?;
    let mass = if positions.is_empty() {
        0.0
    } else {
        1.0 / positions.len() as f64
    };
    Ok(ParticleSet {
        positions,
        cells,
        mass,
    })
}

/// Dual data at one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub points: Vec<Vec3>,
    pub weights: WeightVector,
    pub centroids: Vec<Vec3>,
}

impl Frame {
    pub fn from_state(state: &SimState) -> Result<Self> {
        let centroids = state
            .stats
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.centroid().ok_or(Error::EmptyCell(i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            time: state.time,
            points: state.cloud.points().to_vec(),
            weights: state.weights.clone(),
            centroids,
        })
    }
}

/// Particle paths `x_p(t) = c_{i(p)}(t)` and labels `Z_p(t) = y_{i(p)}(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub particles: ParticleSet,
    pub masses: Vec<f64>,
    pub frames: Vec<Frame>,
}

impl TrajectoryLog {
    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn position(&self, s: usize, p: usize) -> Vec3 {
        self.frames[s].centroids[self.particles.cells[p]]
    }

    pub fn z(&self, s: usize, p: usize) -> Vec3 {
        self.frames[s].points[self.particles.cells[p]]
    }

    pub fn positions(&self, s: usize) -> Vec<Vec3> {
        (0..self.particles.len())
            .map(|p| self.position(s, p))
            .collect()
    }

    /// Atoms carrying at least one particle.
    fn occupied(&self) -> Vec<usize> {
        let mut seen = vec![false; self.masses.len()];
        for &i in &self.particles.cells {
            seen[i] = true;
        }
        (0..seen.len()).filter(|&i| seen[i]).collect()
    }

    fn cloud_at(&self, s: usize) -> Result<DiracCloud> {
        DiracCloud::new(self.frames[s].points.clone(), self.masses.clone())
    }
}

pub fn trace(particles: &ParticleSet, masses: &[f64], frames: Vec<Frame>) -> Result<TrajectoryLog> {
    let n = masses.len();
    for f in &frames {
        for len in [f.points.len(), f.centroids.len(), f.weights.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
    }
    if let Some(&bad) = particles.cells.iter().find(|&&i| i >= n) {
        return Err(Error::LengthMismatch {
            expected: n,
            found: bad + 1,
        });
    }
    Ok(TrajectoryLog {
        particles: particles.clone(),
        masses: masses.to_vec(),
        frames,
    })
}

/// How a particle's position at time `t` is realized for histogramming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginalMode {
    /// at its cell centroid
    #[default]
    Centroid,
    /// at a uniform random point of its cell
    Spread { seed: u64 },
}

/// L1 distance on a `bins x bins` partition of the bounding box between
/// the particle mass histogram and `int_bin h dx`, with `h` given at the grid
/// nodes.
pub fn marginal_check(
    log: &TrajectoryLog,
    s: usize,
    grid: &QuadratureGrid,
    height_field: &[f64],
    domain: &DomainSpec,
    bins: usize,
    mode: MarginalMode,
) -> Result<f64> {
    if height_field.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            found: height_field.len(),
        });
    }
    let bins = bins.max(1);
    let (lo, hi) = domain.polygon().bounding_box();
    let bin_of = |x: &[f64]| -> usize {
        let b =
            |k: usize| (((x[k] - lo[k]) / (hi[k] - lo[k]) * bins as f64) as usize).min(bins - 1);
        b(0) * bins + b(1)
    };
    let mut diff = vec![0.0; bins * bins];
    for (node, h) in grid.nodes().iter().zip(height_field) {
        diff[bin_of(&node.x)] -= node.weight * h;
    }
    let positions = match mode {
        MarginalMode::Centroid => log.positions(s),
        MarginalMode::Spread { seed } => {
            let cloud = log.cloud_at(s)?;
            let sampler = FluidSampler::new(&cloud, &log.frames[s].weights, domain);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            log.particles
                .cells
                .iter()
                .map(|&i| sampler.draw(&mut rng, Some(i)))
                .collect::<Result<_>>()?
        }
    };
    for x in &positions {
        diff[bin_of(x)] += log.particles.mass;
    }
    Ok(diff.iter().map(|d| d.abs()).sum())
}

/// `max |dZ/dt - J(Z - x)|` over particles and interior snapshots, with the
/// time derivative by central differences (forward when only two snapshots
/// exist).
pub fn z_equation_residual(log: &TrajectoryLog) -> Result<f64> {
    let s_count = log.frames.len();
    if s_count < 2 {
        return Err(Error::TooFewSnapshots {
            needed: 2,
            found: s_count,
        });
    }
    let stencils: Vec<(usize, usize, usize)> = if s_count == 2 {
        vec![(0, 0, 1)]
    } else {
        (1..s_count - 1).map(|s| (s - 1, s, s + 1)).collect()
    };
    let mut worst: f64 = 0.0;
    for i in log.occupied() {
        for &(a, s, b) in &stencils {
            let (fa, fs, fb) = (&log.frames[a], &log.frames[s], &log.frames[b]);
            let span = fb.time - fa.time;
            let y = fs.points[i];
            let c = fs.centroids[i];
            let rhs = rot_j(&[y[0] - c[0], y[1] - c[1], y[2] - c[2]]);
            let mut r = [0.0; 3];
            for k in 0..3 {
                r[k] = (fb.points[i][k] - fa.points[i][k]) / span - rhs[k];
            }
            worst = worst.max(dot3(&r, &r).sqrt());
        }
    }
    Ok(worst)
}

/// Smooth functions of one point in space.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceFn {
    Constant(f64),
    Coordinate(usize),
    /// `x_a x_b`
    Product(usize, usize),
    /// `exp(-|x - c|^2 / width^2)` times the bump of the given radius
    CutGaussian {
        center: Vec3,
        width: f64,
        radius: f64,
    },
}

impl SpaceFn {
    /// Value and gradient.
    pub fn eval(&self, x: &Vec3) -> (f64, Vec3) {
        match *self {
            SpaceFn::Constant(c) => (c, [0.0; 3]),
            SpaceFn::Coordinate(k) => {
                let mut g = [0.0; 3];
                g[k] = 1.0;
                (x[k], g)
            }
            SpaceFn::Product(a, b) => {
                let mut g = [0.0; 3];
                g[a] += x[b];
                g[b] += x[a];
                (x[a] * x[b], g)
            }
            SpaceFn::CutGaussian {
                center,
                width,
                radius,
            } => {
                let d = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
                let r2 = dot3(&d, &d);
                let s = r2 / (radius * radius);
                if s >= 1.0 {
                    return (0.0, [0.0; 3]);
                }
                let gauss = (-r2 / (width * width)).exp();
                let bump = (1.0 - 1.0 / (1.0 - s)).exp();
                let v = gauss * bump;
                // d/dx of log(v) = -2d/width^2 - 2d / (radius^2 (1-s)^2)
                let k = -2.0 / (width * width) - 2.0 / (radius * radius * (1.0 - s).powi(2));
                (v, [v * k * d[0], v * k * d[1], v * k * d[2]])
            }
        }
    }
}

/// `psi(t, x) = (T - t)^power * phi(x)`, vanishing at `t = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCutoff {
    pub horizon: f64,
    pub power: i32,
    pub space: SpaceFn,
}

impl TimeCutoff {
    /// `(psi, d psi / dt)`
    pub fn eval(&self, t: f64, x: &Vec3) -> (f64, f64) {
        let phi = self.space.eval(x).0;
        let u = self.horizon - t;
        let k = self.power;
        (u.powi(k) * phi, -(k as f64) * u.powi(k - 1) * phi)
    }
}

/// The three integrals of the relaxed weak form and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakFormTerms {
    /// `int int xi(Z) d_t psi(t, x0)`
    pub transport: f64,
    /// `int int grad xi(Z) . J(Z - x) psi(t, x0)`
    pub rotation: f64,
    /// `int xi(Z(0)) psi(0, x0)`
    pub initial: f64,
    pub total: f64,
}

const TERMINAL_TOL: f64 = 1e-12;

/// Evaluates the weak form along the particle plan `(x_p(0), x_p(t))` with
/// trapezoidal time quadrature over the snapshots and particle sums in
/// space.
pub fn weak_form_residual(
    log: &TrajectoryLog,
    xi: &SpaceFn,
    psi: &TimeCutoff,
) -> Result<WeakFormTerms> {
    let s_count = log.frames.len();
    if s_count < 2 {
        return Err(Error::TooFewSnapshots {
            needed: 2,
            found: s_count,
        });
    }
    let times = log.times();
    let step = times[1] - times[0];
    if times
        .windows(2)
        .any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs())
    {
        return Err(Error::NonUniformStride);
    }
    let horizon = times[s_count - 1];
    for x0 in &log.particles.positions {
        let v = psi.eval(horizon, x0).0;
        if v.abs() > TERMINAL_TOL {
            return Err(Error::PsiNotTerminal(v));
        }
    }
    let quad = |s: usize| {
        if s == 0 || s == s_count - 1 {
            0.5 * step
        } else {
            step
        }
    };
    let per_particle: Vec<(f64, f64, f64)> = (0..log.particles.len())
        .into_par_iter()
        .map(|p| {
            let x0 = &log.particles.positions[p];
            let (mut t1, mut t2) = (0.0, 0.0);
            for (s, &t) in times.iter().enumerate() {
                let z = log.z(s, p);
                let x = log.position(s, p);
                let (xv, xg) = xi.eval(&z);
                let (pv, pt) = psi.eval(t, x0);
                let w = rot_j(&[z[0] - x[0], z[1] - x[1], z[2] - x[2]]);
                t1 += quad(s) * xv * pt;
                t2 += quad(s) * dot3(&xg, &w) * pv;
            }
            let t3 = xi.eval(&log.z(0, p)).0 * psi.eval(times[0], x0).0;
            (t1, t2, t3)
        })
        .collect();
    let m = log.particles.mass;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (t1, t2, t3) in per_particle {
        a += m * t1;
        b += m * t2;
        c += m * t3;
    }
    Ok(WeakFormTerms {
        transport: a,
        rotation: b,
        initial: c,
        total: a + b + c,
    })
}

/// Fixed suite of five `(xi, psi)` pairs on `[0, horizon]`, centred on the
/// mean dual position `y_mean` and mean physical position `x_mean`.
pub fn standard_suite(horizon: f64, y_mean: Vec3, x_mean: Vec3) -> Vec<(SpaceFn, TimeCutoff)> {
    let cut = |power, space| TimeCutoff {
        horizon,
        power,
        space,
    };
    vec![
        (SpaceFn::Constant(1.0), cut(1, SpaceFn::Constant(1.0))),
        (SpaceFn::Coordinate(0), cut(1, SpaceFn::Coordinate(1))),
        (SpaceFn::Coordinate(1), cut(2, SpaceFn::Constant(1.0))),
        (
            SpaceFn::CutGaussian {
                center: y_mean,
                width: 0.5,
                radius: 2.0,
            },
            cut(1, SpaceFn::Coordinate(0)),
        ),
        (
            SpaceFn::Product(0, 1),
            cut(
                2,
                SpaceFn::CutGaussian {
                    center: x_mean,
                    width: 0.5,
                    radius: 1.5,
                },
            ),
        ),
    ]
}

/// Suite built from the log's own horizon and mean positions.
pub fn suite_for(log: &TrajectoryLog) -> Vec<(SpaceFn, TimeCutoff)> {
    let horizon = log.frames.last().map_or(0.0, |f| f.time);
    let mut ym = [0.0; 3];
    let mut xm = [0.0; 3];
    if let Some(f) = log.frames.first() {
        for (y, m) in f.points.iter().zip(&log.masses) {
            for k in 0..3 {
                ym[k] += m * y[k];
            }
        }
    }
    let np = log.particles.len().max(1) as f64;
    for x in &log.particles.positions {
        for k in 0..3 {
            xm[k] += x[k] / np;
        }
    }
    standard_suite(horizon, ym, xm)
}
