//! Concave ascent on the semi-discrete dual functional.
//!
//! The gradient of `J` with respect to `R_i` is `vol_i - nu_i`, so the
//! fixed point of the ascent is exactly the discrete marginal condition.

use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::domain::{DiracCloud, QuadratureRule, WeightVector};
use crate::error::{Error, Result};
use crate::geometry::{
    decompose, decompose_with_jacobian, CellStats, QuadratureGrid, VolumeJacobian,
};

/// Smallest accepted marginal tolerance, in units of total mass.
pub const TOL_FLOOR: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `R_i = (y_i1^2 + y_i2^2)/2`, an upper bound for optimal weights.
    #[default]
    Quadratic,
    Zero,
}

impl InitMode {
    pub fn weights(self, cloud: &DiracCloud) -> WeightVector {
        match self {
            InitMode::Quadratic => WeightVector::quadratic(cloud),
            InitMode::Zero => WeightVector::zeros(cloud.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Damped Newton on the volume Jacobian, falling back to gradient steps.
    #[default]
    Newton,
    /// Barzilai-Borwein gradient ascent only.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub method: SolverMethod,
    pub tol: f64,
    pub max_iter: usize,
    /// sufficient-increase constant
    pub armijo: f64,
    pub max_backtracks: usize,
    /// relative J change required over the last `stall_window` steps
    pub rel_j_tol: f64,
    pub stall_window: usize,
    pub empty_restart_after: usize,
    pub max_restarts: usize,
    /// restarted weights are searched in `[min R - restart_drop, R_i]`
    pub restart_drop: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            method: SolverMethod::default(),
            tol: 1e-7,
            max_iter: 5000,
            armijo: 1e-4,
            max_backtracks: 60,
            rel_j_tol: 1e-12,
            stall_window: 3,
            empty_restart_after: 20,
            max_restarts: 20,
            restart_drop: 15.0,
        }
    }
}

impl SolverSettings {
    pub fn new(tol: f64, max_iter: usize, delta: f64, cap: f64) -> Self {
        Self {
            tol,
            max_iter,
            restart_drop: delta * cap,
            ..Self::default()
        }
    }

    pub fn with_method(mut self, method: SolverMethod) -> Self {
        self.method = method;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    EmptyCells,
    LineSearchStall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub converged: bool,
    pub iterations: usize,
    pub residual_inf: f64,
    pub dual_value: f64,
    pub step_sizes: Vec<f64>,
    /// J after each accepted step, starting with the initial value
    pub j_history: Vec<f64>,
    pub restarts: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub weights: WeightVector,
    pub stats: CellStats,
    pub report: SolveReport,
}

/// `r_i = vol_i - nu_i`, the gradient of `J` in `R`.
pub fn residual(cloud: &DiracCloud, stats: &CellStats) -> Vec<f64> {
    stats
        .cells
        .iter()
        .zip(cloud.masses())
        .map(|(c, m)| c.volume - m)
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients for `A d = g`, `A = -jac` positive
/// definite on the wet cells. Rows of empty cells are replaced by the identity.
fn newton_direction(jac: &VolumeJacobian, g: &[f64]) -> Option<Vec<f64>> {
    let n = g.len();
    let scale = jac.diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if !(scale > 0.0) {
        return None;
    }
    let floor = 1e-14 * scale;
    let empty: Vec<bool> = jac.diag.iter().map(|d| -d <= floor).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        jac.apply(v, out);
        for i in 0..n {
            out[i] = if empty[i] { v[i] * scale } else { -out[i] };
        }
    };
    let pre: Vec<f64> = (0..n)
        .map(|i| {
            if empty[i] {
                1.0 / scale
            } else {
                1.0 / -jac.diag[i]
            }
        })
        .collect();
    let mut x = vec![0.0; n];
    let mut r = g.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&pre).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let g_norm = dot(g, g).sqrt();
    let mut ap = vec![0.0; n];
    for _ in 0..(2 * n + 50) {
        if dot(&r, &r).sqrt() <= 1e-12 * g_norm {
            break;
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * pre[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Iterate {
    w: WeightVector,
    stats: CellStats,
    jac: Option<VolumeJacobian>,
    g: Vec<f64>,
}

fn evaluate(
    cloud: &DiracCloud,
    w: WeightVector,
    grid: &QuadratureGrid,
    method: SolverMethod,
) -> Result<Iterate> {
    let (stats, jac) = match method {
        SolverMethod::Newton => {
            let (s, j) = decompose_with_jacobian(cloud, &w, grid)?;
            (s, Some(j))
        }
        SolverMethod::Gradient => (decompose(cloud, &w, grid)?, None),
    };
    let g = residual(cloud, &stats);
    Ok(Iterate { w, stats, jac, g })
}

/// Exact coordinate ascent on the empty component `i`: bisects `R_i`, with
/// the other weights fixed, until the cell volume matches its mass.
fn regrow_weight(
    cloud: &DiracCloud,
    w: &WeightVector,
    i: usize,
    grid: &QuadratureGrid,
    settings: &SolverSettings,
) -> Result<f64> {
    let m = cloud.masses()[i];
    let volume_at = |r: f64| -> Result<Option<f64>> {
        let mut trial = w.clone();
        trial.0[i] = r;
        match decompose(cloud, &trial, grid) {
            Ok(s) => Ok(Some(s.cells[i].volume)),
            Err(Error::CapSaturated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let floor = w.0.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = w.0[i];
    let mut lo = floor - settings.restart_drop;
    if let Some(v) = volume_at(lo)? {
        if v <= m {
            return Ok(lo);
        }
    }
    for _ in 0..REGROW_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        match volume_at(mid)? {
            Some(v) if (v - m).abs() <= REGROW_REL_TOL * m => return Ok(mid),
            Some(v) if v < m => hi = mid,
            _ => lo = mid,
        }
    }
    Ok(0.5 * (lo + hi))
}

const REGROW_BISECTIONS: usize = 40;
const REGROW_REL_TOL: f64 = 1e-3;

/// Monotone ascent on `J`: damped Newton on the exact volume Jacobian, or
/// Barzilai-Borwein gradient steps seeded with `1/N`.
///
/// Steps satisfy a sufficient-increase test on `J`. When the predicted
/// increase is below the rounding level of `J`, the test falls back to the
/// directional derivative at the trial point, which for a concave `J` still
/// certifies (gradient steps) or estimates to second order (Newton steps)
/// the increase.
///
/// Returns `Ok` with `converged = false` when the iteration budget runs out;
/// errors only when the initial point itself cannot be evaluated.
pub fn solve_weights(
    cloud: &DiracCloud,
    init: &WeightVector,
    grid: &QuadratureGrid,
    settings: &SolverSettings,
) -> Result<Solution> {
    let start = Instant::now();
    let n = cloud.len();
    if init.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: init.len(),
        });
    }
    if init.0.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("initial weights"));
    }
    if !(settings.tol >= TOL_FLOOR) {
        return Err(Error::ToleranceBelowFloor {
            tol: settings.tol,
            floor: TOL_FLOOR,
        });
    }
    let cols = grid.spec().columns_per_axis as f64;
    if grid.spec().rule == QuadratureRule::Midpoint && settings.tol < 0.1 / (cols * cols) {
        warn!(
            "solver tol {} is below the midpoint discretization scale 0.1/n^2 = {}",
            settings.tol,
            0.1 / (cols * cols)
        );
    }

    let method = settings.method;
    let mut it = evaluate(cloud, init.clone(), grid, method)?;
    let mut j = it.stats.dual_value;
    let mut alpha = 1.0 / n as f64;
    let mut step_sizes = Vec::new();
    let mut j_history = vec![j];
    let mut empty_for = vec![0usize; n];
    let mut restarts = 0;
    let mut rel_changes: Vec<f64> = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    loop {
        let res = inf_norm(&it.g);
        let window = settings.stall_window.min(rel_changes.len());
        let flat = rel_changes[rel_changes.len() - window..]
            .iter()
            .all(|c| *c <= settings.rel_j_tol);
        if res <= settings.tol && flat {
            status = SolveStatus::Converged;
            break;
        }
        if iterations >= settings.max_iter {
            break;
        }
        iterations += 1;

        // cells empty for too long are re-seeded below every other weight
        let mut restarted = false;
        for i in 0..n {
            if it.stats.cells[i].volume > 0.0 {
                empty_for[i] = 0;
                continue;
            }
            empty_for[i] += 1;
            if empty_for[i] >= settings.empty_restart_after {
                if restarts >= settings.max_restarts {
                    status = SolveStatus::EmptyCells;
                    break;
                }
                it.w.0[i] = regrow_weight(cloud, &it.w, i, grid, settings)?;
                empty_for[i] = 0;
                restarts += 1;
                restarted = true;
            }
        }
        if status == SolveStatus::EmptyCells {
            break;
        }
        if restarted {
            match evaluate(cloud, it.w.clone(), grid, method) {
                Ok(next) => it = next,
                Err(Error::CapSaturated { .. }) => {
                    status = SolveStatus::EmptyCells;
                    break;
                }
                Err(e) => return Err(e),
            }
            j = it.stats.dual_value;
            alpha = 1.0 / n as f64;
            rel_changes.clear();
            debug!("iter {iterations}: restarted empty cells, J = {j:.15e}");
            continue;
        }

        let g = &it.g;
        let gg = dot(g, g);
        let all_wet = it.stats.cells.iter().all(|c| c.volume > 0.0);
        // the Jacobian is singular on empty cells; regrow them with gradient steps first
        let newton = it
            .jac
            .as_ref()
            .filter(|_| all_wet)
            .and_then(|jac| newton_direction(jac, g))
            .filter(|d| dot(d, g) > 0.0);
        let (dir, t0, is_newton) = match newton {
            Some(d) => (d, 1.0, true),
            None => (g.clone(), alpha, false),
        };
        let gd = dot(&dir, g);
        let mut accepted = None;
        let mut t = t0;
        for _ in 0..=settings.max_backtracks {
            let trial_w = WeightVector(it.w.0.iter().zip(&dir).map(|(r, d)| r + t * d).collect());
            match evaluate(cloud, trial_w, grid, method) {
                Ok(trial) => {
                    let tgd = dot(&trial.g, &dir);
                    let predicted = settings.armijo * t * gd;
                    let resolvable = predicted > 1e3 * f64::EPSILON * j.abs().max(1.0);
                    let keeps_cells =
                        !is_newton || trial.stats.cells.iter().all(|c| c.volume > 0.0);
                    let ok = keeps_cells
                        && if resolvable {
                            trial.stats.dual_value - j >= predicted
                        } else if is_newton {
                            0.5 * (gd + tgd) >= settings.armijo * gd
                        } else {
                            tgd >= settings.armijo * gd
                        };
                    if ok {
                        accepted = Some((trial, t));
                        break;
                    }
                }
                Err(Error::CapSaturated { .. }) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((trial, t)) = accepted else {
            status = SolveStatus::LineSearchStall;
            break;
        };

        if !is_newton {
            // s = t g, y = g_new - g; curvature of -J along s is -(s . y)
            let sy = t * (dot(g, &trial.g) - gg);
            let ss = t * t * gg;
            alpha = if sy < 0.0 { ss / -sy } else { 2.0 * t };
            alpha = alpha.clamp(1e-12, 1e12);
        }

        let rel = (trial.stats.dual_value - j).abs() / j.abs().max(1.0);
        rel_changes.push(rel);
        j = trial.stats.dual_value;
        it = trial;
        step_sizes.push(t);
        j_history.push(j);
        debug!(
            "iter {iterations}: J = {j:.15e}, |r|_inf = {:.3e}, step = {t:.3e}{}",
            inf_norm(&it.g),
            if is_newton { " (newton)" } else { "" }
        );
    }

    let residual_inf = inf_norm(&it.g);
    let report = SolveReport {
        status,
        converged: status == SolveStatus::Converged,
        iterations,
        residual_inf,
        dual_value: j,
        step_sizes,
        j_history,
        restarts,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(Solution {
        weights: it.w,
        stats: it.stats,
        report,
    })
}

/// Like [`solve_weights`] but non-convergence is an error.
pub fn solve_converged(
    cloud: &DiracCloud,
    init: &WeightVector,
    grid: &QuadratureGrid,
    settings: &SolverSettings,
) -> Result<Solution> {
    let sol = solve_weights(cloud, init, grid, settings)?;
    if !sol.report.converged {
        return Err(Error::NotConverged(format!(
            "{:?} after {} iterations, residual {:.3e}",
            sol.report.status, sol.report.iterations, sol.report.residual_inf
        )));
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniquenessReport {
    pub max_height_diff: f64,
    pub max_weight_diff: f64,
}

/// Solves from two initializations and compares the optima.
pub fn uniqueness_probe(
    cloud: &DiracCloud,
    grid: &QuadratureGrid,
    settings: &SolverSettings,
    init_a: &WeightVector,
    init_b: &WeightVector,
) -> Result<UniquenessReport> {
    let a = solve_converged(cloud, init_a, grid, settings)?;
    let b = solve_converged(cloud, init_b, grid, settings)?;
    let max_height_diff = a
        .stats
        .height_field
        .iter()
        .zip(&b.stats.height_field)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let max_weight_diff = inf_norm(
        &a.weights
            .0
            .iter()
            .zip(&b.weights.0)
            .map(|(x, y)| x - y)
            .collect::<Vec<_>>(),
    );
    Ok(UniquenessReport {
        max_height_diff,
        max_weight_diff,
    })
}
