//! Acceptance criteria, one line each. Runs without the test harness so the
//! summary is always printed; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgflow::dynamics::{sample_initial_cloud, w1_speed_bound};
use sgflow::lagrangian::{self, Frame};
use sgflow::oracle::{max_volume_difference, voxel_decompose, w1_upper};
use sgflow::{
    decompose, residual, solve_weights, velocity_field, AnalyticInitialData, BoundsReport,
    ConvexPolygon, DiracCloud, DomainSpec, InitMode, QuadratureGrid, QuadratureSpec, Scheme,
    SimState, Simulator, SolverSettings, Vec3, WeightVector,
};

type Check = std::result::Result<String, String>;

struct Fixture {
    name: &'static str,
    domain: DomainSpec,
    cloud: DiracCloud,
}

fn square() -> DomainSpec {
    DomainSpec::new(ConvexPolygon::unit_square(), 0.5, 30.0, 3.0).unwrap()
}

fn single() -> Fixture {
    Fixture {
        name: "single",
        domain: square(),
        cloud: DiracCloud::uniform(vec![[0.0, 0.0, -1.0]]).unwrap(),
    }
}

fn pair() -> Fixture {
    Fixture {
        name: "pair",
        domain: DomainSpec::new(
            ConvexPolygon::rectangle(-1.0, 1.0, 0.0, 1.0).unwrap(),
            0.5,
            40.0,
            2.0,
        )
        .unwrap(),
        cloud: DiracCloud::uniform(vec![[0.3, 0.0, -1.0], [-0.3, 0.0, -1.0]]).unwrap(),
    }
}

fn three() -> Fixture {
    Fixture {
        name: "three",
        domain: square(),
        cloud: DiracCloud::uniform(vec![[0.3, 0.4, -1.0], [0.7, 0.5, -1.5], [0.4, 0.7, -0.8]])
            .unwrap(),
    }
}

fn quadratic_data(samples: usize) -> AnalyticInitialData {
    AnalyticInitialData {
        alpha: 1.2,
        beta: 0.8,
        gamma: [0.1, -0.05],
        b3: -1.0,
        samples,
        seed: 3,
    }
}

fn quadratic(samples: usize) -> Fixture {
    let domain = square();
    let cloud = sample_initial_cloud(&quadratic_data(samples), &domain).unwrap();
    Fixture {
        name: "quadratic16",
        domain,
        cloud,
    }
}

fn all_fixtures() -> Vec<Fixture> {
    vec![single(), pair(), three(), quadratic(16)]
}

fn grid(d: &DomainSpec, columns: usize) -> QuadratureGrid {
    QuadratureGrid::new(d, &QuadratureSpec::new(columns).unwrap()).unwrap()
}

fn settings(d: &DomainSpec, tol: f64) -> SolverSettings {
    SolverSettings::new(tol, 2000, d.delta(), d.cap_height())
}

fn solve(f: &Fixture, g: &QuadratureGrid, init: InitMode, tol: f64) -> sgflow::solver::Solution {
    let s = solve_weights(
        &f.cloud,
        &init.weights(&f.cloud),
        g,
        &settings(&f.domain, tol),
    )
    .unwrap();
    assert!(
        s.report.converged,
        "{} did not converge: {:?}",
        f.name, s.report.status
    );
    s
}

// ---- independent quadrature oracle on the unit square ----

const GL5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Tensor Gauss-Legendre on `[0,1]^2`, exact for bidegree 9 polynomials.
fn integrate_unit_square(f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for (a, wa) in GL5 {
        for (b, wb) in GL5 {
            acc += 0.25 * wa * wb * f(0.5 * (a + 1.0), 0.5 * (b + 1.0));
        }
    }
    acc
}

/// Weight of one plane `-x3 - R` filling a unit volume of the flat-bottomed
/// column set above the unit square: the fluid is `0 <= x3 <= -R - q`.
fn single_plane_weight() -> f64 {
    let volume = |r: f64| integrate_unit_square(|a, b| (-r - 0.5 * (a * a + b * b)).max(0.0));
    let (mut lo, mut hi) = (-10.0, -1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if volume(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn single_plane_centroid(r: f64) -> Vec3 {
    let h = |a: f64, b: f64| -r - 0.5 * (a * a + b * b);
    let v = integrate_unit_square(h);
    [
        integrate_unit_square(|a, b| a * h(a, b)) / v,
        integrate_unit_square(|a, b| b * h(a, b)) / v,
        integrate_unit_square(|a, b| 0.5 * h(a, b).powi(2)) / v,
    ]
}

// ---- criteria ----

fn c01_single_weight_and_height() -> Check {
    let f = single();
    let r_exact = single_plane_weight();
    let start = Instant::now();
    let g = grid(&f.domain, 256);
    let s = solve(&f, &g, InitMode::Quadratic, 1e-10);
    let elapsed = start.elapsed().as_secs_f64();
    let r_err = (s.weights.0[0] - r_exact).abs();
    let h_err = g
        .nodes()
        .iter()
        .zip(&s.stats.height_field)
        .map(|(n, h)| (h - (-r_exact - 0.5 * (n.x[0].powi(2) + n.x[1].powi(2)))).abs())
        .fold(0.0, f64::max);
    let detail = format!("|R - R*| = {r_err:.2e}, max height error = {h_err:.2e}, {elapsed:.3} s");
    if r_err <= 1e-6 && h_err <= 1e-6 && elapsed < 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c02_single_centroid_and_velocity() -> Check {
    let f = single();
    let c_exact = single_plane_centroid(single_plane_weight());
    let y = f.cloud.points()[0];
    let w_exact = [-(y[1] - c_exact[1]), y[0] - c_exact[0], 0.0];
    let g = grid(&f.domain, 256);
    let s = solve(&f, &g, InitMode::Quadratic, 1e-10);
    let c = s.stats.centroid(0).unwrap();
    let w = velocity_field(&f.cloud, &s.stats).unwrap()[0];
    let vox = voxel_decompose(&f.cloud, &s.weights, &f.domain, 256).unwrap();
    let cv = vox.centroid(0).unwrap();
    let err = |a: Vec3, b: Vec3| (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
    let (ec, ew, ev) = (err(c, c_exact), err(w, w_exact), err(cv, c_exact));
    let detail =
        format!("centroid error {ec:.2e}, velocity error {ew:.2e}, voxel centroid error {ev:.2e}");
    if ec <= 1e-5 && ew <= 1e-5 && ev <= 4.0 / 256.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c03_gradient_check() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for f in [single(), pair(), quadratic(16)] {
        let g = grid(&f.domain, 64);
        let base = solve(&f, &g, InitMode::Quadratic, 1e-10).weights;
        for _ in 0..10 {
            let w = WeightVector(
                base.0
                    .iter()
                    .map(|r| r + rng.gen_range(-0.2..0.2))
                    .collect(),
            );
            let grad = residual(&f.cloud, &decompose(&f.cloud, &w, &g).unwrap());
            let eps = 1e-5;
            let mut err: f64 = 0.0;
            for i in 0..w.len() {
                let mut p = w.clone();
                let mut m = w.clone();
                p.0[i] += eps;
                m.0[i] -= eps;
                let jp = decompose(&f.cloud, &p, &g).unwrap().dual_value;
                let jm = decompose(&f.cloud, &m, &g).unwrap().dual_value;
                err = err.max(((jp - jm) / (2.0 * eps) - grad[i]).abs());
            }
            let scale = grad.iter().map(|x| x.abs()).fold(0.0, f64::max);
            worst = worst.max(err / scale);
        }
    }
    let detail = format!("worst relative error {worst:.2e} over 30 points");
    if worst <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c04_duality_gap() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for f in all_fixtures() {
        let g = grid(&f.domain, 128);
        let s = solve(&f, &g, InitMode::Quadratic, 1e-10);
        let e = s.stats.primal_energy;
        let rel = (e - s.stats.dual_value).abs() / e.abs().max(1.0);
        ok &= rel <= 1e-6;
        parts.push(format!("{} {rel:.1e}", f.name));
    }
    let detail = format!("relative gaps: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Run {
    name: &'static str,
    domain: DomainSpec,
    tol: f64,
    states: Vec<SimState>,
    grid: QuadratureGrid,
}

fn run(f: Fixture, columns: usize, scheme: Scheme, dt: f64, steps: usize) -> Run {
    let tol = 1e-10;
    let sim = Simulator::new(
        f.domain.clone(),
        &QuadratureSpec::new(columns).unwrap(),
        settings(&f.domain, tol),
        scheme,
        dt,
    )
    .unwrap();
    let init = InitMode::Quadratic.weights(&f.cloud);
    let state = sim.initial_state(f.cloud.clone(), &init).unwrap();
    let mut states = Vec::new();
    sim.run(state, steps, 1, |s| {
        states.push(s.clone());
        Ok(())
    })
    .unwrap();
    Run {
        name: f.name,
        domain: f.domain,
        tol,
        states,
        grid: sim.grid,
    }
}

fn standard_runs() -> Vec<Run> {
    vec![
        run(three(), 32, Scheme::Euler, 0.01, 100),
        run(single(), 32, Scheme::Rk4, 0.02, 10),
        run(pair(), 32, Scheme::Euler, 0.02, 20),
        run(quadratic(16), 48, Scheme::Rk4, 0.01, 10),
    ]
}

fn c05_mass(runs: &[Run]) -> Check {
    let r = &runs[0];
    let n = r.states[0].cloud.len() as f64;
    let worst = r.states.iter().map(|s| s.mass_error()).fold(0.0, f64::max);
    let others_ok = runs.iter().all(|r| {
        let n = r.states[0].cloud.len() as f64;
        r.states.iter().all(|s| s.mass_error() <= n * r.tol)
    });
    let detail = format!(
        "{} steps on {}: max |sum vol - 1| = {worst:.2e} (limit {:.1e})",
        r.states.len() - 1,
        r.name,
        n * r.tol
    );
    if r.states.len() == 101 && worst <= n * r.tol && others_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c06_slab(runs: &[Run]) -> Check {
    let mut snapshots = 0;
    for r in runs {
        let y3: Vec<u64> = r.states[0]
            .cloud
            .points()
            .iter()
            .map(|y| y[2].to_bits())
            .collect();
        for s in &r.states {
            snapshots += 1;
            let now: Vec<u64> = s.cloud.points().iter().map(|y| y[2].to_bits()).collect();
            if now != y3 {
                return Err(format!(
                    "{} step {}: third coordinate changed",
                    r.name, s.step
                ));
            }
        }
    }
    Ok(format!(
        "third coordinates bitwise constant over {snapshots} states"
    ))
}

fn c07_bounds(runs: &[Run]) -> Check {
    let mut count = 0;
    let mut tightest: f64 = 0.0;
    for r in runs {
        for s in &r.states {
            count += 1;
            let b = BoundsReport::evaluate(&r.domain, &r.grid, s).unwrap();
            let v = b.violations();
            if !v.is_empty() {
                return Err(format!("{} step {}: {v:?}", r.name, s.step));
            }
            for (m, bound) in [
                (b.height_max, b.height_bound),
                (b.slope_max, b.slope_bound),
                (b.height_l2, b.height_l2_bound),
                (b.velocity_l2, b.velocity_l2_bound),
            ] {
                tightest = tightest.max(m / bound);
            }
        }
    }
    Ok(format!(
        "{count} states within all four bounds, largest ratio {tightest:.3}"
    ))
}

fn c08_w1_lipschitz(runs: &[Run]) -> Check {
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    let mut peak: f64 = 0.0;
    let mut bound = f64::INFINITY;
    for r in runs {
        bound = bound.min(w1_speed_bound(&r.domain));
        let st = &r.states;
        for j in 0..st.len() {
            peak = peak.max(st[j].peak_speed);
            if st[j].peak_speed > w1_speed_bound(&r.domain) {
                return Err(format!("{} step {}: speed above bound", r.name, st[j].step));
            }
            for i in 0..j {
                pairs += 1;
                let w1 = w1_upper(&st[i].cloud, &st[j].cloud).unwrap();
                let allowance = st[j].peak_speed * (st[j].time - st[i].time);
                if w1 > allowance * (1.0 + 1e-9) {
                    return Err(format!(
                        "{} steps {}..{}: {w1:e} > {allowance:e}",
                        r.name, st[i].step, st[j].step
                    ));
                }
                if allowance > 0.0 {
                    worst = worst.max(w1 / allowance);
                }
            }
        }
    }
    Ok(format!(
        "{pairs} pairs, worst W1 / (speed dt) = {worst:.4}, peak speed {peak:.3} <= {bound:.3}"
    ))
}

/// Least-squares slope of `log2 err` against the halving index.
fn fitted_order(errs: &[f64]) -> f64 {
    let n = errs.len() as f64;
    let xs: Vec<f64> = (0..errs.len()).map(|k| k as f64).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.log2()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    -num / den
}

fn c09_convergence_orders() -> Check {
    let start = Instant::now();
    let horizon = 0.32;
    let dt0 = 0.04;
    let columns = 32;
    let particles = 400;
    let reference = run(three(), columns, Scheme::Euler, dt0 / 64.0, 512);
    let y_ref = reference.states.last().unwrap().cloud.points().to_vec();
    let (mut pos, mut drift, mut zres) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..4 {
        let dt = dt0 / f64::powi(2.0, k);
        let steps = (horizon / dt).round() as usize;
        let r = run(three(), columns, Scheme::Euler, dt, steps);
        let last = r.states.last().unwrap();
        let e = last
            .cloud
            .points()
            .iter()
            .zip(&y_ref)
            .map(|(a, b)| sgflow::domain::dist3(a, b))
            .fold(0.0, f64::max);
        pos.push(e);
        drift.push((last.energy() - r.states[0].energy()).abs());
        let s0 = &r.states[0];
        let xs =
            lagrangian::sample_particles(&s0.cloud, &s0.weights, &r.domain, particles, 5).unwrap();
        let ps = lagrangian::assign_particles(xs, &s0.cloud, &s0.weights, &r.domain).unwrap();
        let frames: Vec<Frame> = r
            .states
            .iter()
            .map(|s| Frame::from_state(s).unwrap())
            .collect();
        let log = lagrangian::trace(&ps, s0.cloud.masses(), frames).unwrap();
        zres.push(lagrangian::z_equation_residual(&log).unwrap());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (op, od, oz) = (
        fitted_order(&pos),
        fitted_order(&drift),
        fitted_order(&zres),
    );
    let detail = format!(
        "orders: position {op:.2}, energy drift {od:.2}, z residual {oz:.2}; errors {:.1e}..{:.1e}, {elapsed:.1} s",
        pos[0], pos[3]
    );
    if op >= 0.9 && od >= 0.9 && oz >= 0.9 && elapsed < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c10_oracle() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for f in all_fixtures() {
        let g = grid(&f.domain, 256);
        let s = solve(&f, &g, InitMode::Quadratic, 1e-10);
        let c: Vec<f64> = [128usize, 256]
            .iter()
            .map(|&res| {
                let v = voxel_decompose(&f.cloud, &s.weights, &f.domain, res).unwrap();
                max_volume_difference(&v, &s.stats) * res as f64
            })
            .collect();
        ok &= c[1] <= 2.0 * c[0];
        parts.push(format!("{} C {:.4} -> {:.4}", f.name, c[0], c[1]));
    }
    let detail = parts.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c11_uniqueness() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for f in all_fixtures() {
        let g = grid(&f.domain, 64);
        let a = solve(&f, &g, InitMode::Zero, 1e-10);
        let b = solve(&f, &g, InitMode::Quadratic, 1e-10);
        let d = a
            .stats
            .height_field
            .iter()
            .zip(&b.stats.height_field)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        ok &= d <= 1e-6;
        parts.push(format!("{} {d:.1e}", f.name));
    }
    let detail = format!("sup height differences: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c12_stability() -> Check {
    let f = three();
    let g = grid(&f.domain, 128);
    let base = solve(&f, &g, InitMode::Quadratic, 1e-11);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dirs: Vec<Vec3> = (0..f.cloud.len())
        .map(|_| {
            let v: Vec3 = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = sgflow::domain::norm3(&v);
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let mut ks = Vec::new();
    for eta in [1e-2, 5e-3, 2.5e-3] {
        let pts: Vec<Vec3> = f
            .cloud
            .points()
            .iter()
            .zip(&dirs)
            .map(|(y, d)| [y[0] + eta * d[0], y[1] + eta * d[1], y[2] + eta * d[2]])
            .collect();
        let moved = Fixture {
            name: f.name,
            domain: f.domain.clone(),
            cloud: f.cloud.with_points(pts).unwrap(),
        };
        let s = solve(&moved, &g, InitMode::Quadratic, 1e-11);
        let l1: f64 = g
            .nodes()
            .iter()
            .zip(s.stats.height_field.iter().zip(&base.stats.height_field))
            .map(|(n, (a, b))| n.weight * (a - b).abs())
            .sum();
        ks.push(l1 / eta);
    }
    let stable = ks
        .windows(2)
        .all(|p| p[1] / p[0] > 2.0 / 3.0 && p[1] / p[0] < 1.5);
    let detail = format!("K = {:.4}, {:.4}, {:.4}", ks[0], ks[1], ks[2]);
    if stable {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn weak_form_mean(dt: f64, particles: usize) -> f64 {
    let horizon = 0.2;
    let steps = (horizon / dt).round() as usize;
    let r = run(quadratic(16), 48, Scheme::Euler, dt, steps);
    let s0 = &r.states[0];
    let xs =
        lagrangian::sample_particles(&s0.cloud, &s0.weights, &r.domain, particles, 21).unwrap();
    let ps = lagrangian::assign_particles(xs, &s0.cloud, &s0.weights, &r.domain).unwrap();
    let frames: Vec<Frame> = r
        .states
        .iter()
        .map(|s| Frame::from_state(s).unwrap())
        .collect();
    let log = lagrangian::trace(&ps, s0.cloud.masses(), frames).unwrap();
    let suite = lagrangian::suite_for(&log);
    assert_eq!(suite.len(), 5);
    let total: f64 = suite
        .iter()
        .map(|(xi, psi)| {
            lagrangian::weak_form_residual(&log, xi, psi)
                .unwrap()
                .total
                .abs()
        })
        .sum();
    total / suite.len() as f64
}

fn c13_weak_form() -> Check {
    let coarse = weak_form_mean(0.02, 500);
    let fine = weak_form_mean(0.01, 1000);
    let detail = format!("mean |residual| {coarse:.3e} -> {fine:.3e}");
    if fine < coarse {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let runs = std::cell::OnceCell::new();
    let standard = || runs.get_or_init(standard_runs);
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        (
            "single Dirac weight and height",
            Box::new(c01_single_weight_and_height),
        ),
        (
            "single Dirac centroid and velocity",
            Box::new(c02_single_centroid_and_velocity),
        ),
        (
            "gradient of J matches residual",
            Box::new(c03_gradient_check),
        ),
        ("duality gap at convergence", Box::new(c04_duality_gap)),
        (
            "mass conservation over 100 steps",
            Box::new(|| c05_mass(standard())),
        ),
        ("slab exactness", Box::new(|| c06_slab(standard()))),
        (
            "a-priori bounds on every state",
            Box::new(|| c07_bounds(standard())),
        ),
        (
            "W1 Lipschitz in time",
            Box::new(|| c08_w1_lipschitz(standard())),
        ),
        (
            "time-step convergence orders",
            Box::new(c09_convergence_orders),
        ),
        ("voxel oracle agreement", Box::new(c10_oracle)),
        (
            "uniqueness across initializations",
            Box::new(c11_uniqueness),
        ),
        ("stability under perturbation", Box::new(c12_stability)),
        (
            "weak form residual under refinement",
            Box::new(c13_weak_form),
        ),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "[{:02}] {tag} {name}: {detail} ({:.1} s)",
            k + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
