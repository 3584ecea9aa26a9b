use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use sgflow::dynamics::BoundsReport;
use sgflow::io::{
    self, read_height_csv, read_run, read_snapshot, write_config, Snapshot, CONFIG_FILE,
};
use sgflow::lagrangian::{self, MarginalMode};
use sgflow::oracle::{voxel_decompose, w1_upper};
use sgflow::{load_config, solve_weights, RunWriter, Simulator, Vec3};

/// Default for `oracle --constant`: about twice the largest
/// `max |dvol| * resolution` seen on the reference fixtures.
pub const ORACLE_CONSTANT: f64 = 0.1;

/// Relative duality-gap tolerance used by `energy-report`.
const GAP_TOL: f64 = 1e-6;

pub enum Outcome {
    Pass,
    Breach(String),
}

fn emit<T: Serialize>(value: &T, file: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = file {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DualSolveReport {
    status: sgflow::SolveStatus,
    converged: bool,
    iterations: usize,
    restarts: usize,
    residual_inf: f64,
    dual_value: f64,
    primal_energy: f64,
    duality_gap: f64,
    max_height: f64,
    weights: Vec<f64>,
    volumes: Vec<f64>,
    centroids: Vec<Option<Vec3>>,
    wall_time_s: f64,
}

pub fn dual_solve(config: &Path, out: Option<&Path>) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let sim = Simulator::from_config(&cfg)?;
    let cloud = sim.initial_cloud(&cfg.initial)?;
    let sol = solve_weights(
        &cloud,
        &cfg.solver_init.weights(&cloud),
        &sim.grid,
        &sim.settings,
    )?;
    let s = &sol.stats;
    let report = DualSolveReport {
        status: sol.report.status,
        converged: sol.report.converged,
        iterations: sol.report.iterations,
        restarts: sol.report.restarts,
        residual_inf: sol.report.residual_inf,
        dual_value: s.dual_value,
        primal_energy: s.primal_energy,
        duality_gap: s.primal_energy - s.dual_value,
        max_height: s.max_height(),
        weights: sol.weights.0.clone(),
        volumes: s.volumes(),
        centroids: s.centroids(),
        wall_time_s: sol.report.wall_time_s,
    };
    let file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            io::write_height_csv(&dir.join("height.csv"), &sim.grid, &s.height_field)?;
            Some(dir.join("dual_solve.json"))
        }
        None => None,
    };
    emit(&report, file.as_deref())?;
    Ok(if sol.report.converged {
        Outcome::Pass
    } else {
        Outcome::Breach(format!("solver stopped with {:?}", sol.report.status))
    })
}

pub fn simulate(
    config: &Path,
    out: Option<&Path>,
    stride: Option<usize>,
    resume: Option<&Path>,
) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let dir: PathBuf = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone().map(PathBuf::from))
        .ok_or_else(|| anyhow!("no output directory: pass --out or set output.dir"))?;
    let stride = stride.unwrap_or(cfg.output.stride);
    if stride == 0 {
        bail!("--stride must be positive");
    }
    let sim = Simulator::from_config(&cfg)?;
    let mut writer = RunWriter::open(&dir)?;
    write_config(&dir, &cfg)?;
    let state = match resume {
        Some(p) => {
            let snap = read_snapshot(p)?;
            let cloud = snap.cloud()?;
            cloud.check_support(&sim.domain)?;
            log::info!("resuming from step {} (t = {})", snap.step, snap.time);
            sim.resume(cloud, snap.weights(), snap.carry())?
        }
        None => {
            let cloud = sim.initial_cloud(&cfg.initial)?;
            let w = cfg.solver_init.weights(&cloud);
            sim.initial_state(cloud, &w)?
        }
    };
    let remaining = cfg.steps.saturating_sub(state.step);
    let last = sim.run(state, remaining, stride, |s| {
        writer.write(s, &sim.grid).map(|_| ())
    })?;
    log::info!(
        "finished at step {} t = {}: {} snapshots in {}",
        last.step,
        last.time,
        writer.index().snapshots.len(),
        dir.display()
    );
    Ok(Outcome::Pass)
}

fn run_config(run: &Path) -> Result<(sgflow::SimConfig, Simulator)> {
    let cfg = load_config(&run.join(CONFIG_FILE))?;
    let sim = Simulator::from_config(&cfg)?;
    Ok((cfg, sim))
}

fn load_snapshots(run: &Path) -> Result<Vec<Snapshot>> {
    let snaps = read_run(run)?;
    if snaps.is_empty() {
        bail!("{} has no snapshots", run.display());
    }
    Ok(snaps)
}

#[derive(Serialize)]
struct MarginalEntry {
    time: f64,
    l1: f64,
}

#[derive(Serialize)]
struct WeakFormEntry {
    xi: String,
    psi: String,
    transport: f64,
    rotation: f64,
    initial: f64,
    total: f64,
}

#[derive(Serialize)]
struct TraceReport {
    particles: usize,
    seed: u64,
    counts: Vec<usize>,
    snapshots: usize,
    z_equation_residual: Option<f64>,
    marginal: Vec<MarginalEntry>,
    weak_form: Vec<WeakFormEntry>,
    trajectory_csv: String,
}

pub fn trace(
    run: &Path,
    particles: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Outcome> {
    let (cfg, sim) = run_config(run)?;
    let snaps = load_snapshots(run)?;
    let m = particles.unwrap_or(cfg.trace.particles);
    let seed = seed.unwrap_or(cfg.trace.seed);
    let first = &snaps[0];
    let cloud0 = first.cloud()?;
    let w0 = first.weights();
    let xs = lagrangian::sample_particles(&cloud0, &w0, &sim.domain, m, seed)?;
    let ps = lagrangian::assign_particles(xs, &cloud0, &w0, &sim.domain)?;
    let frames = snaps
        .iter()
        .map(Snapshot::frame)
        .collect::<sgflow::Result<Vec<_>>>()?;
    let log = lagrangian::trace(&ps, cloud0.masses(), frames)?;
    let csv = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("trajectory.csv"));
    io::write_trajectory_csv(&csv, &log)?;

    let mut marginal = Vec::with_capacity(snaps.len());
    for (s, snap) in snaps.iter().enumerate() {
        let field: Vec<f64> = read_height_csv(&run.join(&snap.height_file))?
            .iter()
            .map(|r| r[2])
            .collect();
        let l1 = lagrangian::marginal_check(
            &log,
            s,
            &sim.grid,
            &field,
            &sim.domain,
            cfg.trace.histogram_bins,
            MarginalMode::Centroid,
        )?;
        marginal.push(MarginalEntry {
            time: snap.time,
            l1,
        });
    }
    let (z, weak_form) = if snaps.len() >= 2 {
        let z = lagrangian::z_equation_residual(&log)?;
        let mut wf = Vec::new();
        for (xi, psi) in lagrangian::suite_for(&log) {
            let r = lagrangian::weak_form_residual(&log, &xi, &psi)?;
            wf.push(WeakFormEntry {
                xi: format!("{xi:?}"),
                psi: format!("{psi:?}"),
                transport: r.transport,
                rotation: r.rotation,
                initial: r.initial,
                total: r.total,
            });
        }
        (Some(z), wf)
    } else {
        (None, Vec::new())
    };
    let report = TraceReport {
        particles: m,
        seed,
        counts: ps.counts(cloud0.len()),
        snapshots: snaps.len(),
        z_equation_residual: z,
        marginal,
        weak_form,
        trajectory_csv: csv.display().to_string(),
    };
    emit(&report, Some(&run.join("trace_report.json")))?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct OracleReport {
    resolution: usize,
    max_volume_difference: f64,
    tolerance: f64,
    voxel_volumes: Vec<f64>,
    state_volumes: Vec<f64>,
}

pub fn oracle(
    state: &Path,
    config: Option<&Path>,
    resolution: usize,
    constant: f64,
) -> Result<Outcome> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => state.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let cfg = load_config(&cfg_path)?;
    let snap = read_snapshot(state)?;
    let cloud = snap.cloud()?;
    if snap.volumes.len() != cloud.len() {
        bail!(
            "state has {} volumes for {} atoms",
            snap.volumes.len(),
            cloud.len()
        );
    }
    let vox = voxel_decompose(&cloud, &snap.weights(), &cfg.domain, resolution)?;
    let voxel_volumes = vox.volumes();
    let diff = voxel_volumes
        .iter()
        .zip(&snap.volumes)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let tolerance = constant / resolution as f64;
    emit(
        &OracleReport {
            resolution,
            max_volume_difference: diff,
            tolerance,
            voxel_volumes,
            state_volumes: snap.volumes.clone(),
        },
        None,
    )?;
    Ok(if diff <= tolerance {
        Outcome::Pass
    } else {
        Outcome::Breach(format!(
            "max volume difference {diff:e} exceeds {tolerance:e}"
        ))
    })
}

#[derive(Serialize)]
struct SnapshotSummary {
    step: usize,
    time: f64,
    energy: f64,
    dual_value: f64,
    duality_gap: f64,
    mass_error: f64,
    support_radius: f64,
    bounds: BoundsReport,
    violations: Vec<String>,
}

#[derive(Serialize)]
struct EnergyReport {
    snapshots: Vec<SnapshotSummary>,
    energy_drift_max: f64,
    energy_drift_final: f64,
    w1_pairs: usize,
    w1_worst_ratio: f64,
    peak_speed: f64,
    speed_bound: f64,
    slab_preserved: bool,
    breaches: Vec<String>,
}

pub fn energy_report(run: &Path) -> Result<Outcome> {
    let (cfg, sim) = run_config(run)?;
    let snaps = load_snapshots(run)?;
    let mut breaches = Vec::new();
    let mut summaries = Vec::with_capacity(snaps.len());
    let mut clouds = Vec::with_capacity(snaps.len());
    for snap in &snaps {
        let cloud = snap.cloud()?;
        let state = sim.resume(cloud.clone(), snap.weights(), snap.carry())?;
        let bounds = BoundsReport::evaluate(&sim.domain, &sim.grid, &state)?;
        let mut violations: Vec<String> =
            bounds.violations().iter().map(|s| s.to_string()).collect();
        let e = state.stats.primal_energy;
        let gap = e - state.stats.dual_value;
        if gap.abs() > GAP_TOL * e.abs().max(1.0) {
            violations.push("duality_gap".into());
        }
        let mass_error = state.mass_error();
        if mass_error > cloud.len() as f64 * cfg.solver_tol {
            violations.push("mass".into());
        }
        for v in &violations {
            breaches.push(format!("step {}: {v}", snap.step));
        }
        summaries.push(SnapshotSummary {
            step: snap.step,
            time: snap.time,
            energy: e,
            dual_value: state.stats.dual_value,
            duality_gap: gap,
            mass_error,
            support_radius: snap.support_radius,
            bounds,
            violations,
        });
        clouds.push(cloud);
    }
    let e0 = summaries[0].energy;
    let drift_max = summaries
        .iter()
        .map(|s| (s.energy - e0).abs())
        .fold(0.0, f64::max);
    let drift_final = summaries.last().map_or(0.0, |s| s.energy - e0);

    let mut worst_ratio: f64 = 0.0;
    let mut pairs = 0;
    for j in 0..snaps.len() {
        for i in 0..j {
            pairs += 1;
            let w1 = w1_upper(&clouds[i], &clouds[j])?;
            let allowance = snaps[j].peak_speed * (snaps[j].time - snaps[i].time);
            if w1 > 0.0 {
                worst_ratio = worst_ratio.max(w1 / allowance);
            }
            if w1 > allowance * (1.0 + 1e-9) {
                breaches.push(format!(
                    "W1 between steps {} and {}",
                    snaps[i].step, snaps[j].step
                ));
            }
        }
    }
    let peak = snaps.iter().map(|s| s.peak_speed).fold(0.0, f64::max);
    let speed_bound = sgflow::dynamics::w1_speed_bound(&sim.domain);
    if peak > speed_bound {
        breaches.push("peak speed above bound".into());
    }
    let y3: Vec<u64> = clouds[0].points().iter().map(|y| y[2].to_bits()).collect();
    let slab = clouds.iter().all(|c| {
        c.points()
            .iter()
            .map(|y| y[2].to_bits())
            .eq(y3.iter().copied())
    });
    if !slab {
        breaches.push("third dual coordinate changed".into());
    }
    let breached = !breaches.is_empty();
    let summary = breaches.join("; ");
    emit(
        &EnergyReport {
            snapshots: summaries,
            energy_drift_max: drift_max,
            energy_drift_final: drift_final,
            w1_pairs: pairs,
            w1_worst_ratio: worst_ratio,
            peak_speed: peak,
            speed_bound,
            slab_preserved: slab,
            breaches,
        },
        Some(&run.join("energy_report.json")),
    )?;
    Ok(if breached {
        Outcome::Breach(summary)
    } else {
        Outcome::Pass
    })
}
