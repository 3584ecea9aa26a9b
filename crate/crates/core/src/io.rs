//! Run directories: a JSON state file and a height CSV per snapshot, an
//! index of all snapshots, and a copy of the configuration. Floats are
//! written as shortest round-trip decimals, so a reload is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{validate_config, DiracCloud, SimConfig, Vec3, WeightVector};
use crate::dynamics::{Carry, SimState};
use crate::error::{Error, Result};
use crate::geometry::QuadratureGrid;
use crate::lagrangian::{Frame, TrajectoryLog};
use crate::solver::{SolveReport, SolveStatus};

pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_FILE: &str = "config.json";

/// Persisted view of a [`SimState`]. Wall-clock data is left out so that
/// identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub time: f64,
    pub step: usize,
    pub points: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub weights: Vec<f64>,
    pub volumes: Vec<f64>,
    pub centroids: Vec<Option<Vec3>>,
    /// height CSV, relative to the state file's directory
    pub height_file: String,
    pub energy: f64,
    pub dual_value: f64,
    pub duality_gap: f64,
    pub residual_inf: f64,
    pub total_volume: f64,
    pub height_volume: f64,
    pub height_sq: f64,
    pub support_radius: f64,
    pub allowed_radius: f64,
    pub step_speed: f64,
    pub peak_speed: f64,
    pub solver_status: SolveStatus,
    pub solver_iterations: usize,
    pub solver_restarts: usize,
}

impl Snapshot {
    pub fn from_state(state: &SimState, height_file: impl Into<String>) -> Self {
        let s = &state.stats;
        Self {
            time: state.time,
            step: state.step,
            points: state.cloud.points().to_vec(),
            masses: state.cloud.masses().to_vec(),
            weights: state.weights.0.clone(),
            volumes: s.volumes(),
            centroids: s.centroids(),
            height_file: height_file.into(),
            energy: s.primal_energy,
            dual_value: s.dual_value,
            duality_gap: s.primal_energy - s.dual_value,
            residual_inf: state.report.residual_inf,
            total_volume: s.total_volume,
            height_volume: s.height_volume,
            height_sq: s.height_sq,
            support_radius: state.cloud.support_radius(),
            allowed_radius: state.allowed_radius,
            step_speed: state.step_speed,
            peak_speed: state.peak_speed,
            solver_status: state.report.status,
            solver_iterations: state.report.iterations,
            solver_restarts: state.report.restarts,
        }
    }

    pub fn cloud(&self) -> Result<DiracCloud> {
        DiracCloud::new(self.points.clone(), self.masses.clone())
    }

    pub fn weights(&self) -> WeightVector {
        WeightVector(self.weights.clone())
    }

    /// Trace frame; every cell must be nonempty.
    pub fn frame(&self) -> Result<Frame> {
        let centroids = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| c.ok_or(Error::EmptyCell(i)))
            .collect::<Result<_>>()?;
        Ok(Frame {
            time: self.time,
            points: self.points.clone(),
            weights: self.weights(),
            centroids,
        })
    }

    pub fn carry(&self) -> Carry {
        Carry {
            step: self.step,
            allowed_radius: self.allowed_radius,
            step_speed: self.step_speed,
            peak_speed: self.peak_speed,
            report: self.report(),
        }
    }

    /// Solver summary as far as it was persisted.
    pub fn report(&self) -> SolveReport {
        SolveReport {
            status: self.solver_status,
            converged: self.solver_status == SolveStatus::Converged,
            iterations: self.solver_iterations,
            residual_inf: self.residual_inf,
            dual_value: self.dual_value,
            step_sizes: Vec::new(),
            j_history: Vec::new(),
            restarts: self.solver_restarts,
            wall_time_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub step: usize,
    pub time: f64,
    pub state: String,
    pub height: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunIndex {
    pub snapshots: Vec<IndexEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("plain data serializes");
    v.push(b'\n');
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
}

pub fn state_file_name(step: usize) -> String {
    format!("state_{step:08}.json")
}

pub fn height_file_name(step: usize) -> String {
    format!("height_{step:08}.csv")
}

/// Writes `x1,x2,h` for every reporting node of `grid`.
pub fn write_height_csv(path: &Path, grid: &QuadratureGrid, field: &[f64]) -> Result<()> {
    if field.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            found: field.len(),
        });
    }
    let mut out = String::with_capacity(40 * field.len() + 8);
    out.push_str("x1,x2,h\n");
    for (n, h) in grid.nodes().iter().zip(field) {
        out.push_str(&format!("{},{},{}\n", n.x[0], n.x[1], h));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_height_csv(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: 1,
        msg,
    };
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(k + 1, e.to_string()))?;
        if vals.len() != 3 {
            return Err(bad(
                k + 1,
                format!("expected 3 fields, found {}", vals.len()),
            ));
        }
        rows.push([vals[0], vals[1], vals[2]]);
    }
    Ok(rows)
}

pub fn write_snapshot_file(path: &Path, snap: &Snapshot) -> Result<()> {
    write_atomic(path, &to_json(snap))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    read_json(path)
}

pub fn read_index(dir: &Path) -> Result<RunIndex> {
    read_json(&dir.join(INDEX_FILE))
}

/// Snapshots of a run directory in index order.
pub fn read_run(dir: &Path) -> Result<Vec<Snapshot>> {
    read_index(dir)?
        .snapshots
        .iter()
        .map(|e| read_snapshot(&dir.join(&e.state)))
        .collect()
}

/// Parses and validates a configuration. Unknown keys are errors.
pub fn load_config(path: &Path) -> Result<SimConfig> {
    let cfg: SimConfig = read_json(path)?;
    validate_config(cfg)
}

pub fn write_config(dir: &Path, cfg: &SimConfig) -> Result<PathBuf> {
    let p = dir.join(CONFIG_FILE);
    write_atomic(&p, &to_json(cfg))?;
    Ok(p)
}

/// Serialized writer for one run directory.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    index: RunIndex,
}

impl RunWriter {
    /// Opens `dir`, keeping index entries of an earlier run.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let index = if dir.join(INDEX_FILE).exists() {
            read_index(&dir)?
        } else {
            RunIndex::default()
        };
        Ok(Self { dir, index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &RunIndex {
        &self.index
    }

    /// Writes state file and height CSV, then the updated index. An entry
    /// with the same step replaces the old one; later steps are dropped so
    /// that a resumed run does not mix with a stale tail.
    pub fn write(&mut self, state: &SimState, grid: &QuadratureGrid) -> Result<Vec<PathBuf>> {
        let state_name = state_file_name(state.step);
        let height_name = height_file_name(state.step);
        let height_path = self.dir.join(&height_name);
        write_height_csv(&height_path, grid, &state.stats.height_field)?;
        let state_path = self.dir.join(&state_name);
        write_snapshot_file(
            &state_path,
            &Snapshot::from_state(state, height_name.clone()),
        )?;
        self.index.snapshots.retain(|e| e.step < state.step);
        self.index.snapshots.push(IndexEntry {
            step: state.step,
            time: state.time,
            state: state_name,
            height: height_name,
        });
        let index_path = self.dir.join(INDEX_FILE);
        write_atomic(&index_path, &to_json(&self.index))?;
        Ok(vec![state_path, height_path, index_path])
    }
}

/// Trajectory CSV: `t,particle,x1,x2,x3,cell`.
pub fn write_trajectory_csv(path: &Path, log: &TrajectoryLog) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "t,particle,x1,x2,x3,cell")?;
        for (s, f) in log.frames.iter().enumerate() {
            for p in 0..log.particles.len() {
                let x = log.position(s, p);
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    f.time, p, x[0], x[1], x[2], log.particles.cells[p]
                )?;
            }
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ConvexPolygon, DomainSpec, QuadratureSpec, Scheme};
    use crate::dynamics::Simulator;
    use crate::solver::{InitMode, SolverSettings};

    fn sim() -> Simulator {
        let d = DomainSpec::new(ConvexPolygon::unit_square(), 0.5, 30.0, 3.0).unwrap();
        let st = SolverSettings::new(1e-10, 200, d.delta(), d.cap_height());
        Simulator::new(
            d,
            &QuadratureSpec::new(16).unwrap(),
            st,
            Scheme::Euler,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let s = sim();
        let c = DiracCloud::uniform(vec![[0.31, 0.42, -1.0], [0.7, 0.55, -1.3]]).unwrap();
        let st = s
            .initial_state(c.clone(), &InitMode::Quadratic.weights(&c))
            .unwrap();
        let st = s.step(&st).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::open(dir.path()).unwrap();
        let paths = w.write(&st, &s.grid).unwrap();
        let back = read_snapshot(&paths[0]).unwrap();
        assert_eq!(back, Snapshot::from_state(&st, height_file_name(1)));
        for (a, b) in back.weights.iter().zip(&st.weights.0) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let rows = read_height_csv(&paths[1]).unwrap();
        assert_eq!(rows.len(), s.grid.len());
        for (r, h) in rows.iter().zip(&st.stats.height_field) {
            assert_eq!(r[2].to_bits(), h.to_bits());
        }
        // rebuilt state equals the original
        let again = s
            .resume(back.cloud().unwrap(), back.weights(), back.carry())
            .unwrap();
        assert_eq!(again.stats, st.stats);
    }

    #[test]
    fn index_is_monotone_and_replaces_tail() {
        let s = sim();
        let c = DiracCloud::uniform(vec![[0.2, 0.3, -1.0]]).unwrap();
        let st0 = s
            .initial_state(c.clone(), &InitMode::Quadratic.weights(&c))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::open(dir.path()).unwrap();
        let mut states = vec![st0];
        for _ in 0..3 {
            states.push(s.step(states.last().unwrap()).unwrap());
        }
        for st in &states {
            w.write(st, &s.grid).unwrap();
        }
        let idx = read_index(dir.path()).unwrap();
        assert_eq!(idx.snapshots.len(), 4);
        assert!(idx.snapshots.windows(2).all(|p| p[1].time > p[0].time));
        let mut w2 = RunWriter::open(dir.path()).unwrap();
        w2.write(&states[1], &s.grid).unwrap();
        assert_eq!(read_index(dir.path()).unwrap().snapshots.len(), 2);
    }

    #[test]
    fn config_errors_carry_location_and_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{
  "domain": {"omega2_polygon": [[0,0],[1,0],[1,1],[0,1]], "delta": 0.5, "cap_height": 30, "horizontal_radius": 3},
  "initial": {"explicit": {"points": [[0,0,-1]], "masses": [1]}},
  "dt": 0.01, "dtt": 0.02, "steps": 1,
  "quadrature": {"columns_per_axis": 16}
}"#,
        )
        .unwrap();
        let err = load_config(&p).unwrap_err();
        match &err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(*line, 4);
                assert!(msg.contains("dtt"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_config(&p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            load_config(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn minimal_config_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{"domain": {"omega2_polygon": [[0,0],[1,0],[1,1],[0,1]], "delta": 0.5, "cap_height": 30, "horizontal_radius": 3},
               "initial": {"explicit": {"points": [[0,0,-1]], "masses": [1]}},
               "dt": 0.01, "steps": 0, "quadrature": {"columns_per_axis": 16}}"#,
        )
        .unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.steps, 0);
        let out = write_config(dir.path(), &cfg).unwrap();
        assert_eq!(load_config(&out).unwrap(), cfg);
    }
}
