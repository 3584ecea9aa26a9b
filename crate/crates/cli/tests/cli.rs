use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sgflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgflow"))
        .args(args)
        .output()
        .expect("spawn sgflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SQUARE: &str = r#""domain": {"omega2_polygon": [[0,0],[1,0],[1,1],[0,1]], "delta": 0.5, "cap_height": 30, "horizontal_radius": 3}"#;

fn single_dirac(steps: usize) -> String {
    format!(
        r#"{{{SQUARE},
  "initial": {{"explicit": {{"points": [[0,0,-1]], "masses": [1]}}}},
  "dt": 0.01, "steps": {steps}, "solver_tol": 1e-10,
  "quadrature": {{"columns_per_axis": 32}}}}"#
    )
}

fn three_atoms(steps: usize, scheme: &str) -> String {
    format!(
        r#"{{{SQUARE},
  "initial": {{"explicit": {{"points": [[0.3,0.4,-1],[0.7,0.5,-1.5],[0.4,0.7,-0.8]], "masses": [0.3,0.3,0.4]}}}},
  "dt": 0.02, "steps": {steps}, "scheme": "{scheme}", "solver_tol": 1e-10,
  "quadrature": {{"columns_per_axis": 32}}}}"#
    )
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn state_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("state_")
        })
        .collect();
    v.sort();
    v
}

#[test]
fn dual_solve_single_dirac_weight() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &single_dirac(0));
    let out = dir.path().join("out");
    let o = sgflow(&[
        "dual-solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let r = report["weights"][0].as_f64().unwrap();
    assert!((r + 4.0 / 3.0).abs() < 1e-6, "R = {r}");
    assert!(report["converged"].as_bool().unwrap());
    assert_eq!(json(&out.join("dual_solve.json")), report);
    assert!(out.join("height.csv").exists());
}

#[test]
fn simulate_zero_steps_writes_one_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &single_dirac(0));
    let run = dir.path().join("run");
    let o = sgflow(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(state_files(&run).len(), 1);
    let index = json(&run.join("index.json"));
    assert_eq!(index["snapshots"].as_array().unwrap().len(), 1);
    assert!(run.join("config.json").exists());
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let body = single_dirac(0).replace("\"steps\"", "\"stepz\": 1, \"steps\"");
    let cfg = write(dir.path(), "c.json", &body);
    let o = sgflow(&["dual-solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}

#[test]
fn oracle_passes_then_flags_tampered_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &three_atoms(0, "euler"));
    let run = dir.path().join("run");
    assert_eq!(
        code(&sgflow(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap()
        ])),
        0
    );
    let state = state_files(&run).remove(0);
    let o = sgflow(&[
        "oracle",
        "--state",
        state.to_str().unwrap(),
        "--resolution",
        "64",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let mut snap = json(&state);
    let v = snap["volumes"][0].as_f64().unwrap();
    snap["volumes"][0] = serde_json::json!(v + 0.05);
    let tampered = run.join("state_tampered.json");
    fs::write(&tampered, serde_json::to_string_pretty(&snap).unwrap()).unwrap();
    let o = sgflow(&[
        "oracle",
        "--state",
        tampered.to_str().unwrap(),
        "--resolution",
        "64",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runs_are_bitwise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &three_atoms(4, "rk4"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = sgflow(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = state_files(&a);
    assert_eq!(fa.len(), 5);
    for f in &fa {
        let name = f.file_name().unwrap();
        assert_eq!(
            fs::read(f).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name:?}"
        );
        let h = name
            .to_str()
            .unwrap()
            .replace("state_", "height_")
            .replace(".json", ".csv");
        assert_eq!(fs::read(a.join(&h)).unwrap(), fs::read(b.join(&h)).unwrap());
    }
}

#[test]
fn restart_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_cfg = write(dir.path(), "full.json", &three_atoms(6, "euler"));
    let full = dir.path().join("full");
    assert_eq!(
        code(&sgflow(&[
            "simulate",
            "--config",
            full_cfg.to_str().unwrap(),
            "--out",
            full.to_str().unwrap()
        ])),
        0
    );

    let part_cfg = write(dir.path(), "part.json", &three_atoms(3, "euler"));
    let part = dir.path().join("part");
    assert_eq!(
        code(&sgflow(&[
            "simulate",
            "--config",
            part_cfg.to_str().unwrap(),
            "--out",
            part.to_str().unwrap()
        ])),
        0
    );
    let resume_from = part.join("state_00000003.json");
    let o = sgflow(&[
        "simulate",
        "--config",
        full_cfg.to_str().unwrap(),
        "--out",
        part.to_str().unwrap(),
        "--resume",
        resume_from.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let names: Vec<_> = state_files(&full)
        .iter()
        .map(|p| p.file_name().unwrap().to_owned())
        .collect();
    assert_eq!(names.len(), 7);
    for n in &names {
        assert_eq!(
            fs::read(full.join(n)).unwrap(),
            fs::read(part.join(n)).unwrap(),
            "{n:?}"
        );
    }
    assert_eq!(
        fs::read(full.join("index.json")).unwrap(),
        fs::read(part.join("index.json")).unwrap()
    );
}

#[test]
fn trace_and_energy_report_on_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &three_atoms(4, "rk4"));
    let run = dir.path().join("run");
    assert_eq!(
        code(&sgflow(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap()
        ])),
        0
    );

    let o = sgflow(&[
        "trace",
        "--run",
        run.to_str().unwrap(),
        "--particles",
        "400",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["snapshots"], 5);
    assert_eq!(report["weak_form"].as_array().unwrap().len(), 5);
    let csv = fs::read_to_string(run.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,particle,x1,x2,x3,cell"));
    assert_eq!(csv.lines().count(), 1 + 5 * 400);

    let o = sgflow(&["energy-report", "--run", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&run.join("energy_report.json"));
    assert!(report["slab_preserved"].as_bool().unwrap());
    assert!(report["breaches"].as_array().unwrap().is_empty());
}

#[test]
fn missing_run_directory_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgflow(&[
        "energy-report",
        "--run",
        dir.path().join("nope").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}
