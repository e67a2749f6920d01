//! End-to-end behavior of the `ionhom` binary: exit codes, artifact layout,
//! and the documented CSV structure of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ionhom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ionhom"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.conf");
    fs::write(&p, body).unwrap();
    p
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Reads one named column of a CSV file as strings.
fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap_or_else(|_| panic!("missing {path:?}"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("csv header").split(',').collect();
    let idx = header
        .iter()
        .position(|h| *h == name)
        .unwrap_or_else(|| panic!("column {name} not in {header:?}"));
    lines
        .map(|l| l.split(',').nth(idx).unwrap_or("").to_string())
        .collect()
}

fn csv_column_f64(path: &Path, name: &str) -> Vec<f64> {
    csv_column(path, name)
        .iter()
        .map(|s| s.parse().expect("numeric column"))
        .collect()
}

#[test]
fn validate_accepts_the_defaults_and_echoes_them() {
    let out = ionhom(&["validate"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("configuration ok"), "{text}");
    assert!(text.contains("run.connectivity = con_discon"), "{text}");
}

#[test]
fn bad_epsilon_fails_with_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "run.epsilon_inv = 3\n");
    let out = ionhom(&["validate", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("\"kind\":\"config\""), "{err}");
    assert!(stdout_of(&out).contains("not divisible"), "{}", stdout_of(&out));
}

#[test]
fn unknown_key_fails_with_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "physics.unknown = 1\n");
    let out = ionhom(&["micro", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("physics.unknown"), "{}", stderr_of(&out));
}

#[test]
fn cell_problem_writes_tensor_csv_with_symmetry_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "run.epsilon_inv = 2\nrun.grid_resolution = 16\n");
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "cell-problem",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("symmetry check"), "{}", stdout_of(&out));

    let tensors = outdir.join("tensors.csv");
    let header = fs::read_to_string(&tensors).unwrap();
    assert!(header.starts_with("phase,m00,m01,m10,m11"), "{header}");
    // Default geometry has both phases, so two data rows.
    assert_eq!(header.lines().count(), 3, "{header}");
    // Off-diagonal entries agree to round-off.
    let m01 = csv_column_f64(&tensors, "m01");
    let m10 = csv_column_f64(&tensors, "m10");
    for (a, b) in m01.iter().zip(&m10) {
        assert!((a - b).abs() <= 1e-8, "asymmetric tensor: {a} vs {b}");
    }

    let manifest = fs::read_to_string(outdir.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("config_sha256 = "), "{manifest}");
    assert!(manifest.contains("artifact = tensors.csv"), "{manifest}");
    assert!(manifest.contains("artifact = config.resolved"), "{manifest}");
}

#[test]
fn default_macro_run_completes_with_tiny_en_drift() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let out = ionhom(&["macro", "--out", outdir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let en = csv_column_f64(&outdir.join("series.csv"), "en_max");
    assert_eq!(en.len(), 501);
    let worst = en.iter().cloned().fold(0.0f64, f64::max);
    assert!(worst <= 1e-10, "electroneutrality drift {worst}");
}

#[test]
fn incompatible_geometry_and_regime_is_a_config_failure() {
    // The cross-channel geometry leaves the extracellular phase as isolated
    // pockets, so the connected-disconnected model refuses it up front.
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "geometry.shape = cross_channel\nrun.epsilon_inv = 2\nrun.grid_resolution = 16\nrun.T_end = 0.01\n",
    );
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "macro",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("\"kind\":\"config\""), "{}", stderr_of(&out));
}

#[test]
fn picard_divergence_is_a_runtime_failure() {
    // A single Picard sweep cannot resolve the implicit step from the
    // resting-gradient initial data, so the solver reports divergence.
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "run.epsilon_inv = 2\nrun.grid_resolution = 16\nrun.T_end = 0.002\nrun.dt = 1e-3\nrun.picard_max_iter = 1\nrun.snapshots = 1.0\n",
    );
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "micro",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("\"kind\":\"runtime\""), "{err}");
}

#[test]
fn micro_run_emits_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "run.epsilon_inv = 2\nrun.grid_resolution = 16\nrun.T_end = 0.005\nrun.dt = 1e-3\nrun.snapshots = 1.0\n",
    );
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "micro",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let series = fs::read_to_string(outdir.join("series.csv")).unwrap();
    assert!(
        series.starts_with("t,total_Na,total_K,total_Cl,en_max,sigma_min,picard_sweeps"),
        "{series}"
    );
    assert_eq!(series.lines().count(), 7, "header + 6 states");
    // One averages row per block at the single snapshot.
    let averages = fs::read_to_string(outdir.join("averages.csv")).unwrap();
    assert_eq!(averages.lines().count(), 1 + 4);
    let norms = fs::read_to_string(outdir.join("norms.csv")).unwrap();
    assert!(norms.starts_with("norm,value"), "{norms}");
    assert_eq!(norms.lines().count(), 1 + 22);
    let manifest = fs::read_to_string(outdir.join("manifest.txt")).unwrap();
    for name in ["series.csv", "averages.csv", "norms.csv", "config.resolved"] {
        assert!(manifest.contains(&format!("artifact = {name}")), "{manifest}");
    }
}

#[test]
fn single_epsilon_study_reports_no_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "run.grid_resolution = 16\nrun.epsilon_inv = 2\nrun.T_end = 0.004\nrun.dt = 1e-3\nrun.snapshots = 1.0\n",
    );
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "converge",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--epsilons",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let errors = outdir.join("errors.csv");
    let ratios = csv_column(&errors, "ratio");
    assert_eq!(ratios.len(), 7, "7 tracked fields, one snapshot, one eps");
    assert!(ratios.iter().all(|r| r.is_empty()), "{ratios:?}");
}

#[test]
fn ratio_column_matches_adjacent_error_rows() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "run.grid_resolution = 16\nrun.epsilon_inv = 2\nrun.T_end = 0.004\nrun.dt = 1e-3\nrun.snapshots = 0.5,1.0\n",
    );
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "converge",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--epsilons",
        "1,2",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let errors = outdir.join("errors.csv");
    let field = csv_column(&errors, "field");
    let err = csv_column_f64(&errors, "error");
    let ratio = csv_column(&errors, "ratio");
    let t = csv_column(&errors, "t");
    for k in 1..err.len() {
        if field[k] == field[k - 1] && t[k] == t[k - 1] {
            let recomputed = err[k] / err[k - 1];
            let reported: f64 = ratio[k].parse().expect("ratio present");
            assert!(
                (reported - recomputed).abs() <= 1e-12 * recomputed.abs().max(1.0),
                "ratio mismatch at row {k}: {reported} vs {recomputed}"
            );
        } else {
            assert!(ratio[k].is_empty(), "row {k} should start a new sequence");
        }
    }
}

#[test]
fn degenerate_uncoupled_study_has_vanishing_errors() {
    // With no channels, no pump, and no capacitance the membrane carries
    // nothing, so micro and macro both freeze at the uniform initial state.
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        concat!(
            "physics.G.Na = 0\nphysics.G.K = 0\nphysics.G.Cl = 0\n",
            "physics.P_m = 0\n",
            "pump.I_max1 = 0\npump.I_max2 = 0\n",
            "run.grid_resolution = 16\nrun.epsilon_inv = 2\n",
            "run.T_end = 0.01\nrun.dt = 1e-3\nrun.snapshots = 0.5,1.0\n"
        ),
    );
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "converge",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--epsilons",
        "1,2",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let err = csv_column_f64(&outdir.join("errors.csv"), "error");
    assert_eq!(err.len(), 7 * 2 * 2);
    for e in err {
        assert!(e <= 1e-10, "expected frozen dynamics, error {e}");
    }
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn study_artifacts_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "run.grid_resolution = 16\nrun.epsilon_inv = 2\nrun.T_end = 0.004\nrun.dt = 1e-3\nrun.snapshots = 1.0\n",
    );
    let mut captures = Vec::new();
    for name in ["a", "b"] {
        let outdir = dir.path().join(name);
        let out = ionhom(&[
            "converge",
            "--config",
            conf.to_str().unwrap(),
            "--out",
            outdir.to_str().unwrap(),
            "--epsilons",
            "1,2",
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        captures.push(artifact_bytes(&outdir));
    }
    let (a, b) = (&captures[0], &captures[1]);
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(b.iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "artifact {name_a} differs between runs");
    }
}

#[test]
fn membrane_probe_total_current_is_increasing_in_v() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let out = ionhom(&[
        "membrane",
        "--probe",
        "--out",
        outdir.to_str().unwrap(),
        "--points",
        "41",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("resting potential"), "{}", stdout_of(&out));
    let total = csv_column_f64(&outdir.join("probe.csv"), "I_total");
    assert_eq!(total.len(), 41);
    for k in 1..total.len() {
        assert!(total[k] > total[k - 1], "total current must rise with v");
    }
}
