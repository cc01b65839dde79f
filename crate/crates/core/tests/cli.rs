use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ionlattice(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ionlattice"))
        .current_dir(dir)
        .env_remove("IONLATTICE_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_LATTICE: &str = "seed = 3\n\n[lattice]\ndepth_points = 3\n\n[monte_carlo]\nn_samples = 2000\n";

#[test]
fn equilibrium_writes_structure_and_provenance() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["--out", "o", "equilibrium", "--n-ions", "6", "--omega-z-khz", "105", "--omega-r-khz", "192", "--radial-split", "0.05"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = read_json(&tmp.path().join("o/equilibrium.json"));
    assert_eq!(out["structure"], "three_dimensional");
    assert_eq!(out["positions"].as_array().unwrap().len(), 6);
    let prov = read_json(&tmp.path().join("o/equilibrium.json.provenance.json"));
    assert_eq!(prov["seed"], 1);
    assert_eq!(prov["config"]["crystal"]["n_ions"], 6);
    assert_eq!(prov["config"]["trap"]["omega_z_khz"], 105.0);
}

#[test]
fn stats_reports_secondary_fraction() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["stats", "--n", "8", "--p", "0.1", "--trials", "10000"]);
    assert!(o.status.success());
    let out = read_json(&tmp.path().join("stats.json"));
    assert!((out["secondary_fraction"].as_f64().unwrap() - 0.288).abs() < 5e-4);
    assert_eq!(out["distribution"].as_array().unwrap().len(), 9);
}

#[test]
fn invalid_values_exit_one_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["--out", "o", "equilibrium", "--omega-z-khz", "-3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("omega_z_khz"));
    assert!(!tmp.path().join("o").exists());

    std::fs::write(tmp.path().join("bad.toml"), "seed = 1\n\n[stats]\np = 1.5\n").unwrap();
    let o = ionlattice(tmp.path(), &["--config", "bad.toml", "stats"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("stats.p"), "{err}");
    assert!(!tmp.path().join("stats.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(ionlattice(tmp.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(ionlattice(tmp.path(), &["reproduce-fig2", "--crystal", "cube"]).status.code(), Some(1));
    assert_eq!(ionlattice(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn failed_run_removes_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("junk.pgm"), b"P2\n1 1\n1\n0\n").unwrap();
    let o = ionlattice(tmp.path(), &["--out", "o", "thermometry", "--image", "junk.pgm"]);
    assert_eq!(o.status.code(), Some(1));
    let left: Vec<_> = std::fs::read_dir(tmp.path().join("o")).unwrap().collect();
    assert!(left.is_empty());
}

#[test]
fn provenance_reruns_bitwise() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["--out", "a", "--seed", "9", "synth-image", "--temperature-mk", "2.0"]);
    assert!(o.status.success());
    let o = ionlattice(tmp.path(), &["--config", "a/image.pgm.provenance.json", "--out", "b", "synth-image"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(tmp.path().join("a/image.pgm")).unwrap();
    let b = std::fs::read(tmp.path().join("b/image.pgm")).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_json(&tmp.path().join("b/synth.json"))["temperature_mk"], 2.0);
}

#[test]
fn output_directory_precedence() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "output_dir = \"from_config\"\n").unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ionlattice"));
        c.current_dir(tmp.path()).env_remove("IONLATTICE_OUT").args(args);
        if let Some(e) = env {
            c.env("IONLATTICE_OUT", e);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(&["stats", "--trials", "1000"], Some("from_env"));
    assert!(tmp.path().join("from_env/stats.json").exists());
    run(&["--config", "c.toml", "stats", "--trials", "1000"], Some("from_env"));
    assert!(tmp.path().join("from_config/stats.json").exists());
    run(&["--config", "c.toml", "--out", "from_flag", "stats", "--trials", "1000"], Some("from_env"));
    assert!(tmp.path().join("from_flag/stats.json").exists());
}

#[test]
fn synth_then_thermometry() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["--out", "o", "synth-image", "--temperature-mk", "3.6"]);
    assert!(o.status.success());
    let o = ionlattice(tmp.path(), &["--out", "o", "thermometry", "--image", "o/image.pgm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_json(&tmp.path().join("o/thermometry.json"))["estimate"]["value"].as_f64().unwrap();
    assert!((t / 3.6e-3 - 1.0).abs() < 0.2, "{t}");
}

#[test]
fn modes_csv_has_all_modes() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["modes", "--n-ions", "3"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(tmp.path().join("modes.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mode,lambda,frequency_khz"));
    assert_eq!(lines.count(), 9);
}

#[test]
fn lattice_predict_curve() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("c.toml"), SMALL_LATTICE).unwrap();
    let o = ionlattice(tmp.path(), &["--config", "c.toml", "--depth-mk", "20", "lattice-predict", "--n-ions", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("lattice_curve.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(csv.starts_with("depth_mK,p_red,p_blue,pinning_red,pinning_blue,sec_frac_red,sec_frac_blue"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], 20.0);
    assert!(rows[2][1] > rows[2][2]);
    assert!(tmp.path().join("lattice_curve.csv.provenance.json").exists());
}

#[test]
fn reproduce_fig2_composes_pipeline() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("c.toml"), SMALL_LATTICE).unwrap();
    let o = ionlattice(tmp.path(), &["--config", "c.toml", "reproduce-fig2", "--crystal", "zigzag4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = read_json(&tmp.path().join("fig2_zigzag4.json"));
    assert_eq!(out["structure"], "planar_zigzag");
    let t = out["inferred_temperature_mk"].as_f64().unwrap();
    assert!((t / 3.5 - 1.0).abs() < 0.2, "{t}");
    let csv = std::fs::read_to_string(tmp.path().join("fig2_zigzag4.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn micromotion_report_for_octahedron() {
    let tmp = TempDir::new().unwrap();
    let o = ionlattice(tmp.path(), &["micromotion", "--n-ions", "6", "--omega-z-khz", "105", "--omega-r-khz", "192", "--radial-split", "0.05"]);
    assert!(o.status.success());
    let out = read_json(&tmp.path().join("micromotion.json"));
    let t_max = out["equivalent_temperature"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(0.0, f64::max);
    assert!((0.6..=1.0).contains(&t_max), "{t_max}");
}
