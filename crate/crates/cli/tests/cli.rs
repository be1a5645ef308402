use std::path::Path;
use std::process::{Command, Output};

use plateau_core::Trajectory;

fn plateau_dyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plateau-dyn")).args(args).output().expect("binary runs")
}

fn read_traj(path: &Path) -> Trajectory {
    let file = std::fs::File::open(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Trajectory::read_csv(std::io::BufReader::new(file)).unwrap()
}

fn iris() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/iris.csv").display().to_string()
}

#[test]
fn compare_with_zero_rate_is_flat_and_equal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = plateau_dyn(&["compare", "--eta", "0", "--N", "200", "--t-end", "5", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let micro = read_traj(&dir.path().join("micro.csv"));
    let macro_ = read_traj(&dir.path().join("macro.csv"));
    let e0 = micro.points[0].eps_g;
    for p in micro.points.iter().chain(&macro_.points) {
        assert!((p.eps_g - e0).abs() <= 1e-10, "{} vs {e0}", p.eps_g);
    }
}

#[test]
fn compare_seeds_share_the_macro_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = plateau_dyn(&["compare", "--N", "200", "--t-end", "20", "--seeds", "1,2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_traj(&dir.path().join("micro.csv"));
    let b = read_traj(&dir.path().join("micro_seed2.csv"));
    assert_eq!(a.points[0].eps_g, b.points[0].eps_g);
    assert_ne!(a.eps(), b.eps());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("compare_report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["micro", "--N", "100", "--t-end", "3", "--seeds", "4,5", "--out", out];
    assert!(plateau_dyn(&args).status.success());
    let first = std::fs::read(dir.path().join("micro_seed5.csv")).unwrap();
    assert!(plateau_dyn(&args).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("micro_seed5.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("# plateau-dyn "));
    assert!(text.lines().any(|l| l.starts_with("# config-sha256: ")));
    assert!(text.lines().any(|l| l == "# seeds: 4,5"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "eta = 0.3\nN = 50\nt-end = 2\nseeds = [9]\n").unwrap();
    let out = dir.path().join("o");
    let o = plateau_dyn(&["micro", "--config", cfg.to_str().unwrap(), "--eta", "0.2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("micro_seed9.csv")).unwrap();
    let config_line = text.lines().find(|l| l.starts_with("# config: ")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&config_line["# config: ".len()..]).unwrap();
    assert_eq!(cfg["eta"], 0.2);
    assert_eq!(cfg["n"], 50);
}

#[test]
fn macro_state_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = plateau_dyn(&["macro", "--t-end", "10", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let state = dir.path().join("state_seed1.json");
    assert!(state.exists());
    let resumed = dir.path().join("resumed");
    let o = plateau_dyn(&["macro", "--t-end", "10", "--init-state", state.to_str().unwrap(), "--out", resumed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = read_traj(&dir.path().join("macro_seed1.csv"));
    let second = read_traj(&resumed.join("macro.csv"));
    assert_eq!(first.points.last().unwrap().eps_g, second.points[0].eps_g);
}

#[test]
fn sweep_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = plateau_dyn(&["sweep-mu1", "--mu1-grid", "2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("plateau_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("mu1,length,height,found"));
    assert_eq!(rows.len(), 2);
    assert!(dir.path().join("curves/mu1_2_seed1.csv").exists());
}

#[test]
fn sweep_mu2_records_second_moment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = plateau_dyn(&["sweep-mu2", "--delta-grid", "1", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("plateau_table.csv")).unwrap();
    let row = table.lines().filter(|l| !l.starts_with('#')).nth(1).unwrap();
    assert!(row.starts_with("1,1.25,"), "{row}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(plateau_dyn(&["sweep-mu2", "--delta-grid", "2", "--out", out]).status.code(), Some(1));
    assert_eq!(plateau_dyn(&["micro", "--spectrum", "1:0.5", "--out", out]).status.code(), Some(1));
    assert_eq!(plateau_dyn(&["micro", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(plateau_dyn(&["analyze-dataset", "/nonexistent.csv", "--out", out]).status.code(), Some(1));
    assert_eq!(plateau_dyn(&["--help"]).status.code(), Some(0));
}

#[test]
fn dataset_parse_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "1,2\n3,oops\n").unwrap();
    let o = plateau_dyn(&["analyze-dataset", csv.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2, column 2"));
}

#[test]
fn iris_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = plateau_dyn(&["analyze-dataset", &iris(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let mu1 = report["moments"][0].as_f64().unwrap();
    assert!((mu1 - 15.8988).abs() < 1e-3, "{mu1}");
    assert_eq!(report["dim"], 4);
    let spectrum = report["spectrum"].as_str().unwrap();
    spectrum.parse::<plateau_core::EigenSpectrum>().unwrap();
    assert!(dir.path().join("dataset_report.json").exists());
}

#[test]
fn gauss_check_small() {
    let dir = tempfile::tempdir().unwrap();
    let o = plateau_dyn(&["gauss-check", "--gauss-matrices", "5", "--gauss-samples", "20000", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("I4") && stdout.contains("max z"));
    assert!(dir.path().join("gauss_check.json").exists());
}
