use std::path::Path;
use std::process::Command;

use approx::assert_relative_eq;

use bernstein_lab::cli::{run, ExperimentConfig};
use bernstein_lab::io::{read_ensemble_bin, read_field_bin};

fn config(body: &str, out: &Path) -> ExperimentConfig {
    let text = format!("{body}\nrun.out = {:?}\n", out.display().to_string());
    ExperimentConfig::from_toml_str(&text).unwrap()
}

const TRIVIAL: &str = r#"
coeff.phi = "1"
coeff.psi = "1"
grid.nx = 32
grid.nt = 100
mc.n_paths = 4000
mc.dt = 1e-2
mc.seed = 3
run.stages = ["all"]
run.uniqueness_paths = 2000
run.export_paths = 5
"#;

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn trivial_pipeline_passes_and_writes_every_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config(TRIVIAL, dir.path()));
    assert_eq!(out.exit_code, 0, "{:?}", out.report.failure);
    assert!(out.report.pass);
    let d = dir.path();
    for f in ["report.json", "report.txt", "header.json", "u.bin", "v.bin", "density.bin"] {
        assert!(d.join(f).exists(), "{f}");
    }
    assert_eq!(first_line(&d.join("u.csv")), "x1,t,value");
    assert_eq!(first_line(&d.join("density.csv")), "x1,t,value");
    assert_eq!(first_line(&d.join("hist_forward_t0.5000.csv")), "lower,upper,count");
    assert_eq!(first_line(&d.join("hist_backward_t0.2500.csv")), "lower,upper,count");
    assert_eq!(first_line(&d.join("residual_forward.csv")), "t,mean1,sem1,mean_square,max_abs");
    assert_eq!(first_line(&d.join("residual_dual.csv")), "t,mean1,sem1,mean_square,max_abs");
    assert_eq!(first_line(&d.join("ensemble_forward.csv")), "path,step,t,x1,dw1");

    let v = read_field_bin(&d.join("v.bin")).unwrap();
    assert!(v.values.iter().all(|x| (x - v.values[0]).abs() < 1e-12));
    let ens = read_ensemble_bin(&d.join("ensemble_backward.bin")).unwrap();
    assert_eq!(ens.n_paths, 5);
    assert_eq!(ens.steps(), 100);

    let forward = &out.report.verification.as_ref().unwrap().forward;
    assert!(forward.levels.iter().all(|l| l.max_abs == 0.0));
    let sq = &out.report.verification.as_ref().unwrap().forward_square;
    assert!((sq.estimate - 1.0 / 3.0).abs() <= 4.0 * sq.sem);
}

#[test]
fn report_json_depends_only_on_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TRIVIAL, dir.path());
    run(&cfg);
    let first = std::fs::read(dir.path().join("report.json")).unwrap();
    run(&cfg);
    let second = std::fs::read(dir.path().join("report.json")).unwrap();
    assert_eq!(first, second);
    let reseeded = config(TRIVIAL, dir.path()).with_seed(4).unwrap();
    let other = run(&reseeded);
    assert_eq!(other.report.seed, 4);
    assert_ne!(first, std::fs::read(dir.path().join("report.json")).unwrap());
}

#[test]
fn non_positive_initial_datum_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let body = "coeff.phi = \"x\"\ngrid.nx = 16\ngrid.nt = 20\nrun.stages = [\"validate\"]";
    let out = run(&config(body, dir.path()));
    assert_eq!(out.exit_code, 1);
    let msg = out.report.failure.unwrap().message;
    assert!(msg.contains("(IF)"), "{msg}");
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn ladder_writes_the_convergence_table() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
coeff.psi = "2 + cos(pi*x)"
grid.nx = 16
grid.nt = 50
mc.n_paths = 20000
mc.dt = 2e-2
mc.seed = 5
run.stages = ["verify"]
run.uniqueness_paths = 0
run.export_paths = 0
run.ladder = [[0.0625, 8e-3], [0.04347826, 4e-3], [0.03125, 2e-3]]
"#;
    let out = run(&config(body, dir.path()));
    let rows = &out.report.ladder;
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.nodes).collect::<Vec<_>>(), vec![17, 24, 33]);
    assert_relative_eq!(rows[2].h, 1.0 / 32.0, max_relative = 1e-12);
    let ratio = out.report.checks.iter().find(|c| c.name == "ladder_mse_ratio").unwrap();
    assert!(ratio.pass, "MSE ratio {}", ratio.value);

    let mut reader = csv::Reader::from_path(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["h", "dt", "nodes", "steps", "n_paths", "mse", "mse_sem", "terminal_rms", "drift_defect"]
    );
    let records: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (rec, row) in records.iter().zip(rows) {
        let mse: f64 = rec[5].parse().unwrap();
        assert_relative_eq!(mse, row.mse, max_relative = 1e-15);
        assert_eq!(rec[3].parse::<usize>().unwrap(), row.steps);
    }
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bernstein-lab"))
}

#[test]
fn binary_maps_config_errors_to_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "grid.nz = 3\n").unwrap();
    let status = binary().arg("validate").arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(4));
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "grid.nx = 8\ngrid.nt = 10\n").unwrap();
    let status = binary()
        .args(["solve", "--ladder", "0.1"])
        .arg("--config")
        .arg(&good)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn binary_overrides_seed_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "coeff.psi = \"2 + cos(pi*x)\"\ngrid.nx = 16\ngrid.nt = 20\n").unwrap();
    let out = dir.path().join("solved");
    let status = binary()
        .arg("solve")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9", "--workers", "1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
    assert_eq!(report["stages"][0], "solve");
    assert!(out.join("v.csv").exists());
}
