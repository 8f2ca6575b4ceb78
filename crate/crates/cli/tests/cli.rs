use std::path::Path;
use std::process::{Command, Output};

use gevgp::dataio::{RunConfig, RunManifest};

fn gevgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gevgp")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path, name: &str) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn fit_on_empty_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "lon,lat,value\n").unwrap();
    let o = gevgp(dir.path(), &["fit", "--data", "empty.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:validation:"), "{}", stderr(&o));
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.csv"), "lon,lat,value\n0,0,1\n1,1,inf\n").unwrap();
    let o = gevgp(p, &["fit", "--data", "bad.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(p.join("cfg.toml"), "modle = \"m2\"\n").unwrap();
    let o = gevgp(p, &["fit", "--config", "cfg.toml", "--data", "bad.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:validation:"));

    let o = gevgp(p, &["fit", "--data", "missing.csv"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gevgp(p, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:validation:usage:"));
    assert_eq!(gevgp(p, &["--help"]).status.code(), Some(0));
}

#[test]
fn optimizer_budget_exhaustion_is_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(gevgp(p, &["simulate", "--side", "4", "--n-per-site", "3", "--seed", "2"]).status.success());
    std::fs::write(p.join("cfg.toml"), "model = \"m2\"\n[optimizer]\nouter_max_evals = 1\n").unwrap();
    let o = gevgp(p, &["fit", "--config", "cfg.toml", "--data", "data.csv"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("ERROR:numerical:outer-nonconvergence:"), "{}", stderr(&o));
}

#[test]
fn pipeline_is_reproducible_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("cfg.toml"), "model = \"m1\"\nseed = 99\nn_sim = 50\n").unwrap();
    let ok = |args: &[&str]| {
        let o = gevgp(p, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["simulate", "--side", "5", "--n-per-site", "3", "--seed", "4"]);
    ok(&["fit", "--config", "cfg.toml", "--model", "m2", "--data", "data.csv"]);
    let m = manifest(p, "manifest_fit.json");
    assert_eq!(m.config.model, "m2");
    assert_eq!(m.seed, 99);
    RunConfig::from_toml_str(&m.config.to_toml_string().unwrap()).unwrap();
    assert!(m.diagnostics["optimizer"]["converged"].as_bool().unwrap());

    ok(&["sample", "--config", "cfg.toml", "--data", "data.csv", "--n-sim", "300"]);
    let first = std::fs::read(p.join("return_levels.csv")).unwrap();
    ok(&["sample", "--config", "cfg.toml", "--data", "data.csv", "--n-sim", "300"]);
    assert_eq!(std::fs::read(p.join("return_levels.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("site,lon,lat,p,z_mean,z_sd,z_lo,z_hi\n"));
    assert_eq!(text.lines().count(), 26);

    std::fs::write(p.join("new.csv"), "lon,lat\n1.5,2.5\n").unwrap();
    ok(&["predict", "--data", "data.csv", "--sites", "new.csv", "--n-sim", "100"]);
    ok(&["coverage", "--data", "data.csv", "--n-sim", "100"]);
    let cov = std::fs::read_to_string(p.join("coverage.csv")).unwrap();
    assert!(cov.starts_with("p_exp,p_obs\n"));
    ok(&["refit-check", "--data", "data.csv"]);
    let refit = std::fs::read_to_string(p.join("refit.csv")).unwrap();
    assert!(refit.starts_with("site,lon,lat,a_original,a_recovered,b_original,b_recovered\n0,"));
    assert!(manifest(p, "manifest_refit_check.json").diagnostics["slope_a"].is_number());
}

#[test]
fn grid_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut recs = String::from("lon,lat,value\n");
    for k in 0..25 {
        recs += &format!("{},{},{}\n", -60.0 + 0.1 * k as f64, 20.5, 30.0 + k as f64);
    }
    for k in 0..5 {
        recs += &format!("-40.5,30.5,{}\n", 100 + k);
    }
    std::fs::write(p.join("tracks.csv"), recs).unwrap();
    let o = gevgp(p, &["grid", "--records", "tracks.csv", "--bbox", "-99,0,0,60"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells = std::fs::read_to_string(p.join("grid_cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 2);
    assert!(cells.contains(",25,5.4000000000000000e1"));
    let m = manifest(p, "manifest_grid.json");
    assert_eq!(m.diagnostics["cells_dropped"], 1);
}
