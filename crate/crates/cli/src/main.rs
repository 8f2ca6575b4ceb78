//! `gevgp` command-line front end.
//!
//! Every subcommand writes its CSV outputs and a JSON manifest into the
//! output directory. Exit status is 0 on success, 1 for invalid input and 2
//! for numerical failure; errors go to stderr as `ERROR:<category>:<tag>: ...`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use gevgp::dataio::{self, GridSpec, RunConfig, RunManifest};
use gevgp::gev::Shape;
use gevgp::kernel::{Coord, KernelForm};
use gevgp::laplace::{outer_optimize, FitResult};
use gevgp::posterior::{coverage_check, default_p_exp_grid, predict_new, return_levels, sample_joint};
use gevgp::simstudy::{make_lattice, refit_check, simulate_dataset, true_surfaces, SurfaceSpec};
use gevgp::{Error, ErrorCategory, Result, SiteDataset};
use serde_json::json;

fn common_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("config").long("config").value_parser(value_parser!(PathBuf)).help("TOML run configuration"))
        .arg(Arg::new("out-dir").long("out-dir").value_parser(value_parser!(PathBuf)).help("output directory"))
        .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)))
}

fn data_arg() -> Arg {
    Arg::new("data").long("data").value_parser(value_parser!(PathBuf)).help("site data CSV")
}

fn fit_arg() -> Arg {
    Arg::new("fit").long("fit").value_parser(value_parser!(PathBuf)).help("fit JSON (default <out-dir>/fit.json)")
}

fn n_sim_arg() -> Arg {
    Arg::new("n-sim").long("n-sim").value_parser(value_parser!(usize)).help("posterior draws")
}

fn cli() -> Command {
    Command::new("gevgp")
        .about("Spatial GEV models with latent Gaussian processes")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(common_args(
            Command::new("simulate")
                .about("Simulate GEV data on a square lattice from the built-in surfaces")
                .arg(Arg::new("side").long("side").value_parser(value_parser!(usize)).default_value("20"))
                .arg(Arg::new("lo").long("lo").value_parser(value_parser!(f64)).default_value("0").allow_negative_numbers(true))
                .arg(Arg::new("hi").long("hi").value_parser(value_parser!(f64)).default_value("10").allow_negative_numbers(true))
                .arg(Arg::new("n-per-site").long("n-per-site").value_parser(value_parser!(usize)).default_value("1"))
                .arg(
                    Arg::new("log-shape")
                        .long("log-shape")
                        .value_parser(value_parser!(f64))
                        .default_value("-2")
                        .allow_negative_numbers(true)
                        .help("log of the GEV shape"),
                )
                .arg(Arg::new("gumbel").long("gumbel").action(ArgAction::SetTrue).help("simulate Gumbel data")),
        ))
        .subcommand(common_args(
            Command::new("fit")
                .about("Fit a model by nested Laplace approximation")
                .arg(data_arg())
                .arg(Arg::new("model").long("model").help("m1, m2, m3 or m4"))
                .arg(Arg::new("kernel").long("kernel").value_parser(["exponential", "squared_exponential"]))
                .arg(Arg::new("jitter").long("jitter").value_parser(value_parser!(f64))),
        ))
        .subcommand(common_args(
            Command::new("sample")
                .about("Posterior return levels at the observed sites")
                .arg(fit_arg())
                .arg(data_arg())
                .arg(n_sim_arg())
                .arg(Arg::new("p").long("p").value_parser(value_parser!(f64)).default_value("0.01").help("upper tail probability")),
        ))
        .subcommand(common_args(
            Command::new("predict")
                .about("Posterior predictive intervals at new sites")
                .arg(fit_arg())
                .arg(data_arg())
                .arg(n_sim_arg())
                .arg(Arg::new("sites").long("sites").required(true).value_parser(value_parser!(PathBuf)).help("CSV with header lon,lat"))
                .arg(Arg::new("p-exp").long("p-exp").value_parser(value_parser!(f64)).default_value("0.9")),
        ))
        .subcommand(common_args(
            Command::new("coverage").about("In-sample coverage of predictive intervals").arg(fit_arg()).arg(data_arg()).arg(n_sim_arg()),
        ))
        .subcommand(common_args(
            Command::new("grid")
                .about("Grid point records into cell maxima")
                .arg(Arg::new("records").long("records").required(true).value_parser(value_parser!(PathBuf)).help("CSV lon,lat,value"))
                .arg(Arg::new("cell-deg").long("cell-deg").value_parser(value_parser!(f64)).default_value("3"))
                .arg(Arg::new("min-records").long("min-records").value_parser(value_parser!(usize)).default_value("20"))
                .arg(
                    Arg::new("bbox")
                        .long("bbox")
                        .value_delimiter(',')
                        .value_parser(value_parser!(f64))
                        .allow_hyphen_values(true)
                        .help("lon_min,lon_max,lat_min,lat_max"),
                ),
        ))
        .subcommand(common_args(
            Command::new("refit-check")
                .about("Refit on pseudo-data simulated at the fitted posterior means")
                .arg(fit_arg())
                .arg(data_arg()),
        ))
}

/// File configuration with command-line overrides applied.
fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(&s) = m.get_one::<u64>("seed") {
        cfg.seed = s;
    }
    if let Some(p) = m.get_one::<PathBuf>("out-dir") {
        cfg.io.out_dir = Some(p.clone());
    }
    if let Ok(Some(p)) = m.try_get_one::<PathBuf>("data") {
        cfg.io.data = Some(p.clone());
    }
    if let Ok(Some(&n)) = m.try_get_one::<usize>("n-sim") {
        cfg.n_sim = n;
    }
    if let Ok(Some(s)) = m.try_get_one::<String>("model") {
        cfg.model = s.clone();
    }
    if let Ok(Some(s)) = m.try_get_one::<String>("kernel") {
        cfg.kernel = if s == "exponential" { KernelForm::Exponential } else { KernelForm::SquaredExponential };
    }
    if let Ok(Some(&j)) = m.try_get_one::<f64>("jitter") {
        cfg.jitter = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.io.data.as_deref().ok_or_else(|| Error::Validation("no data file given (--data or io.data)".into()))
}

fn fit_path(m: &ArgMatches, cfg: &RunConfig) -> PathBuf {
    m.get_one::<PathBuf>("fit").cloned().unwrap_or_else(|| out_dir(cfg).join("fit.json"))
}

/// Loads a fit and the dataset it was computed on.
fn load_fit(m: &ArgMatches, cfg: &RunConfig) -> Result<(FitResult, SiteDataset)> {
    let fit: FitResult = dataio::read_json(&fit_path(m, cfg))?;
    let data = dataio::ingest_csv(data_path(cfg)?)?.with_transform(fit.spec.transform)?;
    if data.n_sites() != fit.n_sites {
        return Err(Error::Validation(format!("fit has {} sites but the data has {}", fit.n_sites, data.n_sites())));
    }
    Ok((fit, data))
}

fn read_sites(path: &Path) -> Result<Vec<Coord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.replace(' ', "").eq_ignore_ascii_case("lon,lat") => {}
        _ => return Err(Error::Parse { line: 1, message: "expected header 'lon,lat'".into() }),
    }
    lines
        .map(|(k, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse { line: k + 1, message: format!("'{s}' is not a number") });
            match f.as_slice() {
                [x, y] => Ok([num(x)?, num(y)?]),
                _ => Err(Error::Parse { line: k + 1, message: format!("expected 2 fields, found {}", f.len()) }),
            }
        })
        .collect()
}

struct Outcome {
    outputs: Vec<PathBuf>,
    diagnostics: serde_json::Value,
}

fn simulate(m: &ArgMatches, cfg: &RunConfig) -> Result<Outcome> {
    let side = *m.get_one::<usize>("side").unwrap();
    let coords = make_lattice(side, *m.get_one("lo").unwrap(), *m.get_one("hi").unwrap())?;
    let (a, b) = true_surfaces(&SurfaceSpec::default(), &coords)?;
    let shape = if m.get_flag("gumbel") { Shape::Gumbel } else { Shape::LogShape(*m.get_one("log-shape").unwrap()) };
    let n = *m.get_one::<usize>("n-per-site").unwrap();
    let data = simulate_dataset(&coords, &a, &b, shape, n, cfg.seed)?;
    let dir = out_dir(cfg);
    let data_out = dir.join("data.csv");
    let truth_out = dir.join("truth.csv");
    dataio::export_csv(&data, &data_out)?;
    dataio::write_site_table_csv(&["a", "b"], &coords, &[&a, &b], &truth_out)?;
    let s = match shape {
        Shape::LogShape(s) => Some(s),
        Shape::Gumbel => None,
    };
    Ok(Outcome { outputs: vec![data_out, truth_out], diagnostics: json!({ "n_sites": coords.len(), "log_shape": s }) })
}

fn fit(cfg: &RunConfig) -> Result<Outcome> {
    let data = dataio::ingest_csv(data_path(cfg)?)?;
    let fit = outer_optimize(&data, cfg.model_spec()?, None, &cfg.fit_options())?;
    let dir = out_dir(cfg);
    let json_out = dir.join("fit.json");
    let csv_out = dir.join("fit.csv");
    dataio::write_json(&fit, &json_out)?;
    dataio::write_fit_csv(&fit, &data, &csv_out)?;
    let diag = json!({
        "theta_names": fit.theta_names,
        "theta_hat": fit.laplace.theta_hat,
        "laplace_logml": fit.laplace.laplace_logml_at_mode,
        "optimizer": fit.laplace.diagnostics,
    });
    Ok(Outcome { outputs: vec![json_out, csv_out], diagnostics: diag })
}

fn sample(m: &ArgMatches, cfg: &RunConfig) -> Result<Outcome> {
    let (fit, data) = load_fit(m, cfg)?;
    let p = *m.get_one::<f64>("p").unwrap();
    let draws = sample_joint(&fit, cfg.n_sim, cfg.seed)?;
    let levels = return_levels(&fit, &draws, p, None)?;
    let out = out_dir(cfg).join("return_levels.csv");
    dataio::write_return_levels_csv(&levels, &data.coords, &out)?;
    Ok(Outcome { outputs: vec![out], diagnostics: json!({ "n_sim": cfg.n_sim, "p": p }) })
}

fn predict(m: &ArgMatches, cfg: &RunConfig) -> Result<Outcome> {
    let (fit, data) = load_fit(m, cfg)?;
    let sites = read_sites(m.get_one::<PathBuf>("sites").unwrap())?;
    let p_exp = *m.get_one::<f64>("p-exp").unwrap();
    let preds = predict_new(&fit, &data, &sites, cfg.n_sim, cfg.seed, p_exp)?;
    let failed = preds.iter().filter(|p| p.is_err()).count();
    let out = out_dir(cfg).join("predictions.csv");
    dataio::write_predictions_csv(&preds, &sites, &out)?;
    Ok(Outcome { outputs: vec![out], diagnostics: json!({ "n_sim": cfg.n_sim, "p_exp": p_exp, "failed_sites": failed }) })
}

fn coverage(m: &ArgMatches, cfg: &RunConfig) -> Result<Outcome> {
    let (fit, data) = load_fit(m, cfg)?;
    let cov = coverage_check(&fit, &data, &default_p_exp_grid(), cfg.n_sim, cfg.seed)?;
    let out = out_dir(cfg).join("coverage.csv");
    dataio::write_coverage_csv(&cov, &out)?;
    let worst = cov.iter().map(|(e, o)| (e - o).abs()).fold(0.0, f64::max);
    Ok(Outcome { outputs: vec![out], diagnostics: json!({ "n_sim": cfg.n_sim, "max_abs_gap": worst }) })
}

fn grid(m: &ArgMatches, cfg: &RunConfig) -> Result<Outcome> {
    let mut spec = GridSpec {
        cell_deg: *m.get_one("cell-deg").unwrap(),
        min_records: *m.get_one("min-records").unwrap(),
        ..GridSpec::default()
    };
    if let Some(b) = m.get_many::<f64>("bbox") {
        let b: Vec<f64> = b.copied().collect();
        if b.len() != 4 {
            return Err(Error::Validation(format!("--bbox needs 4 values, got {}", b.len())));
        }
        spec.bbox = [b[0], b[1], b[2], b[3]];
    }
    let records = dataio::read_records(m.get_one::<PathBuf>("records").unwrap())?;
    let g = dataio::grid_maxima(&records, &spec)?;
    for w in &g.warnings {
        eprintln!("WARNING: {w}");
    }
    let dir = out_dir(cfg);
    let counts_out = dir.join("grid_cells.csv");
    dataio::write_grid_cells_csv(&g.cells, &counts_out)?;
    let mut outputs = vec![counts_out];
    if !g.cells.is_empty() {
        let data_out = dir.join("grid_data.csv");
        dataio::export_csv(&g.to_dataset()?, &data_out)?;
        outputs.push(data_out);
    }
    let diag = json!({
        "grid": spec,
        "records": records.len(),
        "cells_kept": g.cells.len(),
        "cells_dropped": g.dropped_cells,
        "records_outside": g.records_outside,
        "warnings": g.warnings,
    });
    Ok(Outcome { outputs, diagnostics: diag })
}

fn refit(m: &ArgMatches, cfg: &RunConfig) -> Result<Outcome> {
    let (fit, data) = load_fit(m, cfg)?;
    let mut opts = cfg.fit_options();
    opts.kernel = fit.kernel;
    opts.prior = fit.prior.clone();
    let r = refit_check(&fit, &data, &opts, cfg.seed)?;
    let out = out_dir(cfg).join("refit.csv");
    dataio::write_site_table_csv(
        &["a_original", "a_recovered", "b_original", "b_recovered"],
        &data.coords,
        &[&r.a_original, &r.a_recovered, &r.b_original, &r.b_recovered],
        &out,
    )?;
    let diag = json!({ "slope_a": r.slope_a, "slope_b": r.slope_b, "refit_optimizer": r.refit.laplace.diagnostics });
    Ok(Outcome { outputs: vec![out], diagnostics: diag })
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let start = Instant::now();
    let outcome = match name {
        "simulate" => simulate(m, &cfg),
        "fit" => fit(&cfg),
        "sample" => sample(m, &cfg),
        "predict" => predict(m, &cfg),
        "coverage" => coverage(m, &cfg),
        "grid" => grid(m, &cfg),
        "refit-check" => refit(m, &cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }?;
    let mut manifest = RunManifest::new(name, &cfg);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.outputs = outcome.outputs;
    manifest.diagnostics = outcome.diagnostics;
    manifest.write(&out_dir(&cfg).join(format!("manifest_{}.json", name.replace('-', "_"))))
}

fn category(e: &Error) -> &'static str {
    match e.category() {
        ErrorCategory::Validation => "validation",
        ErrorCategory::Numerical => "numerical",
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("ERROR:validation:usage: {}", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            eprint!("{msg}");
            return ExitCode::from(1);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR:{}:{}: {e}", category(&e), e.tag());
            ExitCode::from(match e.category() {
                ErrorCategory::Validation => 1,
                ErrorCategory::Numerical => 2,
            })
        }
    }
}
