//! CSV ingestion and export, gridding of point records, run configuration
//! and run manifests.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Coord, KernelForm};
use crate::laplace::{FitOptions, FitResult, InnerOptions, OuterOptions};
use crate::model::{Jitter, KernelSettings, ModelSpec, SiteDataset, Transform};
use crate::posterior::{ReturnLevelSummary, SitePrediction};

/// Decimal form with 17 significant digits, rounded half to even.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_value(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("'{}' is not a number", s.trim()) })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value '{}'", s.trim()) });
    }
    Ok(v)
}

/// Parses `lon,lat,value` point records or `lon,lat,v1;v2;...` per-site
/// rows. Rows sharing exact coordinates are merged into one site, in order
/// of first appearance.
pub fn parse_csv<R: Read>(reader: R) -> Result<SiteDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut coords: Vec<Coord> = Vec::new();
    let mut obs: Vec<Vec<f64>> = Vec::new();
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut header_seen = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if !header_seen {
            let ok = rec.len() == 3
                && rec[0].eq_ignore_ascii_case("lon")
                && rec[1].eq_ignore_ascii_case("lat")
                && rec[2].to_ascii_lowercase().starts_with("value");
            if !ok {
                return Err(Error::Parse { line, message: "expected header 'lon,lat,value' or 'lon,lat,value1;value2;...'".into() });
            }
            header_seen = true;
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::Parse { line, message: format!("expected 3 fields, found {}", rec.len()) });
        }
        let x = [parse_value(&rec[0], line)?, parse_value(&rec[1], line)?];
        let values = rec[2].split(';').map(|v| parse_value(v, line)).collect::<Result<Vec<_>>>()?;
        let key = (x[0].to_bits(), x[1].to_bits());
        match index.get(&key) {
            Some(&i) => obs[i].extend(values),
            None => {
                index.insert(key, coords.len());
                coords.push(x);
                obs.push(values);
            }
        }
    }
    if coords.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    SiteDataset::new(coords, obs, Transform::None)
}

pub fn ingest_csv(path: &Path) -> Result<SiteDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    parse_csv(std::io::BufReader::new(file))
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_io)?;
    for r in rows {
        w.write_record(&r).map_err(csv_io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Per-site CSV with original-scale observations joined by `;`.
pub fn export_csv(data: &SiteDataset, path: &Path) -> Result<()> {
    let rows = (0..data.n_sites()).map(|i| {
        let vals: Vec<String> = data.raw_obs(i).into_iter().map(fmt17).collect();
        vec![fmt17(data.coords[i][0]), fmt17(data.coords[i][1]), vals.join(";")]
    });
    write_atomic(path, &csv_bytes(&["lon", "lat", "values"], rows)?)
}

/// `site,lon,lat,a_mean,a_sd,b_mean,b_sd` from the joint posterior.
pub fn write_fit_csv(fit: &FitResult, data: &SiteDataset, path: &Path) -> Result<()> {
    let jp = fit.joint_posterior()?;
    let n = fit.n_sites;
    let sd = |k: usize| jp.cov[(k, k)].max(0.0).sqrt();
    let rows = (0..n).map(|i| {
        let (bm, bs) = if fit.spec.b_random { (jp.mean[n + i], sd(n + i)) } else { (jp.mean[jp.dim() - 1], sd(jp.dim() - 1)) };
        vec![i.to_string(), fmt17(data.coords[i][0]), fmt17(data.coords[i][1]), fmt17(jp.mean[i]), fmt17(sd(i)), fmt17(bm), fmt17(bs)]
    });
    write_atomic(path, &csv_bytes(&["site", "lon", "lat", "a_mean", "a_sd", "b_mean", "b_sd"], rows)?)
}

/// `site,lon,lat,p,z_mean,z_sd,z_lo,z_hi`.
pub fn write_return_levels_csv(levels: &[ReturnLevelSummary], coords: &[Coord], path: &Path) -> Result<()> {
    let rows = levels.iter().map(|s| {
        let x = coords[s.site];
        vec![s.site.to_string(), fmt17(x[0]), fmt17(x[1]), fmt17(s.prob_upper), fmt17(s.mean), fmt17(s.sd), fmt17(s.ci_lo), fmt17(s.ci_hi)]
    });
    write_atomic(path, &csv_bytes(&["site", "lon", "lat", "p", "z_mean", "z_sd", "z_lo", "z_hi"], rows)?)
}

/// `p_exp,p_obs`.
pub fn write_coverage_csv(coverage: &[(f64, f64)], path: &Path) -> Result<()> {
    let rows = coverage.iter().map(|(e, o)| vec![fmt17(*e), fmt17(*o)]);
    write_atomic(path, &csv_bytes(&["p_exp", "p_obs"], rows)?)
}

/// `site,lon,lat,p_exp,mean,lower,upper,error`; failed sites carry the
/// error message and empty numeric fields.
pub fn write_predictions_csv(preds: &[Result<SitePrediction>], coords: &[Coord], path: &Path) -> Result<()> {
    let rows = preds.iter().enumerate().map(|(k, p)| {
        let x = coords[k];
        match p {
            Ok(s) => vec![k.to_string(), fmt17(x[0]), fmt17(x[1]), fmt17(s.p_exp), fmt17(s.mean), fmt17(s.lower), fmt17(s.upper), String::new()],
            Err(e) => vec![k.to_string(), fmt17(x[0]), fmt17(x[1]), String::new(), String::new(), String::new(), String::new(), e.to_string()],
        }
    });
    write_atomic(path, &csv_bytes(&["site", "lon", "lat", "p_exp", "mean", "lower", "upper", "error"], rows)?)
}

/// `site,lon,lat,<columns...>`, one row per coordinate.
pub fn write_site_table_csv(names: &[&str], coords: &[Coord], columns: &[&[f64]], path: &Path) -> Result<()> {
    if names.len() != columns.len() {
        return Err(Error::Dimension { expected: names.len(), actual: columns.len() });
    }
    if let Some(c) = columns.iter().find(|c| c.len() != coords.len()) {
        return Err(Error::Dimension { expected: coords.len(), actual: c.len() });
    }
    let header: Vec<&str> = ["site", "lon", "lat"].into_iter().chain(names.iter().copied()).collect();
    let rows = (0..coords.len()).map(|i| {
        let mut r = vec![i.to_string(), fmt17(coords[i][0]), fmt17(coords[i][1])];
        r.extend(columns.iter().map(|c| fmt17(c[i])));
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// `ix,iy,lon,lat,count,max` for kept grid cells.
pub fn write_grid_cells_csv(cells: &[GridCell], path: &Path) -> Result<()> {
    let rows = cells.iter().map(|c| {
        vec![c.ix.to_string(), c.iy.to_string(), fmt17(c.center[0]), fmt17(c.center[1]), c.count.to_string(), fmt17(c.max)]
    });
    write_atomic(path, &csv_bytes(&["ix", "iy", "lon", "lat", "count", "max"], rows)?)
}

/// Point records `lon,lat,value` without merging (for gridding).
pub fn read_records(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::BufReader::new(file));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Parse { line, message: format!("expected 3 fields, found {}", rec.len()) });
        }
        out.push((parse_value(&rec[0], line)?, parse_value(&rec[1], line)?, parse_value(&rec[2], line)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub cell_deg: f64,
    pub min_records: usize,
    /// `(lon_min, lon_max, lat_min, lat_max)`.
    pub bbox: [f64; 4],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { cell_deg: 3.0, min_records: 20, bbox: [-180.0, 180.0, -90.0, 90.0] }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.bbox;
        if !(self.cell_deg > 0.0 && self.cell_deg.is_finite()) {
            return Err(Error::Validation(format!("cell size must be positive, got {}", self.cell_deg)));
        }
        if self.min_records == 0 {
            return Err(Error::Validation("min_records must be at least 1".into()));
        }
        if !(self.bbox.iter().all(|v| v.is_finite()) && x0 < x1 && y0 < y1) {
            return Err(Error::Validation(format!("bounding box {:?} is not well ordered", self.bbox)));
        }
        Ok(())
    }

    fn n_cells(&self, lo: f64, hi: f64) -> usize {
        (((hi - lo) / self.cell_deg).ceil() as usize).max(1)
    }

    /// Lower edge of cell `i` along an axis starting at `lo`.
    pub fn edge(&self, lo: f64, i: usize) -> f64 {
        lo + i as f64 * self.cell_deg
    }

    /// Cell index along one axis: `[edge(i), edge(i + 1))`, with the
    /// global upper boundary closed. `None` outside `[lo, hi]`.
    fn axis_index(&self, x: f64, lo: f64, hi: f64) -> Option<usize> {
        if !(lo <= x && x <= hi) {
            return None;
        }
        let n = self.n_cells(lo, hi);
        let mut i = (((x - lo) / self.cell_deg).floor().max(0.0) as usize).min(n - 1);
        while i > 0 && x < self.edge(lo, i) {
            i -= 1;
        }
        while i + 1 < n && x >= self.edge(lo, i + 1) {
            i += 1;
        }
        Some(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub ix: usize,
    pub iy: usize,
    pub center: Coord,
    pub count: usize,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Kept cells ordered by latitude row, then longitude column.
    pub cells: Vec<GridCell>,
    pub dropped_cells: usize,
    pub records_outside: usize,
    pub warnings: Vec<String>,
}

impl GridResult {
    /// One site per kept cell with the cell maximum as its observation.
    pub fn to_dataset(&self) -> Result<SiteDataset> {
        SiteDataset::new(
            self.cells.iter().map(|c| c.center).collect(),
            self.cells.iter().map(|c| vec![c.max]).collect(),
            Transform::None,
        )
    }
}

/// Bins point records into square cells and keeps the maximum of every
/// cell holding at least `min_records` records.
pub fn grid_maxima(records: &[(f64, f64, f64)], spec: &GridSpec) -> Result<GridResult> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("no records to grid".into()));
    }
    let [x0, x1, y0, y1] = spec.bbox;
    let mut acc: HashMap<(usize, usize), (usize, f64)> = HashMap::new();
    let mut outside = 0;
    for (k, &(x, y, v)) in records.iter().enumerate() {
        if !(x.is_finite() && y.is_finite() && v.is_finite()) {
            return Err(Error::Validation(format!("record {k} is not finite")));
        }
        match (spec.axis_index(x, x0, x1), spec.axis_index(y, y0, y1)) {
            (Some(ix), Some(iy)) => {
                let e = acc.entry((iy, ix)).or_insert((0, f64::NEG_INFINITY));
                e.0 += 1;
                e.1 = e.1.max(v);
            }
            _ => outside += 1,
        }
    }
    let mut keys: Vec<_> = acc.keys().copied().collect();
    keys.sort_unstable();
    let mut cells = Vec::new();
    let mut dropped = 0;
    for (iy, ix) in keys {
        let (count, max) = acc[&(iy, ix)];
        if count < spec.min_records {
            dropped += 1;
            continue;
        }
        let center = [x0 + (ix as f64 + 0.5) * spec.cell_deg, y0 + (iy as f64 + 0.5) * spec.cell_deg];
        cells.push(GridCell { ix, iy, center, count, max });
    }
    let mut warnings = Vec::new();
    if cells.is_empty() {
        warnings.push(format!("no cell reached {} records", spec.min_records));
    }
    Ok(GridResult { cells, dropped_cells: dropped, records_outside: outside, warnings })
}

fn default_model() -> String {
    "m1".into()
}
fn default_jitter() -> f64 {
    crate::kernel::DEFAULT_RELATIVE_JITTER
}
fn default_n_sim() -> usize {
    10_000
}
fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "OptimizerConfig::d_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "OptimizerConfig::d_inner_max_iter")]
    pub inner_max_iter: usize,
    #[serde(default = "OptimizerConfig::d_outer_grad_tol")]
    pub outer_grad_tol: f64,
    #[serde(default = "OptimizerConfig::d_outer_max_evals")]
    pub outer_max_evals: usize,
}

impl OptimizerConfig {
    fn d_inner_tol() -> f64 {
        InnerOptions::default().grad_tol
    }
    fn d_inner_max_iter() -> usize {
        InnerOptions::default().max_iter
    }
    fn d_outer_grad_tol() -> f64 {
        OuterOptions::default().grad_tol
    }
    fn d_outer_max_evals() -> usize {
        OuterOptions::default().max_evals
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            inner_tol: Self::d_inner_tol(),
            inner_max_iter: Self::d_inner_max_iter(),
            outer_grad_tol: Self::d_outer_grad_tol(),
            outer_max_evals: Self::d_outer_max_evals(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Run configuration file (TOML). Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `m1`, `m2`, `m3` or `m4`.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub kernel: KernelForm,
    /// Nugget relative to the kernel amplitude, or absolute when
    /// `absolute_jitter` is set.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub absolute_jitter: bool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_n_sim")]
    pub n_sim: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: default_model(),
            kernel: KernelForm::default(),
            jitter: default_jitter(),
            absolute_jitter: false,
            optimizer: OptimizerConfig::default(),
            n_sim: default_n_sim(),
            seed: default_seed(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        ModelSpec::from_name(&self.model)?;
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Validation(format!("jitter must be finite and non-negative, got {}", self.jitter)));
        }
        let o = &self.optimizer;
        if !(o.inner_tol > 0.0 && o.outer_grad_tol > 0.0) || o.inner_max_iter == 0 || o.outer_max_evals == 0 {
            return Err(Error::Validation("optimizer tolerances and caps must be positive".into()));
        }
        if self.n_sim == 0 {
            return Err(Error::Validation("n_sim must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_name(&self.model)
    }

    pub fn kernel_settings(&self) -> KernelSettings {
        KernelSettings {
            form: self.kernel,
            jitter: if self.absolute_jitter { Jitter::Absolute(self.jitter) } else { Jitter::Relative(self.jitter) },
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        let o = &self.optimizer;
        FitOptions {
            kernel: self.kernel_settings(),
            prior: Default::default(),
            outer: OuterOptions {
                grad_tol: o.outer_grad_tol,
                max_evals: o.outer_max_evals,
                inner: InnerOptions { grad_tol: o.inner_tol, max_iter: o.inner_max_iter, ..Default::default() },
                ..Default::default()
            },
        }
    }
}

/// JSON record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub diagnostics: serde_json::Value,
    pub platform: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            seed: config.seed,
            wall_seconds: 0.0,
            outputs: Vec::new(),
            diagnostics: serde_json::Value::Null,
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&s).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
}
