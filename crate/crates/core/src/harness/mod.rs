//! Experiment orchestration: TOML configuration, per-replication seeding,
//! CSV/JSON emission and acceptance checks.
//!
//! Every experiment is a pure function of its [`ExperimentConfig`]; all
//! parallel work collects in replication order, so outputs are identical
//! across runs and thread counts. Wall-clock time is only written to the
//! JSON summary.

pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hitting::BallNorm;
use crate::noise::{GridSpec, Interval};
use crate::solver::SigmaSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Holder,
    Coupling,
    Seminorm,
    Smallball,
    Hitting,
    Density,
    Gauge,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Holder,
        Experiment::Coupling,
        Experiment::Seminorm,
        Experiment::Smallball,
        Experiment::Hitting,
        Experiment::Density,
        Experiment::Gauge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Holder => "holder",
            Experiment::Coupling => "coupling",
            Experiment::Seminorm => "seminorm",
            Experiment::Smallball => "smallball",
            Experiment::Hitting => "hitting",
            Experiment::Density => "density",
            Experiment::Gauge => "gauge",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown experiment `{s}`")))
    }
}

/// `I`, `J` (time and space windows), `M` (target half-width), `T` (horizon).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Windows {
    pub i: Interval,
    pub j: Interval,
    pub m: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub replications: usize,
    pub bootstrap: usize,
    /// Cell-steps allowed for one solve of one component.
    #[serde(default = "default_max_cell_steps")]
    pub max_cell_steps: usize,
}

fn default_max_cell_steps() -> usize {
    1 << 34
}

/// Experiment-specific knobs; each experiment reads only its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Spatial lags in space steps (holder).
    pub space_lags: Vec<usize>,
    /// Temporal lags in time steps (holder).
    pub time_lags: Vec<usize>,
    /// Translated anchors per path.
    pub anchors: usize,
    pub variance_t: f64,
    pub variance_dx: f64,
    pub variance_reps: usize,

    /// Ladder: first anchor time, level range, nodes per rectangle side.
    pub ladder_t0: f64,
    pub n_min: u32,
    pub n_max: u32,
    pub nodes_per_side: usize,
    /// Moment order for sup-type exponent fits.
    pub p_sup: f64,
    pub dir_dx: f64,
    pub dir_t0: f64,
    pub dir_space_lags: Vec<usize>,
    pub dir_time_lags: Vec<usize>,
    pub dir_anchors: usize,
    pub p_dir: f64,
    pub identity_seeds: usize,

    pub grr_dx: f64,
    pub grr_t0: f64,
    pub grr_zeta: f64,
    /// Sup level `a`; absent means `3·√ζ`.
    pub grr_a: Option<f64>,
    /// Extra levels, as multiples of `√ζ`.
    pub grr_sweep: Vec<f64>,
    pub grr_training: usize,
    pub grr_heldout: usize,

    pub product_dims: Vec<usize>,
    pub product_level: u32,
    pub product_reps: usize,
    pub product_norm: BallNorm,

    pub hit_dim: usize,
    pub lengths: Vec<f64>,

    pub scales: Vec<f64>,
    pub density_t0: f64,
    pub copies: usize,
    pub samples: usize,

    pub betas: Vec<f64>,
    pub n_points: usize,
    pub max_iters: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            space_lags: vec![2, 4, 8, 16, 32],
            time_lags: vec![8, 16, 32, 64, 128, 256],
            anchors: 32,
            variance_t: 0.5,
            variance_dx: 1.0 / 32.0,
            variance_reps: 10_000,
            ladder_t0: 0.25,
            n_min: 2,
            n_max: 5,
            nodes_per_side: 8,
            p_sup: 1.0,
            dir_dx: 1.0 / 256.0,
            dir_t0: 1.0 / 32.0,
            dir_space_lags: vec![1, 2, 4, 8, 16],
            dir_time_lags: vec![32, 64, 128, 256, 512],
            dir_anchors: 16,
            p_dir: 2.0,
            identity_seeds: 100,
            grr_dx: 1.0 / 32.0,
            grr_t0: 0.25,
            grr_zeta: 0.25,
            grr_a: None,
            grr_sweep: vec![0.5, 1.0, 2.0, 4.0, 6.0],
            grr_training: 100,
            grr_heldout: 500,
            product_dims: vec![1, 2, 3],
            product_level: 2,
            product_reps: 2000,
            product_norm: BallNorm::Max,
            hit_dim: 7,
            lengths: vec![0.1, 0.2, 0.4],
            scales: vec![0.25, 0.0625],
            density_t0: 1.0 / 32.0,
            copies: 256,
            samples: 100_000,
            betas: vec![-1.0, -0.5, 0.5],
            n_points: 128,
            max_iters: 500_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub grid: GridSpec,
    pub sigma: SigmaSpec,
    pub windows: Windows,
    pub budgets: Budgets,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub params: Params,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn usage(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Usage(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// The settings used by the acceptance suite.
    pub fn default_for(experiment: Experiment) -> Self {
        let sine = SigmaSpec::default_sine();
        let grid = |horizon: f64, dx: f64, lo: f64, hi: f64, pad: f64| {
            GridSpec::covering(Interval::new(lo, hi), horizon, dx, pad).expect("default grid")
        };
        let (g, windows, reps) = match experiment {
            Experiment::Holder => (
                grid(1.0 / 32.0, 1.0 / 512.0, 0.0, 1.0, 6.0),
                Windows { i: Interval::new(1.0 / 64.0, 1.0 / 32.0), j: Interval::new(0.0, 1.0), m: 1.0, t: 1.0 / 32.0 },
                200,
            ),
            Experiment::Coupling | Experiment::Seminorm => (
                grid(0.5, 1.0 / 32.0, 0.0, 0.25, 6.0),
                Windows { i: Interval::new(0.25, 0.3125), j: Interval::new(0.0, 0.25), m: 1.0, t: 0.5 },
                200,
            ),
            Experiment::Smallball => (
                grid(0.5, 1.0 / 32.0, 0.0, 0.25, 6.0),
                Windows { i: Interval::new(0.25, 0.3125), j: Interval::new(0.0, 0.25), m: 1.0, t: 0.5 },
                4000,
            ),
            Experiment::Hitting => (
                grid(1.0 / 16.0, 1.0 / 128.0, 0.0, 1.0 / 64.0, 4.0),
                Windows { i: Interval::new(1.0 / 32.0, 1.0 / 16.0), j: Interval::new(0.0, 1.0 / 64.0), m: 1.0, t: 1.0 / 16.0 },
                3000,
            ),
            Experiment::Density => (
                grid(0.125, 1.0 / 32.0, 0.0, 1.0, 6.0),
                Windows { i: Interval::new(1.0 / 32.0, 0.125), j: Interval::new(0.0, 1.0), m: 1.0, t: 0.125 },
                200,
            ),
            Experiment::Gauge => (
                grid(0.125, 1.0 / 32.0, 0.0, 1.0, 6.0),
                Windows { i: Interval::new(1.0 / 32.0, 0.125), j: Interval::new(0.0, 1.0), m: 1.0, t: 0.125 },
                1,
            ),
        };
        Self {
            experiment,
            grid: g,
            sigma: sine,
            windows,
            budgets: Budgets { replications: reps, bootstrap: 1000, max_cell_steps: default_max_cell_steps() },
            seed: 20_240_601,
            output: default_output(),
            params: Params::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(&path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form without the output directory,
    /// hex encoded.
    pub fn hash(&self) -> String {
        let keyed = Self { output: PathBuf::new(), ..self.clone() };
        let canonical = serde_json::to_vec(&keyed).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| usage("grid", e))?;
        let w = &self.windows;
        if !(w.t > 0.0) {
            return Err(usage("windows.t", format!("horizon {} must be positive", w.t)));
        }
        if !(w.i.lo > 0.0 && w.i.hi <= w.t && w.i.len() > 0.0) {
            return Err(usage("windows.i", format!("[{}, {}] must be a non-empty subset of (0, {}]", w.i.lo, w.i.hi, w.t)));
        }
        if !(w.j.len() > 0.0) || !w.j.lo.is_finite() || !w.j.hi.is_finite() {
            return Err(usage("windows.j", format!("[{}, {}] must have positive length", w.j.lo, w.j.hi)));
        }
        if !(w.m > 0.0) {
            return Err(usage("windows.m", format!("{} must be positive", w.m)));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(usage("seed", format!("{} does not fit a TOML integer (max {})", self.seed, i64::MAX)));
        }
        let b = &self.budgets;
        if b.replications == 0 {
            return Err(usage("budgets.replications", "must be positive"));
        }
        if b.bootstrap == 0 {
            return Err(usage("budgets.bootstrap", "must be positive"));
        }
        if b.max_cell_steps == 0 {
            return Err(usage("budgets.max_cell_steps", "must be positive"));
        }
        let p = &self.params;
        let positive = |name: &str, x: f64| if x > 0.0 { Ok(()) } else { Err(usage(&format!("params.{name}"), "must be positive")) };
        for (name, x) in [
            ("variance_t", p.variance_t),
            ("variance_dx", p.variance_dx),
            ("ladder_t0", p.ladder_t0),
            ("dir_dx", p.dir_dx),
            ("dir_t0", p.dir_t0),
            ("grr_dx", p.grr_dx),
            ("grr_t0", p.grr_t0),
            ("grr_zeta", p.grr_zeta),
            ("density_t0", p.density_t0),
        ] {
            positive(name, x)?;
        }
        if p.p_sup < 1.0 || p.p_dir < 1.0 {
            return Err(usage("params.p_sup", "moment orders must be >= 1"));
        }
        if p.n_min < 1 || p.n_max < p.n_min {
            return Err(usage("params.n_min", format!("level range {}..={} is empty", p.n_min, p.n_max)));
        }
        if p.lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(usage("params.lengths", "lengths must be positive"));
        }
        if p.scales.iter().any(|z| !(*z > 0.0 && *z <= 1.0)) {
            return Err(usage("params.scales", "scales must lie in (0, 1]"));
        }
        if p.product_dims.iter().any(|&d| d == 0 || d > 8) {
            return Err(usage("params.product_dims", "dimensions must lie in 1..=8"));
        }
        if p.n_points < 2 {
            return Err(usage("params.n_points", "need >= 2 sample points"));
        }
        Ok(())
    }
}

/// One long-format result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_reps: usize,
}

/// An acceptance window on a reported quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub pass: bool,
}

impl Check {
    pub fn within(name: &str, value: f64, lo: Option<f64>, hi: Option<f64>) -> Self {
        let pass = value.is_finite() && lo.map_or(true, |l| value >= l) && hi.map_or(true, |h| value <= h);
        Self { name: name.into(), value, lo, hi, pass }
    }

    pub fn flag(name: &str, pass: bool) -> Self {
        Self { name: name.into(), value: if pass { 1.0 } else { 0.0 }, lo: Some(1.0), hi: None, pass }
    }
}

/// Extra CSV written next to the main one, e.g. a density grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub name: String,
    pub csv: String,
}

/// What an experiment returns before it is written out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: Experiment,
    pub config_hash: String,
    pub version: String,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
    pub wall_clock_s: f64,
}

impl ResultRecord {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Package version, plus `git describe` output when the build provides it
/// in `HEATLAB_GIT_DESCRIBE`.
pub fn artifact_version() -> String {
    match option_env!("HEATLAB_GIT_DESCRIBE") {
        Some(g) => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn run_report(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    use experiments as x;
    match config.experiment {
        Experiment::Holder => x::holder(config),
        Experiment::Coupling => x::coupling(config),
        Experiment::Seminorm => x::seminorm(config),
        Experiment::Smallball => x::smallball(config),
        Experiment::Hitting => x::hitting(config),
        Experiment::Density => x::density(config),
        Experiment::Gauge => x::gauge(config),
    }
}

/// Runs the experiment and writes `<output>/<name>.csv` and `<name>.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let report = run_report(config)?;
    fs::create_dir_all(&config.output)?;
    for a in &report.attachments {
        fs::write(config.output.join(format!("{}_{}.csv", config.experiment.name(), a.name)), &a.csv)?;
    }
    let record = ResultRecord {
        experiment: config.experiment,
        config_hash: config.hash(),
        version: artifact_version(),
        rows: report.rows,
        checks: report.checks,
        summary: report.summary,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    write_record(&record, &config.output)?;
    Ok(record)
}

pub fn rows_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["experiment", "series", "x", "y", "ci_lo", "ci_hi", "n_reps"])?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn write_record(record: &ResultRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let name = record.experiment.name();
    fs::write(dir.join(format!("{name}.csv")), rows_csv(&record.rows)?)?;
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PlotRow<'a> {
    x: f64,
    y: f64,
    series: &'a str,
    ci_lo: f64,
    ci_hi: f64,
}

/// Long-format `x, y, series, ci_lo, ci_hi` CSV of records from one family.
pub fn emit_plot_data(records: &[ResultRecord]) -> Result<String> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.experiment != first.experiment) {
            return Err(Error::Usage(format!(
                "plot data mixes experiment families `{}` and `{}`",
                first.experiment.name(),
                other.experiment.name()
            )));
        }
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["x", "y", "series", "ci_lo", "ci_hi"])?;
    for rec in records {
        for r in &rec.rows {
            w.serialize(PlotRow { x: r.x, y: r.y, series: &r.series, ci_lo: r.ci_lo, ci_hi: r.ci_hi })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}
