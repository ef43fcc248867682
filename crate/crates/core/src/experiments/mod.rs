//! Config-driven experiments and their reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

mod atomic;
mod bmo;
mod kernel_bounds;
mod paraproducts;
mod subspace;
pub mod symbols;
mod weak;

pub const NAMES: [&str; 8] = [
    "kernel-bounds",
    "upper-bound-iterated",
    "bmo-equivalence",
    "bounded-plus-riesz",
    "proper-subspace",
    "paraproduct-bounds",
    "atomic-decomposition",
    "weak-factorization",
];

/// Bumped whenever the report layout changes.
pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    /// Experiment-specific parameters; missing fields take their defaults.
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    /// File stem; defaults to the experiment name.
    pub stem: Option<String>,
}

impl ExperimentConfig {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            seed,
            params: serde_json::Value::Null,
            output: OutputSpec::default(),
        }
    }

    pub fn with_params(mut self, params: serde_json::Value) -> Self {
        self.params = params;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn params<P: DeserializeOwned + Default>(&self) -> Result<P> {
        if self.params.is_null() {
            return Ok(P::default());
        }
        serde_json::from_value(self.params.clone())
            .map_err(|e| Error::Config(format!("params for '{}': {e}", self.experiment)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    pub value: f64,
    /// Module operation that produced the value.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub source: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub crate_version: String,
    pub report_format: u32,
    pub seed: u64,
    /// Parameters after defaults were filled in.
    pub resolved_params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub scalars: BTreeMap<String, Scalar>,
    pub series: BTreeMap<String, Series>,
    pub checks: BTreeMap<String, CheckResult>,
    pub metadata: Metadata,
    /// Kept out of the JSON so that reports compare byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExperimentReport {
    fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.into(),
            scalars: BTreeMap::new(),
            series: BTreeMap::new(),
            checks: BTreeMap::new(),
            metadata: Metadata {
                config_hash: String::new(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                report_format: REPORT_FORMAT,
                seed: 0,
                resolved_params: serde_json::Value::Null,
            },
            wall_time: Duration::ZERO,
        }
    }

    pub fn scalar(&mut self, name: impl Into<String>, value: f64, source: &str) {
        self.scalars.insert(
            name.into(),
            Scalar {
                value,
                source: source.into(),
            },
        );
    }

    pub fn point(&mut self, series: &str, source: &str, x: f64, y: f64, tag: impl Into<String>) {
        self.series
            .entry(series.into())
            .or_insert_with(|| Series {
                source: source.into(),
                points: Vec::new(),
            })
            .points
            .push(Point { x, y, tag: tag.into() });
    }

    /// Records `measured ≤ bound`.
    pub fn check_le(&mut self, name: &str, measured: f64, bound: f64, detail: impl Into<String>) {
        self.check(name, measured <= bound, measured, bound, detail);
    }

    pub fn check(&mut self, name: &str, pass: bool, measured: f64, bound: f64, detail: impl Into<String>) {
        self.checks.insert(
            name.into(),
            CheckResult {
                pass,
                measured,
                bound,
                detail: detail.into(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).map(|s| s.value)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.values().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Long-format CSV of every series.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("series,source,x,y,tag\n");
        for (name, series) in &self.series {
            for p in &series.points {
                let _ = writeln!(s, "{name},{},{:e},{:e},{}", series.source, p.x, p.y, p.tag);
            }
        }
        s
    }

    pub fn scalars_csv(&self) -> String {
        let mut s = String::from("name,value,source\n");
        for (name, v) in &self.scalars {
            let _ = writeln!(s, "{name},{:e},{}", v.value, v.source);
        }
        s
    }

    /// Writes `<stem>.json`, `<stem>.series.csv`, `<stem>.scalars.csv` and `<stem>.timing.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            (format!("{stem}.json"), self.to_json()),
            (format!("{stem}.series.csv"), self.series_csv()),
            (format!("{stem}.scalars.csv"), self.scalars_csv()),
            (
                format!("{stem}.timing.json"),
                format!("{{\"wall_time_seconds\": {}}}\n", self.wall_time.as_secs_f64()),
            ),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// SHA-256 of the canonical JSON of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve<P: DeserializeOwned + Serialize + Default>(cfg: &ExperimentConfig) -> Result<(P, serde_json::Value)> {
    let p: P = cfg.params()?;
    let v = serde_json::to_value(&p).map_err(|e| Error::Config(e.to_string()))?;
    Ok((p, v))
}

trait Params: DeserializeOwned + Serialize + Default {
    fn check(&self) -> Result<()>;
}

/// Parses and checks the parameters without running anything.
pub fn validate(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    fn go<P: Params>(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
        let (p, v) = resolve::<P>(cfg)?;
        p.check()?;
        Ok(v)
    }
    match cfg.experiment.as_str() {
        "kernel-bounds" => go::<kernel_bounds::KernelBoundsParams>(cfg),
        "upper-bound-iterated" => go::<bmo::UpperBoundParams>(cfg),
        "bmo-equivalence" => go::<bmo::EquivalenceParams>(cfg),
        "bounded-plus-riesz" => go::<bmo::BoundedPlusRieszParams>(cfg),
        "proper-subspace" => go::<subspace::ProperSubspaceParams>(cfg),
        "paraproduct-bounds" => go::<paraproducts::ParaproductParams>(cfg),
        "atomic-decomposition" => go::<atomic::AtomicParams>(cfg),
        "weak-factorization" => go::<weak::WeakParams>(cfg),
        other => Err(Error::Config(format!(
            "unknown experiment '{other}'; expected one of {}",
            NAMES.join(", ")
        ))),
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let resolved = validate(cfg)?;
    let start = Instant::now();
    let mut report = ExperimentReport::new(&cfg.experiment);
    report.metadata.config_hash = config_hash(cfg);
    report.metadata.seed = cfg.seed;
    report.metadata.resolved_params = resolved;
    let seed = cfg.seed;
    match cfg.experiment.as_str() {
        "kernel-bounds" => kernel_bounds::run(&cfg.params()?, &mut report),
        "upper-bound-iterated" => bmo::run_upper(&cfg.params()?, seed, &mut report),
        "bmo-equivalence" => bmo::run_equivalence(&cfg.params()?, seed, &mut report),
        "bounded-plus-riesz" => bmo::run_bounded_plus_riesz(&cfg.params()?, seed, &mut report),
        "proper-subspace" => subspace::run(&cfg.params()?, &mut report),
        "paraproduct-bounds" => paraproducts::run(&cfg.params()?, seed, &mut report),
        "atomic-decomposition" => atomic::run(&cfg.params()?, seed, &mut report),
        "weak-factorization" => weak::run(&cfg.params()?, seed, &mut report),
        _ => unreachable!("validated above"),
    }?;
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn lambda_of(v: f64) -> Result<crate::domain::LambdaParam> {
    crate::domain::LambdaParam::new(v).map_err(|e| Error::Config(e.to_string()))
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}
