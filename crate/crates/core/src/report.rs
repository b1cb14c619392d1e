//! Run reports. `report.json` is a pure function of config and seed; the
//! wall-clock timestamp lives in `header.json`. `report.txt` renders the same
//! content as nested key-value sections.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coefficients::ValidationReport;
use crate::error::Result;
use crate::fbsde_verifier::{ResidualReport, SquareIntegrability, UniquenessReport, WienerReport};
use crate::stats::ChiSquareTest;

/// One named, thresholded check. `source` names the producing operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub source: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Hard checks decide the exit code; the rest are recorded only.
    pub hard: bool,
}

impl Check {
    pub fn at_most(name: &str, source: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
            value,
            threshold,
            pass: value <= threshold,
            hard: true,
        }
    }

    pub fn at_least(name: &str, source: &str, value: f64, threshold: f64) -> Self {
        Self {
            pass: value >= threshold,
            ..Self::at_most(name, source, value, threshold)
        }
    }

    pub fn flag(name: &str, source: &str, pass: bool) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
            value: if pass { 1.0 } else { 0.0 },
            threshold: 1.0,
            pass,
            hard: true,
        }
    }

    pub fn advisory(mut self) -> Self {
        self.hard = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub theta: f64,
    pub c_mu: f64,
    pub duality_defect: f64,
    pub max_mass_defect: f64,
    pub min_u: f64,
    pub min_v: f64,
    pub kernel_total_mass: Option<f64>,
    pub kernel_min_entry: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedTest {
    pub t: f64,
    pub test: ChiSquareTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub marginal_tests: Vec<TimedTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub forward: ResidualReport,
    /// Residual of the mirrored construction on the reversed-time ensemble;
    /// its driver is a derived identity.
    pub dual: ResidualReport,
    pub dual_identity: String,
    pub forward_square: SquareIntegrability,
    pub dual_square: SquareIntegrability,
    pub reseeded_square: SquareIntegrability,
    pub wiener: WienerReport,
    pub reconstruction_mismatch: f64,
    pub drift_defect: Option<f64>,
    pub dual_drift_defect: Option<f64>,
    pub reversibility_tests: Vec<TimedTest>,
    pub uniqueness: Option<UniquenessReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub states: usize,
    pub steps: usize,
    pub forward_max_diff: f64,
    pub backward_max_diff: f64,
    pub bernstein_states: usize,
    pub bernstein_steps: usize,
    pub bernstein_defect: f64,
    pub non_markov_control_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub h: f64,
    pub dt: f64,
    pub nodes: usize,
    pub steps: usize,
    pub n_paths: usize,
    pub mse: f64,
    pub mse_sem: f64,
    pub terminal_rms: f64,
    pub drift_defect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunReport {
    pub config: Value,
    pub seed: u64,
    pub stages: Vec<String>,
    pub validation: Option<ValidationReport>,
    pub solve: Option<SolveSummary>,
    pub simulation: Option<SimulationSummary>,
    pub verification: Option<VerificationSummary>,
    pub oracle: Option<OracleSummary>,
    pub ladder: Vec<LadderRow>,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub failure: Option<Failure>,
}

impl RunReport {
    pub fn hard_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass || !c.hard)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.hard && !c.pass)
    }
}

#[derive(Debug, Serialize)]
struct Header {
    tool: &'static str,
    version: &'static str,
    unix_time: u64,
}

/// Arrays longer than this are summarized in the text rendering.
const TEXT_ARRAY_LIMIT: usize = 16;

fn render(out: &mut String, key: &str, v: &Value, indent: usize) {
    let pad = "  ".repeat(indent);
    match v {
        Value::Object(map) => {
            let _ = writeln!(out, "{pad}[{key}]");
            for (k, x) in map {
                render(out, k, x, indent + 1);
            }
        }
        Value::Array(items) if items.iter().all(|x| !x.is_object() && !x.is_array()) && items.len() <= TEXT_ARRAY_LIMIT => {
            let s: Vec<String> = items.iter().map(scalar).collect();
            let _ = writeln!(out, "{pad}{key} = [{}]", s.join(", "));
        }
        Value::Array(items) if items.len() > TEXT_ARRAY_LIMIT => {
            let _ = writeln!(out, "{pad}{key} = <{} entries, see CSV exports>", items.len());
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                render(out, &format!("{key}.{i}"), x, indent);
            }
        }
        _ => {
            let _ = writeln!(out, "{pad}{key} = {}", scalar(v));
        }
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn render_text(report: &RunReport) -> Result<String> {
    let v = serde_json::to_value(report)?;
    let mut out = String::new();
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "verdict = {verdict}");
    for c in &report.checks {
        let tag = match (c.pass, c.hard) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "note",
        };
        let _ = writeln!(out, "check {tag:4} {} value={:e} threshold={:e} ({})", c.name, c.value, c.threshold, c.source);
    }
    if let Value::Object(map) = v {
        for (k, x) in &map {
            if k != "checks" {
                render(&mut out, k, x, 0);
            }
        }
    }
    Ok(out)
}

pub fn to_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Writes `report.json`, `report.txt` and `header.json` into `dir`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_json(report)?)?;
    std::fs::write(dir.join("report.txt"), render_text(report)?)?;
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let header = Header {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        unix_time,
    };
    std::fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}
