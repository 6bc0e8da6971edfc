//! Parameter sweeps comparing the first-best bound, the designed search and
//! random meeting.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::random_meeting_equilibrium;
use crate::error::{Error, Result};
use crate::market::{gen_interpolated, MarketSpec};
use crate::stardesign::{design_search, CERTIFIED_RATIO};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const Q_SWEEP_DELTA: f64 = 1.0;
pub const DELTA_SWEEP_Q: f64 = 0.5;
pub const DEFAULT_DELTAS: [f64; 10] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];
const NORM_SLACK: f64 = 1e-9;

pub fn default_q_values() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub param: f64,
    pub welfare_fb: f64,
    pub welfare_design: f64,
    pub welfare_random: f64,
    pub norm_design: f64,
    pub norm_random: f64,
    pub runtime_ms: u64,
}

pub fn evaluate(spec: &MarketSpec, param: f64) -> Result<ExperimentRow> {
    let start = Instant::now();
    let design = design_search(spec)?;
    let random = random_meeting_equilibrium(spec)?;
    let fb = design.fb_objective;
    let norm = |w: f64| if fb > 0.0 { w / fb } else { 0.0 };
    Ok(ExperimentRow {
        param,
        welfare_fb: fb,
        welfare_design: design.outcome.welfare,
        welfare_random: random.outcome.welfare,
        norm_design: norm(design.outcome.welfare),
        norm_random: norm(random.outcome.welfare),
        runtime_ms: start.elapsed().as_millis() as u64,
    })
}

fn sweep<F>(params: &[f64], make: F) -> Result<Vec<ExperimentRow>>
where
    F: Fn(f64) -> Result<MarketSpec> + Sync,
{
    let rows: Vec<ExperimentRow> = params
        .par_iter()
        .map(|&p| {
            let _span = tracing::info_span!("row", param = p).entered();
            evaluate(&make(p)?, p)
        })
        .collect::<Result<_>>()?;
    Ok(rows)
}

pub fn run_q_sweep(q_values: &[f64], sigma: f64, delta: f64) -> Result<Vec<ExperimentRow>> {
    if let Some(q) = q_values.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::validation(format!("q = {q} is outside [0, 1]")));
    }
    sweep(q_values, |q| gen_interpolated(q, sigma, delta))
}

pub fn run_delta_sweep(deltas: &[f64], q: f64, sigma: f64) -> Result<Vec<ExperimentRow>> {
    sweep(deltas, |d| gen_interpolated(q, sigma, d))
}

/// δ sweep over a user-supplied market; only the life-event rate changes.
pub fn run_delta_sweep_on(spec: &MarketSpec, deltas: &[f64]) -> Result<Vec<ExperimentRow>> {
    sweep(deltas, |d| {
        let mut s = spec.clone();
        s.delta = d;
        s.validate()?;
        Ok(s)
    })
}

/// Row invariants: finite values, normalized welfare in `[0, 1]` up to slack,
/// the certified design ratio, and a nondecreasing parameter column.
pub fn check_rows(rows: &[ExperimentRow]) -> Vec<String> {
    let mut problems = Vec::new();
    for r in rows {
        let vals = [r.param, r.welfare_fb, r.welfare_design, r.welfare_random, r.norm_design, r.norm_random];
        if vals.iter().any(|v| !v.is_finite()) {
            problems.push(format!("param {}: non-finite value", r.param));
            continue;
        }
        for (name, v) in [("norm_design", r.norm_design), ("norm_random", r.norm_random)] {
            if !(0.0..=1.0 + NORM_SLACK).contains(&v) {
                problems.push(format!("param {}: {name} = {v} outside [0, 1]", r.param));
            }
        }
        if r.norm_design < CERTIFIED_RATIO - NORM_SLACK {
            problems.push(format!("param {}: norm_design = {} below {CERTIFIED_RATIO}", r.param, r.norm_design));
        }
    }
    if rows.windows(2).any(|w| w[1].param < w[0].param) {
        problems.push("param column is not monotone".into());
    }
    problems
}

pub fn write_csv<W: Write>(rows: &[ExperimentRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["param", "welfare_fb", "welfare_design", "welfare_random", "norm_design", "norm_random", "runtime_ms"])
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}

pub fn emit_csv(rows: &[ExperimentRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn parse_csv(text: &str) -> Result<Vec<ExperimentRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Schema {
                path: format!("row {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

/// One block per series, each a `param value` table, blocks separated by two
/// blank lines so gnuplot can address them with `index`.
pub fn write_plotdata<W: Write>(rows: &[ExperimentRow], mut out: W) -> std::io::Result<()> {
    type Get = fn(&ExperimentRow) -> f64;
    let series: [(&str, Get); 6] = [
        ("welfare_fb", |r| r.welfare_fb),
        ("welfare_design", |r| r.welfare_design),
        ("welfare_random", |r| r.welfare_random),
        ("norm_design", |r| r.norm_design),
        ("norm_random", |r| r.norm_random),
        ("runtime_ms", |r| r.runtime_ms as f64),
    ];
    for (k, (name, get)) in series.iter().enumerate() {
        if k > 0 {
            writeln!(out, "\n")?;
        }
        writeln!(out, "# {name}")?;
        writeln!(out, "param {name}")?;
        for r in rows {
            writeln!(out, "{} {}", r.param, get(r))?;
        }
    }
    out.flush()
}

pub fn emit_plotdata(rows: &[ExperimentRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_plotdata(rows, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
