//! Metrics files: the contract between training runs and plotting.
//!
//! CSV files carry a fixed header (see [`METRICS_COLUMNS`]) and a
//! `schema_version` column on every row; JSON output is one object per line.
//! Both are append-safe: appending to an existing file checks the header and
//! never rewrites earlier rows.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use flap_core::eval::{mean, std_dev, CurvePoint, MetricsRecord};
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::experiments::AblationRow;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Column order of metrics CSV files. `train_returns` holds the per-task
/// values joined by `;`; absent optional values are empty cells.
pub const METRICS_COLUMNS: [&str; 17] = [
    "schema_version",
    "run",
    "seed",
    "iteration",
    "env_steps_total",
    "updates_total",
    "mean_train_return",
    "mean_train_return_discounted",
    "test_return_in_dist",
    "test_return_ood",
    "actor_loss",
    "critic_loss",
    "entropy_loss",
    "adapter_loss",
    "alpha",
    "wall_clock_s",
    "train_returns",
];

/// Columns that depend on the machine rather than the computation.
pub const WALL_CLOCK_COLUMNS: [&str; 1] = ["wall_clock_s"];

pub const CURVE_COLUMNS: [&str; 6] = [
    "schema_version",
    "run",
    "seed",
    "task_id",
    "env_steps",
    "episode_return",
];

pub const RUNTIME_COLUMNS: [&str; 5] = [
    "schema_version",
    "method",
    "task_index",
    "seconds",
    "repeat",
];

pub const ABLATION_COLUMNS: [&str; 6] = [
    "schema_version",
    "ablation",
    "variant",
    "seed",
    "metric",
    "value",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("jsonl") => Format::Json,
            _ => Format::Csv,
        }
    }
}

/// A metrics record labelled with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub seed: u64,
    pub record: MetricsRecord,
}

fn fmt(v: f64) -> String {
    // `Display` for f64 prints the shortest string that parses back exactly.
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn row_fields(row: &MetricsRow) -> Vec<String> {
    let r = &row.record;
    vec![
        METRICS_SCHEMA_VERSION.to_string(),
        row.run.clone(),
        row.seed.to_string(),
        r.iteration.to_string(),
        r.env_steps_total.to_string(),
        r.updates_total.to_string(),
        fmt(r.mean_train_return),
        fmt(r.mean_train_return_discounted),
        fmt_opt(r.test_return_in_dist),
        fmt_opt(r.test_return_ood),
        fmt_opt(r.actor_loss),
        fmt_opt(r.critic_loss),
        fmt_opt(r.entropy_loss),
        fmt_opt(r.adapter_loss),
        fmt(r.alpha),
        fmt(r.wall_clock_s),
        r.train_returns
            .iter()
            .map(|v| fmt(*v))
            .collect::<Vec<_>>()
            .join(";"),
    ]
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FlapError::io(dir, e))?;
    }
    Ok(())
}

/// Opens `path` for appending; writes `header` if the file is new or empty,
/// otherwise checks the existing header matches.
fn open_csv_append(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    let existing = fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    if existing {
        let f = fs::File::open(path).map_err(|e| FlapError::io(path, e))?;
        let mut first = String::new();
        BufReader::new(f)
            .read_line(&mut first)
            .map_err(|e| FlapError::io(path, e))?;
        if first.trim_end() != header.join(",") {
            return Err(FlapError::SchemaMismatch {
                path: path.to_path_buf(),
            });
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FlapError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if !existing {
        w.write_record(header).map_err(|e| FlapError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(w)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = open_csv_append(path, header)?;
    let csv_err = |e| FlapError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| FlapError::io(path, e))
}

fn append_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FlapError::io(path, e))?;
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| FlapError::json(path, e))?;
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(|e| FlapError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct JsonLine<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

/// Appends `rows` to a metrics file. A new or empty CSV gets the header
/// first, so exporting zero rows yields a header-only file.
pub fn export_metrics(rows: &[MetricsRow], path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => write_rows(path, &METRICS_COLUMNS, rows.iter().map(row_fields)),
        Format::Json => {
            let lines: Vec<JsonLine<&MetricsRow>> = rows
                .iter()
                .map(|r| JsonLine {
                    schema_version: METRICS_SCHEMA_VERSION,
                    body: r,
                })
                .collect();
            if lines.is_empty() {
                ensure_parent(path)?;
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| FlapError::io(path, e))?;
                return Ok(());
            }
            append_json_lines(path, &lines)
        }
    }
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| FlapError::Config(format!("{}: bad number `{s}`", path.display())))
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(path, s).map(Some)
    }
}

fn parse_int<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| FlapError::Config(format!("{}: bad integer `{s}`", path.display())))
}

fn check_schema_version(path: &Path, found: u32) -> Result<()> {
    if found != METRICS_SCHEMA_VERSION {
        return Err(FlapError::Version {
            path: path.to_path_buf(),
            what: "metrics schema",
            found,
            expected: METRICS_SCHEMA_VERSION,
        });
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    match Format::from_path(path) {
        Format::Csv => read_metrics_csv(path),
        Format::Json => {
            let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
            let mut out = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let l: JsonLine<MetricsRow> =
                    serde_json::from_str(line).map_err(|e| FlapError::json(path, e))?;
                check_schema_version(path, l.schema_version)?;
                out.push(l.body);
            }
            Ok(out)
        }
    }
}

fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let csv_err = |e| FlapError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(FlapError::SchemaMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        check_schema_version(path, parse_int(path, f(0))?)?;
        let train_returns = if f(16).is_empty() {
            Vec::new()
        } else {
            f(16)
                .split(';')
                .map(|s| parse_f64(path, s))
                .collect::<Result<Vec<_>>>()?
        };
        out.push(MetricsRow {
            run: f(1).to_string(),
            seed: parse_int(path, f(2))?,
            record: MetricsRecord {
                iteration: parse_int(path, f(3))?,
                env_steps_total: parse_int(path, f(4))?,
                updates_total: parse_int(path, f(5))?,
                mean_train_return: parse_f64(path, f(6))?,
                mean_train_return_discounted: parse_f64(path, f(7))?,
                test_return_in_dist: parse_opt(path, f(8))?,
                test_return_ood: parse_opt(path, f(9))?,
                actor_loss: parse_opt(path, f(10))?,
                critic_loss: parse_opt(path, f(11))?,
                entropy_loss: parse_opt(path, f(12))?,
                adapter_loss: parse_opt(path, f(13))?,
                alpha: parse_f64(path, f(14))?,
                wall_clock_s: parse_f64(path, f(15))?,
                train_returns,
            },
        });
    }
    Ok(out)
}

/// CSV text with the named columns removed, for comparing runs across
/// machines.
pub fn strip_columns(csv_text: &str, drop: &[&str]) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let names: Vec<&str> = header.split(',').collect();
    let keep: Vec<bool> = names.iter().map(|n| !drop.contains(n)).collect();
    let pick = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(c, _)| c)
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = pick(header);
    out.push('\n');
    for l in lines {
        out.push_str(&pick(l));
        out.push('\n');
    }
    out
}

/// Appends one adaptation curve (return against test-task experience).
pub fn export_curve(
    path: &Path,
    run: &str,
    seed: u64,
    task_id: u32,
    curve: &[CurvePoint],
) -> Result<()> {
    write_rows(
        path,
        &CURVE_COLUMNS,
        curve.iter().map(|p| {
            vec![
                METRICS_SCHEMA_VERSION.to_string(),
                run.to_string(),
                seed.to_string(),
                task_id.to_string(),
                p.env_steps.to_string(),
                fmt(p.episode_return),
            ]
        }),
    )
}

/// Wall-clock adaptation times of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub method: String,
    /// Seconds per task, averaged over repeats.
    pub seconds: Vec<f64>,
    pub repeats: usize,
    pub mean_s: f64,
    pub std_s: f64,
    /// Spread across repeats, averaged over tasks.
    pub repeat_std_s: f64,
}

impl RuntimeReport {
    /// Summarizes `samples[task][repeat]` seconds. No tasks gives an empty
    /// report with zero mean and spread.
    pub fn from_samples(method: &str, samples: &[Vec<f64>]) -> Self {
        let seconds: Vec<f64> = samples.iter().map(|s| mean(s).unwrap_or(0.0)).collect();
        let repeat_std: Vec<f64> = samples.iter().map(|s| std_dev(s).unwrap_or(0.0)).collect();
        Self {
            method: method.to_string(),
            repeats: samples.first().map_or(0, Vec::len),
            mean_s: mean(&seconds).unwrap_or(0.0),
            std_s: std_dev(&seconds).unwrap_or(0.0),
            repeat_std_s: mean(&repeat_std).unwrap_or(0.0),
            seconds,
        }
    }
}

pub fn export_runtime(path: &Path, report: &RuntimeReport) -> Result<()> {
    write_rows(
        path,
        &RUNTIME_COLUMNS,
        report.seconds.iter().enumerate().map(|(i, s)| {
            vec![
                METRICS_SCHEMA_VERSION.to_string(),
                report.method.clone(),
                i.to_string(),
                fmt(*s),
                report.repeats.to_string(),
            ]
        }),
    )
}

pub fn export_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_rows(
        path,
        &ABLATION_COLUMNS,
        rows.iter().map(|r| {
            vec![
                METRICS_SCHEMA_VERSION.to_string(),
                r.ablation.clone(),
                r.variant.clone(),
                r.seed.to_string(),
                r.metric.clone(),
                fmt(r.value),
            ]
        }),
    )
}

/// Reads any of the fixed-schema CSV files as string records after checking
/// the header and the schema version of every row.
pub fn read_table(path: &Path, columns: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let csv_err = |e| FlapError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(columns.iter().copied()) {
        return Err(FlapError::SchemaMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        check_schema_version(path, parse_int(path, rec.get(0).unwrap_or(""))?)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    read_table(path, &ABLATION_COLUMNS)?
        .iter()
        .map(|r| {
            Ok(AblationRow {
                ablation: r[1].to_string(),
                variant: r[2].to_string(),
                seed: parse_int(path, &r[3])?,
                metric: r[4].to_string(),
                value: parse_f64(path, &r[5])?,
            })
        })
        .collect()
}

/// Header line of a CSV file, if it has one.
pub fn header_of(path: &Path) -> Result<Option<Vec<String>>> {
    let f = fs::File::open(path).map_err(|e| FlapError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f)
        .read_line(&mut first)
        .map_err(|e| FlapError::io(path, e))?;
    let first = first.trim_end();
    Ok((!first.is_empty()).then(|| first.split(',').map(str::to_string).collect()))
}
