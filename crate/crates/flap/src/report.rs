//! Summary tables over a directory of metrics, ablation and runtime CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flap_core::eval::{mean, std_dev};
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};
use crate::metrics::{
    header_of, read_ablation, read_metrics, read_table, ABLATION_COLUMNS, METRICS_COLUMNS,
    RUNTIME_COLUMNS,
};

/// Mean, spread and range of one quantity across seeds (or tasks).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            n: values.len(),
            mean: mean(values)?,
            std: std_dev(values)?,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Final values of one training run label, across its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub final_train_return: Band,
    pub test_return_in_dist: Option<Band>,
    pub test_return_ood: Option<Band>,
    pub env_steps_total: u64,
    pub wall_clock_s: Band,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub ablation: String,
    pub variant: String,
    pub metric: String,
    pub band: Band,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSummary {
    pub method: String,
    pub per_task_seconds: Band,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    pub ablations: Vec<AblationSummary>,
    pub runtimes: Vec<RuntimeSummary>,
    /// CSV files that matched no known schema.
    pub skipped: Vec<PathBuf>,
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| FlapError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| FlapError::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            csv_files(&p, out)?;
        } else if p.extension().and_then(|e| e.to_str()) == Some("csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads every known CSV under `dir` (recursively) and aggregates it.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let mut files = Vec::new();
    csv_files(dir, &mut files)?;
    // (run, seed) -> final record and last test returns
    let mut finals: BTreeMap<String, BTreeMap<u64, FinalRow>> = BTreeMap::new();
    let mut ablations: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut runtimes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut summary = Summary::default();
    for path in files {
        let Some(header) = header_of(&path)? else {
            summary.skipped.push(path);
            continue;
        };
        if header == METRICS_COLUMNS {
            for row in read_metrics(&path)? {
                let slot = finals
                    .entry(row.run.clone())
                    .or_default()
                    .entry(row.seed)
                    .or_default();
                let r = &row.record;
                if r.iteration + 1 >= slot.iterations {
                    slot.iterations = r.iteration + 1;
                    slot.train = r.mean_train_return;
                    slot.env_steps = r.env_steps_total;
                    slot.wall = r.wall_clock_s;
                }
                if let Some(v) = r.test_return_in_dist {
                    slot.test_in = Some(v);
                }
                if let Some(v) = r.test_return_ood {
                    slot.test_ood = Some(v);
                }
            }
        } else if header == ABLATION_COLUMNS {
            for r in read_ablation(&path)? {
                ablations
                    .entry((r.ablation, r.variant, r.metric))
                    .or_default()
                    .push(r.value);
            }
        } else if header == RUNTIME_COLUMNS {
            for r in read_table(&path, &RUNTIME_COLUMNS)? {
                let secs: f64 = r[3].parse().map_err(|_| {
                    FlapError::Config(format!("{}: bad number `{}`", path.display(), &r[3]))
                })?;
                runtimes.entry(r[1].to_string()).or_default().push(secs);
            }
        } else {
            summary.skipped.push(path);
        }
    }
    for (run, seeds) in finals {
        let rows: Vec<&FinalRow> = seeds.values().collect();
        let pick = |f: fn(&FinalRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            Band::of(&v)
        };
        summary.runs.push(RunSummary {
            run,
            seeds: seeds.keys().copied().collect(),
            iterations: rows.iter().map(|r| r.iterations).max().unwrap_or(0),
            final_train_return: pick(|r| Some(r.train)).expect("at least one seed"),
            test_return_in_dist: pick(|r| r.test_in),
            test_return_ood: pick(|r| r.test_ood),
            env_steps_total: rows.iter().map(|r| r.env_steps).max().unwrap_or(0),
            wall_clock_s: pick(|r| Some(r.wall)).expect("at least one seed"),
        });
    }
    for ((ablation, variant, metric), values) in ablations {
        summary.ablations.push(AblationSummary {
            ablation,
            variant,
            metric,
            band: Band::of(&values).expect("grouped values are nonempty"),
        });
    }
    for (method, values) in runtimes {
        summary.runtimes.push(RuntimeSummary {
            method,
            per_task_seconds: Band::of(&values).expect("grouped values are nonempty"),
        });
    }
    Ok(summary)
}

#[derive(Default)]
struct FinalRow {
    iterations: u64,
    train: f64,
    test_in: Option<f64>,
    test_ood: Option<f64>,
    env_steps: u64,
    wall: f64,
}

fn band_cell(b: Option<&Band>) -> String {
    match b {
        Some(b) => format!("{:.3} ± {:.3} [{:.3}, {:.3}]", b.mean, b.std, b.min, b.max),
        None => "-".into(),
    }
}

/// Markdown tables, one section per kind of file found.
pub fn render_markdown(s: &Summary) -> String {
    let mut out = String::new();
    if !s.runs.is_empty() {
        out.push_str("## Training runs\n\n");
        out.push_str("| run | seeds | iterations | env steps | final train return | test in-dist | test OOD | wall-clock s |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &s.runs {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.run,
                r.seeds.len(),
                r.iterations,
                r.env_steps_total,
                band_cell(Some(&r.final_train_return)),
                band_cell(r.test_return_in_dist.as_ref()),
                band_cell(r.test_return_ood.as_ref()),
                band_cell(Some(&r.wall_clock_s)),
            );
        }
        out.push('\n');
    }
    if !s.ablations.is_empty() {
        out.push_str("## Ablations\n\n| ablation | variant | metric | n | mean ± std [min, max] |\n|---|---|---|---|---|\n");
        for a in &s.ablations {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                a.ablation,
                a.variant,
                a.metric,
                a.band.n,
                band_cell(Some(&a.band))
            );
        }
        out.push('\n');
    }
    if !s.runtimes.is_empty() {
        out.push_str(
            "## Adaptation wall-clock\n\n| method | tasks | seconds per task |\n|---|---|---|\n",
        );
        for r in &s.runtimes {
            let _ = writeln!(
                out,
                "| {} | {} | {} |",
                r.method,
                r.per_task_seconds.n,
                band_cell(Some(&r.per_task_seconds))
            );
        }
        out.push('\n');
    }
    if out.is_empty() {
        out.push_str("No metrics files found.\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_of_known_values() {
        let b = Band::of(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!((b.n, b.mean, b.min, b.max), (4, 3.0, 1.0, 6.0));
        assert!((b.std - 3.5f64.sqrt()).abs() < 1e-12);
        assert!(Band::of(&[]).is_none());
    }

    #[test]
    fn empty_directory_summarizes_to_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let s = summarize(dir.path()).unwrap();
        assert_eq!(s, Summary::default());
        assert_eq!(render_markdown(&s), "No metrics files found.\n");
    }
}
