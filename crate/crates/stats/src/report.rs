//! Turns a directory of benchmark runs into a summary table and plot-ready series.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::bound::upper_bound;
use crate::ols::{fit_linear, prediction_interval, slope_with_ci, BallastLevel};
use crate::schema::{
    LatencyRow, MemoryRow, Phase, RunManifest, RunStatus, LATENCY_CSV, LATENCY_HEADER, MEMORY_CSV, MEMORY_HEADER,
    RUN_MANIFEST,
};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "variant,phase,operators,ballast_bytes,bound_bytes,fit_low,fit_high";
pub const NOTES_FILE: &str = "report_notes.txt";

const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}: field `{field}`: {message}")]
    Schema { file: PathBuf, field: String, message: String },
    #[error("no {RUN_MANIFEST} found under {0}")]
    NoRuns(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_owned(), source }
}

/// One loaded run with its per-phase bounds.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub bounds: BTreeMap<Phase, u64>,
    pub latencies: Option<Vec<LatencyRow>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub phase: Phase,
    pub operators: u32,
    pub ballast_bytes: u64,
    pub bound_bytes: u64,
    pub fit: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub runs: Vec<RunData>,
    pub summary: Vec<SummaryRow>,
    /// Cells that could not be fully reported: failed runs, missing CSVs,
    /// groups too small for a prediction interval.
    pub notes: Vec<String>,
}

/// Loads every run under `dir` (searched recursively for `run.json`).
pub fn load_runs(dir: &Path) -> Result<(Vec<RunData>, Vec<String>), ReportError> {
    let mut manifests = Vec::new();
    find_manifests(dir, &mut manifests)?;
    manifests.sort();
    if manifests.is_empty() {
        return Err(ReportError::NoRuns(dir.to_owned()));
    }
    let mut runs = Vec::new();
    let mut notes = Vec::new();
    for path in manifests {
        let run_dir = path.parent().expect("manifest has a parent").to_owned();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| ReportError::Schema {
            file: path.clone(),
            field: json_field_hint(&e),
            message: e.to_string(),
        })?;
        let label = run_label(&manifest);
        if manifest.status == RunStatus::Failed {
            notes.push(format!(
                "{label}: run failed: {}",
                manifest.failure.as_deref().unwrap_or("unknown failure")
            ));
            continue;
        }

        let mut bounds = BTreeMap::new();
        let memory_path = run_dir.join(MEMORY_CSV);
        if memory_path.exists() {
            let rows: Vec<MemoryRow> = read_csv(&memory_path, &MEMORY_HEADER)?;
            for phase in [Phase::Active, Phase::Idle] {
                let series: Vec<(u64, u64)> =
                    rows.iter().filter(|r| r.phase == phase).map(|r| (r.t_ns, r.rss_bytes)).collect();
                if series.is_empty() {
                    continue;
                }
                let end = manifest
                    .phase(phase)
                    .map_or(series[series.len() - 1].0, |w| w.end_ns.max(series[series.len() - 1].0));
                let bound = upper_bound(&series, end, 95).map_err(|e| ReportError::Schema {
                    file: memory_path.clone(),
                    field: "t_ns".into(),
                    message: e.to_string(),
                })?;
                bounds.insert(phase, bound);
            }
        } else {
            notes.push(format!("{label}: missing {MEMORY_CSV}"));
        }

        let latency_path = run_dir.join(LATENCY_CSV);
        let latencies = if latency_path.exists() {
            Some(read_csv(&latency_path, &LATENCY_HEADER)?)
        } else {
            notes.push(format!("{label}: missing {LATENCY_CSV}"));
            None
        };
        runs.push(RunData { dir: run_dir, manifest, bounds, latencies });
    }
    Ok((runs, notes))
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            find_manifests(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == RUN_MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

fn json_field_hint(e: &serde_json::Error) -> String {
    // serde_json reports e.g. "missing field `variant`" or "unknown variant `x`".
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("<document>").to_owned()
}

fn read_csv<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>, ReportError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ReportError::Schema {
        file: path.to_owned(),
        field: "<file>".into(),
        message: e.to_string(),
    })?;
    let found = reader.headers().map_err(|e| ReportError::Schema {
        file: path.to_owned(),
        field: "<header>".into(),
        message: e.to_string(),
    })?;
    for (i, expected) in header.iter().enumerate() {
        if found.get(i) != Some(*expected) {
            return Err(ReportError::Schema {
                file: path.to_owned(),
                field: (*expected).to_owned(),
                message: format!("expected column {i} to be `{expected}`, found {:?}", found.get(i)),
            });
        }
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let schema_err = |field: String, message: String| ReportError::Schema {
            file: path.to_owned(),
            field,
            message: format!("row {}: {message}", line + 1),
        };
        let record = record.map_err(|e| schema_err("<row>".into(), e.to_string()))?;
        let row = record.deserialize(None).map_err(|e: csv::Error| {
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field().and_then(|i| header.get(i as usize).copied()),
                _ => None,
            }
            .or_else(|| first_bad_column(&record, header))
            .unwrap_or("<row>");
            schema_err(field.to_owned(), e.to_string())
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Enum errors from csv carry no column index. In both row schemas every
/// column is an unsigned integer except `phase`.
fn first_bad_column<'h>(record: &csv::StringRecord, header: &[&'h str]) -> Option<&'h str> {
    header.iter().zip(record.iter()).find_map(|(&name, value)| {
        let ok = if name == "phase" {
            serde_json::from_value::<Phase>(serde_json::Value::String(value.to_owned())).is_ok()
        } else {
            value.parse::<u64>().is_ok()
        };
        (!ok).then_some(name)
    })
}

fn run_label(m: &RunManifest) -> String {
    format!(
        "{}/n={}/ballast={}/run={}",
        m.variant, m.operators, m.ballast_bytes, m.run_index
    )
}

/// Loads runs and computes the summary table. Nothing is written.
pub fn report(dir: &Path) -> Result<ReportBundle, ReportError> {
    let (runs, mut notes) = load_runs(dir)?;
    let summary = summarize(&runs, &mut notes);
    Ok(ReportBundle { runs, summary, notes })
}

type GroupKey = (String, Phase, u64);

fn summarize(runs: &[RunData], notes: &mut Vec<String>) -> Vec<SummaryRow> {
    // (variant, phase, ballast) -> operators -> bounds
    let mut groups: BTreeMap<GroupKey, BTreeMap<u32, Vec<u64>>> = BTreeMap::new();
    for run in runs {
        for (&phase, &bound) in &run.bounds {
            groups
                .entry((run.manifest.variant.clone(), phase, run.manifest.ballast_bytes))
                .or_default()
                .entry(run.manifest.operators)
                .or_default()
                .push(bound);
        }
    }

    let mut rows = Vec::new();
    for ((variant, phase, ballast), by_ops) in &groups {
        let points: Vec<(f64, f64)> = by_ops
            .iter()
            .flat_map(|(&ops, bounds)| bounds.iter().map(move |&b| (f64::from(ops), b as f64)))
            .collect();
        let model = match fit_linear(&points) {
            Ok(m) => Some(m),
            Err(e) => {
                notes.push(format!(
                    "{variant}/{}/ballast={ballast}: no prediction interval ({e})",
                    phase.as_str()
                ));
                None
            }
        };
        for (&ops, bounds) in by_ops {
            let mean = bounds.iter().map(|&b| b as f64).sum::<f64>() / bounds.len() as f64;
            let fit = model.as_ref().and_then(|m| prediction_interval(m, f64::from(ops), 0.95).ok());
            rows.push(SummaryRow {
                variant: variant.clone(),
                phase: *phase,
                operators: ops,
                ballast_bytes: *ballast,
                bound_bytes: mean.round() as u64,
                fit,
            });
        }
    }
    rows.sort_by(|a, b| {
        (&a.variant, a.phase, a.operators, a.ballast_bytes).cmp(&(&b.variant, b.phase, b.operators, b.ballast_bytes))
    });
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let (lo, hi) = match r.fit {
            Some((lo, hi)) => (format!("{lo:.0}"), format!("{hi:.0}")),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant,
            r.phase.as_str(),
            r.operators,
            r.ballast_bytes,
            r.bound_bytes,
            lo,
            hi
        ));
    }
    out
}

/// Writes `summary.csv`, the plot series and the notes file into `out_dir`.
/// Returns the paths written.
pub fn write_report(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<(), ReportError> {
        let path = out_dir.join(name);
        fs::write(&path, contents).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };
    put(SUMMARY_CSV, summary_csv(&bundle.summary))?;
    put("plot_memory.csv", plot_memory(&bundle.runs))?;
    put("plot_fit.csv", plot_fit(&bundle.runs))?;
    put("plot_latency.csv", plot_latency(&bundle.runs))?;
    put("heap_slopes.csv", heap_slopes(&bundle.runs))?;
    let mut notes = bundle.notes.join("\n");
    if !notes.is_empty() {
        notes.push('\n');
    }
    put(NOTES_FILE, notes)?;
    Ok(written)
}

fn sorted_runs(runs: &[RunData]) -> Vec<&RunData> {
    let mut v: Vec<&RunData> = runs.iter().collect();
    v.sort_by(|a, b| {
        let ka = (&a.manifest.variant, a.manifest.ballast_bytes, a.manifest.operators, a.manifest.run_index);
        let kb = (&b.manifest.variant, b.manifest.ballast_bytes, b.manifest.operators, b.manifest.run_index);
        ka.cmp(&kb)
    });
    v
}

fn plot_memory(runs: &[RunData]) -> String {
    let mut out = String::from("variant,phase,ballast_bytes,operators,run,bound_mib\n");
    for phase in [Phase::Active, Phase::Idle] {
        for run in sorted_runs(runs) {
            if let Some(&b) = run.bounds.get(&phase) {
                let m = &run.manifest;
                out.push_str(&format!(
                    "{},{},{},{},{},{:.3}\n",
                    m.variant,
                    phase.as_str(),
                    m.ballast_bytes,
                    m.operators,
                    m.run_index,
                    b as f64 / MIB
                ));
            }
        }
    }
    out
}

fn plot_fit(runs: &[RunData]) -> String {
    let mut groups: BTreeMap<GroupKey, Vec<(f64, f64)>> = BTreeMap::new();
    for run in runs {
        for (&phase, &b) in &run.bounds {
            groups
                .entry((run.manifest.variant.clone(), phase, run.manifest.ballast_bytes))
                .or_default()
                .push((f64::from(run.manifest.operators), b as f64));
        }
    }
    let mut out = String::from("variant,phase,ballast_bytes,operators,predicted_mib,low_mib,high_mib\n");
    for ((variant, phase, ballast), points) in groups {
        let Ok(model) = fit_linear(&points) else { continue };
        let mut xs: Vec<u32> = points.iter().map(|p| p.0 as u32).collect();
        xs.sort_unstable();
        xs.dedup();
        for x in xs {
            let Ok((lo, hi)) = prediction_interval(&model, f64::from(x), 0.95) else { continue };
            out.push_str(&format!(
                "{variant},{},{ballast},{x},{:.3},{:.3},{:.3}\n",
                phase.as_str(),
                model.predict(f64::from(x)) / MIB,
                lo / MIB,
                hi / MIB
            ));
        }
    }
    out
}

fn plot_latency(runs: &[RunData]) -> String {
    let mut out = String::from("variant,operators,ballast_bytes,run,round,elapsed_ms\n");
    for run in sorted_runs(runs) {
        let m = &run.manifest;
        for row in run.latencies.iter().flatten() {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                m.variant,
                m.operators,
                m.ballast_bytes,
                m.run_index,
                row.round,
                row.elapsed_us as f64 / 1000.0
            ));
        }
    }
    out
}

fn heap_slopes(runs: &[RunData]) -> String {
    // (variant, phase, operators) -> ballast -> bounds
    let mut groups: BTreeMap<(String, Phase, u32), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for run in runs {
        for (&phase, &b) in &run.bounds {
            groups
                .entry((run.manifest.variant.clone(), phase, run.manifest.operators))
                .or_default()
                .entry(run.manifest.ballast_bytes)
                .or_default()
                .push(b as f64);
        }
    }
    let mut out = String::from("variant,phase,operators,slope_mib_per_mib,low,high\n");
    for ((variant, phase, operators), by_ballast) in groups {
        let levels: Vec<BallastLevel> = by_ballast
            .into_iter()
            .map(|(ballast, bounds)| BallastLevel { ballast_bytes: ballast as f64, operators, bounds })
            .collect();
        let Ok(est) = slope_with_ci(&levels, 0.95) else { continue };
        out.push_str(&format!(
            "{variant},{},{operators},{:.4},{:.4},{:.4}\n",
            phase.as_str(),
            est.per_operator,
            est.low,
            est.high
        ));
    }
    out
}
