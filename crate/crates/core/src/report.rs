//! Report emission: sweep CSVs, frequency CSVs, per-sample trace JSON lines
//! and a plain-text summary. Output bytes are a pure function of the inputs;
//! nothing time- or environment-dependent is written.
//!
//! Schemas (versioned in `manifest.json`):
//!
//! - `sweep.v1` CSV: `s,mode,metric_name,metric_value,mean_flops,cost_ratio`
//! - `frequencies.v1` CSV: `s,mode,layer,skip_count,exit_count,fallthrough_count`
//!   (fallthrough is reported on the final layer's row, 0 elsewhere)
//! - `traces.v1` JSONL: one record per sample with gate decisions, exit
//!   layer, entropies and the executed-op cost
//! - `metrics.v1` JSONL: one record per training epoch

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{InferenceTrace, SweepResult};
use crate::train::EpochRecord;

pub const SWEEP_SCHEMA: &str = "sweep.v1";
pub const FREQUENCIES_SCHEMA: &str = "frequencies.v1";
pub const TRACES_SCHEMA: &str = "traces.v1";
pub const METRICS_SCHEMA: &str = "metrics.v1";

/// Flat CSV row mirroring one `SweepResult`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s: f64,
    pub mode: String,
    pub metric_name: String,
    pub metric_value: f64,
    pub mean_flops: f64,
    pub cost_ratio: f64,
}

impl From<&SweepResult> for SweepRow {
    fn from(r: &SweepResult) -> Self {
        SweepRow {
            s: r.s,
            mode: r.mode.clone(),
            metric_name: r.metric_name.clone(),
            metric_value: r.metric_value,
            mean_flops: r.mean_flops,
            cost_ratio: r.cost_ratio,
        }
    }
}

pub fn write_sweep_csv(results: &[SweepResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    for r in results {
        w.serialize(SweepRow::from(r))
            .map_err(|e| Error::Data(format!("csv serialization failed: {e}")))?;
    }
    // serde-driven writers emit headers on the first row only; force one for
    // empty result lists so the file is self-describing either way.
    if results.is_empty() {
        w.write_record(["s", "mode", "metric_name", "metric_value", "mean_flops", "cost_ratio"])
            .map_err(|e| Error::Data(format!("csv header failed: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| Error::Data(format!("csv parse failed: {e}")))?);
    }
    Ok(rows)
}

pub fn write_frequency_csv(results: &[SweepResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["s", "mode", "layer", "skip_count", "exit_count", "fallthrough_count"])
        .map_err(|e| Error::Data(format!("csv header failed: {e}")))?;
    for r in results {
        let Some(freq) = &r.frequencies else { continue };
        let layers = freq.skips.len();
        for layer in 1..=layers {
            let fallthrough = if layer == layers { freq.fallthrough } else { 0 };
            w.write_record([
                r.s.to_string(),
                r.mode.clone(),
                layer.to_string(),
                freq.skips[layer - 1].to_string(),
                freq.exits[layer - 1].to_string(),
                fallthrough.to_string(),
            ])
            .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-sample trace record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema: String,
    pub sample_id: usize,
    pub label: usize,
    #[serde(flatten)]
    pub trace: InferenceTrace,
}

pub fn write_traces_jsonl(
    traces: &[(usize, usize, InferenceTrace)],
    path: &Path,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (sample_id, label, trace) in traces {
        let rec = TraceRecord {
            schema: TRACES_SCHEMA.to_string(),
            sample_id: *sample_id,
            label: *label,
            trace: trace.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Data(format!("trace serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn write_metrics_jsonl(records: &[EpochRecord], path: &Path) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let mut v = serde_json::to_value(rec)
            .map_err(|e| Error::Data(format!("metrics serialization failed: {e}")))?;
        v.as_object_mut()
            .expect("epoch record is an object")
            .insert("schema".into(), METRICS_SCHEMA.into());
        writeln!(f, "{v}")?;
    }
    Ok(())
}

fn write_summary(results: &[SweepResult], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold sweep summary")?;
    writeln!(f, "=======================")?;
    for r in results {
        writeln!(
            f,
            "S={:.4} mode={} {}={:.4} mean_flops={:.1} cost ratio={:.4}",
            r.s, r.mode, r.metric_name, r.metric_value, r.mean_flops, r.cost_ratio
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schemas: Vec<(&'a str, &'a str)>,
}

/// Write the full report bundle into `out_dir`: sweep + frequency CSVs, a
/// human-readable summary, and a schema manifest. Returns the paths written.
pub fn emit_report(results: &[SweepResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let sweep = out_dir.join("sweep.csv");
    let freq = out_dir.join("frequencies.csv");
    let summary = out_dir.join("summary.txt");
    let manifest = out_dir.join("manifest.json");
    write_sweep_csv(results, &sweep)?;
    write_frequency_csv(results, &freq)?;
    write_summary(results, &summary)?;
    let m = Manifest {
        schemas: vec![
            ("sweep.csv", SWEEP_SCHEMA),
            ("frequencies.csv", FREQUENCIES_SCHEMA),
        ],
    };
    std::fs::write(
        &manifest,
        serde_json::to_string_pretty(&m)
            .map_err(|e| Error::Data(format!("manifest failed: {e}")))?,
    )?;
    Ok(vec![sweep, freq, summary, manifest])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::FrequencyReport;

    fn sample_results() -> Vec<SweepResult> {
        vec![
            SweepResult {
                s: 0.1,
                mode: "full".into(),
                metric_name: "accuracy".into(),
                metric_value: 0.912_345,
                mean_flops: 123_456.75,
                cost_ratio: 0.654_321,
                frequencies: Some(FrequencyReport {
                    threshold_milli: 100,
                    skips: vec![3, 0],
                    exits: vec![5, 0],
                    fallthrough: 7,
                    total: 12,
                }),
            },
            SweepResult {
                s: 0.3,
                mode: "full".into(),
                metric_name: "accuracy".into(),
                metric_value: 0.25,
                mean_flops: 1e9 + 0.5,
                cost_ratio: 1.0,
                frequencies: None,
            },
        ]
    }

    #[test]
    fn empty_results_give_header_only_csv() {
        let dir = std::env::temp_dir().join(format!("skipgate-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("empty.csv");
        write_sweep_csv(&[], &p).unwrap();
        let content = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            content.trim(),
            "s,mode,metric_name,metric_value,mean_flops,cost_ratio"
        );
        assert_eq!(read_sweep_csv(&p).unwrap().len(), 0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("skipgate-report-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("sweep.csv");
        let results = sample_results();
        write_sweep_csv(&results, &p).unwrap();
        let rows = read_sweep_csv(&p).unwrap();
        assert_eq!(rows.len(), results.len());
        for (row, r) in rows.iter().zip(&results) {
            assert_eq!(row.s, r.s);
            assert_eq!(row.mode, r.mode);
            assert_eq!(row.metric_value, r.metric_value);
            assert_eq!(row.mean_flops, r.mean_flops);
            assert_eq!(row.cost_ratio, r.cost_ratio);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn emission_is_byte_stable() {
        let dir1 = std::env::temp_dir().join(format!("skipgate-report-a-{}", std::process::id()));
        let dir2 = std::env::temp_dir().join(format!("skipgate-report-b-{}", std::process::id()));
        let results = sample_results();
        let files1 = emit_report(&results, &dir1).unwrap();
        let files2 = emit_report(&results, &dir2).unwrap();
        for (a, b) in files1.iter().zip(&files2) {
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "{} differs",
                a.display()
            );
        }
        std::fs::remove_dir_all(&dir1).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn summary_cost_ratio_matches_csv_to_four_places() {
        let dir = std::env::temp_dir().join(format!("skipgate-report-s-{}", std::process::id()));
        let results = sample_results();
        emit_report(&results, &dir).unwrap();
        let summary = std::fs::read_to_string(dir.join("summary.txt")).unwrap();
        let rows = read_sweep_csv(&dir.join("sweep.csv")).unwrap();
        for row in &rows {
            let formatted = format!("cost ratio={:.4}", row.cost_ratio);
            assert!(summary.contains(&formatted), "missing '{formatted}'");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn frequency_rows_cover_all_layers() {
        let dir = std::env::temp_dir().join(format!("skipgate-report-f-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("freq.csv");
        write_frequency_csv(&sample_results(), &p).unwrap();
        let content = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = content.trim().lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 layers of the first result
        assert!(lines[1].starts_with("0.1,full,1,3,5,0"));
        assert!(lines[2].starts_with("0.1,full,2,0,0,7"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
