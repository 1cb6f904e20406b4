use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dualenkf::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::scenario::OutputFormat;

/// One row of output: filter error metrics for one run at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub t: usize,
    pub variant: String,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "N")]
    pub n_members: usize,
    pub seed: u64,
    /// `‖m̃_t − m_t‖₂` against the exact filter.
    pub mean_err: f64,
    /// `‖Σ̃_t − Σ_t‖_F / ‖Σ_t‖_F`.
    pub cov_err: f64,
    pub ct_residual: f64,
    pub rhs_residual: f64,
    /// `‖m̃_t − X_t‖₂` against the truth.
    pub rmse_truth: f64,
}

pub const COLUMNS: [&str; 12] = [
    "run_id",
    "t",
    "variant",
    "gamma1",
    "gamma2",
    "N",
    "seed",
    "mean_err",
    "cov_err",
    "ct_residual",
    "rhs_residual",
    "rmse_truth",
];

impl RunRecord {
    pub fn is_valid(&self) -> bool {
        let values = [
            self.gamma1,
            self.gamma2,
            self.mean_err,
            self.cov_err,
            self.ct_residual,
            self.rhs_residual,
            self.rmse_truth,
        ];
        values.iter().all(|v| v.is_finite()) && self.ct_residual >= 0.0 && self.rhs_residual >= 0.0
    }
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::io(path, source),
        other => HarnessError::Records {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes records as CSV or JSON lines to any writer.
pub fn write_records_to<W: Write>(records: &[RunRecord], out: W, format: OutputFormat) -> std::io::Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(COLUMNS)?;
            for r in records {
                w.serialize(r)?;
            }
            w.flush()
        }
        OutputFormat::Jsonl => {
            let mut out = BufWriter::new(out);
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        }
    }
}

/// Writes records to `path` plus a plot script next to it. Returns the
/// script path.
pub fn write_records(records: &[RunRecord], path: &Path, format: OutputFormat) -> Result<PathBuf> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_records_to(records, file, format).map_err(|e| HarnessError::io(path, e))?;
    write_plot_script(path, format)
}

pub fn plot_script_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().map_or_else(|| "records".into(), |s| s.to_string_lossy().into_owned());
    data.with_file_name(format!("{stem}_plot.py"))
}

fn write_plot_script(data: &Path, format: OutputFormat) -> Result<PathBuf> {
    let script = plot_script_path(data);
    let name = data
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let loader = match format {
        OutputFormat::Csv => "    rows = list(csv.DictReader(f))",
        OutputFormat::Jsonl => "    rows = [json.loads(line) for line in f if line.strip()]",
    };
    let body = format!(
        r#"import csv
import json
import os
from collections import defaultdict

import matplotlib.pyplot as plt

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), {name:?})

with open(DATA) as f:
{loader}

series = defaultdict(list)
for r in rows:
    key = (r["variant"], float(r["gamma1"]), float(r["gamma2"]), int(r["N"]))
    series[key].append((int(r["t"]), float(r["mean_err"]), float(r["cov_err"])))

fig, (ax_mean, ax_cov) = plt.subplots(1, 2, figsize=(11, 4))
for key, pts in sorted(series.items()):
    by_t = defaultdict(list)
    for t, m, c in pts:
        by_t[t].append((m, c))
    ts = sorted(by_t)
    rms_mean = [(sum(m * m for m, _ in by_t[t]) / len(by_t[t])) ** 0.5 for t in ts]
    avg_cov = [sum(c for _, c in by_t[t]) / len(by_t[t]) for t in ts]
    label = "%s g=(%g,%g) N=%d" % key
    ax_mean.semilogy(ts, [max(v, 1e-18) for v in rms_mean], label=label)
    ax_cov.semilogy(ts, [max(v, 1e-18) for v in avg_cov], label=label)
ax_mean.set_xlabel("t")
ax_mean.set_ylabel("rms mean error vs exact filter")
ax_cov.set_xlabel("t")
ax_cov.set_ylabel("relative covariance error")
ax_mean.legend(fontsize="small")
fig.tight_layout()
fig.savefig(os.path.splitext(DATA)[0] + ".png", dpi=120)
"#
    );
    std::fs::write(&script, body).map_err(|e| HarnessError::io(&script, e))?;
    Ok(script)
}

/// Reads a records file, CSV or JSON lines (chosen by the `.jsonl` extension).
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| HarnessError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| HarnessError::Records {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?;
            out.push(rec);
        }
        Ok(out)
    } else {
        let mut reader = csv::Reader::from_reader(file);
        let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.iter().ne(COLUMNS) {
            return Err(HarnessError::Records {
                path: path.to_path_buf(),
                message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
            });
        }
        reader
            .deserialize()
            .map(|r| r.map_err(|e| csv_err(path, e)))
            .collect()
    }
}

/// Truth trajectory as rows `replicate, t, x_0.., z_0..`; the final state
/// has no observation and leaves the `z` columns empty.
pub fn write_truth_to<W: Write>(runs: &[(u64, Trajectory)], out: W, format: OutputFormat) -> std::io::Result<()> {
    let (n, m) = runs
        .first()
        .map(|(_, tr)| (tr.states[0].len(), tr.observations.first().map_or(0, |z| z.len())))
        .unwrap_or((0, 0));
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["replicate".to_string(), "t".to_string()];
            header.extend((0..n).map(|i| format!("x{i}")));
            header.extend((0..m).map(|i| format!("z{i}")));
            w.write_record(&header)?;
            for (rep, tr) in runs {
                for (t, x) in tr.states.iter().enumerate() {
                    let mut row = vec![rep.to_string(), t.to_string()];
                    row.extend(x.iter().map(|v| format!("{v:?}")));
                    match tr.observations.get(t) {
                        Some(z) => row.extend(z.iter().map(|v| format!("{v:?}"))),
                        None => row.extend(std::iter::repeat_n(String::new(), m)),
                    }
                    w.write_record(&row)?;
                }
            }
            w.flush()
        }
        OutputFormat::Jsonl => {
            #[derive(Serialize)]
            struct Row<'a> {
                replicate: u64,
                t: usize,
                x: &'a [f64],
                z: Option<&'a [f64]>,
            }
            let mut out = BufWriter::new(out);
            for (rep, tr) in runs {
                for (t, x) in tr.states.iter().enumerate() {
                    let row = Row {
                        replicate: *rep,
                        t,
                        x: x.as_slice(),
                        z: tr.observations.get(t).map(|z| z.as_slice()),
                    };
                    serde_json::to_writer(&mut out, &row)?;
                    out.write_all(b"\n")?;
                }
            }
            out.flush()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> RunRecord {
        RunRecord {
            run_id: format!("p0-n10-r{i}"),
            t: i,
            variant: "sqrt_general-oracle".into(),
            gamma1: 0.25,
            gamma2: 1.0 / 3.0,
            n_members: 10,
            seed: u64::MAX - i as u64,
            mean_err: 0.1 + i as f64 * 1e-17,
            cov_err: 1e-300,
            ct_residual: 0.0,
            rhs_residual: 2.220446049250313e-16,
            rmse_truth: std::f64::consts::PI,
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_records_to(&[], &mut buf, OutputFormat::Csv).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", COLUMNS.join(",")));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let records: Vec<_> = (0..5).map(sample).collect();
        let script = write_records(&records, &path, OutputFormat::Csv).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
        let text = std::fs::read_to_string(script).unwrap();
        assert!(text.contains("\"out.csv\""));
        assert!(!text.contains(dir.path().to_str().unwrap()));
    }

    #[test]
    fn jsonl_round_trip_and_line_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let records: Vec<_> = (0..7).map(sample).collect();
        write_records(&records, &path, OutputFormat::Jsonl).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().contains("\"N\":10"));
        assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_records(&path), Err(HarnessError::Records { .. })));
    }

    #[test]
    fn unwritable_path_is_io() {
        let err = write_records(&[], Path::new("/nonexistent/dir/out.csv"), OutputFormat::Csv).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn validity() {
        assert!(sample(0).is_valid());
        let mut r = sample(0);
        r.cov_err = f64::NAN;
        assert!(!r.is_valid());
        let mut r = sample(0);
        r.ct_residual = -1.0;
        assert!(!r.is_valid());
    }
}
