//! CSV and JSON outputs.

use std::path::Path;

use casa_core::analysis::CorrelationReport;
use casa_core::data::SeriesTable;
use casa_core::train::{EpochRecord, Metrics};
use casa_core::Tensor;
use serde_json::{json, Value};

use crate::bench::ScalingReport;
use crate::error::CliError;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let io = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    CliError::io(path, io)
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    write_text(path, &(text + "\n"))
}

/// `seconds[i]` is the wall time of `log[i]`.
pub fn write_train_log(path: &Path, log: &[EpochRecord], seconds: &[f64]) -> Result<(), CliError> {
    write_rows(
        path,
        &["epoch", "train_mse", "val_mse", "lr", "seconds"],
        log.iter().zip(seconds).map(|(r, s)| {
            vec![
                r.epoch.to_string(),
                r.train_mse.to_string(),
                r.val_mse.to_string(),
                r.lr.to_string(),
                format!("{s:.3}"),
            ]
        }),
    )
}

/// Parses the loss columns of a train log written by [`write_train_log`].
pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::io(path, std::io::Error::other("bad train log row")))
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            train_mse: num(1)?,
            val_mse: num(2)?,
            lr: num(3)?,
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[(&str, Metrics)]) -> Result<(), CliError> {
    write_rows(
        path,
        &["split", "mse", "mae", "count"],
        rows.iter().map(|(split, m)| {
            vec![
                split.to_string(),
                m.mse.to_string(),
                m.mae.to_string(),
                m.count.to_string(),
            ]
        }),
    )
}

/// One row per `(step, variate)` of a test window, in scaled units. `t` is
/// the row index of the step in the data file.
pub fn write_prediction_dump(
    path: &Path,
    table: &SeriesTable,
    start: usize,
    input_len: usize,
    pred: &Tensor,
    truth: &Tensor,
) -> Result<(), CliError> {
    let (n, h) = (truth.shape()[0], truth.shape()[1]);
    let names = table.variate_names();
    let stamps = table.timestamps();
    let rows = (0..h).flat_map(|step| {
        let t = start + input_len + step;
        (0..n).map(move |v| {
            vec![
                t.to_string(),
                stamps[t].clone(),
                names[v].clone(),
                truth.at(v, step).to_string(),
                pred.at(v, step).to_string(),
            ]
        })
    });
    write_rows(
        path,
        &["t", "timestamp", "variate", "truth", "prediction"],
        rows,
    )
}

pub fn write_matrix(path: &Path, names: &[String], m: &Tensor) -> Result<(), CliError> {
    let mut header = vec![""];
    header.extend(names.iter().map(String::as_str));
    write_rows(
        path,
        &header,
        (0..m.shape()[0]).map(|i| {
            std::iter::once(names[i].clone()).chain(m.row(i).iter().map(|v| v.to_string()))
        }),
    )
}

pub fn write_correlation_report(
    dir: &Path,
    names: &[String],
    report: &CorrelationReport,
) -> Result<(), CliError> {
    for src in &report.sources {
        write_matrix(
            &dir.join(format!("correlation_{}.csv", src.name)),
            names,
            &src.correlation.matrix,
        )?;
    }
    let mut header = vec!["x"];
    header.extend(report.sources.iter().map(|s| s.name.as_str()));
    write_rows(
        &dir.join("kde.csv"),
        &header,
        report.grid.iter().enumerate().map(|(i, x)| {
            std::iter::once(x.to_string())
                .chain(report.sources.iter().map(move |s| s.density[i].to_string()))
        }),
    )?;
    write_rows(
        &dir.join("correlation_metrics.csv"),
        &["source", "mse", "cosine", "ssim", "pdf_mse"],
        report.rows.iter().map(|r| {
            vec![
                r.name.clone(),
                r.mse.to_string(),
                r.cosine.map_or_else(|| "nan".into(), |c| c.to_string()),
                r.ssim.to_string(),
                r.pdf_mse.to_string(),
            ]
        }),
    )?;
    let summary = json!({
        "grid": { "points": report.grid.len(), "min": report.grid.first(), "max": report.grid.last() },
        "sources": report.sources.iter().map(|s| json!({
            "name": s.name,
            "bandwidth": s.bandwidth,
            "degenerate_variates": s.correlation.degenerate.iter().filter(|d| **d).count(),
        })).collect::<Vec<_>>(),
        "rows": report.rows.iter().map(|r| json!({
            "source": r.name, "mse": r.mse, "cosine": r.cosine, "ssim": r.ssim, "pdf_mse": r.pdf_mse,
        })).collect::<Vec<_>>(),
    });
    write_json(&dir.join("correlation_summary.json"), &summary)
}

pub fn scaling_json(report: &ScalingReport) -> Value {
    let s = &report.spec;
    json!({
        "axis": report.axis.as_str(),
        "attention": s.base.attention.as_str(),
        "backward": s.backward,
        "batch": s.batch,
        "reps": s.reps,
        "fixed": { "N": s.base.n_vars, "L": s.base.input_len, "H": s.base.horizon, "D": s.base.d_model, "M": s.base.n_blocks },
        "time_slope": report.time_slope,
        "memory_slope": report.memory_slope,
        "points": report.points.iter().map(|p| match &p.outcome {
            Ok(m) => json!({ "value": p.value, "seconds": m.seconds, "peak_bytes": m.peak_bytes }),
            Err(e) => json!({ "value": p.value, "error": e }),
        }).collect::<Vec<_>>(),
    })
}

pub fn write_scaling(dir: &Path, report: &ScalingReport) -> Result<(), CliError> {
    let axis = report.axis.as_str();
    write_rows(
        &dir.join(format!("scaling_{axis}.csv")),
        &[axis, "seconds", "peak_bytes", "status"],
        report.points.iter().map(|p| match &p.outcome {
            Ok(m) => vec![
                p.value.to_string(),
                m.seconds.to_string(),
                m.peak_bytes.to_string(),
                "ok".into(),
            ],
            Err(e) => vec![p.value.to_string(), String::new(), String::new(), e.clone()],
        }),
    )?;
    write_json(
        &dir.join(format!("scaling_{axis}.json")),
        &scaling_json(report),
    )
}
