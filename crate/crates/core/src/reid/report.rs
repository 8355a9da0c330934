//! CSV tables written by evaluation runs and read back for plotting.

use std::fs::{self, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Confusion, Pca2, RocCurve, RocPoint};
use crate::encoders::History;
use crate::error::{Error, Result};

/// One line of `metrics.csv`. Single-sample evaluations leave `policy`
/// empty; fusion rows leave `cmc@1` and `auroc` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub k: usize,
    pub policy: String,
    pub method: String,
    pub cf1: f64,
    #[serde(rename = "cmc@1")]
    pub cmc1: Option<f64>,
    pub auroc: Option<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            row: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_numeric(path: &Path, columns: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 1;
        if rec.len() != columns {
            return Err(Error::Parse {
                row,
                msg: format!("expected {columns} columns, found {}", rec.len()),
            });
        }
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse { row, msg: format!("{f:?}: {e}") }))
            .collect::<Result<Vec<_>>>()?;
        out.push(vals);
    }
    Ok(out)
}

/// `N,value` for N = 1..G.
pub fn write_cmc(path: impl AsRef<Path>, cmc: &[f64]) -> Result<()> {
    write_rows(path.as_ref(), ["N", "value"], cmc.iter().enumerate().map(|(i, v)| [(i + 1).to_string(), v.to_string()]))
}

pub fn read_cmc(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    Ok(read_numeric(path.as_ref(), 2)?.into_iter().map(|r| r[1]).collect())
}

pub fn write_roc(path: impl AsRef<Path>, roc: &RocCurve) -> Result<()> {
    write_rows(
        path.as_ref(),
        ["threshold", "fpr", "tpr"],
        roc.points.iter().map(|p| [p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()]),
    )
}

pub fn read_roc(path: impl AsRef<Path>) -> Result<RocCurve> {
    let points = read_numeric(path.as_ref(), 3)?
        .into_iter()
        .map(|r| RocPoint {
            threshold: r[0],
            fpr: r[1],
            tpr: r[2],
        })
        .collect();
    Ok(RocCurve { points })
}

/// Square table: header row and first column carry device ids; rows are true ids.
pub fn write_confusion(path: impl AsRef<Path>, c: &Confusion) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(c.labels.iter().map(u16::to_string));
    w.write_record(&header).map_err(csv_err)?;
    for (label, row) in c.labels.iter().zip(&c.counts) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_confusion(path: impl AsRef<Path>) -> Result<Confusion> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let parse_id = |s: &str, row: usize| s.trim().parse::<u16>().map_err(|e| Error::Parse { row, msg: format!("{s:?}: {e}") });
    let header = r.headers().map_err(csv_err)?.clone();
    let labels = header.iter().skip(1).map(|s| parse_id(s, 0)).collect::<Result<Vec<_>>>()?;
    let mut counts = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 1;
        if rec.len() != labels.len() + 1 || parse_id(&rec[0], row)? != labels[i.min(labels.len().saturating_sub(1))] {
            return Err(Error::Parse {
                row,
                msg: "confusion rows must mirror the header".into(),
            });
        }
        counts.push(
            rec.iter()
                .skip(1)
                .map(|s| s.trim().parse::<usize>().map_err(|e| Error::Parse { row, msg: format!("{s:?}: {e}") }))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if counts.len() != labels.len() {
        return Err(Error::Parse {
            row: counts.len(),
            msg: "confusion matrix is not square".into(),
        });
    }
    Ok(Confusion { labels, counts })
}

pub fn write_embeddings2d(path: impl AsRef<Path>, pca: &Pca2, devices: &[u16], locations: &[u16]) -> Result<()> {
    if pca.coords.len() != devices.len() || devices.len() != locations.len() {
        return Err(Error::invalid("coordinates and labels differ in length"));
    }
    write_rows(
        path.as_ref(),
        ["x", "y", "device_id", "location_id"],
        pca.coords
            .iter()
            .zip(devices.iter().zip(locations))
            .map(|(c, (d, l))| [c[0].to_string(), c[1].to_string(), d.to_string(), l.to_string()]),
    )
}

/// `epoch,loss` with 0-based epochs.
pub fn write_loss(path: impl AsRef<Path>, history: &History) -> Result<()> {
    write_rows(
        path.as_ref(),
        ["epoch", "loss"],
        history.epoch_loss.iter().enumerate().map(|(i, l)| [i.to_string(), l.to_string()]),
    )
}

pub fn read_loss(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    Ok(read_numeric(path.as_ref(), 2)?.into_iter().map(|r| r[1]).collect())
}
