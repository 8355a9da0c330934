use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use num_complex::Complex64;

use super::{Dataset, DatasetMeta, SessionInfo};
use crate::error::{Error, Result};
use crate::signal::CirMeasurement;

const LABEL_COLUMNS: [&str; 4] = ["device_id", "location_id", "session_id", "distance_m"];

/// Imports `device_id,location_id,session_id,distance_m,re_0,im_0,...` rows.
/// Metadata counts are inferred from the distinct label values.
pub fn import_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?)
}

pub fn read_csv(input: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let header = rdr.headers().map_err(|e| Error::Parse {
        row: 0,
        msg: format!("header: {e}"),
    })?;
    let signal_len = check_header(header)?;
    let width = LABEL_COLUMNS.len() + 2 * signal_len;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Parse {
            row: row_no,
            msg: e.to_string(),
        })?;
        if row.len() != width {
            return Err(Error::Parse {
                row: row_no,
                msg: format!("expected {width} columns, found {}", row.len()),
            });
        }
        records.push(parse_row(&row, row_no, signal_len)?);
    }

    let meta = infer_meta(&records, signal_len);
    Ok(Dataset { meta, records })
}

fn check_header(header: &csv::StringRecord) -> Result<usize> {
    let bad = |msg: String| Error::Parse { row: 0, msg };
    if header.len() < LABEL_COLUMNS.len() + 2 || (header.len() - LABEL_COLUMNS.len()) % 2 != 0 {
        return Err(bad(format!("header has {} columns", header.len())));
    }
    for (got, want) in header.iter().zip(LABEL_COLUMNS) {
        if got != want {
            return Err(bad(format!("expected column {want}, found {got}")));
        }
    }
    let signal_len = (header.len() - LABEL_COLUMNS.len()) / 2;
    for k in 0..signal_len {
        let re = &header[LABEL_COLUMNS.len() + 2 * k];
        let im = &header[LABEL_COLUMNS.len() + 2 * k + 1];
        if re != format!("re_{k}") || im != format!("im_{k}") {
            return Err(bad(format!("expected re_{k},im_{k}, found {re},{im}")));
        }
    }
    Ok(signal_len)
}

fn parse_row(row: &csv::StringRecord, row_no: usize, signal_len: usize) -> Result<CirMeasurement> {
    fn field<T: std::str::FromStr>(row: &csv::StringRecord, col: usize, row_no: usize) -> Result<T> {
        row[col].parse().map_err(|_| Error::Parse {
            row: row_no,
            msg: format!("column {}: cannot parse {:?}", col + 1, &row[col]),
        })
    }
    let finite = |v: f32, col: usize| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Parse {
                row: row_no,
                msg: format!("column {}: non-finite value", col + 1),
            })
        }
    };

    let device_id = field(row, 0, row_no)?;
    let location_id = field(row, 1, row_no)?;
    let session_id = field(row, 2, row_no)?;
    let distance_m = finite(field(row, 3, row_no)?, 3)?;
    let mut samples = Vec::with_capacity(signal_len);
    for k in 0..signal_len {
        let c = LABEL_COLUMNS.len() + 2 * k;
        let re = finite(field(row, c, row_no)?, c)?;
        let im = finite(field(row, c + 1, row_no)?, c + 1)?;
        samples.push(Complex64::new(re as f64, im as f64));
    }
    Ok(CirMeasurement {
        samples,
        device_id,
        location_id,
        session_id,
        distance_m,
    })
}

fn infer_meta(records: &[CirMeasurement], signal_len: usize) -> DatasetMeta {
    let devices: BTreeSet<u16> = records.iter().map(|r| r.device_id).collect();
    let locations: BTreeSet<u16> = records.iter().map(|r| r.location_id).collect();
    let mut cells: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    let mut sessions: BTreeMap<u8, f32> = BTreeMap::new();
    for r in records {
        *cells.entry((r.device_id, r.location_id)).or_default() += 1;
        sessions.entry(r.session_id).or_insert(r.distance_m);
    }
    DatasetMeta {
        signal_len,
        num_devices: devices.len(),
        num_locations: locations.len(),
        measurements_per_cell: cells.values().copied().max().unwrap_or(0),
        sessions: sessions
            .into_iter()
            .map(|(session_id, distance_m)| SessionInfo {
                session_id,
                distance_m,
                day_tag: format!("session{session_id}"),
            })
            .collect(),
        ..DatasetMeta::default()
    }
}
