use std::fs;
use std::path::Path;

use num_complex::Complex64;

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::signal::CirMeasurement;

pub const DATASET_MAGIC: &[u8; 4] = b"UWBF";
pub const DATASET_VERSION: u16 = 1;

/// Serializes a dataset. Samples and distances are stored as `f32`.
pub fn encode_dataset(meta: &DatasetMeta, records: &[CirMeasurement]) -> Result<Vec<u8>> {
    let signal_len = u16::try_from(meta.signal_len)
        .map_err(|_| Error::invalid(format!("signal_len {} exceeds u16", meta.signal_len)))?;
    let num_records = u32::try_from(records.len()).map_err(|_| Error::invalid("too many records"))?;
    let meta_json = serde_json::to_vec(meta)?;

    let mut out = Vec::with_capacity(16 + meta_json.len() + records.len() * (9 + 8 * meta.signal_len));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&num_records.to_le_bytes());
    out.extend_from_slice(&signal_len.to_le_bytes());
    for (i, r) in records.iter().enumerate() {
        if r.samples.len() != meta.signal_len {
            return Err(Error::invalid(format!(
                "record {i} has {} samples, meta declares {}",
                r.samples.len(),
                meta.signal_len
            )));
        }
        out.extend_from_slice(&r.device_id.to_le_bytes());
        out.extend_from_slice(&r.location_id.to_le_bytes());
        out.push(r.session_id);
        out.extend_from_slice(&r.distance_m.to_le_bytes());
        for s in &r.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_dataset(meta: &DatasetMeta, records: &[CirMeasurement], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(meta, records)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected UWBF".into(),
        });
    }
    let version_at = r.pos as u64;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: version_at,
            msg: format!("unsupported version {version}"),
        });
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta_at = r.pos as u64;
    let meta: DatasetMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
        offset: meta_at,
        msg: format!("metadata json: {e}"),
    })?;
    let num_records = r.u32("record count")? as usize;
    let len_at = r.pos as u64;
    let signal_len = r.u16("signal length")? as usize;
    if signal_len != meta.signal_len {
        return Err(Error::Format {
            offset: len_at,
            msg: format!("signal length {signal_len} disagrees with metadata {}", meta.signal_len),
        });
    }

    let mut records = Vec::with_capacity(num_records.min(1 << 20));
    for _ in 0..num_records {
        let device_id = r.u16("device id")?;
        let location_id = r.u16("location id")?;
        let session_id = r.u8("session id")?;
        let distance_m = r.f32("distance")?;
        let mut samples = Vec::with_capacity(signal_len);
        for _ in 0..signal_len {
            let re = r.f32("sample")?;
            let im = r.f32("sample")?;
            samples.push(Complex64::new(re as f64, im as f64));
        }
        records.push(CirMeasurement {
            samples,
            device_id,
            location_id,
            session_id,
            distance_m,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(Dataset { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u32) -> CirMeasurement {
        let samples = (0..250)
            .map(|k| {
                let x = ((k as u32).wrapping_mul(2654435761).wrapping_add(seed)) as f32 / u32::MAX as f32;
                Complex64::new(x as f64, -(x as f64) * 0.5)
            })
            .collect();
        CirMeasurement {
            samples,
            device_id: 7,
            location_id: 42,
            session_id: 1,
            distance_m: 2.0,
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let meta = DatasetMeta::default();
        let bytes = encode_dataset(&meta, &[]).unwrap();
        let ds = decode_dataset(&bytes).unwrap();
        assert_eq!(ds.meta, meta);
        assert!(ds.records.is_empty());
    }

    #[test]
    fn single_record_round_trips() {
        let meta = DatasetMeta::default();
        let rec = record(3);
        let ds = decode_dataset(&encode_dataset(&meta, std::slice::from_ref(&rec)).unwrap()).unwrap();
        assert_eq!(ds.records, vec![rec]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_dataset(&DatasetMeta::default(), &[record(1)]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&DatasetMeta::default(), &[record(1), record(2)]).unwrap();
        let cut = bytes.len() - 3;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut && offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode_dataset(&DatasetMeta::default(), &[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn length_mismatch_rejected_on_write() {
        let mut rec = record(1);
        rec.samples.pop();
        assert!(encode_dataset(&DatasetMeta::default(), &[rec]).is_err());
    }
}
