use std::fs;
use std::path::Path;

use super::array::{DiffArray, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UWBP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes parameters: magic, version, tensor count, then per tensor its
/// name, rank, dims and `f32` data, all little-endian.
pub fn encode_checkpoint(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + params.num_scalars() * 4 + params.len() * 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, array) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(array.shape.len()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in &array.shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid("tensor dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &array.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamSet> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if buf.len() - pos < n {
            return Err(Error::Format {
                offset: pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };

    if take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected UWBP".into(),
        });
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().unwrap());
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: 0,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4, "dimension")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.add(name, DiffArray::new(&shape, values)?);
    }
    if pos != buf.len() {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("{} trailing bytes", buf.len() - pos),
        });
    }
    Ok(params)
}

pub fn write_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("patch.w", DiffArray::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3_f32 as f64, 7.0]).unwrap());
        ps.add("bias", DiffArray::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        ps.add("scalar", DiffArray::scalar(-0.75));
        ps
    }

    #[test]
    fn round_trip() {
        let ps = sample();
        let bytes = encode_checkpoint(&ps).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ps);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        bytes[1] = b'?';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
