//! Little-endian dataset files:
//!
//! ```text
//! "TSDS1" | u32 count | u32 N | u32 L | u32 C | u8 has_labels
//! | count*N*L f32 (sample, channel, time) | [count i32 labels]
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, Split, TimeSeriesSample};
use crate::error::{Result, TemsrError};

pub const MAGIC: &[u8; 5] = b"TSDS1";
const HEADER_LEN: usize = 5 + 4 * 4 + 1;

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds)?)?;
    Ok(())
}

pub(crate) fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let (n, l) = ds.shape().unwrap_or((0, 0));
    let count = ds.len();
    let labeled = ds.is_labeled();
    let mut buf = Vec::with_capacity(HEADER_LEN + count * n * l * 4 + count * 4);
    buf.extend_from_slice(MAGIC);
    for v in [count, n, l, ds.class_count()] {
        let v = u32::try_from(v).map_err(|_| TemsrError::Format(format!("{v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(u8::from(labeled));
    for s in ds.samples() {
        for &v in s.values.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if labeled {
        for s in ds.samples() {
            let y = s.label.expect("labels present on every sample") as i32;
            buf.extend_from_slice(&y.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Reads a dataset file. The domain id and split come from the file stem:
/// `<domain>_train` / `<domain>_test`, anything else is a train split named
/// after the whole stem.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    let (domain, split) = if let Some(d) = stem.strip_suffix("_test") {
        (d, Split::Test)
    } else if let Some(d) = stem.strip_suffix("_train") {
        (d, Split::Train)
    } else {
        (stem, Split::Train)
    };
    decode(&bytes, domain, split)
}

pub(crate) fn decode(bytes: &[u8], domain: &str, split: Split) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
        return Err(TemsrError::Format("missing TSDS1 header".into()));
    }
    let word = |i: usize| {
        let o = 5 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (count, n, l, c) = (word(0), word(1), word(2), word(3));
    let has_labels = match bytes[HEADER_LEN - 1] {
        0 => false,
        1 => true,
        other => return Err(TemsrError::Format(format!("has_labels byte is {other}"))),
    };
    let values_len = count
        .checked_mul(n)
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| TemsrError::Format("header sizes overflow".into()))?;
    let expected = HEADER_LEN + values_len * 4 + if has_labels { count * 4 } else { 0 };
    if bytes.len() != expected {
        return Err(TemsrError::Format(format!(
            "header promises {expected} bytes, file has {}",
            bytes.len()
        )));
    }

    let mut cursor = HEADER_LEN;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = Vec::with_capacity(n * l);
        for _ in 0..n * l {
            let x = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            if !x.is_finite() {
                return Err(TemsrError::Data("non-finite value in payload".into()));
            }
            v.push(x as f64);
            cursor += 4;
        }
        raw.push(v);
    }
    let mut samples = Vec::with_capacity(count);
    for v in raw {
        let label = if has_labels {
            let y = i32::from_le_bytes(bytes[cursor + 4 * samples.len()..][..4].try_into().unwrap());
            if y < 0 {
                return Err(TemsrError::Data(format!("negative label {y}")));
            }
            Some(y as usize)
        } else {
            None
        };
        let values = Array2::from_shape_vec((n, l), v)
            .map_err(|e| TemsrError::Format(e.to_string()))?;
        samples.push(TimeSeriesSample::new(values, label));
    }
    Dataset::new(samples, domain, c, split)
}
