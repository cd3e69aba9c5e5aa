//! Binary feature-map exchange format.
//!
//! Layout (little-endian): `b"DFET"`, `u32` version (= 1), `u32` C, `u32` H,
//! `u32` W, then C·H·W `f32` values in channel-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;

const MAGIC: &[u8; 4] = b"DFET";
const VERSION: u32 = 1;

pub fn write_feature_map<W: Write>(mut w: W, f: &FeatureMap) -> std::io::Result<()> {
    let (c, h, wd) = f.data().dim();
    w.write_all(MAGIC)?;
    for v in [VERSION, c as u32, h as u32, wd as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in f.data().as_standard_layout().iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()
}

/// Parses a feature file. Stride is not part of the format and is set to 1.
pub fn read_feature_map<R: Read>(mut r: R) -> Result<FeatureMap> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|_| DarnetError::MalformedFeatureFile("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(DarnetError::MalformedFeatureFile("bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, c, h, w) = (
        field(0),
        field(1) as usize,
        field(2) as usize,
        field(3) as usize,
    );
    if version != VERSION {
        return Err(DarnetError::MalformedFeatureFile(format!(
            "unsupported version {version}"
        )));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(DarnetError::MalformedFeatureFile(format!(
            "empty dimensions {c}x{h}x{w}"
        )));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| DarnetError::MalformedFeatureFile("dimension overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| DarnetError::MalformedFeatureFile(e.to_string()))?;
    if payload.len() != n * 4 {
        return Err(DarnetError::MalformedFeatureFile(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            n * 4
        )));
    }
    let mut values = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DarnetError::MalformedFeatureFile(
                "payload contains non-finite values".into(),
            ));
        }
        values.push(v as f64);
    }
    let data = Array3::from_shape_vec((c, h, w), values).expect("length checked");
    Ok(FeatureMap::from_raw(data, 1))
}

pub fn save_feature_file(path: impl AsRef<Path>, f: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DarnetError::io(path, e))?;
    write_feature_map(BufWriter::new(file), f).map_err(|e| DarnetError::io(path, e))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DarnetError::io(path, e))?;
    read_feature_map(BufReader::new(file))
}
