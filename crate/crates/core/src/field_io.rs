//! On-disk form of a [`FieldGrid`]: a JSON header plus a payload file.
//!
//! The payload lists, for every time node `k = 0..=M` and every spatial
//! node in row-major order (last axis fastest), the record
//! `v_1 … v_d, g` followed by `ρ` when the header says `has_density`.
//!
//! * `"encoding": "f64le"` stores the records as consecutive IEEE-754
//!   doubles in little-endian byte order, no padding.
//! * `"encoding": "csv"` stores one record per line after a header row
//!   `v1,…,vd,g[,rho]`, using shortest round-trip decimal formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::FieldGrid;
use crate::cone_space::DomainBox;

#[derive(Debug, Error)]
pub enum FieldIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Grid(#[from] crate::characteristics::CharacteristicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "f64le")]
    F64Le,
    #[serde(rename = "csv")]
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldGridHeader {
    pub domain: DomainBox,
    pub dims: usize,
    pub cells: usize,
    pub time_steps: usize,
    pub has_density: bool,
    pub encoding: Encoding,
    /// Payload path, relative to the header's directory.
    pub payload: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FieldIoError + '_ {
    move |source| FieldIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn records(fg: &FieldGrid) -> impl Iterator<Item = Vec<f64>> + '_ {
    let d = fg.dim();
    let n = fg.node_count();
    let rho = fg.density();
    (0..(fg.time_steps() + 1) * n).map(move |i| {
        let mut r = Vec::with_capacity(d + 2);
        r.extend_from_slice(&fg.velocity()[i * d..(i + 1) * d]);
        r.push(fg.growth()[i]);
        if let Some(rho) = rho {
            r.push(rho[i]);
        }
        r
    })
}

/// Encodes the payload in memory.
pub fn encode_payload(fg: &FieldGrid, encoding: Encoding) -> Vec<u8> {
    match encoding {
        Encoding::F64Le => records(fg)
            .flat_map(|r| r.into_iter().flat_map(f64::to_le_bytes))
            .collect(),
        Encoding::Csv => {
            let mut s = String::new();
            let names: Vec<String> = (1..=fg.dim())
                .map(|j| format!("v{j}"))
                .chain(std::iter::once("g".to_string()))
                .chain(fg.density().map(|_| "rho".to_string()))
                .collect();
            s.push_str(&names.join(","));
            s.push('\n');
            for r in records(fg) {
                for (j, x) in r.iter().enumerate() {
                    if j > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{x:?}");
                }
                s.push('\n');
            }
            s.into_bytes()
        }
    }
}

/// Rebuilds a grid from a header and its payload bytes.
pub fn decode_payload(header: &FieldGridHeader, bytes: &[u8]) -> Result<FieldGrid, FieldIoError> {
    let d = header.dims;
    if d != header.domain.dim() {
        return Err(FieldIoError::Payload(format!(
            "dims = {d} but the domain box has dimension {}",
            header.domain.dim()
        )));
    }
    let width = d + 1 + usize::from(header.has_density);
    let count = (header.time_steps + 1) * header.cells.pow(d as u32);
    let values: Vec<f64> = match header.encoding {
        Encoding::F64Le => {
            if bytes.len() != count * width * 8 {
                return Err(FieldIoError::Payload(format!(
                    "expected {} bytes, found {}",
                    count * width * 8,
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect()
        }
        Encoding::Csv => {
            let text = std::str::from_utf8(bytes).map_err(|e| FieldIoError::Payload(e.to_string()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let head = lines.next().ok_or_else(|| FieldIoError::Payload("empty csv".into()))?;
            if head.split(',').count() != width {
                return Err(FieldIoError::Payload(format!("bad csv header `{head}`")));
            }
            let mut out = Vec::with_capacity(count * width);
            for (row, line) in lines.enumerate() {
                let before = out.len();
                for f in line.split(',') {
                    out.push(
                        f.trim()
                            .parse::<f64>()
                            .map_err(|e| FieldIoError::Payload(format!("row {row}: {e}")))?,
                    );
                }
                if out.len() - before != width {
                    return Err(FieldIoError::Payload(format!("row {row}: wrong field count")));
                }
            }
            out
        }
    };
    if values.len() != count * width {
        return Err(FieldIoError::Payload(format!(
            "expected {count} records, found {}",
            values.len() / width
        )));
    }
    let mut velocity = Vec::with_capacity(count * d);
    let mut growth = Vec::with_capacity(count);
    let mut density = header.has_density.then(|| Vec::with_capacity(count));
    for r in values.chunks_exact(width) {
        velocity.extend_from_slice(&r[..d]);
        growth.push(r[d]);
        if let Some(rho) = density.as_mut() {
            rho.push(r[d + 1]);
        }
    }
    Ok(FieldGrid::new(
        header.domain.clone(),
        header.cells,
        header.time_steps,
        velocity,
        growth,
        density,
    )?)
}

pub fn header_for(fg: &FieldGrid, encoding: Encoding, payload: &str) -> FieldGridHeader {
    FieldGridHeader {
        domain: fg.domain().clone(),
        dims: fg.dim(),
        cells: fg.cells(),
        time_steps: fg.time_steps(),
        has_density: fg.density().is_some(),
        encoding,
        payload: payload.to_string(),
    }
}

/// Writes `<header_path>` and the payload next to it (same stem, `.bin` or
/// `.csv` extension).
pub fn write_field_grid(fg: &FieldGrid, header_path: &Path, encoding: Encoding) -> Result<(), FieldIoError> {
    let ext = match encoding {
        Encoding::F64Le => "bin",
        Encoding::Csv => "csv",
    };
    let payload_path = header_path.with_extension(ext);
    let payload_name = payload_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| FieldIoError::Payload("payload path is not valid UTF-8".into()))?
        .to_string();
    let header = header_for(fg, encoding, &payload_name);
    fs::write(&payload_path, encode_payload(fg, encoding)).map_err(io_err(&payload_path))?;
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(header_path, text).map_err(io_err(header_path))?;
    Ok(())
}

pub fn read_field_grid(header_path: &Path) -> Result<FieldGrid, FieldIoError> {
    let text = fs::read_to_string(header_path).map_err(io_err(header_path))?;
    let header: FieldGridHeader = serde_json::from_str(&text)?;
    let payload_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    decode_payload(&header, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> FieldGrid {
        FieldGrid::from_fn(
            DomainBox::new(vec![-1.0, 0.0], vec![1.0, 0.5]).unwrap(),
            3,
            2,
            |t, x| vec![x[0] / 3.0 + t, (x[1] * 7.0).sin()],
            |t, x| 0.1 * t - x[0],
            Some(&|_, x: &[f64]| x[0].abs() / 7.0),
        )
        .unwrap()
    }

    #[test]
    fn binary_and_csv_payloads_roundtrip_bit_exact() {
        let fg = grid();
        for enc in [Encoding::F64Le, Encoding::Csv] {
            let header = header_for(&fg, enc, "p");
            let bytes = encode_payload(&fg, enc);
            let back = decode_payload(&header, &bytes).unwrap();
            assert_eq!(back, fg);
        }
    }

    #[test]
    fn binary_layout_is_little_endian_records() {
        let fg = grid();
        let bytes = encode_payload(&fg, Encoding::F64Le);
        assert_eq!(bytes.len(), 3 * 9 * 4 * 8);
        let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(first, fg.velocity()[0]);
        let third = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        assert_eq!(third, fg.growth()[0]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let fg = grid();
        let header = header_for(&fg, Encoding::F64Le, "p");
        let bytes = encode_payload(&fg, Encoding::F64Le);
        assert!(matches!(
            decode_payload(&header, &bytes[..bytes.len() - 8]),
            Err(FieldIoError::Payload(_))
        ));
    }
}
