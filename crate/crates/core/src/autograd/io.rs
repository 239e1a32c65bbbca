//! Flat binary tensor format: an ASCII header line `TNSR <ndim> <d0> ...`
//! followed by the values as 64-bit little-endian floats, row-major.

use std::io::{BufRead, Write};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub fn write_values<W: Write>(mut w: W, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    let mut header = format!("TNSR {}", shape.len());
    for d in shape {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_tensor<W: Write>(w: W, t: &Tensor) -> std::io::Result<()> {
    write_values(w, t.shape(), &t.data())
}

/// Reads one tensor record; returns its shape and values.
pub fn read_values<R: BufRead>(mut r: R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::Parse(e.to_string()))?;
    let mut fields = line.trim_end_matches('\n').split(' ');
    if fields.next() != Some("TNSR") {
        return Err(Error::Parse(format!("bad tensor header {line:?}")));
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad tensor header {line:?}")))
    };
    let ndim = parse(fields.next())?;
    let shape = (0..ndim).map(|_| parse(fields.next())).collect::<Result<Vec<_>>>()?;
    if fields.next().is_some() {
        return Err(Error::Parse(format!("trailing fields in tensor header {line:?}")));
    }
    let n = numel(&shape);
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Parse(format!("truncated tensor payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((shape, data))
}

pub fn read_tensor<R: BufRead>(r: R) -> Result<Tensor> {
    let (shape, data) = read_values(r)?;
    Tensor::new(&shape, data)
}
