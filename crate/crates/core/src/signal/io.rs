//! On-disk signal formats.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CSIG"
//! 4       4     version (u32, currently 1)
//! 8       8     sample rate in Hz (f64)
//! 16      16*N  interleaved re/im pairs (f64)
//! ```
//!
//! The CSV form has a `index,re,im` header and one row per sample.

use std::io::{BufRead, Read, Write};

use num_complex::Complex64;

use super::ComplexSignal;
use crate::error::{DpdError, Result};

pub const MAGIC: &[u8; 4] = b"CSIG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn write_binary<W: Write>(signal: &ComplexSignal, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&signal.sample_rate_hz().to_le_bytes())?;
    for s in signal.samples() {
        w.write_all(&s.re.to_le_bytes())?;
        w.write_all(&s.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<ComplexSignal> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| DpdError::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(DpdError::Format("bad magic, expected CSIG".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DpdError::Format(format!("unsupported version {version}")));
    }
    let fs = f64::from_le_bytes(header[8..16].try_into().unwrap());

    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % 16 != 0 {
        return Err(DpdError::Format(format!(
            "payload of {} bytes is not a whole number of samples",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    ComplexSignal::new(samples, fs)
}

pub fn write_csv<W: Write>(signal: &ComplexSignal, mut w: W) -> Result<()> {
    writeln!(w, "index,re,im")?;
    for (i, s) in signal.samples().iter().enumerate() {
        writeln!(w, "{i},{},{}", s.re, s.im)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV form. The sample rate is not stored in CSV and must be given.
pub fn read_csv<R: BufRead>(r: R, sample_rate_hz: f64) -> Result<ComplexSignal> {
    let mut samples = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| DpdError::Format(format!("line {}: {e}", lineno + 1)))
        };
        if fields.len() != 3 {
            return Err(DpdError::Format(format!(
                "line {}: expected 3 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        samples.push(Complex64::new(parse(fields[1])?, parse(fields[2])?));
    }
    ComplexSignal::new(samples, sample_rate_hz)
}
