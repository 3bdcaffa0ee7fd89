//! Binary and CSV writers for sampler output.
//!
//! Draw matrices are stored as two little-endian `u64` (rows, columns)
//! followed by row-major little-endian `f64` values.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hmc::PosteriorDraws;

pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a {rows}x{cols} matrix",
            values.len()
        )));
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(&(rows as u64).to_le_bytes())?;
    put(&(cols as u64).to_le_bytes())?;
    for v in values {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns `(rows, cols, values)`.
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::InvalidArgument(format!("{} is too short for a draw matrix", path.display())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(0), word(8));
    let expect = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16));
    if expect != Some(bytes.len()) {
        return Err(Error::InvalidArgument(format!(
            "{} declares {rows}x{cols} but holds {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((rows, cols, values))
}

pub fn write_draws(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    write_matrix(path, draws.n_draws(), draws.n_voxels, &draws.mu)
}

/// Columns `iteration,warmup,eps,accept,accepted,energy,sigma_h_sq,sigma_s_sq,restriction_ok`.
pub fn write_telemetry(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let mut out = String::from("iteration,warmup,eps,accept,accepted,energy,sigma_h_sq,sigma_s_sq,restriction_ok\n");
    for r in &draws.telemetry {
        out.push_str(&format!(
            "{},{},{:.8e},{:.6},{},{:.10e},{:.8e},{:.8e},{}\n",
            r.iteration,
            u8::from(r.warmup),
            r.eps,
            r.accept_prob,
            u8::from(r.accepted),
            r.energy,
            r.sigma_h_sq,
            r.sigma_s_sq,
            u8::from(r.restriction_ok)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
