//! Vectors file: `FVEC1\n`, `count=<N> dim=<D>\n`, then N rows of
//! (u64 LE ordinal, D x f32 LE).

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::EmbedError;
use crate::vectors::VectorSet;

pub const FVEC_MAGIC: &[u8] = b"FVEC1\n";
const MAX_HEADER: usize = 64;

pub fn write_vectors<W: Write>(vectors: &VectorSet, out: W) -> Result<(), EmbedError> {
    let mut w = BufWriter::new(out);
    w.write_all(FVEC_MAGIC)?;
    writeln!(w, "count={} dim={}", vectors.len(), vectors.dim())?;
    for (i, row) in vectors.rows().enumerate() {
        w.write_all(&vectors.ordinal(i).to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_vectors_file(vectors: &VectorSet, path: &Path) -> Result<(), EmbedError> {
    write_vectors(vectors, fs::File::create(path)?)
}

fn format_err(offset: usize, message: impl Into<String>) -> EmbedError {
    EmbedError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(line: &str, offset: usize) -> Result<(usize, usize), EmbedError> {
    let mut count = None;
    let mut dim = None;
    for token in line.split(' ') {
        match token.split_once('=') {
            Some(("count", v)) => count = v.parse().ok(),
            Some(("dim", v)) => dim = v.parse().ok(),
            _ => return Err(format_err(offset, format!("unexpected header token '{token}'"))),
        }
    }
    match (count, dim) {
        (Some(c), Some(d)) if d >= 1 => Ok((c, d)),
        _ => Err(format_err(offset, "header must be 'count=<N> dim=<D>'")),
    }
}

/// Parse and validate a vectors file held in memory. Rejects truncation,
/// trailing bytes, duplicate ordinals and non-finite values.
pub fn read_vectors(bytes: &[u8]) -> Result<VectorSet, EmbedError> {
    if !bytes.starts_with(FVEC_MAGIC) {
        return Err(format_err(0, "missing FVEC1 magic"));
    }
    let header_start = FVEC_MAGIC.len();
    let rest = &bytes[header_start..];
    let newline = rest
        .iter()
        .take(MAX_HEADER)
        .position(|b| *b == b'\n')
        .ok_or_else(|| format_err(header_start, "unterminated header line"))?;
    let line = std::str::from_utf8(&rest[..newline])
        .map_err(|_| format_err(header_start, "header is not UTF-8"))?;
    let (count, dim) = parse_header(line, header_start)?;

    let body_start = header_start + newline + 1;
    let row_bytes = 8 + 4 * dim;
    let body = &bytes[body_start..];
    let expected = count
        .checked_mul(row_bytes)
        .ok_or_else(|| format_err(header_start, "count x dim overflows"))?;
    if body.len() < expected {
        let complete = body.len() / row_bytes;
        return Err(format_err(
            body_start + complete * row_bytes,
            format!("truncated: header promises {count} rows, found {complete} complete"),
        ));
    }
    if body.len() > expected {
        return Err(format_err(body_start + expected, "trailing bytes after last row"));
    }

    let mut ordinals = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    let mut seen = HashSet::with_capacity(count);
    for (i, row) in body.chunks_exact(row_bytes).enumerate() {
        let row_offset = body_start + i * row_bytes;
        let ordinal = u64::from_le_bytes(row[..8].try_into().unwrap());
        if !seen.insert(ordinal) {
            return Err(format_err(row_offset, format!("duplicate ordinal {ordinal}")));
        }
        for (j, chunk) in row[8..].chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(EmbedError::NonFiniteRow {
                    ordinal,
                    offset: (row_offset + 8 + 4 * j) as u64,
                });
            }
            data.push(x);
        }
        ordinals.push(ordinal);
    }
    VectorSet::new(dim, ordinals, data).map_err(|e| format_err(body_start, e.to_string()))
}

pub fn read_vectors_file(path: &Path) -> Result<VectorSet, EmbedError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_vectors(&bytes)
}
