//! Binary netpbm I/O: P6 color images and P5 grayscale maps, maxval 255.
//! Dependency-free and bit-exact, which keeps the corpus reproducible.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Parse the textual header of a netpbm file: magic, width, height, maxval,
/// then exactly one whitespace byte before the raster. `#` comments allowed.
fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(format_err(path, format!("missing {magic} magic")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(format_err(path, "truncated or non-numeric header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| format_err(path, "header value out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing whitespace before raster"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image extent"));
    }
    Ok((width, height, &bytes[pos..]))
}

fn read(path: &Path, magic: &str, samples: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, raster) = parse_header(&bytes, magic, path)?;
    let expected = width * height * samples;
    if raster.len() != expected {
        return Err(format_err(
            path,
            format!("raster holds {} bytes, expected {expected}", raster.len()),
        ));
    }
    Ok((width, height, raster.to_vec()))
}

fn write(path: &Path, magic: &str, width: usize, height: usize, data: &[u8], samples: usize) -> Result<()> {
    if data.len() != width * height * samples {
        return Err(Error::contract(format!(
            "netpbm write: {} bytes for {width}x{height}x{samples}",
            data.len()
        )));
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write raw RGB rows (row-major, 3 bytes per pixel) as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write(path, "P6", width, height, rgb, 3)
}

/// Read a binary PPM; returns (width, height, RGB bytes).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read(path, "P6", 3)
}

/// Write grayscale rows as binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write(path, "P5", width, height, gray, 1)
}

/// Read a binary PGM; returns (width, height, gray bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read(path, "P5", 1)
}
