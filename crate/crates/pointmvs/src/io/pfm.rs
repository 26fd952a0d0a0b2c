//! Portable float map (PFM) reading and writing.
//!
//! Depth and confidence rasters are stored as grayscale PFM: the
//! ASCII header `Pf`, a `width height` line, and a scale line whose
//! sign encodes byte order (always `-1.0` here, little-endian),
//! followed by `width * height` raw `f32` samples. Per the format,
//! rows are stored bottom-up: the first stored row is the bottom image
//! row. Values are converted from the pipeline's `f64` on write;
//! invalid pixels are the sentinel `0.0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Write a raster as a grayscale little-endian PFM file.
pub fn write_pfm(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (h, w) = data.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = format!("Pf\n{w} {h}\n-1.0\n");
    out.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for row in (0..h).rev() {
        for col in 0..w {
            out.write_f32::<LittleEndian>(data[(row, col)] as f32)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a grayscale PFM file.
pub fn read_pfm(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let kind = read_token(&mut input, path)?;
    if kind != "Pf" {
        return Err(Error::data(format!(
            "{}: expected grayscale PFM magic 'Pf', found {kind:?}",
            path.display()
        )));
    }
    let w: usize = parse_token(&read_token(&mut input, path)?, path, "width")?;
    let h: usize = parse_token(&read_token(&mut input, path)?, path, "height")?;
    let scale: f64 = parse_token(&read_token(&mut input, path)?, path, "scale")?;
    if scale >= 0.0 {
        return Err(Error::data(format!(
            "{}: big-endian PFM (scale {scale}) is not supported",
            path.display()
        )));
    }
    if w == 0 || h == 0 || w.saturating_mul(h) > (1 << 28) {
        return Err(Error::data(format!(
            "{}: implausible PFM dimensions {w}x{h}",
            path.display()
        )));
    }
    let mut data = Array2::<f64>::zeros((h, w));
    for row in (0..h).rev() {
        for col in 0..w {
            let v = input
                .read_f32::<LittleEndian>()
                .map_err(|e| Error::io(path, e))?;
            data[(row, col)] = v as f64;
        }
    }
    Ok(data)
}

/// Read one whitespace-delimited ASCII token from the header.
fn read_token(input: &mut impl Read, path: &Path) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match input.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
        if token.len() > 64 {
            return Err(Error::data(format!(
                "{}: runaway PFM header token",
                path.display()
            )));
        }
    }
    String::from_utf8(token)
        .map_err(|_| Error::data(format!("{}: non-ASCII PFM header", path.display())))
}

fn parse_token<T: std::str::FromStr>(token: &str, path: &Path, what: &str) -> Result<T> {
    token.parse().map_err(|_| {
        Error::data(format!(
            "{}: bad PFM {what} value {token:?}",
            path.display()
        ))
    })
}
