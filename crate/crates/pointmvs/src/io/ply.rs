//! Binary PLY point-cloud reading and writing.
//!
//! Fused and ground-truth clouds are exchanged as binary
//! little-endian PLY with `float` x/y/z vertex properties and an
//! optional `uchar support` property carrying the number of views
//! that agreed on the point. Only the subset of PLY the pipeline
//! emits is parsed back; anything else is a data error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};

/// A point cloud with optional per-point supporting-view counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyCloud {
    pub points: Vec<Vector3<f64>>,
    /// Per-point count of views that agreed on the point; either empty
    /// or the same length as `points`.
    pub support: Vec<u8>,
}

impl PlyCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            support: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Write a cloud as binary little-endian PLY.
pub fn write_ply(path: &Path, cloud: &PlyCloud) -> Result<()> {
    let with_support = !cloud.support.is_empty();
    if with_support && cloud.support.len() != cloud.points.len() {
        return Err(Error::data(format!(
            "{}: support counts ({}) do not match points ({})",
            path.display(),
            cloud.support.len(),
            cloud.points.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.points.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if with_support {
        header.push_str("property uchar support\n");
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (i, p) in cloud.points.iter().enumerate() {
        for j in 0..3 {
            out.write_f32::<LittleEndian>(p[j] as f32)
                .map_err(|e| Error::io(path, e))?;
        }
        if with_support {
            out.write_all(&[cloud.support[i]])
                .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a binary little-endian PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut header_lines = Vec::new();
    loop {
        let line = read_line(&mut input, path)?;
        let done = line == "end_header";
        header_lines.push(line);
        if done {
            break;
        }
        if header_lines.len() > 64 {
            return Err(Error::data(format!(
                "{}: PLY header does not terminate",
                path.display()
            )));
        }
    }
    if header_lines.first().map(String::as_str) != Some("ply") {
        return Err(Error::data(format!(
            "{}: missing 'ply' magic",
            path.display()
        )));
    }
    if !header_lines
        .iter()
        .any(|l| l == "format binary_little_endian 1.0")
    {
        return Err(Error::data(format!(
            "{}: only binary little-endian PLY is supported",
            path.display()
        )));
    }
    let count_line = header_lines
        .iter()
        .find(|l| l.starts_with("element vertex "))
        .ok_or_else(|| Error::data(format!("{}: no vertex element", path.display())))?;
    let count: usize = count_line["element vertex ".len()..]
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("{}: bad vertex count", path.display())))?;
    let props: Vec<&String> = header_lines
        .iter()
        .filter(|l| l.starts_with("property "))
        .collect();
    let with_support = match props.len() {
        3 => false,
        4 => true,
        n => {
            return Err(Error::data(format!(
                "{}: unsupported PLY layout with {n} properties",
                path.display()
            )))
        }
    };
    let expect: &[&str] = if with_support {
        &[
            "property float x",
            "property float y",
            "property float z",
            "property uchar support",
        ]
    } else {
        &["property float x", "property float y", "property float z"]
    };
    for (have, want) in props.iter().zip(expect) {
        if have.as_str() != *want {
            return Err(Error::data(format!(
                "{}: unsupported PLY property {have:?}",
                path.display()
            )));
        }
    }
    let mut cloud = PlyCloud::default();
    cloud.points.reserve(count);
    if with_support {
        cloud.support.reserve(count);
    }
    for _ in 0..count {
        let x = input
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        let y = input
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        let z = input
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        cloud
            .points
            .push(Vector3::new(x as f64, y as f64, z as f64));
        if with_support {
            let mut b = [0u8; 1];
            input.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            cloud.support.push(b[0]);
        }
    }
    Ok(cloud)
}

/// Read one `\n`-terminated ASCII header line.
fn read_line(input: &mut impl Read, path: &Path) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(Error::data(format!(
                "{}: runaway PLY header line",
                path.display()
            )));
        }
    }
    String::from_utf8(line)
        .map_err(|_| Error::data(format!("{}: non-ASCII PLY header", path.display())))
}
