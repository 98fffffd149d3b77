//! Binary little-endian PLY point clouds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scene::SceneError;

/// A fused or ground-truth surface sample.
#[derive(Clone, Copy, Debug)]
pub struct CloudPoint {
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub color: [u8; 3],
}

pub fn write_ply(path: &Path, points: &[CloudPoint]) -> Result<(), SceneError> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n",
        points.len()
    )?;
    for p in points {
        for v in p.position {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for v in p.normal {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.write_all(&p.color)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads clouds written by [`write_ply`]. Only the binary little-endian
/// layout above is understood; anything else is rejected.
pub fn read_ply(path: &Path) -> Result<Vec<CloudPoint>, SceneError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut count: Option<usize> = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(SceneError::MalformedHeader("ply header truncated".into()));
        }
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("element vertex ") {
            count = Some(
                rest.parse()
                    .map_err(|_| SceneError::MalformedHeader("bad vertex count".into()))?,
            );
        } else if trimmed.starts_with("format") && !trimmed.contains("binary_little_endian") {
            return Err(SceneError::MalformedHeader(format!(
                "unsupported ply format: {trimmed}"
            )));
        }
        if trimmed == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| SceneError::MalformedHeader("missing vertex element".into()))?;
    let mut points = Vec::with_capacity(count);
    let mut rec = [0u8; 27]; // 6 floats + 3 uchar
    for _ in 0..count {
        reader.read_exact(&mut rec)?;
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]) as f64;
        points.push(CloudPoint {
            position: [f(0), f(4), f(8)],
            normal: [f(12), f(16), f(20)],
            color: [rec[24], rec[25], rec[26]],
        });
    }
    Ok(points)
}
