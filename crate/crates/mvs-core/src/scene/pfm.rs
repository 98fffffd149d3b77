//! Portable float map (PFM) encoding for depth and normal rasters.
//!
//! Header `Pf` is one channel, `PF` three channels; the scale line's sign
//! encodes endianness (negative = little endian, the only form written
//! here). Scanlines are stored bottom-to-top per the format convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::depthmap::DepthNormalMap;
use crate::scene::SceneError;

fn read_token(reader: &mut impl Read) -> Result<String, SceneError> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    // skip leading whitespace
    loop {
        reader.read_exact(&mut byte)?;
        if !byte[0].is_ascii_whitespace() {
            break;
        }
    }
    token.push(byte[0]);
    loop {
        reader.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            break;
        }
        token.push(byte[0]);
    }
    String::from_utf8(token).map_err(|_| SceneError::MalformedHeader("non-utf8 token".into()))
}

fn parse_header(reader: &mut impl Read) -> Result<(usize, usize, usize), SceneError> {
    let magic = read_token(reader)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => {
            return Err(SceneError::MalformedHeader(format!(
                "bad magic {other:?}, expected Pf or PF"
            )))
        }
    };
    let width: usize = read_token(reader)?
        .parse()
        .map_err(|_| SceneError::MalformedHeader("bad width".into()))?;
    let height: usize = read_token(reader)?
        .parse()
        .map_err(|_| SceneError::MalformedHeader("bad height".into()))?;
    let scale: f32 = read_token(reader)?
        .parse()
        .map_err(|_| SceneError::MalformedHeader("bad scale".into()))?;
    if scale >= 0.0 {
        return Err(SceneError::MalformedHeader(
            "big-endian PFM not supported".into(),
        ));
    }
    if width == 0 || height == 0 {
        return Err(SceneError::MalformedHeader("zero dimension".into()));
    }
    Ok((width, height, channels))
}

/// Writes an interleaved float raster; `channels` is 1 or 3.
pub fn write_pfm(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f32],
) -> Result<(), SceneError> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width * height * channels);
    let mut out = BufWriter::new(File::create(path)?);
    let magic = if channels == 1 { "Pf" } else { "PF" };
    write!(out, "{magic}\n{width} {height}\n-1.0\n")?;
    // bottom row first
    for y in (0..height).rev() {
        let row = &data[y * width * channels..(y + 1) * width * channels];
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads an interleaved float raster, returning `(width, height, channels, data)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>), SceneError> {
    let mut reader = BufReader::new(File::open(path)?);
    let (width, height, channels) = parse_header(&mut reader)?;
    let mut raw = vec![0u8; width * height * channels * 4];
    reader.read_exact(&mut raw)?;
    let mut data = vec![0.0f32; width * height * channels];
    for y in 0..height {
        let src_row = height - 1 - y;
        for i in 0..width * channels {
            let off = (src_row * width * channels + i) * 4;
            data[y * width * channels + i] =
                f32::from_le_bytes([raw[off], raw[off + 1], raw[off + 2], raw[off + 3]]);
        }
    }
    Ok((width, height, channels, data))
}

/// Writes depth (1-channel PFM) and normals (3-channel PFM) side by side.
/// Invalid pixels carry depth 0 and a zero normal.
pub fn write_depth_map(
    map: &DepthNormalMap,
    depth_path: &Path,
    normal_path: &Path,
) -> Result<(), SceneError> {
    write_pfm(depth_path, map.width(), map.height(), 1, map.depths())?;
    let flat: Vec<f32> = map.normals().iter().flat_map(|n| n.iter().copied()).collect();
    write_pfm(normal_path, map.width(), map.height(), 3, &flat)?;
    Ok(())
}

pub fn read_depth_map(depth_path: &Path, normal_path: &Path) -> Result<DepthNormalMap, SceneError> {
    let (w, h, c, depth) = read_pfm(depth_path)?;
    if c != 1 {
        return Err(SceneError::MalformedHeader(format!(
            "{}: expected 1-channel depth, got {c}",
            depth_path.display()
        )));
    }
    let (nw, nh, nc, flat) = read_pfm(normal_path)?;
    if nc != 3 || nw != w || nh != h {
        return Err(SceneError::DimensionMismatch(format!(
            "normal map {}x{}x{nc} does not match depth {w}x{h}",
            nw, nh
        )));
    }
    let normal: Vec<[f32; 3]> = flat.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
    Ok(DepthNormalMap::from_parts(w, h, depth, normal))
}

/// Reads a 1-channel PFM into a plain raster (used for textureness maps).
pub fn read_scalar_map(path: &Path) -> Result<(usize, usize, Vec<f32>), SceneError> {
    let (w, h, c, data) = read_pfm(path)?;
    if c != 1 {
        return Err(SceneError::MalformedHeader(format!(
            "{}: expected 1 channel, got {c}",
            path.display()
        )));
    }
    Ok((w, h, data))
}
