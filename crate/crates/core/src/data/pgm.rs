//! Binary 8-bit PGM (P5) export and import.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Result, ShadowClip};
use crate::tensor::Tensor;

/// How values map to gray levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PgmScale {
    /// `lo` maps to 0 and `hi` to 255; values outside are clamped.
    Fixed { lo: f64, hi: f64 },
    /// Each frame's maximum maps to 255, zero to 0.
    FrameMax,
}

/// Linear map to `0..=255` with round-half-up.
pub fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    let unit = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (unit.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// `(width, height, pixels)` of an 8-bit P5 file.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |msg: &str| DataError::Format(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    if next_token(&bytes, &mut pos).as_deref() != Some("P5") {
        return Err(bad("not a binary PGM"));
    }
    let mut num = || -> Result<usize> {
        next_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let start = pos + 1;
    let data = bytes
        .get(start..start + w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

/// One PGM per frame of `[t, h, w]` data, named `{prefix}_{frame:03}.pgm`.
pub fn export_pgm(
    data: &Tensor,
    scale: PgmScale,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let [t, h, w] = data.shape()[..] else {
        return Err(DataError::Format(format!(
            "expected [t, h, w], got {:?}",
            data.shape()
        )));
    };
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut paths = Vec::with_capacity(t);
    for f in 0..t {
        let frame = &data.data()[f * h * w..(f + 1) * h * w];
        let (lo, hi) = match scale {
            PgmScale::Fixed { lo, hi } => (lo, hi),
            PgmScale::FrameMax => (0.0, frame.iter().cloned().fold(0.0, f64::max)),
        };
        let px: Vec<u8> = frame.iter().map(|&v| quantize(v, lo, hi)).collect();
        let path = dir.join(format!("{prefix}_{f:03}.pgm"));
        write_pgm(&path, w, h, &px)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Builds a clip from `frame_NNN.pgm` / `mask_NNN.pgm` pairs in `dir`
/// (masks: any nonzero gray is shadow).
pub fn import_pgm_dir(dir: &Path) -> Result<ShadowClip> {
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let mut dims = None;
    for f in 0.. {
        let fp = dir.join(format!("frame_{f:03}.pgm"));
        if !fp.exists() {
            break;
        }
        let (w, h, px) = read_pgm(&fp)?;
        let (mw, mh, mpx) = read_pgm(&dir.join(format!("mask_{f:03}.pgm")))?;
        if (w, h) != (mw, mh) || dims.is_some_and(|d| d != (w, h)) {
            return Err(DataError::Format(format!("frame {f} size mismatch")));
        }
        dims = Some((w, h));
        frames.extend(px.iter().map(|&p| p as f64 / 255.0));
        masks.extend(mpx.iter().map(|&p| (p > 0) as u8 as f64));
    }
    let (w, h) =
        dims.ok_or_else(|| DataError::Format(format!("{}: no frame_000.pgm", dir.display())))?;
    let t = frames.len() / (w * h);
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ShadowClip::new(
        Tensor::new([t, h, w], frames).expect("sized"),
        Tensor::new([t, h, w], masks).expect("sized"),
        id,
    )
}
