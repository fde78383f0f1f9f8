//! Binary PPM (P6) / PGM (P5) with 8-bit samples, and frame directories.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

fn skip_space_and_comments(b: &[u8], pos: &mut usize) {
    loop {
        while *pos < b.len() && b[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < b.len() && b[*pos] == b'#' {
            while *pos < b.len() && b[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}

fn header_number(b: &[u8], pos: &mut usize) -> Result<usize> {
    skip_space_and_comments(b, pos);
    let start = *pos;
    while *pos < b.len() && b[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&b[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad number in PNM header".into()))
}

/// Parses a P5 or P6 image into a `[channels, h, w]` tensor in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Format("expected a binary PPM (P6) or PGM (P5)".into())),
    };
    let mut pos = 2;
    let w = header_number(bytes, &mut pos)?;
    let h = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit images are supported (maxval {maxval})")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator after PNM header".into()));
    }
    pos += 1;
    let n = channels * w * h;
    if bytes.len() - pos != n {
        return Err(Error::Format(format!("expected {n} sample bytes, found {}", bytes.len() - pos)));
    }
    let px = &bytes[pos..];
    Ok(Tensor::from_fn3(channels, h, w, |c, y, x| {
        px[(y * w + x) * channels + c] as f64 / 255.0
    }))
}

pub fn to_u8(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Serializes a 3-channel tensor as P6 or a 1-channel tensor as P5.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().len() != 3 || !(t.shape()[0] == 3 || t.shape()[0] == 1) {
        return Err(Error::shape("encode_pnm", t.shape(), &[3]));
    }
    let (c, h, w) = t.dims3();
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out.push(to_u8(t.at3(ci, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    decode_pnm(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_pnm(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pnm(t)?)?;
    Ok(())
}

/// `.ppm` files of a directory in lexicographic order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Format(format!("no .ppm frames in {}", dir.display())));
    }
    let frames: Vec<Tensor> = paths.iter().map(|p| read_pnm(p)).collect::<Result<_>>()?;
    if let Some(f) = frames.iter().find(|f| f.shape() != frames[0].shape()) {
        return Err(Error::Format(format!(
            "{}: frames differ in size ({:?} vs {:?})",
            dir.display(),
            f.shape(),
            frames[0].shape()
        )));
    }
    Ok(frames)
}

/// Writes `frame_000.ppm`, `frame_001.ppm`, ...
pub fn write_frames(dir: &Path, frames: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, f) in frames.iter().enumerate() {
        write_pnm(&dir.join(format!("frame_{t:03}.ppm")), f)?;
    }
    Ok(())
}

/// Rounds a frame through 8-bit storage.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}
