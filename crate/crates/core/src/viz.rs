//! Grayscale PGM (P5) output of fixation episodes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::Result;
use crate::eval::FixationTrace;
use crate::geometry::Geometry;
use crate::model::pool_lowres;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a binary PGM (P5) file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("PGM pixel data truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses an 8-bit P5 file (maxval ≤ 255), allowing `#` comments in the
/// header.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<PgmImage, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut at = 2;
    let mut fields = [0usize; 3];
    for (i, f) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(at) {
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => at += 1,
                _ => break,
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        if start == at || at - start > 9 {
            return Err(PgmError::Header(format!("field {} is not a number", i + 1)));
        }
        *f = std::str::from_utf8(&bytes[start..at]).unwrap().parse().unwrap();
    }
    if !bytes.get(at).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header("missing whitespace before pixel data".into()));
    }
    at += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PgmError::Header("zero image size".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::Header(format!("unsupported maxval {maxval}")));
    }
    let needed = width
        .checked_mul(height)
        .ok_or_else(|| PgmError::Header("image size overflows".into()))?;
    let available = bytes.len() - at;
    if available < needed {
        return Err(PgmError::Truncated { needed, available });
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        pixels: bytes[at..at + needed].to_vec(),
    })
}

/// Maps `[0, 1]` intensities to bytes, clamping out-of-range values.
pub fn to_gray(image: &[f32]) -> Vec<u8> {
    image
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Nearest-neighbour upscaling of a square image.
pub fn upsample(image: &[f32], side: usize, factor: usize) -> Vec<f32> {
    let out_side = side * factor;
    (0..out_side * out_side)
        .map(|i| image[(i / out_side / factor) * side + (i % out_side) / factor])
        .collect()
}

/// Copy of `gray` with the border of `region` drawn at full brightness.
pub fn outline_region(geometry: &Geometry, gray: &[u8], region: usize) -> Vec<u8> {
    let side = geometry.image_side;
    let roi = geometry.roi_side;
    let (r0, c0) = ((region / geometry.region_grid) * roi, (region % geometry.region_grid) * roi);
    let mut out = gray.to_vec();
    for k in 0..roi {
        for (r, c) in [(r0, c0 + k), (r0 + roi - 1, c0 + k), (r0 + k, c0), (r0 + k, c0 + roi - 1)] {
            out[r * side + c] = 255;
        }
    }
    out
}

/// Writes one sample's panel directory and returns the file names written.
///
/// Step 0 holds the original, the upsampled low-resolution view and the
/// LRC-only reconstruction; each fixation adds an overlay marking the
/// chosen region and the reconstruction after it. `index.txt` lists the
/// files per step.
pub fn write_panel(dir: &Path, geometry: &Geometry, image: &[f32], label: usize, trace: &FixationTrace) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let side = geometry.image_side;
    let mut written = Vec::new();
    let mut put = |name: String, gray: &[u8]| -> Result<String> {
        fs::write(dir.join(&name), encode_pgm(side, side, gray))?;
        written.push(name.clone());
        Ok(name)
    };
    let recon_gray = |snap: &crate::eval::Snapshot| -> Vec<u8> {
        match &snap.reconstruction {
            Some(r) => to_gray(r.data()),
            None => vec![0; side * side],
        }
    };

    let original = to_gray(image);
    let lowres = pool_lowres(geometry, image);
    let lowres_up = to_gray(&upsample(&lowres, geometry.lowres_side, geometry.pool_factor()));
    let mut index = String::new();
    let _ = writeln!(index, "label {label}");
    let a = put("original.pgm".into(), &original)?;
    let b = put("lowres.pgm".into(), &lowres_up)?;
    let c = put("recon_00.pgm".into(), &recon_gray(&trace.initial))?;
    let _ = writeln!(
        index,
        "step 0 prediction {} mcp {:.4}: {a} {b} {c}",
        trace.initial.prediction(),
        trace.initial.mcp
    );
    for (i, step) in trace.steps.iter().enumerate() {
        let n = i + 1;
        let o = put(format!("fixation_{n:02}.pgm"), &outline_region(geometry, &original, step.region))?;
        let r = put(format!("recon_{n:02}.pgm"), &recon_gray(&step.snapshot))?;
        let _ = writeln!(
            index,
            "step {n} region {} p {:.4} prediction {} mcp {:.4}: {o} {r}",
            step.region,
            step.prob,
            step.snapshot.prediction(),
            step.snapshot.mcp
        );
    }
    fs::write(dir.join("index.txt"), index)?;
    Ok(written)
}
