//! 8-bit RGB / grayscale images, binary netpbm I/O, and bilinear resampling.
//!
//! Frames travel as binary PPM (P6, maxval 255) and masks as binary PGM
//! (P5). Resampling maps destination pixel centers through
//! `src = (dst + 0.5)·(src_size/dst_size) − 0.5` with border clamping, which
//! makes a same-size resize the exact identity.

use std::fs;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ImgError {
    ImgError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> ImgError {
    ImgError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImgError> {
        if data.len() != width * height * 3 {
            return Err(ImgError::Invalid(format!(
                "rgb buffer length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma on the [0, 1] scale.
    pub fn luma(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            let (r, g, b) = (px[0] as f32, px[1] as f32, px[2] as f32);
            data.push((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Grayscale image with f32 samples, nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at fractional coordinates, borders clamped.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        sample_plane(&self.data, self.width, self.height, x, y)
    }
}

pub(crate) fn sample_plane(data: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of a single plane with the center-aligned convention.
pub fn resize_plane(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert!(sw > 0 && sh > 0 && dw > 0 && dh > 0);
    let mut out = vec![0.0f32; dw * dh];
    let sx = sw as f32 / dw as f32;
    let sy = sh as f32 / dh as f32;
    for dy in 0..dh {
        let yf = (dy as f32 + 0.5) * sy - 0.5;
        for dx in 0..dw {
            let xf = (dx as f32 + 0.5) * sx - 0.5;
            out[dy * dw + dx] = sample_plane(src, sw, sh, xf, yf);
        }
    }
    out
}

// ── netpbm ──────────────────────────────────────────────────────────────

/// Skips whitespace and `#` comments, returns the next ASCII integer.
fn next_token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize, ImgError> {
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
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(fmt_err(path, "expected an integer in header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(path, "unparsable integer in header"))
}

fn read_netpbm(
    path: &Path,
    magic: &[u8; 2],
    channels: usize,
) -> Result<(usize, usize, Vec<u8>), ImgError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(fmt_err(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let width = next_token(&bytes, &mut pos, path)?;
    let height = next_token(&bytes, &mut pos, path)?;
    let maxval = next_token(&bytes, &mut pos, path)?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates header and raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(path, "missing raster separator"));
    }
    pos += 1;
    let want = width * height * channels;
    if bytes.len() - pos < want {
        return Err(fmt_err(
            path,
            format!(
                "truncated raster: expected {want} bytes, found {}",
                bytes.len() - pos
            ),
        ));
    }
    Ok((width, height, bytes[pos..pos + want].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, ImgError> {
    let (width, height, data) = read_netpbm(path, b"P6", 3)?;
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), ImgError> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), ImgError> {
    read_netpbm(path, b"P5", 1)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), ImgError> {
    assert_eq!(data.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
