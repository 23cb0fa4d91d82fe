//! Dense optical flow: Farnebäck polynomial expansion over an image
//! pyramid, flow colorization, and warp-based verification.

mod farneback;
mod viz;

pub use farneback::{farneback_flow, polynomial_expansion, PolyExpansion};
pub use viz::{flow_to_color, warp_image};

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow inputs have different dimensions: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Per-pixel displacement in pixels/frame. The convention is
/// `prev(x) ≈ next(x + flow(x))`: a flow of (3, −2) means scene content
/// moved 3 px right and 2 px up between the two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f32 {
        let (dx, dy) = self.get(x, y);
        dx.hypot(dy)
    }

    pub fn max_magnitude(&self) -> f32 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(&a, &b)| a.hypot(b))
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }
}

/// Coarse-to-fine estimation settings.
#[derive(Debug, Clone)]
pub struct PyramidConfig {
    /// Downscale factor per level, in (0, 1).
    pub scale: f32,
    /// Total number of levels including the full-resolution base.
    pub levels: usize,
    /// Side of the Gaussian window that averages the displacement equations.
    pub window: usize,
    /// Refinement passes per level.
    pub iterations: usize,
    /// Side of the polynomial-expansion neighbourhood (odd, >= 3).
    pub poly_n: usize,
    /// Gaussian applicability sigma for the expansion.
    pub poly_sigma: f32,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scale: 0.5,
            levels: 3,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return Err(FlowError::Invalid(format!(
                "pyramid scale {} outside (0, 1)",
                self.scale
            )));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(FlowError::Invalid(format!(
                "averaging window {} must be odd",
                self.window
            )));
        }
        if self.poly_n % 2 == 0 || self.poly_n < 3 {
            return Err(FlowError::Invalid(format!(
                "poly_n {} must be odd and >= 3",
                self.poly_n
            )));
        }
        if self.levels == 0 || self.iterations == 0 {
            return Err(FlowError::Invalid(
                "levels and iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"VFLW";

/// Writes `VFLW`: u32 width, u32 height, then row-major little-endian
/// (dx, dy) f32 pairs.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), FlowError> {
    let mut out = Vec::with_capacity(12 + flow.dx.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.width as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height as u32).to_le_bytes());
    for (dx, dy) in flow.dx.iter().zip(&flow.dy) {
        out.extend_from_slice(&dx.to_le_bytes());
        out.extend_from_slice(&dy.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| FlowError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_flow(path: &Path) -> Result<FlowField, FlowError> {
    let err = |reason: &str| FlowError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let bytes = fs::read(path).map_err(|e| FlowError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(err("bad magic (expected VFLW)"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = 12 + width * height * 8;
    if bytes.len() != want {
        return Err(err("truncated or oversized payload"));
    }
    let mut dx = Vec::with_capacity(width * height);
    let mut dy = Vec::with_capacity(width * height);
    for pair in bytes[12..].chunks_exact(8) {
        dx.push(f32::from_le_bytes(pair[0..4].try_into().unwrap()));
        dy.push(f32::from_le_bytes(pair[4..8].try_into().unwrap()));
    }
    Ok(FlowField {
        width,
        height,
        dx,
        dy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vflw");
        let mut flow = FlowField::zeros(3, 2);
        flow.dx[4] = 1.25;
        flow.dy[1] = -0.5;
        write_flow(&path, &flow).unwrap();
        assert_eq!(read_flow(&path).unwrap(), flow);
    }

    #[test]
    fn config_validation() {
        assert!(PyramidConfig::default().validate().is_ok());
        assert!(PyramidConfig {
            window: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PyramidConfig {
            poly_n: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PyramidConfig {
            scale: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
