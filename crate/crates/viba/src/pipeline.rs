//! Frame ingestion, keyframe selection, ROI crop/resize, flow-pair
//! construction, and model-input normalization.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::img::{read_ppm, resize_plane, ImgError, RgbImage};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no frames found in {0}")]
    NoFrames(String),
    #[error("frame {frame}: dimensions {got_w}x{got_h} differ from the sequence's {want_w}x{want_h}")]
    MixedDims {
        frame: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Ordered frames of one video.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<RgbImage>,
    pub ids: Vec<u32>,
    pub source: String,
}

impl FrameSequence {
    pub fn width(&self) -> usize {
        self.frames.first().map(|f| f.width).unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map(|f| f.height).unwrap_or(0)
    }
}

/// Region of interest inside one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub frame_id: u32,
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl RoiBox {
    pub fn validate(&self, frame_w: usize, frame_h: usize) -> Result<(), PipelineError> {
        if self.width == 0 || self.height == 0 {
            return Err(PipelineError::Invalid(format!(
                "roi for frame {} has zero extent",
                self.frame_id
            )));
        }
        if self.left + self.width > frame_w || self.top + self.height > frame_h {
            return Err(PipelineError::Invalid(format!(
                "roi {}+{}x{}+{} exceeds frame bounds {frame_w}x{frame_h} (frame {})",
                self.left, self.width, self.top, self.height, self.frame_id
            )));
        }
        Ok(())
    }

    /// Centered square covering `min(w, h)` — the fallback when no ROI
    /// sidecar exists.
    pub fn centered_square(frame_id: u32, w: usize, h: usize) -> Self {
        let side = w.min(h);
        Self {
            frame_id,
            left: (w - side) / 2,
            top: (h - side) / 2,
            width: side,
            height: side,
        }
    }
}

/// Loads `frame_<n>.ppm` files (zero-padded n) sorted by n, checking that
/// dimensions are uniform.
pub fn load_frame_sequence(directory: &Path) -> Result<FrameSequence, PipelineError> {
    let entries = std::fs::read_dir(directory).map_err(|e| PipelineError::Io {
        path: directory.display().to_string(),
        source: e,
    })?;
    let mut numbered: Vec<(u32, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| PipelineError::Io {
            path: directory.display().to_string(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".ppm"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            numbered.push((n, entry.path()));
        }
    }
    if numbered.is_empty() {
        return Err(PipelineError::NoFrames(directory.display().to_string()));
    }
    numbered.sort_by_key(|(n, _)| *n);

    let mut frames: Vec<RgbImage> = Vec::with_capacity(numbered.len());
    let mut ids = Vec::with_capacity(numbered.len());
    for (n, path) in &numbered {
        let frame = read_ppm(path)?;
        if let Some(first) = frames.first() {
            if frame.width != first.width || frame.height != first.height {
                return Err(PipelineError::MixedDims {
                    frame: path.display().to_string(),
                    got_w: frame.width,
                    got_h: frame.height,
                    want_w: first.width,
                    want_h: first.height,
                });
            }
        }
        frames.push(frame);
        ids.push(*n);
    }
    Ok(FrameSequence {
        frames,
        ids,
        source: directory.display().to_string(),
    })
}

/// Keyframe selection by luma mean-absolute-difference.
///
/// Frame 0 is always kept; a later frame i is kept iff its mean |Δluma| from
/// the previous keyframe exceeds `diff_threshold` and `i − last >= min_gap`
/// (positions, not frame ids).
pub fn extract_keyframes(
    seq: &FrameSequence,
    diff_threshold: f32,
    min_gap: usize,
) -> Result<Vec<usize>, PipelineError> {
    if seq.frames.is_empty() {
        return Err(PipelineError::NoFrames(seq.source.clone()));
    }
    let lumas: Vec<_> = seq.frames.iter().map(|f| f.luma()).collect();
    let mut keyframes = vec![0usize];
    let mut last = 0usize;
    for i in 1..seq.frames.len() {
        if i - last < min_gap {
            continue;
        }
        let diff = lumas[i]
            .data
            .iter()
            .zip(&lumas[last].data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / lumas[i].data.len() as f64;
        if diff > diff_threshold as f64 {
            keyframes.push(i);
            last = i;
        }
    }
    Ok(keyframes)
}

/// Crops the ROI and bilinearly resizes it to the target size.
pub fn crop_resize(
    frame: &RgbImage,
    roi: &RoiBox,
    target: (usize, usize),
) -> Result<RgbImage, PipelineError> {
    roi.validate(frame.width, frame.height)?;
    if target.0 == 0 || target.1 == 0 {
        return Err(PipelineError::Invalid("target size must be positive".into()));
    }
    let (tw, th) = target;
    let mut planes = [
        vec![0.0f32; roi.width * roi.height],
        vec![0.0f32; roi.width * roi.height],
        vec![0.0f32; roi.width * roi.height],
    ];
    for y in 0..roi.height {
        for x in 0..roi.width {
            let px = frame.pixel(roi.left + x, roi.top + y);
            for c in 0..3 {
                planes[c][y * roi.width + x] = px[c] as f32;
            }
        }
    }
    let resized: Vec<Vec<f32>> = planes
        .iter()
        .map(|p| resize_plane(p, roi.width, roi.height, tw, th))
        .collect();
    let mut out = RgbImage::new(tw, th);
    for y in 0..th {
        for x in 0..tw {
            out.set_pixel(
                x,
                y,
                [
                    resized[0][y * tw + x].round().clamp(0.0, 255.0) as u8,
                    resized[1][y * tw + x].round().clamp(0.0, 255.0) as u8,
                    resized[2][y * tw + x].round().clamp(0.0, 255.0) as u8,
                ],
            );
        }
    }
    Ok(out)
}

/// Pairs each keyframe with its immediate successor. A keyframe that is the
/// final frame has no successor and is dropped with a warning.
pub fn make_flow_pairs(seq: &FrameSequence, keyframes: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(keyframes.len());
    for &k in keyframes {
        if k + 1 < seq.frames.len() {
            pairs.push((k, k + 1));
        } else {
            log::warn!(
                "keyframe {k} is the final frame of {}; dropped from flow pairs",
                seq.source
            );
        }
    }
    pairs
}

/// Scales an 8-bit RGB frame to [0, 1] and standardizes with per-channel
/// mean 0.5 and std 0.5, producing a 3×H×W tensor in [−1, 1].
pub fn normalize_for_model(frame: &RgbImage) -> Tensor {
    let (w, h) = (frame.width, frame.height);
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = frame.pixel(x, y);
            for c in 0..3 {
                data[c * w * h + y * w + x] = (px[c] as f32 / 255.0 - 0.5) / 0.5;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape")
}

/// Parses the optional `roi.csv` sidecar
/// (`frame_id,left,top,width,height`, `#` comments and an optional header).
pub fn read_roi_csv(path: &Path) -> Result<Vec<RoiBox>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rois = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields.first() == Some(&"frame_id") {
            continue;
        }
        if fields.len() != 5 {
            return Err(PipelineError::Invalid(format!(
                "{}:{}: expected 5 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<usize, PipelineError> {
            s.parse().map_err(|_| {
                PipelineError::Invalid(format!(
                    "{}:{}: unparsable value `{s}`",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        rois.push(RoiBox {
            frame_id: parse(fields[0])? as u32,
            left: parse(fields[1])?,
            top: parse(fields[2])?,
            width: parse(fields[3])?,
            height: parse(fields[4])?,
        });
    }
    Ok(rois)
}

/// ROI for a frame: the sidecar entry when present, else a centered square.
pub fn roi_for_frame(rois: &[RoiBox], frame_id: u32, w: usize, h: usize) -> RoiBox {
    rois.iter()
        .find(|r| r.frame_id == frame_id)
        .copied()
        .unwrap_or_else(|| RoiBox::centered_square(frame_id, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::write_ppm;

    fn solid(w: usize, h: usize, v: u8) -> RgbImage {
        RgbImage {
            width: w,
            height: h,
            data: vec![v; w * h * 3],
        }
    }

    fn write_frames(dir: &Path, frames: &[(u32, RgbImage)]) {
        for (n, f) in frames {
            write_ppm(&dir.join(format!("frame_{n:04}.ppm")), f).unwrap();
        }
    }

    #[test]
    fn loads_sorted_sequence() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(
            dir.path(),
            &[(2, solid(4, 4, 2)), (0, solid(4, 4, 0)), (1, solid(4, 4, 1))],
        );
        let seq = load_frame_sequence(dir.path()).unwrap();
        assert_eq!(seq.ids, vec![0, 1, 2]);
        assert_eq!(seq.frames[2].data[0], 2);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_frame_sequence(dir.path()),
            Err(PipelineError::NoFrames(_))
        ));
    }

    #[test]
    fn mixed_dims_error_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &[(0, solid(8, 8, 0)), (1, solid(4, 4, 0))]);
        let err = load_frame_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_0001.ppm"), "{err}");
    }

    #[test]
    fn identical_frames_one_keyframe() {
        let seq = FrameSequence {
            frames: vec![solid(4, 4, 7); 5],
            ids: (0..5).collect(),
            source: "test".into(),
        };
        assert_eq!(extract_keyframes(&seq, 0.05, 1).unwrap(), vec![0]);
    }

    #[test]
    fn alternating_frames_all_keyframes() {
        let frames: Vec<RgbImage> = (0..6)
            .map(|i| solid(4, 4, if i % 2 == 0 { 0 } else { 255 }))
            .collect();
        let seq = FrameSequence {
            frames,
            ids: (0..6).collect(),
            source: "test".into(),
        };
        assert_eq!(
            extract_keyframes(&seq, 0.1, 1).unwrap(),
            vec![0, 1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn scene_change_detected_exactly() {
        // Frames 0-9 near-black with tiny per-frame jitter, 10-19 bright.
        let mut frames = Vec::new();
        for i in 0..20u8 {
            let base = if i < 10 { 10 } else { 200 };
            frames.push(solid(6, 6, base + (i % 3)));
        }
        let seq = FrameSequence {
            frames,
            ids: (0..20).collect(),
            source: "test".into(),
        };
        assert_eq!(extract_keyframes(&seq, 0.05, 3).unwrap(), vec![0, 10]);
    }

    #[test]
    fn crop_resize_identity() {
        let mut frame = solid(6, 6, 0);
        frame.set_pixel(2, 3, [9, 8, 7]);
        let roi = RoiBox {
            frame_id: 0,
            left: 0,
            top: 0,
            width: 6,
            height: 6,
        };
        let out = crop_resize(&frame, &roi, (6, 6)).unwrap();
        assert_eq!(out, frame);
    }

    #[test]
    fn crop_resize_supports_full_fidelity_targets() {
        let frame = solid(64, 64, 100);
        let roi = RoiBox::centered_square(0, 64, 64);
        let out = crop_resize(&frame, &roi, (299, 299)).unwrap();
        assert_eq!((out.width, out.height), (299, 299));
        assert!(out.data.iter().all(|&v| v == 100));
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let frame = solid(6, 6, 0);
        let roi = RoiBox {
            frame_id: 0,
            left: 4,
            top: 4,
            width: 4,
            height: 4,
        };
        assert!(crop_resize(&frame, &roi, (2, 2)).is_err());
    }

    #[test]
    fn flow_pairs_and_final_frame_drop() {
        let seq = FrameSequence {
            frames: vec![solid(2, 2, 0); 10],
            ids: (0..10).collect(),
            source: "test".into(),
        };
        assert_eq!(make_flow_pairs(&seq, &[0, 5]), vec![(0, 1), (5, 6)]);
        assert_eq!(make_flow_pairs(&seq, &[9]), vec![]);
        assert_eq!(make_flow_pairs(&seq, &[]), vec![]);
    }

    #[test]
    fn normalization_range() {
        let zeros = normalize_for_model(&solid(2, 2, 0));
        assert!(zeros.data().iter().all(|&v| v == -1.0));
        let full = normalize_for_model(&solid(2, 2, 255));
        assert!(full.data().iter().all(|&v| v == 1.0));
        let mid = normalize_for_model(&solid(2, 2, 128));
        let want = 128.0 / 255.0 * 2.0 - 1.0;
        assert!(mid.data().iter().all(|&v| (v - want).abs() < 1e-6));
        assert!((want - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn roi_csv_parsing_and_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roi.csv");
        std::fs::write(&path, "frame_id,left,top,width,height\n0,1,2,3,4\n").unwrap();
        let rois = read_roi_csv(&path).unwrap();
        assert_eq!(
            rois,
            vec![RoiBox {
                frame_id: 0,
                left: 1,
                top: 2,
                width: 3,
                height: 4
            }]
        );
        let fallback = roi_for_frame(&rois, 5, 10, 8);
        assert_eq!(fallback, RoiBox::centered_square(5, 10, 8));
        assert_eq!(fallback.width, 8);
        let found = roi_for_frame(&rois, 0, 10, 8);
        assert_eq!(found.left, 1);
    }
}
