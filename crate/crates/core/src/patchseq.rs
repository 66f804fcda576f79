//! Minutiae-centered patch sequences and the whole-frame baseline.
//!
//! One patch sequence per reference minutia: the same SxS window, centered
//! on the (rounded) minutia location, is cut from every frame. Windows that
//! overrun the frame are filled by reflect-101 padding. Patches are resized
//! to the model input size with corner-aligned bilinear sampling and scaled
//! to [0, 1].

use crate::demosaic::RgbFrame;
use crate::ingest::Label;
use crate::minutiae::ReferenceSelection;
use crate::util::{reflect101, round_u8};

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("empty reference minutiae set")]
    EmptyReference,
    #[error("no frames given")]
    NoFrames,
    #[error("patch size must be positive and even, got {0}")]
    BadPatchSize(usize),
}

/// Aligned patches cut at one minutia across all frames of a presentation.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub presentation_id: String,
    pub label: Label,
    /// Native-space center; `None` for the whole-frame baseline.
    pub minutia: Option<(f64, f64)>,
    pub patches: Vec<RgbFrame>,
}

/// Cut the window `[cx - s/2, cx + s/2) x [cy - s/2, cy + s/2)` with
/// reflect-101 handling of out-of-range indices.
fn cut_window(frame: &RgbFrame, cy: i64, cx: i64, size: usize) -> RgbFrame {
    let half = (size / 2) as i64;
    let mut planes = [
        Vec::with_capacity(size * size),
        Vec::with_capacity(size * size),
        Vec::with_capacity(size * size),
    ];
    for dy in 0..size as i64 {
        let y = reflect101((cy - half + dy) as isize, frame.height());
        for dx in 0..size as i64 {
            let x = reflect101((cx - half + dx) as isize, frame.width());
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(frame.get(c, y, x));
            }
        }
    }
    RgbFrame::new(size, size, planes)
}

/// Extract k = |M^ref| sequences, each cutting the identical window from
/// every frame.
pub fn extract_patch_sequences(
    frames: &[RgbFrame],
    reference: &ReferenceSelection,
    patch_size: usize,
    presentation_id: &str,
    label: Label,
) -> Result<Vec<PatchSequence>, PatchError> {
    if frames.is_empty() {
        return Err(PatchError::NoFrames);
    }
    if patch_size == 0 || patch_size % 2 != 0 {
        return Err(PatchError::BadPatchSize(patch_size));
    }
    if reference.reference_minutiae.is_empty() {
        return Err(PatchError::EmptyReference);
    }
    let mut out = Vec::with_capacity(reference.reference_minutiae.len());
    for m in &reference.reference_minutiae.minutiae {
        let cx = m.x.round() as i64;
        let cy = m.y.round() as i64;
        let patches = frames
            .iter()
            .map(|f| cut_window(f, cy, cx, patch_size))
            .collect();
        out.push(PatchSequence {
            presentation_id: presentation_id.to_string(),
            label,
            minutia: Some((m.x, m.y)),
            patches,
        });
    }
    Ok(out)
}

/// Whole-frame baseline: a single sequence whose "patches" are the full
/// frames, in order.
pub fn whole_frame_sequence(
    frames: &[RgbFrame],
    presentation_id: &str,
    label: Label,
) -> Result<PatchSequence, PatchError> {
    if frames.is_empty() {
        return Err(PatchError::NoFrames);
    }
    Ok(PatchSequence {
        presentation_id: presentation_id.to_string(),
        label,
        minutia: None,
        patches: frames.to_vec(),
    })
}

/// Corner-aligned per-channel bilinear resize: output sample i maps to
/// input position i * (in - 1) / (out - 1). Resizing to the same size is
/// the identity.
pub fn resize_bilinear(frame: &RgbFrame, out_h: usize, out_w: usize) -> RgbFrame {
    assert!(out_h > 0 && out_w > 0, "positive output dimensions");
    let (in_w, in_h) = (frame.width(), frame.height());
    let pos = |i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 {
            0.0
        } else {
            i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    let mut planes = [
        Vec::with_capacity(out_w * out_h),
        Vec::with_capacity(out_w * out_h),
        Vec::with_capacity(out_w * out_h),
    ];
    for oy in 0..out_h {
        let fy = pos(oy, out_h, in_h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = pos(ox, out_w, in_w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let tx = fx - x0 as f64;
            for (c, plane) in planes.iter_mut().enumerate() {
                let v00 = frame.get(c, y0, x0) as f64;
                let v01 = frame.get(c, y0, x1) as f64;
                let v10 = frame.get(c, y1, x0) as f64;
                let v11 = frame.get(c, y1, x1) as f64;
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bot = v10 * (1.0 - tx) + v11 * tx;
                plane.push(round_u8(top * (1.0 - ty) + bot * ty));
            }
        }
    }
    RgbFrame::new(out_w, out_h, planes)
}

/// Classifier input: a (T, H, W, 3) array scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major (T, H, W, 3).
    pub data: Vec<f64>,
}

/// Resize every patch to (height, width) and scale to [0, 1].
pub fn to_model_input(seq: &PatchSequence, height: usize, width: usize) -> ModelInput {
    let mut data = Vec::with_capacity(seq.patches.len() * height * width * 3);
    for patch in &seq.patches {
        let sized = if patch.height() == height && patch.width() == width {
            patch.clone()
        } else {
            resize_bilinear(patch, height, width)
        };
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let v = sized.get(c, y, x) as f64 / 255.0;
                    debug_assert!(v.is_finite());
                    data.push(v);
                }
            }
        }
    }
    ModelInput {
        frames: seq.patches.len(),
        height,
        width,
        data,
    }
}
