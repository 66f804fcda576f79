//! Classical minutiae detection on half-resolution frames.
//!
//! Pipeline: luma + 2x2 downscale -> local mean/variance normalization ->
//! Otsu binarization (ridges are dark) -> Zhang-Suen thinning ->
//! crossing-number classification on the skeleton -> border and
//! spurious-pair pruning. Coordinates come out in the half-resolution
//! space and are doubled back to native with [`to_native`].

use crate::demosaic::RgbFrame;
use crate::ingest::{CoordSpace, Minutia, MinutiaSet};

#[derive(Debug, thiserror::Error)]
pub enum MinutiaeError {
    #[error("odd frame dimensions {width}x{height}")]
    OddDimensions { width: usize, height: usize },
    #[error("image {width}x{height} below detector minimum 32x32")]
    TooSmall { width: usize, height: usize },
    #[error("expected {expected} coordinates, got {got}")]
    WrongSpace {
        expected: CoordSpace,
        got: CoordSpace,
    },
    #[error("no minutiae in any frame")]
    NoMinutiae,
    #[error("no frames given")]
    NoFrames,
}

/// Grayscale image with f64 samples (luma values stay in [0, 255]).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Luma conversion followed by exact 2x2 block averaging.
pub fn downscale_half(frame: &RgbFrame) -> Result<GrayImage, MinutiaeError> {
    let (w, h) = (frame.width(), frame.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(MinutiaeError::OddDimensions {
            width: w,
            height: h,
        });
    }
    let luma = |y: usize, x: usize| -> f64 {
        0.299 * frame.get(0, y, x) as f64
            + 0.587 * frame.get(1, y, x) as f64
            + 0.114 * frame.get(2, y, x) as f64
    };
    let (ow, oh) = (w / 2, h / 2);
    let mut data = Vec::with_capacity(ow * oh);
    for by in 0..oh {
        for bx in 0..ow {
            let (y, x) = (2 * by, 2 * bx);
            data.push((luma(y, x) + luma(y, x + 1) + luma(y + 1, x) + luma(y + 1, x + 1)) / 4.0);
        }
    }
    Ok(GrayImage {
        width: ow,
        height: oh,
        data,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// Side of the local normalization window, pixels.
    pub block_size: usize,
    /// Minutiae pairs closer than this (half-res pixels) are both dropped.
    pub prune_dist: f64,
    /// Minutiae within this many pixels of the border are dropped.
    pub border_margin: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            block_size: 16,
            prune_dist: 8.0,
            border_margin: 12,
        }
    }
}

/// Detector output; `degenerate` marks a constant-intensity input that
/// produced a forced-empty set.
#[derive(Debug, Clone)]
pub struct Detection {
    pub set: MinutiaSet,
    pub degenerate: bool,
}

/// Crossing number of a skeleton pixel given its 8-neighborhood in cyclic
/// order (N, NE, E, SE, S, SW, W, NW): half the sum of absolute transitions
/// around the closed cycle. CN = 1 is a ridge ending, CN = 3 a bifurcation.
pub fn crossing_number(neighbors: [bool; 8]) -> u8 {
    let mut sum = 0u8;
    for i in 0..8 {
        let a = neighbors[i] as u8;
        let b = neighbors[(i + 1) % 8] as u8;
        sum += a.abs_diff(b);
    }
    sum / 2
}

/// Local mean/variance normalization: rescale each pixel against its
/// windowed statistics to mean 128, std 40.
fn normalize_local(img: &GrayImage, block_size: usize) -> GrayImage {
    let (w, h) = (img.width, img.height);
    // integral images for windowed sums
    let mut sum = vec![0.0f64; (w + 1) * (h + 1)];
    let mut sq = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = img.get(y, x);
            let i = (y + 1) * (w + 1) + (x + 1);
            sum[i] = v + sum[i - 1] + sum[i - w - 1] - sum[i - w - 2];
            sq[i] = v * v + sq[i - 1] + sq[i - w - 1] - sq[i - w - 2];
        }
    }
    let half = block_size / 2;
    let window = |table: &[f64], y0: usize, y1: usize, x0: usize, x1: usize| -> f64 {
        table[y1 * (w + 1) + x1] - table[y0 * (w + 1) + x1] - table[y1 * (w + 1) + x0]
            + table[y0 * (w + 1) + x0]
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let y0 = y.saturating_sub(half);
            let x0 = x.saturating_sub(half);
            let y1 = (y + half + 1).min(h);
            let x1 = (x + half + 1).min(w);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let mean = window(&sum, y0, y1, x0, x1) / count;
            let var = (window(&sq, y0, y1, x0, x1) / count - mean * mean).max(0.0);
            let std = var.sqrt();
            let out = if std < 1e-6 {
                128.0
            } else {
                128.0 + 40.0 * (img.get(y, x) - mean) / std
            };
            data.push(out.clamp(0.0, 255.0));
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

/// Otsu's threshold over a 256-bin histogram; maximizes between-class
/// variance. Returns the bin index; foreground is `value < threshold`.
fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;
    let mut best_t = 0u8;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for t in 0..256usize {
        w0 += hist[t] as f64 / total;
        sum0 += t as f64 * hist[t] as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let w1 = 1.0 - w0;
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best_t = t as u8;
        }
    }
    best_t
}

struct BinaryGrid {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl BinaryGrid {
    #[inline]
    fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[y * self.width + x] = v;
    }

    /// 8-neighborhood in cyclic order N, NE, E, SE, S, SW, W, NW.
    /// Only valid for interior pixels.
    #[inline]
    fn neighbors(&self, y: usize, x: usize) -> [bool; 8] {
        [
            self.get(y - 1, x),
            self.get(y - 1, x + 1),
            self.get(y, x + 1),
            self.get(y + 1, x + 1),
            self.get(y + 1, x),
            self.get(y + 1, x - 1),
            self.get(y, x - 1),
            self.get(y - 1, x - 1),
        ]
    }
}

/// Zhang-Suen thinning to a one-pixel-wide skeleton. Runs until a full
/// two-subiteration pass removes nothing (the algorithm's own termination
/// criterion). Border pixels are cleared first so every skeleton pixel has
/// a full 8-neighborhood.
fn thin_zhang_suen(grid: &mut BinaryGrid) {
    let (w, h) = (grid.width, grid.height);
    for x in 0..w {
        grid.set(0, x, false);
        grid.set(h - 1, x, false);
    }
    for y in 0..h {
        grid.set(y, 0, false);
        grid.set(y, w - 1, false);
    }
    let mut to_clear: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            to_clear.clear();
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if !grid.get(y, x) {
                        continue;
                    }
                    let n = grid.neighbors(y, x);
                    let b: u8 = n.iter().map(|&v| v as u8).sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    // transitions false -> true around the cycle
                    let a: u8 = (0..8)
                        .map(|i| (!n[i] && n[(i + 1) % 8]) as u8)
                        .sum();
                    if a != 1 {
                        continue;
                    }
                    let (n_, e, s, wst) = (n[0], n[2], n[4], n[6]);
                    let ok = if step == 0 {
                        !(n_ && e && s) && !(e && s && wst)
                    } else {
                        !(n_ && e && wst) && !(n_ && s && wst)
                    };
                    if ok {
                        to_clear.push((y, x));
                    }
                }
            }
            for &(y, x) in &to_clear {
                grid.set(y, x, false);
            }
            changed |= !to_clear.is_empty();
        }
        if !changed {
            break;
        }
    }
}

/// Run the full classical detector on a half-resolution grayscale frame.
/// Output coordinates are in the half-resolution (500 ppi) space.
pub fn detect_minutiae_cn(
    gray: &GrayImage,
    params: &DetectorParams,
    frame_index: usize,
) -> Result<Detection, MinutiaeError> {
    if gray.width < 32 || gray.height < 32 {
        return Err(MinutiaeError::TooSmall {
            width: gray.width,
            height: gray.height,
        });
    }

    let lo = gray.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gray.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-9 {
        return Ok(Detection {
            set: MinutiaSet::empty(frame_index, CoordSpace::Half500ppi),
            degenerate: true,
        });
    }

    let normalized = normalize_local(gray, params.block_size);
    let quantized: Vec<u8> = normalized.data.iter().map(|&v| v.round() as u8).collect();
    let threshold = otsu_threshold(&quantized);
    let mut grid = BinaryGrid {
        width: gray.width,
        height: gray.height,
        cells: quantized.iter().map(|&v| v < threshold).collect(),
    };
    thin_zhang_suen(&mut grid);

    let mut found: Vec<Minutia> = Vec::new();
    for y in 1..gray.height - 1 {
        for x in 1..gray.width - 1 {
            if !grid.get(y, x) {
                continue;
            }
            let n = grid.neighbors(y, x);
            match crossing_number(n) {
                1 => {
                    // ending: point back along the single attached branch
                    let theta = n
                        .iter()
                        .position(|&v| v)
                        .map(|i| neighbor_angle(i));
                    found.push(Minutia {
                        x: x as f64,
                        y: y as f64,
                        theta,
                        quality: None,
                    });
                }
                3 => found.push(Minutia {
                    x: x as f64,
                    y: y as f64,
                    theta: None,
                    quality: None,
                }),
                _ => {}
            }
        }
    }

    // border margin
    let m = params.border_margin as f64;
    let (wf, hf) = (gray.width as f64, gray.height as f64);
    found.retain(|p| p.x >= m && p.y >= m && p.x < wf - m && p.y < hf - m);

    // spurious pairs: both members of any too-close pair go
    let mut drop = vec![false; found.len()];
    for i in 0..found.len() {
        for j in i + 1..found.len() {
            let dx = found[i].x - found[j].x;
            let dy = found[i].y - found[j].y;
            if (dx * dx + dy * dy).sqrt() < params.prune_dist {
                drop[i] = true;
                drop[j] = true;
            }
        }
    }
    let minutiae = found
        .into_iter()
        .zip(drop)
        .filter_map(|(m, d)| (!d).then_some(m))
        .collect();

    Ok(Detection {
        set: MinutiaSet {
            frame_index,
            space: CoordSpace::Half500ppi,
            minutiae,
        },
        degenerate: false,
    })
}

/// Angle of the i-th cyclic neighbor (N, NE, E, ...) in image coordinates
/// (y grows downward).
fn neighbor_angle(i: usize) -> f64 {
    const DIRS: [(f64, f64); 8] = [
        (0.0, -1.0),
        (1.0, -1.0),
        (1.0, 0.0),
        (1.0, 1.0),
        (0.0, 1.0),
        (-1.0, 1.0),
        (-1.0, 0.0),
        (-1.0, -1.0),
    ];
    let (dx, dy) = DIRS[i];
    dy.atan2(dx)
}

/// Double half-resolution coordinates back to the native 1000 ppi space.
pub fn to_native(set: &MinutiaSet) -> Result<MinutiaSet, MinutiaeError> {
    if set.space != CoordSpace::Half500ppi {
        return Err(MinutiaeError::WrongSpace {
            expected: CoordSpace::Half500ppi,
            got: set.space,
        });
    }
    Ok(MinutiaSet {
        frame_index: set.frame_index,
        space: CoordSpace::Native1000ppi,
        minutiae: set
            .minutiae
            .iter()
            .map(|m| Minutia {
                x: 2.0 * m.x,
                y: 2.0 * m.y,
                theta: m.theta,
                quality: m.quality,
            })
            .collect(),
    })
}

/// The reference frame and its anchoring minutiae set.
#[derive(Debug, Clone)]
pub struct ReferenceSelection {
    pub reference_index: usize,
    pub reference_minutiae: MinutiaSet,
    pub per_frame_counts: Vec<usize>,
}

/// Pick the frame with the most minutiae; ties go to the lowest index.
/// Input sets must already be in native space, one per frame in order.
pub fn select_reference(sets: &[MinutiaSet]) -> Result<ReferenceSelection, MinutiaeError> {
    if sets.is_empty() {
        return Err(MinutiaeError::NoFrames);
    }
    for set in sets {
        if set.space != CoordSpace::Native1000ppi {
            return Err(MinutiaeError::WrongSpace {
                expected: CoordSpace::Native1000ppi,
                got: set.space,
            });
        }
    }
    let per_frame_counts: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let max = *per_frame_counts.iter().max().unwrap();
    if max == 0 {
        return Err(MinutiaeError::NoMinutiae);
    }
    let reference_index = per_frame_counts.iter().position(|&c| c == max).unwrap();
    let mut reference_minutiae = sets[reference_index].clone();
    reference_minutiae.frame_index = reference_index;
    Ok(ReferenceSelection {
        reference_index,
        reference_minutiae,
        per_frame_counts,
    })
}
