//! Bilinear Bayer demosaicing and the green-gain visualization adjustment.
//!
//! The mosaic layout is fixed: even rows alternate R,G starting with R at
//! the top-left, odd rows alternate G,B. Each missing color at a pixel is
//! the arithmetic mean of its nearest same-color neighbors (2 or 4 of them
//! depending on the site class); borders are handled by mirroring indices
//! without repeating the edge pixel (reflect-101), which with even frame
//! dimensions always lands on a same-color site. Means are rounded half
//! away from zero.

use crate::ingest::RawFrame;
use crate::util::{reflect101, round_u8};

#[derive(Debug, thiserror::Error)]
pub enum DemosaicError {
    #[error("odd frame dimensions {width}x{height}")]
    OddDimensions { width: usize, height: usize },
}

/// Planar 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    planes: [Vec<u8>; 3],
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, planes: [Vec<u8>; 3]) -> Self {
        for p in &planes {
            assert_eq!(p.len(), width * height, "plane size");
        }
        Self {
            width,
            height,
            planes,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::new(
            width,
            height,
            [
                vec![rgb[0]; width * height],
                vec![rgb[1]; width * height],
                vec![rgb[2]; width * height],
            ],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        &self.planes[c]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.planes[c][y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.planes[c][y * self.width + x] = v;
    }

    /// Interleaved RGBRGB... bytes (PPM raster order).
    pub fn interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.width * self.height);
        for i in 0..self.width * self.height {
            out.push(self.planes[0][i]);
            out.push(self.planes[1][i]);
            out.push(self.planes[2][i]);
        }
        out
    }

    pub fn from_interleaved(width: usize, height: usize, data: &[u8]) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        let mut planes = [
            Vec::with_capacity(width * height),
            Vec::with_capacity(width * height),
            Vec::with_capacity(width * height),
        ];
        for px in data.chunks_exact(3) {
            planes[0].push(px[0]);
            planes[1].push(px[1]);
            planes[2].push(px[2]);
        }
        Self::new(width, height, planes)
    }
}

/// Color carried by the mosaic at (y, x): 0 = R, 1 = G, 2 = B.
#[inline]
pub fn bayer_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Mean of the mosaic values at `offsets` around (y, x), reflect-101 at the
/// borders, rounded half up. All offsets must land on same-color sites.
#[inline]
fn neighbor_mean(frame: &RawFrame, y: usize, x: usize, offsets: &[(isize, isize)]) -> u8 {
    let mut sum = 0u32;
    for &(dy, dx) in offsets {
        let yy = reflect101(y as isize + dy, frame.height());
        let xx = reflect101(x as isize + dx, frame.width());
        sum += frame.get(yy, xx) as u32;
    }
    let k = offsets.len() as u32;
    ((sum + k / 2) / k) as u8
}

const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAG: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];
const HORIZ: [(isize, isize); 2] = [(0, -1), (0, 1)];
const VERT: [(isize, isize); 2] = [(-1, 0), (1, 0)];

/// Reconstruct full RGB from a Bayer mosaic by per-channel bilinear
/// interpolation. The filtered color at each site is copied through
/// unchanged.
pub fn demosaic_bilinear(frame: &RawFrame) -> Result<RgbFrame, DemosaicError> {
    let (w, h) = (frame.width(), frame.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(DemosaicError::OddDimensions {
            width: w,
            height: h,
        });
    }
    let mut out = RgbFrame::new(w, h, [vec![0; w * h], vec![0; w * h], vec![0; w * h]]);
    for y in 0..h {
        for x in 0..w {
            let v = frame.get(y, x);
            let (r, g, b) = match (y % 2, x % 2) {
                // R site
                (0, 0) => (
                    v,
                    neighbor_mean(frame, y, x, &CROSS),
                    neighbor_mean(frame, y, x, &DIAG),
                ),
                // G site in an RG row: R left/right, B above/below
                (0, 1) => (
                    neighbor_mean(frame, y, x, &HORIZ),
                    v,
                    neighbor_mean(frame, y, x, &VERT),
                ),
                // G site in a GB row: R above/below, B left/right
                (1, 0) => (
                    neighbor_mean(frame, y, x, &VERT),
                    v,
                    neighbor_mean(frame, y, x, &HORIZ),
                ),
                // B site
                _ => (
                    neighbor_mean(frame, y, x, &DIAG),
                    neighbor_mean(frame, y, x, &CROSS),
                    v,
                ),
            };
            out.set(0, y, x, r);
            out.set(1, y, x, g);
            out.set(2, y, x, b);
        }
    }
    Ok(out)
}

/// Reduce the green channel by the reader's calibration gain factor.
pub fn scale_green(frame: &RgbFrame, factor: f64) -> RgbFrame {
    let mut out = frame.clone();
    for v in out.planes[1].iter_mut() {
        *v = round_u8(*v as f64 * factor);
    }
    out
}

/// Classic 256-bin cumulative-histogram equalization of the HSV value
/// channel (V = max(R, G, B)), holding hue and saturation fixed by scaling
/// all three channels by the same ratio. An image with a single distinct
/// value maps to itself.
pub fn equalize_value(frame: &RgbFrame) -> RgbFrame {
    let n = frame.width * frame.height;
    let mut hist = [0u64; 256];
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let v = frame.planes[0][i]
            .max(frame.planes[1][i])
            .max(frame.planes[2][i]);
        values.push(v);
        hist[v as usize] += 1;
    }

    let mut cdf = [0u64; 256];
    let mut acc = 0u64;
    for (i, &h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc;
    }
    let cdf_min = cdf
        .iter()
        .copied()
        .find(|&c| c > 0)
        .expect("non-empty image");

    let mut lut = [0u8; 256];
    if cdf_min == n as u64 {
        // single distinct value: identity
        for (i, l) in lut.iter_mut().enumerate() {
            *l = i as u8;
        }
    } else {
        let denom = (n as u64 - cdf_min) as f64;
        for i in 0..256 {
            if cdf[i] == 0 {
                continue;
            }
            lut[i] = round_u8((cdf[i] - cdf_min) as f64 * 255.0 / denom);
        }
    }

    let mut out = frame.clone();
    for i in 0..n {
        let v = values[i];
        if v == 0 {
            continue; // black stays black
        }
        let scale = lut[v as usize] as f64 / v as f64;
        for plane in out.planes.iter_mut() {
            plane[i] = round_u8(plane[i] as f64 * scale);
        }
    }
    out
}

pub const GREEN_GAIN_FACTOR: f64 = 0.58;

/// Visualization adjustment only: the classifier consumes the raw
/// demosaiced image, never this output.
pub fn visualize(frame: &RgbFrame) -> RgbFrame {
    equalize_value(&scale_green(frame, GREEN_GAIN_FACTOR))
}
