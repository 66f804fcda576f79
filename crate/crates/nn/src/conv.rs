//! Direct convolution kernels (NCHW, f64) with SAME zero padding.
//!
//! SAME here is the ceil convention: out = ceil(in / stride), total padding
//! = max(0, (out - 1) * stride + k - in), split with the smaller half at
//! the top/left.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn same_geometry(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize) -> ConvGeometry {
    let out_h = in_h.div_ceil(stride);
    let out_w = in_w.div_ceil(stride);
    let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
    let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
    ConvGeometry {
        in_h,
        in_w,
        out_h,
        out_w,
        stride,
        pad_top: pad_h / 2,
        pad_left: pad_w / 2,
    }
}

impl ConvGeometry {
    /// Output row range [lo, hi) whose input row i = o*stride + ky - pad_top
    /// stays inside [0, in_h), and likewise for columns.
    #[inline]
    fn out_range(&self, k: usize, pad: usize, limit_in: usize, limit_out: usize) -> (usize, usize) {
        let lo = if pad > k {
            (pad - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if limit_in + pad > k {
            (((limit_in + pad - k - 1) / self.stride) + 1).min(limit_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn rows(&self, ky: usize) -> (usize, usize) {
        self.out_range(ky, self.pad_top, self.in_h, self.out_h)
    }

    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        self.out_range(kx, self.pad_left, self.in_w, self.out_w)
    }
}

/// One (ky, kx) tap applied as out[oy][ox] += w * in[oy*s+ky-pad][ox*s+kx-pad].
#[inline]
fn accumulate_tap(
    geo: &ConvGeometry,
    wv: f64,
    x_plane: &[f64],
    y_plane: &mut [f64],
    ky: usize,
    kx: usize,
) {
    let (oy_lo, oy_hi) = geo.rows(ky);
    let (ox_lo, ox_hi) = geo.cols(kx);
    let s = geo.stride;
    for oy in oy_lo..oy_hi {
        let iy = oy * s + ky - geo.pad_top;
        let in_row = &x_plane[iy * geo.in_w..(iy + 1) * geo.in_w];
        let out_row = &mut y_plane[oy * geo.out_w..(oy + 1) * geo.out_w];
        if s == 1 {
            let shift = kx as isize - geo.pad_left as isize;
            for ox in ox_lo..ox_hi {
                out_row[ox] += wv * in_row[(ox as isize + shift) as usize];
            }
        } else {
            for ox in ox_lo..ox_hi {
                out_row[ox] += wv * in_row[ox * s + kx - geo.pad_left];
            }
        }
    }
}

/// Transposed tap: in_grad[iy][ix] += w * out_grad[oy][ox].
#[inline]
fn scatter_tap(
    geo: &ConvGeometry,
    wv: f64,
    dy_plane: &[f64],
    dx_plane: &mut [f64],
    ky: usize,
    kx: usize,
) {
    let (oy_lo, oy_hi) = geo.rows(ky);
    let (ox_lo, ox_hi) = geo.cols(kx);
    let s = geo.stride;
    for oy in oy_lo..oy_hi {
        let iy = oy * s + ky - geo.pad_top;
        let dy_row = &dy_plane[oy * geo.out_w..(oy + 1) * geo.out_w];
        let dx_row = &mut dx_plane[iy * geo.in_w..(iy + 1) * geo.in_w];
        for ox in ox_lo..ox_hi {
            dx_row[ox * s + kx - geo.pad_left] += wv * dy_row[ox];
        }
    }
}

/// Correlation of input and output-grad planes at one tap: the weight
/// gradient contribution.
#[inline]
fn tap_weight_grad(
    geo: &ConvGeometry,
    x_plane: &[f64],
    dy_plane: &[f64],
    ky: usize,
    kx: usize,
) -> f64 {
    let (oy_lo, oy_hi) = geo.rows(ky);
    let (ox_lo, ox_hi) = geo.cols(kx);
    let s = geo.stride;
    let mut acc = 0.0;
    for oy in oy_lo..oy_hi {
        let iy = oy * s + ky - geo.pad_top;
        let in_row = &x_plane[iy * geo.in_w..(iy + 1) * geo.in_w];
        let dy_row = &dy_plane[oy * geo.out_w..(oy + 1) * geo.out_w];
        for ox in ox_lo..ox_hi {
            acc += dy_row[ox] * in_row[ox * s + kx - geo.pad_left];
        }
    }
    acc
}

/// x: (N, Ci, H, W), w: (Co, Ci, kh, kw) -> y: (N, Co, Ho, Wo)
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    debug_assert_eq!(w.dim(1), ci);
    let geo = same_geometry(h, wd, kh, kw, stride);
    let mut y = Tensor::zeros(&[n, co, geo.out_h, geo.out_w]);
    let in_plane = h * wd;
    let out_plane = geo.out_h * geo.out_w;
    for ni in 0..n {
        for coi in 0..co {
            let y_off = (ni * co + coi) * out_plane;
            let y_plane = &mut y.data_mut()[y_off..y_off + out_plane];
            for cii in 0..ci {
                let x_off = (ni * ci + cii) * in_plane;
                let x_plane = &x.data()[x_off..x_off + in_plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data()[((coi * ci + cii) * kh + ky) * kw + kx];
                        accumulate_tap(&geo, wv, x_plane, y_plane, ky, kx);
                    }
                }
            }
        }
    }
    y
}

/// Gradients of conv2d_forward w.r.t. input and weights.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
) -> (Tensor, Tensor) {
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let geo = same_geometry(h, wd, kh, kw, stride);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let in_plane = h * wd;
    let out_plane = geo.out_h * geo.out_w;
    for ni in 0..n {
        for coi in 0..co {
            let dy_off = (ni * co + coi) * out_plane;
            let dy_plane = &dy.data()[dy_off..dy_off + out_plane];
            for cii in 0..ci {
                let x_off = (ni * ci + cii) * in_plane;
                let x_plane = &x.data()[x_off..x_off + in_plane];
                let dx_plane = &mut dx.data_mut()[x_off..x_off + in_plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((coi * ci + cii) * kh + ky) * kw + kx;
                        let wv = w.data()[widx];
                        scatter_tap(&geo, wv, dy_plane, dx_plane, ky, kx);
                        dw.data_mut()[widx] += tap_weight_grad(&geo, x_plane, dy_plane, ky, kx);
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// x: (N, C, H, W), w: (C, kh, kw) -> y: (N, C, Ho, Wo)
pub(crate) fn depthwise_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = (w.dim(1), w.dim(2));
    debug_assert_eq!(w.dim(0), c);
    let geo = same_geometry(h, wd, kh, kw, stride);
    let mut y = Tensor::zeros(&[n, c, geo.out_h, geo.out_w]);
    let in_plane = h * wd;
    let out_plane = geo.out_h * geo.out_w;
    for ni in 0..n {
        for cc in 0..c {
            let x_off = (ni * c + cc) * in_plane;
            let x_plane = &x.data()[x_off..x_off + in_plane];
            let y_off = (ni * c + cc) * out_plane;
            let y_plane = &mut y.data_mut()[y_off..y_off + out_plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data()[(cc * kh + ky) * kw + kx];
                    accumulate_tap(&geo, wv, x_plane, y_plane, ky, kx);
                }
            }
        }
    }
    y
}

pub(crate) fn depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
) -> (Tensor, Tensor) {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = (w.dim(1), w.dim(2));
    let geo = same_geometry(h, wd, kh, kw, stride);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let in_plane = h * wd;
    let out_plane = geo.out_h * geo.out_w;
    for ni in 0..n {
        for cc in 0..c {
            let x_off = (ni * c + cc) * in_plane;
            let x_plane = &x.data()[x_off..x_off + in_plane];
            let dx_plane = &mut dx.data_mut()[x_off..x_off + in_plane];
            let dy_off = (ni * c + cc) * out_plane;
            let dy_plane = &dy.data()[dy_off..dy_off + out_plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = (cc * kh + ky) * kw + kx;
                    scatter_tap(&geo, w.data()[widx], dy_plane, dx_plane, ky, kx);
                    dw.data_mut()[widx] += tap_weight_grad(&geo, x_plane, dy_plane, ky, kx);
                }
            }
        }
    }
    (dx, dw)
}
