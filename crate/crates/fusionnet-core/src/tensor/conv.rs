//! Raw convolution and pooling kernels shared by the tape ops.
//!
//! Loops are ordered so the innermost dimension walks contiguous memory;
//! that is what makes the desk-scale training gates affordable on one core.

use crate::error::{Error, Result};

/// Resolved convolution geometry. `oh`/`ow` follow the usual
/// `floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1` arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_output_dim(input: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> usize {
    (input + 2 * padding - dilation * (k - 1) - 1) / stride + 1
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects a 4-d input [B,C,H,W], got {input_shape:?}"
            )));
        }
        if weight_shape.len() != 4 || weight_shape[2] != weight_shape[3] {
            return Err(Error::invalid(format!(
                "conv2d expects square kernels [Cout,Cin,k,k], got {weight_shape:?}"
            )));
        }
        if input_shape[1] != weight_shape[1] {
            return Err(Error::shape_mismatch(
                "conv2d input channels vs kernel channels",
                input_shape,
                weight_shape,
            ));
        }
        let k = weight_shape[2];
        if k < 1 || stride < 1 || dilation < 1 {
            return Err(Error::invalid(format!(
                "conv2d requires k, stride, dilation >= 1 (got k={k}, stride={stride}, dilation={dilation})"
            )));
        }
        let (h, w) = (input_shape[2], input_shape[3]);
        let span = dilation * (k - 1) + 1;
        if h + 2 * padding < span || w + 2 * padding < span {
            return Err(Error::invalid(format!(
                "conv2d kernel span {span} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            batch: input_shape[0],
            cin: input_shape[1],
            h,
            w,
            cout: weight_shape[0],
            k,
            stride,
            padding,
            dilation,
            oh: conv_output_dim(h, k, stride, padding, dilation),
            ow: conv_output_dim(w, k, stride, padding, dilation),
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }
}

/// Valid output-column range for one kernel tap: the `ow` values for which
/// `ow*stride - padding + kw*dilation` lands inside `[0, w)`.
fn col_range(g: &ConvGeom, kw: usize) -> (usize, usize) {
    let off = kw as isize * g.dilation as isize - g.padding as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(g.stride)
    };
    let max_in = g.w as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = ((max_in as usize) / g.stride + 1).min(g.ow);
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        let xb = &x[b * g.cin * in_plane..(b + 1) * g.cin * in_plane];
        let ob = &mut out[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
        if let Some(bias) = bias {
            for co in 0..g.cout {
                ob[co * out_plane..(co + 1) * out_plane].fill(bias[co]);
            }
        }
        for co in 0..g.cout {
            for ci in 0..g.cin {
                let xc = &xb[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = weight[((co * g.cin + ci) * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c_lo, c_hi) = col_range(g, kw);
                        let col_off = kw as isize * g.dilation as isize - g.padding as isize;
                        for oh in 0..g.oh {
                            let ih = oh as isize * g.stride as isize - g.padding as isize
                                + kh as isize * g.dilation as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                            let orow = &mut ob[co * out_plane + oh * g.ow..co * out_plane + (oh + 1) * g.ow];
                            for ow in c_lo..c_hi {
                                let iw = (ow as isize * g.stride as isize + col_off) as usize;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution w.r.t. input, weight and (optionally) bias.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut dx = if want_dx { Some(vec![0.0; x.len()]) } else { None };
    let mut dw = if want_dw { Some(vec![0.0; weight.len()]) } else { None };
    let mut db = if want_db { Some(vec![0.0; g.cout]) } else { None };

    if let Some(db) = db.as_deref_mut() {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let go = &grad_out[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
                db[co] += go.iter().sum::<f64>();
            }
        }
    }

    for b in 0..g.batch {
        let xb = &x[b * g.cin * in_plane..(b + 1) * g.cin * in_plane];
        for co in 0..g.cout {
            let go = &grad_out[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
            for ci in 0..g.cin {
                let xc = &xb[ci * in_plane..(ci + 1) * in_plane];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + kh) * g.k + kw;
                        let wv = weight[widx];
                        let (c_lo, c_hi) = col_range(g, kw);
                        let col_off = kw as isize * g.dilation as isize - g.padding as isize;
                        let mut wsum = 0.0;
                        for oh in 0..g.oh {
                            let ih = oh as isize * g.stride as isize - g.padding as isize
                                + kh as isize * g.dilation as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let base_in = ih as usize * g.w;
                            let gorow = &go[oh * g.ow..(oh + 1) * g.ow];
                            if let Some(dxv) = dx.as_deref_mut() {
                                let dxc = &mut dxv
                                    [b * g.cin * in_plane + ci * in_plane..b * g.cin * in_plane + (ci + 1) * in_plane];
                                for ow in c_lo..c_hi {
                                    let iw = (ow as isize * g.stride as isize + col_off) as usize;
                                    dxc[base_in + iw] += wv * gorow[ow];
                                }
                            }
                            if dw.is_some() {
                                let xrow = &xc[base_in..base_in + g.w];
                                for ow in c_lo..c_hi {
                                    let iw = (ow as isize * g.stride as isize + col_off) as usize;
                                    wsum += xrow[iw] * gorow[ow];
                                }
                            }
                        }
                        if let Some(dwv) = dw.as_deref_mut() {
                            dwv[widx] += wsum;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn pool_output_dim(input: usize, window: usize, stride: usize) -> usize {
    (input - window) / stride + 1
}

/// Max pooling that records the flat input index of each window winner
/// (first occurrence in row-major order on ties) so backward can route
/// the gradient to exactly one element per window.
pub fn max_pool_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<u32>) {
    let oh = pool_output_dim(h, window, stride);
    let ow = pool_output_dim(w, window, stride);
    let plane = h * w;
    let mut out = vec![0.0; batch * channels * oh * ow];
    let mut arg = vec![0u32; out.len()];
    let mut o = 0;
    for bc in 0..batch * channels {
        let xc = &x[bc * plane..(bc + 1) * plane];
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..window {
                    let row = (ohi * stride + dy) * w + owi * stride;
                    for dxi in 0..window {
                        let v = xc[row + dxi];
                        if v > best {
                            best = v;
                            best_idx = row + dxi;
                        }
                    }
                }
                out[o] = best;
                arg[o] = (bc * plane + best_idx) as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = pool_output_dim(h, window, stride);
    let ow = pool_output_dim(w, window, stride);
    let plane = h * w;
    let inv = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; batch * channels * oh * ow];
    let mut o = 0;
    for bc in 0..batch * channels {
        let xc = &x[bc * plane..(bc + 1) * plane];
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut s = 0.0;
                for dy in 0..window {
                    let row = (ohi * stride + dy) * w + owi * stride;
                    for dxi in 0..window {
                        s += xc[row + dxi];
                    }
                }
                out[o] = s * inv;
                o += 1;
            }
        }
    }
    out
}
