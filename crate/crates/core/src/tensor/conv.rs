//! 2-D cross-correlation over `[B, C, H, W]` inputs and
//! `[Cout, Cin, kh, kw]` kernels, with cyclic or zero padding.
//!
//! For every output element the products are accumulated in `(c, j, k)`
//! order starting from zero, so results do not depend on how the batch is
//! split across threads.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    /// Indices wrap modulo the input size.
    Cyclic,
    /// Out-of-range taps read zero.
    Zero,
}

impl PaddingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PaddingMode::Cyclic => "cyclic",
            PaddingMode::Zero => "zero",
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(PaddingMode::Cyclic),
            "zero" => Ok(PaddingMode::Zero),
            other => Err(Error::Config(format!("unknown padding mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: PaddingMode,
    /// Padding per axis, `[rows, cols]`.
    pub pad: [usize; 2],
}

impl ConvSpec {
    pub fn new(padding: PaddingMode, stride: usize, pad: [usize; 2]) -> Self {
        Self {
            stride,
            padding,
            pad,
        }
    }

    /// `floor(k / 2)` padding per axis: same-size output at stride 1 for odd kernels.
    pub fn same(padding: PaddingMode, stride: usize, kernel: [usize; 2]) -> Self {
        Self::new(padding, stride, [kernel[0] / 2, kernel[1] / 2])
    }

    pub fn output_dims(&self, input: [usize; 2], kernel: [usize; 2]) -> Result<[usize; 2]> {
        if self.stride == 0 {
            return Err(Error::InvalidConv("stride must be positive".into()));
        }
        let mut out = [0; 2];
        for axis in 0..2 {
            let padded = input[axis] + 2 * self.pad[axis];
            if padded < kernel[axis] {
                return Err(Error::InvalidConv(format!(
                    "kernel extent {} exceeds padded input {} on axis {axis}",
                    kernel[axis], padded
                )));
            }
            out[axis] = (padded - kernel[axis]) / self.stride + 1;
            if self.padding == PaddingMode::Cyclic && out[axis] * self.stride != input[axis] {
                return Err(Error::InvalidConv(format!(
                    "cyclic padding needs output {} x stride {} == input {} on axis {axis}",
                    out[axis], self.stride, input[axis]
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    out_start: usize,
    in_start: usize,
    len: usize,
}

/// Precomputed tap geometry shared by the forward and both backward kernels.
struct Plan {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    stride: usize,
    /// `rows[oy * kh + j]`: input row read by output row `oy` at tap `j`.
    rows: Vec<Option<usize>>,
    /// Per kernel column, runs of output columns whose input columns advance by `stride`.
    cols: Vec<Vec<Segment>>,
}

fn tap(spec: &ConvSpec, out: usize, k: usize, pad: usize, size: usize) -> Option<usize> {
    let pos = (out * spec.stride + k) as isize - pad as isize;
    match spec.padding {
        PaddingMode::Cyclic => Some(pos.rem_euclid(size as isize) as usize),
        PaddingMode::Zero => (0..size as isize).contains(&pos).then_some(pos as usize),
    }
}

impl Plan {
    fn new(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        let [batch, cin, h, w] = match x_shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => return Err(Error::shape("conv2d", format!("input must be rank 4, got {x_shape:?}"))),
        };
        let [cout, wcin, kh, kw] = match w_shape {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {w_shape:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {wcin} (input {x_shape:?}, kernel {w_shape:?})"),
            ));
        }
        let [hout, wout] = spec.output_dims([h, w], [kh, kw])?;
        let mut rows = Vec::with_capacity(hout * kh);
        for oy in 0..hout {
            for j in 0..kh {
                rows.push(tap(spec, oy, j, spec.pad[0], h));
            }
        }
        let mut cols = Vec::with_capacity(kw);
        for k in 0..kw {
            let mut segs: Vec<Segment> = Vec::new();
            for ox in 0..wout {
                let Some(ix) = tap(spec, ox, k, spec.pad[1], w) else { continue };
                match segs.last_mut() {
                    Some(s) if s.out_start + s.len == ox && s.in_start + s.len * spec.stride == ix => {
                        s.len += 1
                    }
                    _ => segs.push(Segment { out_start: ox, in_start: ix, len: 1 }),
                }
            }
            cols.push(segs);
        }
        Ok(Self { batch, cin, cout, h, w, kh, kw, hout, wout, stride: spec.stride, rows, cols })
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.hout * self.wout
    }
}

/// Cross-correlation with the padding described by `spec`.
/// Output shape is `[B, Cout, Hout, Wout]` with `Hout = (H + 2 pad - kh) / stride + 1`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let p = Plan::new(x.shape(), w.shape(), spec)?;
    let (xd, wd) = (x.data(), w.data());
    let per_sample = p.cout * p.out_plane();
    let mut out = vec![0.0; p.batch * per_sample];
    out.par_chunks_mut(per_sample).enumerate().for_each(|(b, out_b)| {
        let x_b = &xd[b * p.cin * p.in_plane()..(b + 1) * p.cin * p.in_plane()];
        for (d, plane) in out_b.chunks_mut(p.out_plane()).enumerate() {
            for c in 0..p.cin {
                let x_c = &x_b[c * p.in_plane()..(c + 1) * p.in_plane()];
                for j in 0..p.kh {
                    for k in 0..p.kw {
                        let wv = wd[((d * p.cin + c) * p.kh + j) * p.kw + k];
                        for oy in 0..p.hout {
                            let Some(iy) = p.rows[oy * p.kh + j] else { continue };
                            let xrow = &x_c[iy * p.w..(iy + 1) * p.w];
                            let orow = &mut plane[oy * p.wout..(oy + 1) * p.wout];
                            for s in &p.cols[k] {
                                let o = &mut orow[s.out_start..s.out_start + s.len];
                                if p.stride == 1 {
                                    let xs = &xrow[s.in_start..s.in_start + s.len];
                                    for (ov, &xv) in o.iter_mut().zip(xs) {
                                        *ov += wv * xv;
                                    }
                                } else {
                                    for (t, ov) in o.iter_mut().enumerate() {
                                        *ov += wv * xrow[s.in_start + t * p.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![p.batch, p.cout, p.hout, p.wout], out)
}

/// Gradient of `sum(grad_out * conv2d(x, w))` with respect to `x`.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    x_shape: &[usize],
    w: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let p = Plan::new(x_shape, w.shape(), spec)?;
    check_grad_shape(grad_out, &p)?;
    let (gd, wd) = (grad_out.data(), w.data());
    let per_sample = p.cin * p.in_plane();
    let mut gx = vec![0.0; p.batch * per_sample];
    gx.par_chunks_mut(per_sample).enumerate().for_each(|(b, gx_b)| {
        let g_b = &gd[b * p.cout * p.out_plane()..(b + 1) * p.cout * p.out_plane()];
        for d in 0..p.cout {
            let g_d = &g_b[d * p.out_plane()..(d + 1) * p.out_plane()];
            for c in 0..p.cin {
                let gx_c = &mut gx_b[c * p.in_plane()..(c + 1) * p.in_plane()];
                for j in 0..p.kh {
                    for k in 0..p.kw {
                        let wv = wd[((d * p.cin + c) * p.kh + j) * p.kw + k];
                        for oy in 0..p.hout {
                            let Some(iy) = p.rows[oy * p.kh + j] else { continue };
                            let grow = &g_d[oy * p.wout..(oy + 1) * p.wout];
                            let xrow = &mut gx_c[iy * p.w..(iy + 1) * p.w];
                            for s in &p.cols[k] {
                                let gs = &grow[s.out_start..s.out_start + s.len];
                                if p.stride == 1 {
                                    let xs = &mut xrow[s.in_start..s.in_start + s.len];
                                    for (xv, &gv) in xs.iter_mut().zip(gs) {
                                        *xv += wv * gv;
                                    }
                                } else {
                                    for (t, &gv) in gs.iter().enumerate() {
                                        xrow[s.in_start + t * p.stride] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape.to_vec(), gx)
}

/// Gradient of `sum(grad_out * conv2d(x, w))` with respect to `w`.
///
/// Per-sample partial gradients are summed in batch order.
pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor> {
    let p = Plan::new(x.shape(), w_shape, spec)?;
    check_grad_shape(grad_out, &p)?;
    let (gd, xd) = (grad_out.data(), x.data());
    let wlen = p.cout * p.cin * p.kh * p.kw;
    let partials: Vec<Vec<f64>> = (0..p.batch)
        .into_par_iter()
        .map(|b| {
            let mut gw = vec![0.0; wlen];
            let x_b = &xd[b * p.cin * p.in_plane()..(b + 1) * p.cin * p.in_plane()];
            let g_b = &gd[b * p.cout * p.out_plane()..(b + 1) * p.cout * p.out_plane()];
            for d in 0..p.cout {
                let g_d = &g_b[d * p.out_plane()..(d + 1) * p.out_plane()];
                for c in 0..p.cin {
                    let x_c = &x_b[c * p.in_plane()..(c + 1) * p.in_plane()];
                    for j in 0..p.kh {
                        for k in 0..p.kw {
                            let mut acc = 0.0;
                            for oy in 0..p.hout {
                                let Some(iy) = p.rows[oy * p.kh + j] else { continue };
                                let grow = &g_d[oy * p.wout..(oy + 1) * p.wout];
                                let xrow = &x_c[iy * p.w..(iy + 1) * p.w];
                                for s in &p.cols[k] {
                                    let gs = &grow[s.out_start..s.out_start + s.len];
                                    if p.stride == 1 {
                                        let xs = &xrow[s.in_start..s.in_start + s.len];
                                        acc += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                                    } else {
                                        for (t, &gv) in gs.iter().enumerate() {
                                            acc += gv * xrow[s.in_start + t * p.stride];
                                        }
                                    }
                                }
                            }
                            gw[((d * p.cin + c) * p.kh + j) * p.kw + k] = acc;
                        }
                    }
                }
            }
            gw
        })
        .collect();
    let mut total = vec![0.0; wlen];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Tensor::new(w_shape.to_vec(), total)
}

fn check_grad_shape(grad_out: &Tensor, p: &Plan) -> Result<()> {
    let expected = [p.batch, p.cout, p.hout, p.wout];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d backward",
            format!("output gradient {:?}, expected {expected:?}", grad_out.shape()),
        ));
    }
    Ok(())
}
