//! Numeric kernels behind the differentiable operations: same-padded
//! convolution (im2col + GEMM), 2x2 max pooling, and 2x bilinear upsampling.
//! These work on raw tensors; the tape in [`crate::tape`] wires them together.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// `out[M×N] = a[M×K] · b[K×N] (+ out if accumulate)`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    out: &mut [f32],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < out.len());
    // SAFETY: the asserted bounds above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            out.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of one same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape) -> Result<Self> {
        if weight.channels != input.channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input,
                right: weight,
            });
        }
        if weight.height != weight.width || weight.height % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be square with odd size, got {weight}"
            )));
        }
        Ok(ConvGeometry {
            input,
            out_channels: weight.batch,
            kernel: weight.height,
        })
    }

    pub fn output(&self) -> Shape {
        Shape::new(
            self.input.batch,
            self.out_channels,
            self.input.height,
            self.input.width,
        )
    }

    fn patch(&self) -> usize {
        self.input.channels * self.kernel * self.kernel
    }

    /// Multiply-adds times two, the usual FLOP convention.
    pub fn flops(&self) -> u64 {
        2 * (self.input.batch * self.out_channels * self.patch() * self.input.plane()) as u64
    }
}

/// Column range `[lo, hi)` of output pixels whose source `x + d` lies inside `[0, w)`.
fn valid_span(w: usize, d: isize) -> (usize, usize) {
    let lo = (-d).clamp(0, w as isize) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col(input: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (h, w, k) = (g.input.height, g.input.width, g.kernel);
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..g.input.channels {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    line[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeometry, grad_input: &mut [f32]) {
    let (h, w, k) = (g.input.height, g.input.width, g.kernel);
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..g.input.channels {
        let dst = &mut grad_input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                let s0 = (lo as isize + dx) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + hi - lo];
                    for (d, &v) in drow.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Same-padded cross-correlation. `bias`, when present, holds one value per
/// output channel.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape())?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: weight.shape(),
                right: b.shape(),
            });
        }
    }
    let out_shape = g.output();
    let mut out = vec![0.0f32; out_shape.numel()];
    let plane = g.input.plane();
    let patch = g.patch();
    let in_per = g.input.channels * plane;
    let out_per = g.out_channels * plane;
    let direct = g.kernel == 1;
    let mut cols = if direct { Vec::new() } else { vec![0.0f32; patch * plane] };
    for b in 0..g.input.batch {
        let x = &input.data()[b * in_per..(b + 1) * in_per];
        let cols_ref: &[f32] = if direct {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        let o = &mut out[b * out_per..(b + 1) * out_per];
        gemm(
            g.out_channels,
            patch,
            plane,
            weight.data(),
            (patch, 1),
            cols_ref,
            (plane, 1),
            o,
            (plane, 1),
            false,
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                o[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape())?;
    let plane = g.input.plane();
    let patch = g.patch();
    let in_per = g.input.channels * plane;
    let out_per = g.out_channels * plane;
    let direct = g.kernel == 1;

    let mut d_input = vec![0.0f32; input.len()];
    let mut d_weight = vec![0.0f32; weight.len()];
    let mut d_bias = vec![0.0f32; g.out_channels];
    let mut cols = if direct { Vec::new() } else { vec![0.0f32; patch * plane] };
    let mut d_cols = vec![0.0f32; patch * plane];

    for b in 0..g.input.batch {
        let x = &input.data()[b * in_per..(b + 1) * in_per];
        let dy = &grad_out.data()[b * out_per..(b + 1) * out_per];
        for (co, db) in d_bias.iter_mut().enumerate() {
            *db += dy[co * plane..(co + 1) * plane].iter().sum::<f32>();
        }
        let cols_ref: &[f32] = if direct {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        // dWᵀ += cols · dYᵀ, so both operands are read along their rows
        gemm(
            patch,
            plane,
            g.out_channels,
            cols_ref,
            (plane, 1),
            dy,
            (1, plane),
            &mut d_weight,
            (1, patch),
            true,
        );
        // dcols = Wᵀ · dY
        gemm(
            patch,
            g.out_channels,
            plane,
            weight.data(),
            (1, patch),
            dy,
            (plane, 1),
            &mut d_cols,
            (plane, 1),
            false,
        );
        let dx = &mut d_input[b * in_per..(b + 1) * in_per];
        if direct {
            dx.iter_mut().zip(&d_cols).for_each(|(a, &v)| *a += v);
        } else {
            col2im_add(&d_cols, &g, dx);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), d_input)?,
        weight: Tensor::from_vec(weight.shape(), d_weight)?,
        bias: d_bias,
    })
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index that won (first maximum in row-major scan).
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let s = input.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(Error::Divisibility {
            what: format!("max-pool input {s}"),
            extent: if s.height % 2 != 0 { s.height } else { s.width },
            divisor: 2,
        });
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_shape = Shape::new(s.batch, s.channels, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let data = input.data();
    for bc in 0..s.batch * s.channels {
        let base = bc * s.plane();
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = base + 2 * y * s.width + 2 * x;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * s.width + 2 * x + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

pub fn maxpool2_backward(input_shape: Shape, argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let d = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        d[idx as usize] += v;
    }
    g
}

/// Source taps for one output coordinate of a 2x half-pixel bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(len: usize) -> Vec<Tap> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f32);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(len - 1),
                frac: src - lo as f32,
            }
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel centers and clamped edges.
/// Interpolation uses the `a + t·(b − a)` form so constant inputs stay
/// exactly constant.
pub fn upsample2_forward(input: &Tensor) -> Tensor {
    let s = input.shape();
    let (oh, ow) = (2 * s.height, 2 * s.width);
    let ty = taps(s.height);
    let tx = taps(s.width);
    let mut out = Vec::with_capacity(s.batch * s.channels * oh * ow);
    for bc in 0..s.batch * s.channels {
        let p = &input.data()[bc * s.plane()..(bc + 1) * s.plane()];
        for yt in &ty {
            let r0 = &p[yt.lo * s.width..(yt.lo + 1) * s.width];
            let r1 = &p[yt.hi * s.width..(yt.hi + 1) * s.width];
            for xt in &tx {
                let a = r0[xt.lo] + xt.frac * (r0[xt.hi] - r0[xt.lo]);
                let b = r1[xt.lo] + xt.frac * (r1[xt.hi] - r1[xt.lo]);
                out.push(a + yt.frac * (b - a));
            }
        }
    }
    Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out)
        .expect("upsample output shape is consistent")
}

pub fn upsample2_backward(input_shape: Shape, grad_out: &Tensor) -> Tensor {
    let s = input_shape;
    let ow = 2 * s.width;
    let ty = taps(s.height);
    let tx = taps(s.width);
    let mut g = Tensor::zeros(s);
    let plane_out = 4 * s.plane();
    for bc in 0..s.batch * s.channels {
        let go = &grad_out.data()[bc * plane_out..(bc + 1) * plane_out];
        let gi = &mut g.data_mut()[bc * s.plane()..(bc + 1) * s.plane()];
        for (oy, yt) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let v = go[oy * ow + ox];
                let (wy1, wx1) = (yt.frac, xt.frac);
                let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                gi[yt.lo * s.width + xt.lo] += v * wy0 * wx0;
                gi[yt.lo * s.width + xt.hi] += v * wy0 * wx1;
                gi[yt.hi * s.width + xt.lo] += v * wy1 * wx0;
                gi[yt.hi * s.width + xt.hi] += v * wy1 * wx1;
            }
        }
    }
    g
}
