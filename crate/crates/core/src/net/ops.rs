//! Forward and backward kernels for the graph's operations.
//!
//! Convolution is cross-correlation lowered to a matrix product through an
//! im2col buffer, one sample at a time. Bilinear upsampling follows the
//! half-pixel (align_corners = false) convention: output index `o` samples
//! the input at `(o + 0.5) / factor - 0.5`, clamped below at 0, with the
//! upper neighbour clamped to the last row/column.

use crate::error::{Error, Result};
use crate::net::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1 with "same" padding for a `kernel`-wide kernel at this dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument("stride and dilation must be positive".into()));
        }
        let extent = (kernel - 1) * self.dilation + 1;
        let padded = input + 2 * self.padding;
        if extent > padded {
            return Err(Error::Shape(format!(
                "kernel extent {extent} exceeds padded input {padded}"
            )));
        }
        Ok((padded - extent) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvShape {
    fn new<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeom) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let (co, ci, kh, kw) = weight.dims4()?;
        if ci != c {
            return Err(Error::Shape(format!(
                "conv input has {c} channels, weight expects {ci}"
            )));
        }
        let oh = g.output_len(h, kh)?;
        let ow = g.output_len(w, kw)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            co,
            kh,
            kw,
            oh,
            ow,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Real>(x: &[T], s: &ConvShape, g: &ConvGeom, col: &mut [T]) {
    let ohw = s.oh * s.ow;
    let pad = g.padding as isize;
    for ci in 0..s.c {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..s.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    let out_row = &mut dst[oy * s.ow..(oy + 1) * s.ow];
                    if iy < 0 || iy >= s.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - pad;
                        *o = if ix < 0 || ix >= s.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], s: &ConvShape, g: &ConvGeom, dx: &mut [T]) {
    let ohw = s.oh * s.ow;
    let pad = g.padding as isize;
    for ci in 0..s.c {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..s.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - pad;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<Tensor<T>> {
    let s = ConvShape::new(x, weight, g)?;
    if let Some(b) = bias {
        if b.numel() != s.co {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                b.numel(),
                s.co
            )));
        }
    }
    let ohw = s.oh * s.ow;
    let ckk = s.ckk();
    let in_len = s.c * s.h * s.w;
    let mut out = Tensor::zeros(&[s.n, s.co, s.oh, s.ow]);
    let pointwise = g.is_pointwise(s.kh, s.kw);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    for ni in 0..s.n {
        let xn = &x.data()[ni * in_len..(ni + 1) * in_len];
        let cols: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, &s, g, &mut col);
            &col
        };
        let yn = &mut out.data_mut()[ni * s.co * ohw..(ni + 1) * s.co * ohw];
        T::gemm(s.co, ckk, ohw, weight.data(), (ckk, 1), cols, (ohw, 1), T::zero(), yn);
        if let Some(b) = bias {
            for (co, plane) in yn.chunks_exact_mut(ohw).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let s = ConvShape::new(x, weight, g)?;
    let ohw = s.oh * s.ow;
    let ckk = s.ckk();
    let in_len = s.c * s.h * s.w;
    if dy.len() != s.n * s.co * ohw {
        return Err(Error::Shape("conv upstream gradient has wrong length".into()));
    }
    let pointwise = g.is_pointwise(s.kh, s.kw);
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); s.co];
    let mut dx = if need_input { Some(vec![T::zero(); x.numel()]) } else { None };
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    let mut dcol = if need_input && !pointwise { vec![T::zero(); ckk * ohw] } else { Vec::new() };
    for ni in 0..s.n {
        let xn = &x.data()[ni * in_len..(ni + 1) * in_len];
        let dyn_ = &dy[ni * s.co * ohw..(ni + 1) * s.co * ohw];
        let cols: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, &s, g, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(s.co, ohw, ckk, dyn_, (ohw, 1), cols, (1, ohw), T::one(), &mut dw);
        for (co, plane) in dyn_.chunks_exact(ohw).enumerate() {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            db[co] += acc;
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[ni * in_len..(ni + 1) * in_len];
            // dcol = W^T * dY
            if pointwise {
                T::gemm(ckk, s.co, ohw, weight.data(), (1, ckk), dyn_, (ohw, 1), T::zero(), dxn);
            } else {
                T::gemm(ckk, s.co, ohw, weight.data(), (1, ckk), dyn_, (ohw, 1), T::zero(), &mut dcol);
                col2im(&dcol, &s, g, dxn);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn bilinear_taps<T: Real>(in_len: usize, factor: usize) -> Vec<Tap<T>> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: T::of(src - lo as f64),
            }
        })
        .collect()
}

pub fn upsample_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be positive".into()));
    }
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(oh * ow))
    {
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.lo * w..(ry.lo + 1) * w];
            let r1 = &src[ry.hi * w..(ry.hi + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let top = r0[rx.lo] + (r0[rx.hi] - r0[rx.lo]) * rx.frac;
                let bot = r1[rx.lo] + (r1[rx.hi] - r1[rx.lo]) * rx.frac;
                dst[oy * ow + ox] = top + (bot - top) * ry.frac;
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward<T: Real>(input_shape: &[usize], factor: usize, dy: &[T]) -> Result<Vec<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape("upsample input must be rank 4".into())),
    };
    let (oh, ow) = (h * factor, w * factor);
    if dy.len() != n * c * oh * ow {
        return Err(Error::Shape("upsample upstream gradient has wrong length".into()));
    }
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (g, d) in dy.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
        for (oy, ry) in ty.iter().enumerate() {
            let wy1 = ry.frac;
            let wy0 = T::one() - wy1;
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let wx1 = rx.frac;
                let wx0 = T::one() - wx1;
                d[ry.lo * w + rx.lo] += v * wy0 * wx0;
                d[ry.lo * w + rx.hi] += v * wy0 * wx1;
                d[ry.hi * w + rx.lo] += v * wy1 * wx0;
                d[ry.hi * w + rx.hi] += v * wy1 * wx1;
            }
        }
    }
    Ok(dx)
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel standardization. Returns the output and each
/// plane's `1 / sqrt(var + eps)`.
pub fn instance_norm_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, _, h, w) = x.dims4()?;
    let hw = h * w;
    let inv_n = T::of(1.0 / hw as f64);
    let eps = T::of(INSTANCE_NORM_EPS);
    let mut out = x.clone();
    let mut inv_std = Vec::new();
    for plane in out.data_mut().chunks_exact_mut(hw) {
        let mean = plane.iter().copied().sum::<T>() * inv_n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + eps).sqrt();
        plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    Ok((out, inv_std))
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per plane.
pub fn instance_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], dy: &[T]) -> Result<Vec<T>> {
    let (_, _, h, w) = y.dims4()?;
    let hw = h * w;
    if dy.len() != y.numel() {
        return Err(Error::Shape("instance norm upstream gradient has wrong length".into()));
    }
    let inv_n = T::of(1.0 / hw as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (((yp, gp), dp), &is) in y
        .data()
        .chunks_exact(hw)
        .zip(dy.chunks_exact(hw))
        .zip(dx.chunks_exact_mut(hw))
        .zip(inv_std)
    {
        let mean_g = gp.iter().copied().sum::<T>() * inv_n;
        let mean_gy = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((d, &g), &yv) in dp.iter_mut().zip(gp).zip(yp) {
            *d = is * (g - mean_g - yv * mean_gy);
        }
    }
    Ok(dx)
}
