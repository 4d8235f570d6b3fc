//! Forward and backward kernels over raw tensors. The autodiff tape in
//! [`crate::graph`] records these; benchmarks call them directly.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls one image (c_in × h × w) into a (c_in·k·k) × (oh·ow) matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<()> {
    let [c_out, c_in, kh, kw] = kernel.shape();
    if kh != kw {
        return Err(Error::dim("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if x.c() != c_in {
        return Err(Error::dim(
            "conv2d",
            format!("input channels {} (axis 1) != kernel c_in {c_in} (axis 1)", x.c()),
        ));
    }
    if bias.len() != c_out {
        return Err(Error::dim(
            "conv2d",
            format!("bias length {} != kernel c_out {c_out} (axis 0)", bias.len()),
        ));
    }
    Ok(())
}

/// Cross-correlation. Returns the output and the per-image column buffers
/// (empty for pointwise convolutions) needed by the backward pass.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_conv_shapes(x, kernel, bias)?;
    let c_out = kernel.n();
    let g = ConvGeom::new(x.c(), x.h(), x.w(), kernel.h(), stride, pad)?;
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let n = x.n();
    let mut out = Tensor::zeros([n, c_out, g.oh, g.ow]);
    let mut saved = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); n * rows * ohw]
    };
    let chw = g.c_in * g.h * g.w;
    for i in 0..n {
        let dst = &mut out.data_mut()[i * c_out * ohw..(i + 1) * c_out * ohw];
        for (co, plane) in dst.chunks_mut(ohw).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        }
        let img = &x.data()[i * chw..(i + 1) * chw];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            let buf = &mut saved[i * rows * ohw..(i + 1) * rows * ohw];
            im2col(img, &g, buf);
            buf
        };
        T::gemm(false, false, c_out, ohw, rows, T::one(), kernel.data(), cols, T::one(), dst);
    }
    Ok((out, saved))
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    saved_cols: &[T],
    dy: &[T],
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let c_out = kernel.n();
    let g = ConvGeom::new(x.c(), x.h(), x.w(), kernel.h(), stride, pad)?;
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let chw = g.c_in * g.h * g.w;
    let mut dkernel = vec![T::zero(); kernel.len()];
    let mut dbias = vec![T::zero(); c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dcols = if need_dx && !g.is_pointwise() {
        vec![T::zero(); rows * ohw]
    } else {
        Vec::new()
    };
    for i in 0..x.n() {
        let dyi = &dy[i * c_out * ohw..(i + 1) * c_out * ohw];
        for (co, plane) in dyi.chunks(ohw).enumerate() {
            let s: f64 = plane.iter().map(|v| v.f64()).sum();
            dbias[co] += T::of(s);
        }
        let cols: &[T] = if g.is_pointwise() {
            &x.data()[i * chw..(i + 1) * chw]
        } else {
            &saved_cols[i * rows * ohw..(i + 1) * rows * ohw]
        };
        T::gemm(false, true, c_out, rows, ohw, T::one(), dyi, cols, T::one(), &mut dkernel);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * chw..(i + 1) * chw];
            if g.is_pointwise() {
                T::gemm(true, false, rows, ohw, c_out, T::one(), kernel.data(), dyi, T::one(), dxi);
            } else {
                T::gemm(true, false, rows, ohw, c_out, T::one(), kernel.data(), dyi, T::zero(), &mut dcols);
                col2im(&dcols, &g, dxi);
            }
        }
    }
    Ok(ConvGrads { dx, dkernel, dbias })
}

/// Window max pooling; ties resolve to the first row-major position.
/// Returns the output and, per output element, the flat argmax into `x`.
pub fn max_pool2d_forward<T: Element>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if k == 0 || stride == 0 {
        return Err(Error::dim("max_pool2d", "window and stride must be >= 1"));
    }
    let [n, c, h, w] = x.shape();
    if h < k || w < k {
        return Err(Error::dim(
            "max_pool2d",
            format!("window {k} larger than input {h}x{w} (axes 2, 3)"),
        ));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for idx in row..row + k {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

/// Per-channel spatial maximum, shape (n, c, 1, 1), with argmax positions.
pub fn global_max_pool_forward<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::dim("global_max_pool", "empty spatial extent"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for (p, plane) in x.data().chunks(hw).enumerate() {
        let mut best = 0;
        for (i, v) in plane.iter().enumerate() {
            if *v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        arg.push(p * hw + best);
    }
    Ok((Tensor::new([n, c, 1, 1], out)?, arg))
}

/// Source indices and weights of one axis of align-corners-false 2× upsampling.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub fn upsample2x_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::dim("bilinear_upsample_x2", "empty spatial extent"));
    }
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, wx0, wx1) in &tx {
                let v = wy0 * (wx0 * r0[x0].f64() + wx1 * r0[x1].f64())
                    + wy1 * (wx0 * r1[x0].f64() + wx1 * r1[x1].f64());
                out.push(T::of(v));
            }
        }
    }
    Tensor::new([n, c, 2 * h, 2 * w], out)
}

/// Transpose of the interpolation: scatters output gradients to source pixels.
pub fn upsample2x_backward<T: Element>(shape: [usize; 4], dy: &[T]) -> Vec<T> {
    let [_, _, h, w] = shape;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = vec![T::zero(); shape.iter().product()];
    let ow = 2 * w;
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.chunks(4 * h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = dplane[oy * ow + ox].f64();
                plane[y0 * w + x0] += T::of(g * wy0 * wx0);
                plane[y0 * w + x1] += T::of(g * wy0 * wx1);
                plane[y1 * w + x0] += T::of(g * wy1 * wx0);
                plane[y1 * w + x1] += T::of(g * wy1 * wx1);
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel mean and biased variance over (n, h, w), accumulated in f64.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.plane(i, ch).iter().map(|v| v.f64()).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0;
        for i in 0..n {
            sq += x
                .plane(i, ch)
                .iter()
                .map(|v| {
                    let d = v.f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_follows_floor_formula() {
        let g = ConvGeom::new(3, 7, 9, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), ((7 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1));
        assert!(ConvGeom::new(1, 2, 2, 5, 1, 0).is_err());
        assert!(ConvGeom::new(1, 2, 2, 1, 0, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.91).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_single_window() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn max_pool_ties_pick_first_row_major() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 5.0);
        let (_, arg) = max_pool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
        let (_, garg) = global_max_pool_forward(&x).unwrap();
        assert_eq!(garg, vec![0]);
    }

    #[test]
    fn max_pool_rejects_oversized_window() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(max_pool2d_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn upsample_single_pixel_broadcasts() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 2.5);
        let y = upsample2x_forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn upsample_taps_match_align_corners_false() {
        // length 2 -> 4: sources -0.25 (clamped 0), 0.25, 0.75, 1.25
        let t = upsample_taps(2);
        assert_eq!((t[0].0, t[0].1, t[0].3), (0, 1, 0.0));
        assert_eq!((t[1].0, t[1].1, t[1].3), (0, 1, 0.25));
        assert_eq!((t[2].0, t[2].1, t[2].3), (0, 1, 0.75));
        assert_eq!((t[3].0, t[3].1), (1, 1));
    }
}
