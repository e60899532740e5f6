//! Convolution kernels on raw NCHW buffers.
//!
//! Forward and both backward passes go through an im2col lowering, one image
//! at a time, so the inner products run as GEMMs over contiguous memory.

use crate::error::{shape_err, Result};
use crate::real::{gemm, MatRef, Real};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    /// Geometry for input `[n, c, h, w]` and kernel `[o, c, kh, kw]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected NCHW input and OIHW kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input has {} channels but kernel expects {} (input {input:?}, kernel {kernel:?})",
                    input[1], kernel[1]
                ),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let g = Self {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
        };
        if input[2] + 2 * padding.0 < kernel[2] || input[3] + 2 * padding.1 < kernel[3] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    kernel[2],
                    kernel[3],
                    input[2] + 2 * padding.0,
                    input[3] + 2 * padding.1
                ),
            ));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding.0 - self.kernel_h) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding.1 - self.kernel_w) / self.stride.1 + 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_image_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_image_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel).checked_sub(2 * padding)
}

fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let (lo, hi) = valid_columns(g, kj);
                    line[..lo].iter_mut().for_each(|v| *v = T::zero());
                    line[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let first = lo * sw + kj - pw;
                        if sw == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(sw)) {
                                *v = *x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column for kernel offset `kj` lies
/// inside the image.
fn valid_columns(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let (sw, pw, ow) = (g.stride.1, g.padding.1, g.out_w());
    let lo = pw.saturating_sub(kj).div_ceil(sw).min(ow);
    let hi = if g.in_w + pw > kj { ((g.in_w + pw - kj - 1) / sw + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let (lo, hi) = valid_columns(g, kj);
                    if lo < hi {
                        let first = lo * sw + kj - pw;
                        for (d, &v) in dst[first..].iter_mut().step_by(sw).zip(&line[lo..hi]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = x * w (+ bias)`; returns the NCHW output buffer.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut out = vec![T::zero(); g.batch * g.out_image_len()];
    let mut cols = vec![T::zero(); k * p];
    let w = MatRef::new(kernel, g.out_channels, k);
    for n in 0..g.batch {
        let image = &input[n * g.in_image_len()..(n + 1) * g.in_image_len()];
        im2col(g, image, &mut cols);
        let dst = &mut out[n * g.out_image_len()..(n + 1) * g.out_image_len()];
        gemm(w, MatRef::new(&cols, k, p), dst, false);
        if let Some(b) = bias {
            for (o, chan) in dst.chunks_mut(p).enumerate() {
                chan.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    }
    out
}

/// Gradient of the correlation with respect to its input.
pub fn conv2d_backward_input<T: Real>(g: &ConvGeometry, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut grad_in = vec![T::zero(); g.batch * g.in_image_len()];
    let mut cols = vec![T::zero(); k * p];
    let w_t = MatRef::new(kernel, g.out_channels, k).t();
    for n in 0..g.batch {
        let gy = &grad_out[n * g.out_image_len()..(n + 1) * g.out_image_len()];
        gemm(w_t, MatRef::new(gy, g.out_channels, p), &mut cols, false);
        col2im(
            g,
            &cols,
            &mut grad_in[n * g.in_image_len()..(n + 1) * g.in_image_len()],
        );
    }
    grad_in
}

/// Gradient of the correlation with respect to its kernel.
pub fn conv2d_backward_kernel<T: Real>(g: &ConvGeometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut grad_w = vec![T::zero(); g.out_channels * k];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        let image = &input[n * g.in_image_len()..(n + 1) * g.in_image_len()];
        im2col(g, image, &mut cols);
        let gy = &grad_out[n * g.out_image_len()..(n + 1) * g.out_image_len()];
        gemm(
            MatRef::new(gy, g.out_channels, p),
            MatRef::new(&cols, k, p).t(),
            &mut grad_w,
            true,
        );
    }
    grad_w
}

/// Per-channel sum of an NCHW gradient, i.e. the bias gradient.
pub fn channel_sum<T: Real>(batch: usize, channels: usize, pixels: usize, grad: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (n * channels + c) * pixels;
            *acc = *acc + grad[start..start + pixels].iter().copied().sum::<T>();
        }
    }
    out
}
