//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Shapes are validated by the callers in `autodiff`; these functions only
//! assert internal consistency.

use rayon::prelude::*;

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unrolls one image into a (Cin*K*K) x (Hout*Wout) column matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Scatter-adds a column matrix back into image layout (adjoint of `im2col`).
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    image.fill(T::zero());
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    if plane == 0 {
        return out;
    }
    out.par_chunks_mut(g.out_channels * plane)
        .enumerate()
        .for_each(|(n, dst)| {
            let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
            for (oc, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(bias[oc]);
            }
            let owned;
            let col: &[T] = if g.is_pointwise() {
                image
            } else {
                let mut buf = vec![T::zero(); patch * plane];
                im2col(g, image, &mut buf);
                owned = buf;
                &owned
            };
            T::gemm(
                g.out_channels,
                patch,
                plane,
                T::one(),
                weight,
                patch as isize,
                1,
                col,
                plane as isize,
                1,
                T::one(),
                dst,
                plane as isize,
                1,
            );
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let out_image = g.out_channels * plane;

    // Per-image partials, reduced afterwards in image order so the result
    // does not depend on the thread count.
    let partials: Vec<(Vec<T>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
            let dout = &grad_out[n * out_image..(n + 1) * out_image];
            let owned;
            let col: &[T] = if g.is_pointwise() {
                image
            } else {
                let mut buf = vec![T::zero(); patch * plane];
                im2col(g, image, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![T::zero(); g.out_channels * patch];
            // dW = dOut (Cout x P) * col^T (P x patch)
            T::gemm(
                g.out_channels,
                plane,
                patch,
                T::one(),
                dout,
                plane as isize,
                1,
                col,
                1,
                plane as isize,
                T::zero(),
                &mut dw,
                patch as isize,
                1,
            );
            let dx = need_input_grad.then(|| {
                // dcol = W^T (patch x Cout) * dOut (Cout x P)
                let mut dcol = vec![T::zero(); patch * plane];
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    1,
                    patch as isize,
                    dout,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); g.in_image()];
                    col2im(g, &dcol, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut weight_grad = vec![T::zero(); g.out_channels * patch];
    let mut input_grad = need_input_grad.then(|| Vec::with_capacity(g.batch * g.in_image()));
    for (dw, dx) in partials {
        weight_grad
            .iter_mut()
            .zip(&dw)
            .for_each(|(a, &b)| *a = *a + b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let mut bias_grad = vec![T::zero(); g.out_channels];
    for n in 0..g.batch {
        for (oc, b) in bias_grad.iter_mut().enumerate() {
            let start = n * out_image + oc * plane;
            *b = *b + grad_out[start..start + plane].iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Per-channel batch statistics over N, H and W: (mean, biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * plane;
            s = s + x[start..start + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * plane;
            v = v + x[start..start + plane]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

pub fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[y * 2 * w + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xo in 0..2 * w {
                let d = &mut dst[(y / 2) * w + xo / 2];
                *d = *d + src[y * 2 * w + xo];
            }
        }
    }
    dx
}
