//! im2col convolution kernels shared by the tape.

use crate::error::{shape_err, Result};

use super::scalar::{gemm, Layout};
use super::Scalar;

/// Geometry of a 2-D cross-correlation over `[N, C, H, W]` input with an
/// `[F, C, kh, kw]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return shape_err(format!(
                "conv2d expects 4-d input and kernel, got input {input:?} and kernel {kernel:?}"
            ));
        }
        if input[1] != kernel[1] {
            return shape_err(format!(
                "conv2d channel mismatch: input {input:?} has {} channels, kernel {kernel:?} expects {}",
                input[1], kernel[1]
            ));
        }
        if stride == 0 || dilation == 0 {
            return shape_err(format!("conv2d needs stride >= 1 and dilation >= 1, got {stride}/{dilation}"));
        }
        let extent = |len: usize, k: usize| -> Option<usize> {
            let span = dilation * (k - 1) + 1;
            let padded = len + 2 * padding;
            (padded >= span).then(|| (padded - span) / stride + 1)
        };
        let (Some(out_h), Some(out_w)) = (extent(input[2], kernel[2]), extent(input[3], kernel[3])) else {
            return shape_err(format!(
                "conv2d output would be empty: input {input:?}, kernel {kernel:?}, padding {padding}, dilation {dilation}"
            ));
        };
        Ok(ConvGeom {
            batch: input[0],
            in_ch: input[1],
            in_h: input[2],
            in_w: input[3],
            out_ch: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            stride,
            padding,
            dilation,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn source_index(&self, out: usize, tap: usize, len: usize) -> Option<usize> {
        let pos = (out * self.stride + tap * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col<F: Scalar>(&self, img: &[F], cols: &mut [F]) {
        let plane = self.col_cols();
        for c in 0..self.in_ch {
            let src_plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let Some(iy) = self.source_index(oy, ki, self.in_h) else {
                            line.fill(F::zero());
                            continue;
                        };
                        let src = &src_plane[iy * self.in_w..(iy + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            *v = match self.source_index(ox, kj, self.in_w) {
                                Some(ix) => src[ix],
                                None => F::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], img: &mut [F]) {
        let plane = self.col_cols();
        for c in 0..self.in_ch {
            let dst_plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source_index(oy, ki, self.in_h) else { continue };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut dst_plane[iy * self.in_w..(iy + 1) * self.in_w];
                        for (ox, &g) in line.iter().enumerate() {
                            if let Some(ix) = self.source_index(ox, kj, self.in_w) {
                                dst[ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Scalar>(&self, input: &[F], kernel: &[F], bias: Option<&[F]>) -> Vec<F> {
        let (rows, cols_n) = (self.col_rows(), self.col_cols());
        let mut out = vec![F::zero(); self.batch * self.out_ch * cols_n];
        let mut cols = if self.pointwise() { Vec::new() } else { vec![F::zero(); rows * cols_n] };
        for n in 0..self.batch {
            let img = &input[n * self.image_len()..(n + 1) * self.image_len()];
            let dst = &mut out[n * self.out_ch * cols_n..(n + 1) * self.out_ch * cols_n];
            if let Some(b) = bias {
                for (f, chunk) in dst.chunks_mut(cols_n).enumerate() {
                    chunk.fill(b[f]);
                }
            }
            let src: &[F] = if self.pointwise() {
                img
            } else {
                self.im2col(img, &mut cols);
                &cols
            };
            gemm(
                kernel,
                Layout::row_major(self.out_ch, rows),
                src,
                Layout::row_major(rows, cols_n),
                F::one(),
                dst,
                Layout::row_major(self.out_ch, cols_n),
            );
        }
        out
    }

    /// Returns `(d_input, d_kernel, d_bias)`; each is computed only when asked for.
    pub fn backward<F: Scalar>(
        &self,
        input: &[F],
        kernel: &[F],
        grad_out: &[F],
        want: [bool; 3],
    ) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
        let (rows, cols_n) = (self.col_rows(), self.col_cols());
        let [want_input, want_kernel, want_bias] = want;
        let mut d_input = want_input.then(|| vec![F::zero(); input.len()]);
        let mut d_kernel = want_kernel.then(|| vec![F::zero(); kernel.len()]);
        let mut d_bias = want_bias.then(|| vec![F::zero(); self.out_ch]);
        let mut cols = if self.pointwise() { Vec::new() } else { vec![F::zero(); rows * cols_n] };
        let mut d_cols = if self.pointwise() || !want_input {
            Vec::new()
        } else {
            vec![F::zero(); rows * cols_n]
        };
        for n in 0..self.batch {
            let img = &input[n * self.image_len()..(n + 1) * self.image_len()];
            let g = &grad_out[n * self.out_ch * cols_n..(n + 1) * self.out_ch * cols_n];
            if let Some(db) = d_bias.as_mut() {
                for (f, chunk) in g.chunks(cols_n).enumerate() {
                    db[f] += chunk.iter().copied().sum::<F>();
                }
            }
            if let Some(dk) = d_kernel.as_mut() {
                let src: &[F] = if self.pointwise() {
                    img
                } else {
                    self.im2col(img, &mut cols);
                    &cols
                };
                gemm(
                    g,
                    Layout::row_major(self.out_ch, cols_n),
                    src,
                    Layout::row_major(rows, cols_n).transposed(),
                    F::one(),
                    dk,
                    Layout::row_major(self.out_ch, rows),
                );
            }
            if let Some(di) = d_input.as_mut() {
                let di = &mut di[n * self.image_len()..(n + 1) * self.image_len()];
                let kt = Layout::row_major(self.out_ch, rows).transposed();
                if self.pointwise() {
                    gemm(kernel, kt, g, Layout::row_major(self.out_ch, cols_n), F::zero(), di, Layout::row_major(rows, cols_n));
                } else {
                    gemm(kernel, kt, g, Layout::row_major(self.out_ch, cols_n), F::zero(), &mut d_cols, Layout::row_major(rows, cols_n));
                    self.col2im(&d_cols, di);
                }
            }
        }
        (d_input, d_kernel, d_bias)
    }
}
