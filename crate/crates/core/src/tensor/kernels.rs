//! Convolution kernels built on im2col / col2im and GEMM.
//!
//! Work is split per batch item; every reduction across items runs
//! sequentially in item order so results do not depend on the thread count.

use rayon::prelude::*;

use super::Scalar;

/// Geometry of a square-kernel 2D (transposed) convolution.
///
/// `img_*` describe the side that is unfolded into columns (the input of a
/// convolution, the output of a transposed convolution); `col_*` the other.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub img_c: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub col_h: usize,
    pub col_w: usize,
    pub other_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    fn img_len(&self) -> usize {
        self.img_c * self.img_h * self.img_w
    }

    fn col_positions(&self) -> usize {
        self.col_h * self.col_w
    }

    fn col_rows(&self) -> usize {
        self.img_c * self.kernel * self.kernel
    }

    fn other_len(&self) -> usize {
        self.other_c * self.col_positions()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&v| v > 0)
}

fn im2col<T: Scalar>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let k = g.kernel;
    let positions = g.col_positions();
    for c in 0..g.img_c {
        let plane = &img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.col_h {
                    let dst = &mut out[oy * g.col_w..(oy + 1) * g.col_w];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.img_w..(iy as usize + 1) * g.img_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.img_w as isize {
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

/// Scatter-adds columns back into the image (adjoint of [`im2col`]).
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let k = g.kernel;
    let positions = g.col_positions();
    for c in 0..g.img_c {
        let plane = &mut img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.col_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.img_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.img_w..(iy as usize + 1) * g.img_w];
                    for ox in 0..g.col_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.img_w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.col_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(bias) = bias {
        for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn bias_grad<T: Scalar>(dout: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let start = (n * channels + c) * plane;
            *d = *d + dout[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Forward cross-correlation. `weight` is `(C_out, C_in, k, k)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Geometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.other_len()];
    let positions = g.col_positions();
    out.par_chunks_mut(g.other_len())
        .zip(x.par_chunks(g.img_len()))
        .for_each(|(out_n, x_n)| {
            if g.is_pointwise() {
                T::gemm(false, false, g.other_c, positions, g.img_c, T::one(), weight, x_n, T::zero(), out_n);
            } else {
                let mut cols = vec![T::zero(); g.col_rows() * positions];
                im2col(x_n, g, &mut cols);
                T::gemm(false, false, g.other_c, positions, g.col_rows(), T::one(), weight, &cols, T::zero(), out_n);
            }
            add_bias(out_n, bias, positions);
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    batch: usize,
    g: &Geometry,
    weight: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let positions = g.col_positions();
    let rows = g.col_rows();
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); batch * g.img_len()];
        dx.par_chunks_mut(g.img_len())
            .zip(dout.par_chunks(g.other_len()))
            .for_each(|(dx_n, dout_n)| {
                if g.is_pointwise() {
                    T::gemm(true, false, g.img_c, positions, g.other_c, T::one(), weight, dout_n, T::zero(), dx_n);
                } else {
                    let mut dcols = vec![T::zero(); rows * positions];
                    T::gemm(true, false, rows, positions, g.other_c, T::one(), weight, dout_n, T::zero(), &mut dcols);
                    col2im(&dcols, g, dx_n);
                }
            });
        dx
    });
    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.other_c * rows];
        let mut cols = vec![T::zero(); rows * positions];
        for n in 0..batch {
            let x_n = &x[n * g.img_len()..(n + 1) * g.img_len()];
            let dout_n = &dout[n * g.other_len()..(n + 1) * g.other_len()];
            let cols_ref: &[T] = if g.is_pointwise() {
                x_n
            } else {
                im2col(x_n, g, &mut cols);
                &cols
            };
            T::gemm(false, true, g.other_c, rows, positions, T::one(), dout_n, cols_ref, T::one(), &mut dw);
        }
        dw
    });
    let bias = need[2].then(|| bias_grad(dout, batch, g.other_c, positions));
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Transposed convolution. `weight` is `(C_in, C_out, k, k)`; the input of the
/// transposed convolution lives on the column side of `g`.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Geometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.img_len()];
    let positions = g.col_positions();
    let rows = g.col_rows();
    out.par_chunks_mut(g.img_len())
        .zip(x.par_chunks(g.other_len()))
        .for_each(|(out_n, x_n)| {
            let mut cols = vec![T::zero(); rows * positions];
            T::gemm(true, false, rows, positions, g.other_c, T::one(), weight, x_n, T::zero(), &mut cols);
            col2im(&cols, g, out_n);
            add_bias(out_n, bias, g.img_h * g.img_w);
        });
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    batch: usize,
    g: &Geometry,
    weight: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let positions = g.col_positions();
    let rows = g.col_rows();
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); batch * g.other_len()];
        dx.par_chunks_mut(g.other_len())
            .zip(dout.par_chunks(g.img_len()))
            .for_each(|(dx_n, dout_n)| {
                let mut dcols = vec![T::zero(); rows * positions];
                im2col(dout_n, g, &mut dcols);
                T::gemm(false, false, g.other_c, positions, rows, T::one(), weight, &dcols, T::zero(), dx_n);
            });
        dx
    });
    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.other_c * rows];
        let mut dcols = vec![T::zero(); rows * positions];
        for n in 0..batch {
            let x_n = &x[n * g.other_len()..(n + 1) * g.other_len()];
            let dout_n = &dout[n * g.img_len()..(n + 1) * g.img_len()];
            im2col(dout_n, g, &mut dcols);
            T::gemm(false, true, g.other_c, rows, positions, T::one(), x_n, &dcols, T::one(), &mut dw);
        }
        dw
    });
    let bias = need[2].then(|| bias_grad(dout, batch, g.img_c, g.img_h * g.img_w));
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv2d_output_size(5, 3, 1, 1), Some(5));
        assert_eq!(conv2d_output_size(6, 2, 2, 0), Some(3));
        assert_eq!(conv2d_output_size(1, 3, 1, 0), None);
        assert_eq!(conv_transpose2d_output_size(3, 2, 2, 0), Some(6));
        assert_eq!(conv_transpose2d_output_size(0, 2, 2, 0), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geometry {
            img_c: 2,
            img_h: 5,
            img_w: 4,
            col_h: 3,
            col_w: 2,
            other_c: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let img: Vec<f64> = (0..g.img_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_rand: Vec<f64> = (0..g.col_rows() * g.col_positions())
            .map(|i| (i as f64 * 1.3).cos())
            .collect();
        let mut cols = vec![0.0; cols_rand.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_rand, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_rand).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
