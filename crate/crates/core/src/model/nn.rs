//! Dense/convolution primitives with explicit backward passes.
//!
//! Feature maps are `[channels, height * width]` row-major matrices so that a
//! convolution is one GEMM over an im2col buffer and a per-pixel dense layer
//! is a plain GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

/// im2col with zero padding for an odd `k x k` kernel, stride 1, same size.
pub fn im2col(x: ArrayView2<f64>, h: usize, w: usize, k: usize) -> Array2<f64> {
    let c = x.nrows();
    let r = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    for ci in 0..c {
        let src = x.row(ci);
        let src = src.as_slice().expect("feature rows are contiguous");
        for dy in 0..k {
            for dx in 0..k {
                let mut row = cols.row_mut(ci * k * k + dy * k + dx);
                let dst = row.as_slice_mut().expect("im2col rows are contiguous");
                let oy = dy as isize - r;
                let ox = dx as isize - r;
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sbase = sy as usize * w;
                    let s0 = (sbase as isize + x_lo as isize + ox) as usize;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[s0..s0 + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let r = (k / 2) as isize;
    let mut x = Array2::<f64>::zeros((c, h * w));
    for ci in 0..c {
        let mut dst_row = x.row_mut(ci);
        let dst = dst_row.as_slice_mut().expect("feature rows are contiguous");
        for dy in 0..k {
            for dx in 0..k {
                let row = cols.row(ci * k * k + dy * k + dx);
                let oy = dy as isize - r;
                let ox = dx as isize - r;
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (sy as usize * w) as isize + x_lo as isize + ox;
                    for (j, xx) in (x_lo..x_hi).enumerate() {
                        dst[s0 as usize + j] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// `weight · input + bias` (bias broadcast over columns).
pub fn affine(weight: ArrayView2<f64>, bias: ArrayView1<f64>, input: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((weight.nrows(), input.ncols()));
    for (mut row, &b) in out.outer_iter_mut().zip(bias.iter()) {
        row.fill(b);
    }
    general_mat_mul(1.0, &weight, &input, 1.0, &mut out);
    out
}

/// Accumulates parameter gradients of an affine map and returns the input gradient.
pub fn affine_backward(
    weight: ArrayView2<f64>,
    input: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
    mut grad_weight: ArrayViewMut2<f64>,
    mut grad_bias: ArrayViewMut1<f64>,
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    general_mat_mul(1.0, &grad_out, &input.t(), 1.0, &mut grad_weight);
    grad_bias += &grad_out.sum_axis(Axis(1));
    need_input_grad.then(|| weight.t().dot(&grad_out))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x * sigmoid(x));
}

/// Multiplies `grad` by SiLU'(pre) in place.
pub fn silu_backward_inplace(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &x| {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    });
}
