//! Minimal CPU neural-network building blocks with hand-written backward
//! passes. Everything is `f32`, single-threaded, and deterministic: the same
//! seed and inputs produce bit-identical parameters on every run.

mod adam;
mod conv;
mod dense;

pub use adam::{Adam, AdamConfig};
pub use conv::{col2im_accumulate, im2col, Conv2d, Conv2dGrad};
pub use dense::{Dense, DenseGrad};

use ndarray::Array4;

/// 2x2 max pooling with stride 2. Returns the pooled map and the in-window
/// argmax (0..4) needed by the backward pass.
pub fn maxpool2(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((n, c, ho, wo));
    let mut arg = Array4::<u8>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[(ni, ci, 2 * yo + dy, 2 * xo + dx)];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[(ni, ci, yo, xo)] = best;
                    arg[(ni, ci, yo, xo)] = best_k;
                }
            }
        }
    }
    (out, arg)
}

/// Backward of [`maxpool2`]: routes each output gradient to its argmax pixel.
pub fn maxpool2_backward(dy: &Array4<f32>, arg: &Array4<u8>, in_h: usize, in_w: usize) -> Array4<f32> {
    let (n, c, ho, wo) = dy.dim();
    let mut dx = Array4::<f32>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..ho {
                for xo in 0..wo {
                    let k = arg[(ni, ci, yo, xo)];
                    let (dy_off, dx_off) = ((k / 2) as usize, (k % 2) as usize);
                    dx[(ni, ci, 2 * yo + dy_off, 2 * xo + dx_off)] += dy[(ni, ci, yo, xo)];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nearest2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(ni, ci, y, xx)];
                    out[(ni, ci, 2 * y, 2 * xx)] = v;
                    out[(ni, ci, 2 * y, 2 * xx + 1)] = v;
                    out[(ni, ci, 2 * y + 1, 2 * xx)] = v;
                    out[(ni, ci, 2 * y + 1, 2 * xx + 1)] = v;
                }
            }
        }
    }
    out
}

/// Backward of [`upsample_nearest2`]: sums each 2x2 block.
pub fn upsample_nearest2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dx[(ni, ci, y, xx)] = dy[(ni, ci, 2 * y, 2 * xx)]
                        + dy[(ni, ci, 2 * y, 2 * xx + 1)]
                        + dy[(ni, ci, 2 * y + 1, 2 * xx)]
                        + dy[(ni, ci, 2 * y + 1, 2 * xx + 1)];
                }
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Backward of ReLU given the pre-activation values.
pub fn relu_backward_inplace(dy: &mut Array4<f32>, preact: &Array4<f32>) {
    for (d, &a) in dy.iter_mut().zip(preact.iter()) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn sigmoid_inplace(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

/// Backward of sigmoid given the activation output.
pub fn sigmoid_backward_inplace(dy: &mut Array4<f32>, out: &Array4<f32>) {
    for (d, &y) in dy.iter_mut().zip(out.iter()) {
        *d *= y * (1.0 - y);
    }
}
