//! 3x3 same-padding convolution implemented as im2col plus one matrix
//! multiply per batch, which keeps the hot path inside the BLAS-style
//! `sgemm` kernel instead of nested Rust loops.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Horizontal extent `[x0, x1)` of output columns whose sampled input
/// column `x + kx - pad` stays inside `[0, w)`.
fn valid_x_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let x0 = pad.saturating_sub(kx);
    let x1 = (w + pad).saturating_sub(kx).min(w);
    (x0, x1.max(x0))
}

/// Lowers a padded convolution input to column form.
///
/// Output shape is `[cin * k * k, n * h * w]` with columns ordered by
/// `(image, row, col)`, so `weights(cout, cin*k*k) . cols` yields the full
/// batch output in one multiply. The inner loops move contiguous row
/// segments, not single elements.
pub fn im2col(x: &Array4<f32>, k: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let nhw = n * h * w;
    let mut col = Array2::<f32>::zeros((c * k * k, nhw));
    let xs = x.as_slice().expect("contiguous");
    let cs = col.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let (x0, x1) = valid_x_range(w, kx, pad);
                if x1 == x0 {
                    continue;
                }
                let sx0 = x0 + kx - pad;
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let dst = row * nhw + (ni * h + y) * w;
                        let src = ((ni * c + ci) * h + (sy - pad)) * w + sx0;
                        cs[dst + x0..dst + x1].copy_from_slice(&xs[src..src + (x1 - x0)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column-form gradients back onto the
/// (unpadded) input grid, accumulating overlaps.
pub fn col2im_accumulate(dcol: &Array2<f32>, n: usize, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array4<f32> {
    let nhw = n * h * w;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dc = dcol.as_slice().expect("contiguous");
    let ds = dx.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let (x0, x1) = valid_x_range(w, kx, pad);
                if x1 == x0 {
                    continue;
                }
                let sx0 = x0 + kx - pad;
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let src = row * nhw + (ni * h + y) * w;
                        let dst = ((ni * c + ci) * h + (sy - pad)) * w + sx0;
                        for i in 0..x1 - x0 {
                            ds[dst + i] += dc[src + x0 + i];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Square convolution with same-size output (stride 1, zero padding).
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[cout, cin, k, k]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub kernel: usize,
    pub pad: usize,
}

/// Parameter gradients for one [`Conv2d`].
#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
}

impl Conv2d {
    /// He-normal initialisation, suited to ReLU fan-in.
    pub fn he_init<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self::normal_init(cin, cout, kernel, (2.0 / fan_in).sqrt(), rng)
    }

    /// Xavier-style initialisation for layers feeding a sigmoid.
    pub fn xavier_init<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self::normal_init(cin, cout, kernel, (1.0 / fan_in).sqrt(), rng)
    }

    fn normal_init<R: Rng>(cin: usize, cout: usize, kernel: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let weight = Array4::from_shape_fn((cout, cin, kernel, kernel), |_| dist.sample(rng) as f32);
        Self {
            weight,
            bias: Array1::zeros(cout),
            kernel,
            pad: kernel / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn weight_matrix(&self) -> Array2<f32> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .to_shape((co, ci * k * k))
            .expect("weight is contiguous")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "input channels mismatch");
        let col = im2col(x, self.kernel, self.pad);
        let out_mat = self.weight_matrix().dot(&col);
        let co = self.out_channels();
        let hw = h * w;
        let mut out = Array4::<f32>::zeros((n, co, h, w));
        let om = out_mat.as_slice().expect("contiguous");
        let os = out.as_slice_mut().expect("contiguous");
        for coi in 0..co {
            let b = self.bias[coi];
            for ni in 0..n {
                let src = coi * n * hw + ni * hw;
                let dst = (ni * co + coi) * hw;
                for i in 0..hw {
                    os[dst + i] = om[src + i] + b;
                }
            }
        }
        out
    }

    /// Backward pass; recomputes im2col from `x` rather than caching it,
    /// trading a little compute for a much smaller live footprint.
    pub fn backward(&self, x: &Array4<f32>, dy: &Array4<f32>) -> (Array4<f32>, Conv2dGrad) {
        let (n, c, h, w) = x.dim();
        let co = self.out_channels();
        assert_eq!(dy.dim(), (n, co, h, w), "output gradient shape mismatch");

        let hw = h * w;
        let mut dy_mat = Array2::<f32>::zeros((co, n * hw));
        let mut dbias = Array1::<f32>::zeros(co);
        let dys = dy.as_slice().expect("contiguous");
        let dym = dy_mat.as_slice_mut().expect("contiguous");
        for coi in 0..co {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let src = (ni * co + coi) * hw;
                let dst = coi * n * hw + ni * hw;
                dym[dst..dst + hw].copy_from_slice(&dys[src..src + hw]);
                for &v in &dys[src..src + hw] {
                    acc += v as f64;
                }
            }
            dbias[coi] = acc as f32;
        }

        let col = im2col(x, self.kernel, self.pad);
        let dw_mat = dy_mat.dot(&col.t());
        let dweight = dw_mat
            .to_shape((co, c, self.kernel, self.kernel))
            .expect("gradient is contiguous")
            .to_owned();

        let dcol = self.weight_matrix().t().dot(&dy_mat);
        let dx = col2im_accumulate(&dcol, n, c, h, w, self.kernel, self.pad);
        (
            dx,
            Conv2dGrad {
                weight: dweight,
                bias: dbias,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, pad: usize) -> Array4<f32> {
        let (n, cin, h, wd) = x.dim();
        let (co, _, k, _) = w.dim();
        let mut out = Array4::<f32>::zeros((n, co, h, wd));
        for ni in 0..n {
            for coi in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[coi];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = (y + ky) as isize - pad as isize;
                                    let sx = (xx + kx) as isize - pad as isize;
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[(ni, ci, sy as usize, sx as usize)] * w[(coi, ci, ky, kx)];
                                }
                            }
                        }
                        out[(ni, coi, y, xx)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::he_init(3, 4, 3, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 5, 6), |_| rng.gen_range(-1.0f32..1.0));
        let fast = conv.forward(&x);
        let slow = naive_conv(&x, &conv.weight, &conv.bias, 1);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut conv = Conv2d::he_init(2, 3, 3, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        // scalar loss: weighted sum of outputs, fixed random weights
        let lw = Array4::from_shape_fn((1, 3, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        let loss = |c: &Conv2d, inp: &Array4<f32>| -> f64 {
            c.forward(inp)
                .iter()
                .zip(lw.iter())
                .map(|(&o, &w)| o as f64 * w as f64)
                .sum()
        };
        let (dx, grad) = conv.backward(&x, &lw);

        let h = 1e-3f32;
        for &(ci, ky) in &[(0usize, 0usize), (1, 2)] {
            let idx = (1, ci, ky, 1);
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let up = loss(&conv, &x);
            conv.weight[idx] = orig - h;
            let down = loss(&conv, &x);
            conv.weight[idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let an = grad.weight[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * an.abs().max(1.0), "weight fd {fd} vs {an}");
        }
        for idx in [(0usize, 0usize, 0usize, 0usize), (0, 1, 3, 2)] {
            let orig = x[idx];
            let mut xp = x.clone();
            xp[idx] = orig + h;
            let mut xm = x.clone();
            xm[idx] = orig - h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            let an = dx[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * an.abs().max(1.0), "input fd {fd} vs {an}");
        }
        let fd_bias = {
            let orig = conv.bias[2];
            conv.bias[2] = orig + h;
            let up = loss(&conv, &x);
            conv.bias[2] = orig - h;
            let down = loss(&conv, &x);
            conv.bias[2] = orig;
            (up - down) / (2.0 * h as f64)
        };
        assert!((fd_bias - grad.bias[2] as f64).abs() < 1e-2, "bias fd");
    }
}
