//! Windowed structural similarity and the reconstruction distance `r(a, b) = 1 - SSIM(a, b)`.
//!
//! SSIM is computed per channel over every window that lies fully inside the
//! image (no padding), with a Gaussian-weighted window, then averaged over
//! windows and channels. All internal arithmetic is `f64`; the analytic
//! gradient with respect to the first argument is available for training.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use ndarray::{Array2, Array3};

/// Window parameters for SSIM.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimConfig {
    /// Side length of the square window, odd and >= 3.
    pub window_size: usize,
    /// Standard deviation of the Gaussian window, in pixels.
    pub sigma: f64,
    /// Luminance stabilizer; C1 = (k1 * L)^2.
    pub k1: f64,
    /// Contrast stabilizer; C2 = (k2 * L)^2.
    pub k2: f64,
    /// Dynamic range L of the pixel values.
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!(
                "window_size must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        for (name, v) in [("k1", self.k1), ("k2", self.k2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if !(self.dynamic_range > 0.0) {
            return Err(Error::Config(format!(
                "dynamic_range must be positive, got {}",
                self.dynamic_range
            )));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn kernel_1d(config: &SsimConfig) -> Vec<f64> {
    let k = config.window_size;
    let center = (k / 2) as f64;
    let mut taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * config.sigma * config.sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// The 2-D Gaussian window; entries are positive, symmetric, and sum to 1.
pub fn gaussian_window(config: &SsimConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let taps = kernel_1d(config);
    let k = config.window_size;
    Ok(Array2::from_shape_fn((k, k), |(i, j)| taps[i] * taps[j]))
}

/// Valid-region separable correlation: output is (H-K+1) x (W-K+1).
fn smooth_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (vh, vw) = (h - k + 1, w - k + 1);
    let mut horiz = Array2::<f64>::zeros((h, vw));
    for y in 0..h {
        for px in 0..vw {
            let mut acc = 0.0;
            for (u, &t) in taps.iter().enumerate() {
                acc += t * img[(y, px + u)];
            }
            horiz[(y, px)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((vh, vw));
    for py in 0..vh {
        for px in 0..vw {
            let mut acc = 0.0;
            for (v, &t) in taps.iter().enumerate() {
                acc += t * horiz[(py + v, px)];
            }
            out[(py, px)] = acc;
        }
    }
    out
}

/// Adjoint of `smooth_valid`: scatters a window-grid field back onto the image grid.
fn scatter_adjoint(field: &Array2<f64>, taps: &[f64], out_h: usize, out_w: usize) -> Array2<f64> {
    let (vh, vw) = field.dim();
    let mut vert = Array2::<f64>::zeros((out_h, vw));
    for py in 0..vh {
        for px in 0..vw {
            let f = field[(py, px)];
            for (v, &t) in taps.iter().enumerate() {
                vert[(py + v, px)] += t * f;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for y in 0..out_h {
        for px in 0..vw {
            let f = vert[(y, px)];
            for (u, &t) in taps.iter().enumerate() {
                out[(y, px + u)] += t * f;
            }
        }
    }
    out
}

/// Per-channel SSIM sum over windows; optionally the gradient w.r.t. `x`.
fn ssim_plane(
    x: &Array2<f64>,
    y: &Array2<f64>,
    config: &SsimConfig,
    with_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    let taps = kernel_1d(config);
    let (c1, c2) = (config.c1(), config.c2());
    let mu_x = smooth_valid(x, &taps);
    let mu_y = smooth_valid(y, &taps);
    let sxx = smooth_valid(&(x * x), &taps);
    let syy = smooth_valid(&(y * y), &taps);
    let sxy = smooth_valid(&(x * y), &taps);

    let (vh, vw) = mu_x.dim();
    let mut sum = 0.0;
    let mut f1 = with_grad.then(|| Array2::<f64>::zeros((vh, vw)));
    let mut f2 = with_grad.then(|| Array2::<f64>::zeros((vh, vw)));
    let mut f3 = with_grad.then(|| Array2::<f64>::zeros((vh, vw)));

    for py in 0..vh {
        for px in 0..vw {
            let (mx, my) = (mu_x[(py, px)], mu_y[(py, px)]);
            let var_x = sxx[(py, px)] - mx * mx;
            let var_y = syy[(py, px)] - my * my;
            let cov = sxy[(py, px)] - mx * my;
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = var_x + var_y + c2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            sum += s;
            if let (Some(f1), Some(f2), Some(f3)) = (f1.as_mut(), f2.as_mut(), f3.as_mut()) {
                // S as a function of (mu_x, mu_y, Sxx, Syy, Sxy); partials w.r.t.
                // the x-side stats, holding Sxx and Sxy fixed for the mu_x term.
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 / d;
                let ds_dmux =
                    2.0 * my * (a2 - a1) / d - 2.0 * mx * s / b1 + 2.0 * mx * s / b2;
                f1[(py, px)] = ds_dmux;
                f2[(py, px)] = 2.0 * ds_dsxx;
                f3[(py, px)] = ds_dsxy;
            }
        }
    }

    let grad = if with_grad {
        let (h, w) = x.dim();
        let mut g = scatter_adjoint(&f1.unwrap(), &taps, h, w);
        let g2 = scatter_adjoint(&f2.unwrap(), &taps, h, w);
        let g3 = scatter_adjoint(&f3.unwrap(), &taps, h, w);
        for yy in 0..h {
            for xx in 0..w {
                g[(yy, xx)] += g2[(yy, xx)] * x[(yy, xx)] + g3[(yy, xx)] * y[(yy, xx)];
            }
        }
        Some(g)
    } else {
        None
    };

    (sum, grad)
}

fn check_pair(a: &ImageTensor, b: &ImageTensor, config: &SsimConfig) -> Result<()> {
    config.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.height() < config.window_size || a.width() < config.window_size {
        return Err(Error::Contract(format!(
            "image {}x{} smaller than window {}",
            a.height(),
            a.width(),
            config.window_size
        )));
    }
    Ok(())
}

fn channel_plane(img: &ImageTensor, c: usize) -> Array2<f64> {
    let (h, w, _) = img.shape();
    Array2::from_shape_fn((h, w), |(y, x)| img.data()[(y, x, c)] as f64)
}

/// Mean windowed SSIM over all valid windows and channels, in `[-1, 1]`.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, config: &SsimConfig) -> Result<f64> {
    check_pair(a, b, config)?;
    let (h, w, channels) = a.shape();
    let k = config.window_size;
    let n_windows = ((h - k + 1) * (w - k + 1)) as f64;
    let mut total = 0.0;
    for c in 0..channels {
        let (sum, _) = ssim_plane(&channel_plane(a, c), &channel_plane(b, c), config, false);
        total += sum;
    }
    Ok(total / (n_windows * channels as f64))
}

/// SSIM plus its analytic gradient with respect to `a`.
pub fn ssim_with_grad(
    a: &ImageTensor,
    b: &ImageTensor,
    config: &SsimConfig,
) -> Result<(f64, Array3<f64>)> {
    check_pair(a, b, config)?;
    let (h, w, channels) = a.shape();
    let k = config.window_size;
    let scale = 1.0 / (((h - k + 1) * (w - k + 1)) as f64 * channels as f64);
    let mut total = 0.0;
    let mut grad = Array3::<f64>::zeros((h, w, channels));
    for c in 0..channels {
        let (sum, g) = ssim_plane(&channel_plane(a, c), &channel_plane(b, c), config, true);
        total += sum;
        let g = g.expect("grad requested");
        for y in 0..h {
            for x in 0..w {
                grad[(y, x, c)] = g[(y, x)] * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Reconstruction distance `r(a, b) = 1 - SSIM(a, b)`, in `[0, 2]`.
pub fn recon_distance(a: &ImageTensor, b: &ImageTensor, config: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(a, b, config)?)
}

/// `r(a, b)` plus its gradient with respect to `a`.
pub fn recon_distance_with_grad(
    a: &ImageTensor,
    b: &ImageTensor,
    config: &SsimConfig,
) -> Result<(f64, Array3<f64>)> {
    let (s, mut grad) = ssim_with_grad(a, b, config)?;
    grad.mapv_inplace(|v| -v);
    Ok((1.0 - s, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((h, w, c), |_| rng.gen_range(0.0..=1.0));
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn window_rejects_invalid_configs() {
        let mut cfg = SsimConfig::default();
        cfg.window_size = 4;
        assert!(gaussian_window(&cfg).is_err());
        let mut cfg = SsimConfig::default();
        cfg.sigma = 0.0;
        assert!(gaussian_window(&cfg).is_err());
    }

    #[test]
    fn window_sums_to_one() {
        for (k, sigma) in [(3, 0.5), (11, 1.5), (7, 3.0), (5, 0.8)] {
            let cfg = SsimConfig {
                window_size: k,
                sigma,
                ..SsimConfig::default()
            };
            let w = gaussian_window(&cfg).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum} for k={k} sigma={sigma}");
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn window_is_symmetric_under_quarter_turns() {
        let cfg = SsimConfig {
            window_size: 5,
            sigma: 1.1,
            ..SsimConfig::default()
        };
        let w = gaussian_window(&cfg).unwrap();
        let k = cfg.window_size;
        for i in 0..k {
            for j in 0..k {
                let rot = w[(j, k - 1 - i)];
                assert!((w[(i, j)] - rot).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn window_flattens_in_the_large_sigma_limit() {
        let cfg = SsimConfig {
            window_size: 3,
            sigma: 1e6,
            ..SsimConfig::default()
        };
        let w = gaussian_window(&cfg).unwrap();
        for &v in w.iter() {
            assert!((v - 1.0 / 9.0).abs() < 1e-9, "entry {v}");
        }
    }

    #[test]
    fn window_center_matches_direct_gaussian_evaluation() {
        // Oracle: evaluate the normalized 2-D Gaussian on the 3x3 grid directly.
        let cfg = SsimConfig {
            window_size: 3,
            sigma: 0.5,
            ..SsimConfig::default()
        };
        let mut oracle = [[0.0f64; 3]; 3];
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let (dy, dx) = (i as f64 - 1.0, j as f64 - 1.0);
                let v = (-(dy * dy + dx * dx) / (2.0 * cfg.sigma * cfg.sigma)).exp();
                oracle[i][j] = v;
                sum += v;
            }
        }
        let w = gaussian_window(&cfg).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((w[(i, j)] - oracle[i][j] / sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = random_image(&mut rng, 16, 16, 1);
            let s = ssim(&x, &x, &SsimConfig::default()).unwrap();
            assert!((s - 1.0).abs() < 1e-6, "got {s}");
        }
    }

    #[test]
    fn ssim_matches_constant_image_closed_form() {
        let cfg = SsimConfig::default();
        let (c, d) = (0.3f64, 0.7f64);
        let a = ImageTensor::constant(16, 16, 1, c as f32).unwrap();
        let b = ImageTensor::constant(16, 16, 1, d as f32).unwrap();
        // variance and covariance vanish, so the second factor is C2/C2 = 1
        let (cf, df) = (c as f32 as f64, d as f32 as f64);
        let expected = (2.0 * cf * df + cfg.c1()) / (cf * cf + df * df + cfg.c1());
        let s = ssim(&a, &b, &cfg).unwrap();
        assert!((s - expected).abs() < 1e-9, "got {s}, want {expected}");
    }

    #[test]
    fn ssim_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_image(&mut rng, 14, 17, 1);
            let b = random_image(&mut rng, 14, 17, 1);
            let cfg = SsimConfig {
                window_size: 7,
                ..SsimConfig::default()
            };
            let s_ab = ssim(&a, &b, &cfg).unwrap();
            let s_ba = ssim(&b, &a, &cfg).unwrap();
            assert_eq!(s_ab.to_bits(), s_ba.to_bits());
        }
    }

    #[test]
    fn ssim_rejects_shape_mismatch_and_small_images() {
        let a = ImageTensor::constant(16, 16, 1, 0.5).unwrap();
        let b = ImageTensor::constant(16, 15, 1, 0.5).unwrap();
        assert!(ssim(&a, &b, &SsimConfig::default()).is_err());
        let tiny = ImageTensor::constant(8, 8, 1, 0.5).unwrap();
        assert!(ssim(&tiny, &tiny, &SsimConfig::default()).is_err());
    }

    #[test]
    fn recon_distance_basics() {
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 16, 16, 1);
        assert!(recon_distance(&x, &x, &cfg).unwrap().abs() < 1e-6);

        let a = ImageTensor::constant(16, 16, 1, 0.3).unwrap();
        let b = ImageTensor::constant(16, 16, 1, 0.3).unwrap();
        assert!(recon_distance(&a, &b, &cfg).unwrap().abs() < 1e-6);

        let black = ImageTensor::constant(16, 16, 1, 0.0).unwrap();
        let white = ImageTensor::constant(16, 16, 1, 1.0).unwrap();
        let expected = 1.0 - cfg.c1() / (1.0 + cfg.c1());
        let r = recon_distance(&black, &white, &cfg).unwrap();
        assert!((r - expected).abs() < 1e-9, "got {r}, want {expected}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 16, 16, 1);
        let b = random_image(&mut rng, 16, 16, 1);
        let (_, grad) = recon_distance_with_grad(&a, &b, &cfg).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        while checked < 10 {
            let y = rng.gen_range(0..16);
            let x = rng.gen_range(0..16);
            // stay away from the clamp boundary so central differences are clean
            if !(0.01..=0.99).contains(&a.data()[(y, x, 0)]) {
                continue;
            }
            let eval_at = |v: f32| {
                let mut data = a.data().clone();
                data[(y, x, 0)] = v;
                let img = ImageTensor::from_clamped(data);
                recon_distance(&img, &b, &cfg).unwrap()
            };
            // divide by the realized f32 step, not the nominal one
            let v0 = a.data()[(y, x, 0)];
            let (vp, vm) = ((v0 as f64 + h) as f32, (v0 as f64 - h) as f32);
            let fd = (eval_at(vp) - eval_at(vm)) / (vp as f64 - vm as f64);
            let an = grad[(y, x, 0)];
            let rel = (an - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "pixel ({y},{x}): analytic {an}, fd {fd}");
            checked += 1;
        }
    }

    #[test]
    fn multichannel_is_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 16, 16, 3);
        let b = random_image(&mut rng, 16, 16, 3);
        let cfg = SsimConfig::default();
        let full = ssim(&a, &b, &cfg).unwrap();
        let mut per_channel = 0.0;
        for c in 0..3 {
            let pick = |img: &ImageTensor| {
                let plane = Array3::from_shape_fn((16, 16, 1), |(y, x, _)| img.data()[(y, x, c)]);
                ImageTensor::new(plane).unwrap()
            };
            per_channel += ssim(&pick(&a), &pick(&b), &cfg).unwrap();
        }
        assert!((full - per_channel / 3.0).abs() < 1e-12);
    }
}
