//! Fully connected layer.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Affine map `y = x . W^T + b` over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Dense {
    /// `[out_features, in_features]`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

/// Parameter gradients for one [`Dense`].
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn he_init<R: Rng>(inf: usize, outf: usize, rng: &mut R) -> Self {
        Self::normal_init(inf, outf, (2.0 / inf as f64).sqrt(), rng)
    }

    pub fn xavier_init<R: Rng>(inf: usize, outf: usize, rng: &mut R) -> Self {
        Self::normal_init(inf, outf, (1.0 / inf as f64).sqrt(), rng)
    }

    fn normal_init<R: Rng>(inf: usize, outf: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        Self {
            weight: Array2::from_shape_fn((outf, inf), |_| dist.sample(rng) as f32),
            bias: Array1::zeros(outf),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }

    /// `x` is `[batch, in_features]`.
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&self, x: &Array2<f32>, dy: &Array2<f32>) -> (Array2<f32>, DenseGrad) {
        let dx = dy.dot(&self.weight);
        let dweight = dy.t().dot(x);
        let dbias = dy.sum_axis(ndarray::Axis(0));
        (
            dx,
            DenseGrad {
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

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut layer = Dense::he_init(5, 3, &mut rng);
        let x = Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0f32..1.0));
        let lw = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0f32..1.0));
        let loss = |l: &Dense, inp: &Array2<f32>| -> f64 {
            l.forward(inp)
                .iter()
                .zip(lw.iter())
                .map(|(&o, &w)| o as f64 * w as f64)
                .sum()
        };
        let (dx, grad) = layer.backward(&x, &lw);
        let h = 1e-3f32;

        let idx = (2, 4);
        let orig = layer.weight[idx];
        layer.weight[idx] = orig + h;
        let up = loss(&layer, &x);
        layer.weight[idx] = orig - h;
        let down = loss(&layer, &x);
        layer.weight[idx] = orig;
        let fd = (up - down) / (2.0 * h as f64);
        assert!((fd - grad.weight[idx] as f64).abs() < 1e-2, "weight fd");

        let mut xp = x.clone();
        xp[(1, 3)] += h;
        let mut xm = x.clone();
        xm[(1, 3)] -= h;
        let fdx = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h as f64);
        assert!((fdx - dx[(1, 3)] as f64).abs() < 1e-2, "input fd");

        let orig_b = layer.bias[1];
        layer.bias[1] = orig_b + h;
        let up_b = loss(&layer, &x);
        layer.bias[1] = orig_b - h;
        let down_b = loss(&layer, &x);
        layer.bias[1] = orig_b;
        let fdb = (up_b - down_b) / (2.0 * h as f64);
        assert!((fdb - grad.bias[1] as f64).abs() < 1e-2, "bias fd");
    }
}
