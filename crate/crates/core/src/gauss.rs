//! Diagonal-Gaussian posteriors, reparameterized sampling and closed-form KL terms.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Per-sample diagonal Gaussian `N(mean, diag(exp(logvar)))`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Matrix,
    pub logvar: Matrix,
}

impl DiagGaussian {
    pub fn new(mean: Matrix, logvar: Matrix) -> Result<Self> {
        mean.ensure_same_shape(&logvar, "diag_gaussian")?;
        Ok(Self { mean, logvar })
    }

    /// Standard normal posterior for `rows` samples of dimension `dim`.
    pub fn standard(rows: usize, dim: usize) -> Self {
        Self {
            mean: Matrix::zeros(rows, dim),
            logvar: Matrix::zeros(rows, dim),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }
}

/// Clamps raw log-variances into `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn clamp_logvar(raw: &Matrix) -> Matrix {
    raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
}

/// Gradient of [`clamp_logvar`]: passes through inside the range, zero outside.
pub fn clamp_logvar_backward(raw: &Matrix, grad: &Matrix) -> Result<Matrix> {
    raw.zip_map(grad, "clamp_logvar_backward", |r, g| {
        if (LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
            g
        } else {
            0.0
        }
    })
}

/// The fixed `N(0, I_dim)` prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardPrior {
    dim: usize,
}

impl StandardPrior {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("prior dimension must be at least 1".into()));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_density(&self, z: &Matrix) -> Result<Vec<f64>> {
        if z.cols() != self.dim {
            return Err(Error::shape("prior_log_density", z.shape(), (z.rows(), self.dim)));
        }
        log_density(&DiagGaussian::standard(z.rows(), self.dim), z)
    }
}

/// `mean + exp(logvar / 2) ⊙ noise`.
pub fn reparam_sample(post: &DiagGaussian, noise: &Matrix) -> Result<Matrix> {
    post.mean.ensure_same_shape(noise, "reparam_sample")?;
    let mut z = post.mean.clone();
    for ((zv, &lv), &e) in z
        .as_mut_slice()
        .iter_mut()
        .zip(post.logvar.as_slice())
        .zip(noise.as_slice())
    {
        *zv += (0.5 * lv).exp() * e;
    }
    Ok(z)
}

/// Pulls `∂L/∂z` back to `(∂L/∂mean, ∂L/∂logvar)`.
pub fn reparam_backward(post: &DiagGaussian, noise: &Matrix, z_grad: &Matrix) -> Result<(Matrix, Matrix)> {
    post.mean.ensure_same_shape(noise, "reparam_backward")?;
    post.mean.ensure_same_shape(z_grad, "reparam_backward")?;
    let mut dlogvar = z_grad.clone();
    for ((d, &lv), &e) in dlogvar
        .as_mut_slice()
        .iter_mut()
        .zip(post.logvar.as_slice())
        .zip(noise.as_slice())
    {
        *d *= 0.5 * (0.5 * lv).exp() * e;
    }
    Ok((z_grad.clone(), dlogvar))
}

/// Per-row log density of `z` under the posterior.
pub fn log_density(post: &DiagGaussian, z: &Matrix) -> Result<Vec<f64>> {
    post.mean.ensure_same_shape(z, "log_density")?;
    let log_2pi = (2.0 * PI).ln();
    Ok((0..z.rows())
        .map(|i| {
            let m = post.mean.row(i);
            let lv = post.logvar.row(i);
            z.row(i)
                .iter()
                .zip(m)
                .zip(lv)
                .map(|((&zv, &mv), &l)| -0.5 * (log_2pi + l + (zv - mv).powi(2) * (-l).exp()))
                .sum()
        })
        .collect())
}

/// Per-row `KL[post ‖ N(0, I)] = ½ Σ (exp(logvar) + mean² − 1 − logvar)`.
pub fn kl_to_standard(post: &DiagGaussian) -> Vec<f64> {
    (0..post.rows())
        .map(|i| {
            post.mean
                .row(i)
                .iter()
                .zip(post.logvar.row(i))
                .map(|(&m, &l)| 0.5 * (l.exp() + m * m - 1.0 - l))
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Gradient of `Σ_i weight · kl_to_standard(post)_i` w.r.t. mean and logvar.
pub fn kl_to_standard_backward(post: &DiagGaussian, weight: f64) -> (Matrix, Matrix) {
    let dmean = post.mean.scale(weight);
    let dlogvar = post.logvar.map(|l| weight * 0.5 * (l.exp() - 1.0));
    (dmean, dlogvar)
}

/// Per-row `KL[a ‖ b]` between diagonal Gaussians.
pub fn kl_between(a: &DiagGaussian, b: &DiagGaussian) -> Result<Vec<f64>> {
    a.mean.ensure_same_shape(&b.mean, "kl_between")?;
    a.logvar.ensure_same_shape(&b.logvar, "kl_between")?;
    Ok((0..a.rows())
        .map(|i| {
            let terms = a
                .mean
                .row(i)
                .iter()
                .zip(a.logvar.row(i))
                .zip(b.mean.row(i).iter().zip(b.logvar.row(i)));
            terms
                .map(|((&ma, &la), (&mb, &lb))| {
                    0.5 * (lb - la + (la.exp() + (ma - mb).powi(2)) * (-lb).exp() - 1.0)
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn single(mean: &[f64], logvar: &[f64]) -> DiagGaussian {
        DiagGaussian::new(Matrix::row_vector(mean), Matrix::row_vector(logvar)).unwrap()
    }

    #[test]
    fn zero_noise_returns_mean() {
        let post = single(&[0.3, -1.2], &[0.5, -2.0]);
        let z = reparam_sample(&post, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(z, post.mean);
    }

    #[test]
    fn standard_posterior_returns_noise() {
        let post = DiagGaussian::standard(2, 3);
        let noise = Matrix::from_fn(2, 3, |i, j| i as f64 - 0.5 * j as f64);
        assert_eq!(reparam_sample(&post, &noise).unwrap(), noise);
    }

    #[test]
    fn reparam_shape_mismatch() {
        let post = DiagGaussian::standard(2, 3);
        assert!(matches!(
            reparam_sample(&post, &Matrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sample_moments_match_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mu, lv) = (0.7, -0.6);
        let post = DiagGaussian::new(Matrix::filled(n, 1, mu), Matrix::filled(n, 1, lv)).unwrap();
        let z = reparam_sample(&post, &normal_matrix(n, 1, &mut rng)).unwrap();
        let mean = z.sum() / n as f64;
        let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = (0.5 * lv).exp();
        assert!((mean - mu).abs() <= 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
        assert!((var / lv.exp() - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn log_density_standard_at_origin() {
        let post = DiagGaussian::standard(1, 2);
        let lp = log_density(&post, &Matrix::zeros(1, 2)).unwrap();
        assert_relative_eq!(lp[0], -(2.0 * PI).ln(), epsilon = 1e-12);
        assert_relative_eq!(lp[0], -1.8379, epsilon = 1e-4);
    }

    #[test]
    fn log_density_at_mean() {
        let post = single(&[1.0, -2.0, 0.5], &[0.3, -1.0, 2.0]);
        let lp = log_density(&post, &post.mean).unwrap()[0];
        let expected: f64 = [0.3, -1.0, 2.0].iter().map(|l| -0.5 * ((2.0 * PI).ln() + l)).sum();
        assert_relative_eq!(lp, expected, epsilon = 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        // trapezoid rule over ±12 sd
        let (mu, lv) = (0.4_f64, 0.8_f64);
        let sd = (0.5 * lv).exp();
        let steps = 20_000;
        let lo = mu - 12.0 * sd;
        let h = 24.0 * sd / steps as f64;
        let grid = Matrix::from_fn(steps + 1, 1, |i, _| lo + i as f64 * h);
        let post = DiagGaussian::new(Matrix::filled(steps + 1, 1, mu), Matrix::filled(steps + 1, 1, lv)).unwrap();
        let dens: Vec<f64> = log_density(&post, &grid).unwrap().into_iter().map(f64::exp).collect();
        let mass = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[steps]));
        assert_relative_eq!(mass, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn kl_to_standard_examples() {
        assert_eq!(kl_to_standard(&DiagGaussian::standard(1, 4)), vec![0.0]);
        assert_relative_eq!(kl_to_standard(&single(&[1.0, 0.0], &[0.0, 0.0]))[0], 0.5);
    }

    #[test]
    fn kl_between_examples() {
        let a = single(&[0.2, -0.1], &[0.4, -0.3]);
        assert_eq!(kl_between(&a, &a).unwrap(), vec![0.0]);
        let std = DiagGaussian::standard(1, 3);
        let shifted = single(&[1.0, -2.0, 0.5], &[0.0, 0.0, 0.0]);
        assert_relative_eq!(kl_between(&std, &shifted).unwrap()[0], 0.5 * (1.0 + 4.0 + 0.25), epsilon = 1e-12);
        assert!(kl_between(&a, &std).is_err());
    }

    #[test]
    fn kl_between_standard_matches_kl_to_standard() {
        let a = single(&[0.2, -0.7, 1.1], &[0.4, -0.3, 1.5]);
        let std = DiagGaussian::standard(1, 3);
        assert_relative_eq!(kl_between(&a, &std).unwrap()[0], kl_to_standard(&a)[0], epsilon = 1e-12);
    }

    #[test]
    fn kl_to_standard_gradient_matches_finite_differences() {
        let post = single(&[0.3, -0.8], &[0.2, -0.5]);
        let (dm, dl) = kl_to_standard_backward(&post, 1.0);
        let h = 1e-5;
        for j in 0..2 {
            let mut p = post.clone();
            p.mean.set(0, j, post.mean.get(0, j) + h);
            let up = kl_to_standard(&p)[0];
            p.mean.set(0, j, post.mean.get(0, j) - h);
            let down = kl_to_standard(&p)[0];
            assert_relative_eq!(dm.get(0, j), (up - down) / (2.0 * h), max_relative = 1e-6);
            let mut p = post.clone();
            p.logvar.set(0, j, post.logvar.get(0, j) + h);
            let up = kl_to_standard(&p)[0];
            p.logvar.set(0, j, post.logvar.get(0, j) - h);
            let down = kl_to_standard(&p)[0];
            assert_relative_eq!(dl.get(0, j), (up - down) / (2.0 * h), max_relative = 1e-6);
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let raw = Matrix::row_vector(&[-12.0, 0.0, 11.0]);
        assert_eq!(clamp_logvar(&raw).as_slice(), &[-10.0, 0.0, 10.0]);
        let g = clamp_logvar_backward(&raw, &Matrix::filled(1, 3, 1.0)).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn prior_rejects_zero_dim() {
        assert!(StandardPrior::new(0).is_err());
        let prior = StandardPrior::new(2).unwrap();
        assert_relative_eq!(prior.log_density(&Matrix::zeros(1, 2)).unwrap()[0], -(2.0 * PI).ln());
    }

    fn gaussian_strategy(dim: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            proptest::collection::vec(-3.0f64..3.0, dim),
            proptest::collection::vec(LOGVAR_MIN..LOGVAR_MAX, dim),
        )
            .prop_map(|(m, l)| DiagGaussian::new(Matrix::row_vector(&m), Matrix::row_vector(&l)).unwrap())
    }

    proptest! {
        #[test]
        fn kl_terms_are_nonnegative(a in gaussian_strategy(4), b in gaussian_strategy(4)) {
            prop_assert!(kl_to_standard(&a)[0] >= 0.0);
            prop_assert!(kl_between(&a, &b).unwrap()[0] >= 0.0);
        }

        #[test]
        fn density_of_sample_is_finite(post in gaussian_strategy(3), noise in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let z = reparam_sample(&post, &Matrix::row_vector(&noise)).unwrap();
            prop_assert!(log_density(&post, &z).unwrap()[0].is_finite());
        }
    }
}
