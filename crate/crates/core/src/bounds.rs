//! Variational bound terms of the DVIB objective and the Jensen–Shannon
//! mutual-information estimator used on the shared latents.
//!
//! All values here are quantities to be *maximized*: reconstruction
//! log-likelihoods and the JS lower bound enter the objective with a plus sign,
//! the private rates with a minus sign. The data entropies `H(X)`, `H(Y)` that
//! the reconstruction bounds drop are constants and are never computed.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{kl_between, kl_to_standard, kl_to_standard_backward, DiagGaussian};
use crate::model::GaussianEncoder;
use crate::ndmath::{sigmoid, softplus, Activation, Matrix, Mlp, MlpTape, ParamMut, ParamRef, Parameters};

/// Observation model for the decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Unit-variance Gaussian; decoder output is the mean.
    #[default]
    Gaussian,
    /// Independent Bernoulli per feature; decoder output is the logit. Targets in `[0, 1]`.
    Bernoulli,
}

/// Batch-mean log-likelihood of `target` under decoder `output`, and its
/// gradient with respect to `output`.
pub fn loglik_and_grad(output: &Matrix, target: &Matrix, likelihood: Likelihood) -> Result<(f64, Matrix)> {
    output.ensure_same_shape(target, "reconstruction")?;
    let n = output.rows().max(1) as f64;
    let d = output.cols() as f64;
    match likelihood {
        Likelihood::Gaussian => {
            let diff = output.sub(target)?;
            let sq: f64 = diff.as_slice().iter().map(|v| v * v).sum();
            let value = -0.5 * sq / n - 0.5 * d * (2.0 * PI).ln();
            Ok((value, diff.scale(-1.0 / n)))
        }
        Likelihood::Bernoulli => {
            let mut total = 0.0;
            let grad = output.zip_map(target, "reconstruction", |o, t| t - sigmoid(o))?;
            for (&o, &t) in output.as_slice().iter().zip(target.as_slice()) {
                total += t * o - softplus(o);
            }
            Ok((total / n, grad.scale(1.0 / n)))
        }
    }
}

/// Decoder forward pass plus what its backward pass needs.
#[derive(Debug, Clone)]
pub struct ReconPass {
    pub value: f64,
    pub tape: MlpTape,
    /// `∂value/∂output`.
    pub output_grad: Matrix,
}

pub fn recon_forward(decoder: &Mlp, z: &Matrix, target: &Matrix, likelihood: Likelihood) -> Result<ReconPass> {
    if decoder.out_dim() != target.cols() {
        return Err(Error::shape(
            "recon_loglik",
            (z.rows(), decoder.out_dim()),
            target.shape(),
        ));
    }
    let (output, tape) = decoder.forward(z)?;
    let (value, output_grad) = loglik_and_grad(&output, target, likelihood)?;
    Ok(ReconPass {
        value,
        tape,
        output_grad,
    })
}

/// Mean Gaussian log-likelihood `E[−½‖dec(z) − target‖² − (d/2) log 2π]`.
pub fn recon_loglik(decoder: &Mlp, z: &Matrix, target: &Matrix) -> Result<f64> {
    recon_loglik_with(decoder, z, target, Likelihood::Gaussian)
}

pub fn recon_loglik_with(decoder: &Mlp, z: &Matrix, target: &Matrix, likelihood: Likelihood) -> Result<f64> {
    Ok(recon_forward(decoder, z, target, likelihood)?.value)
}

/// Backpropagates `scale · value` of a reconstruction pass into the decoder and
/// returns the gradient with respect to its latent input.
pub fn recon_backward(decoder: &mut Mlp, pass: &ReconPass, scale: f64) -> Result<Matrix> {
    decoder.backward(&pass.tape, &pass.output_grad.scale(scale))
}

/// Critic `T(z_a, z_b)` scoring concatenated shared-latent pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct JsCritic {
    pub net: Mlp,
}

impl JsCritic {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut dims = vec![2 * latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            net: Mlp::new(&dims, activation, rng)?,
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.out_dim() != 1 || !net.in_dim().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "critic must map an even-width pair to one score, got {} -> {}",
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(Self { net })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.in_dim() / 2
    }

    pub fn score(&self, z_a: &Matrix, z_b: &Matrix) -> Result<Matrix> {
        self.net.predict(&Matrix::hcat(z_a, z_b)?)
    }
}

impl Parameters for JsCritic {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.net.params_mut(prefix, out);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.net.params(prefix, out);
    }
}

fn check_permutation(shuffle: &[usize], rows: usize) -> Result<()> {
    if shuffle.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "shuffle has length {}, batch has {rows} rows",
            shuffle.len()
        )));
    }
    let mut seen = vec![false; rows];
    for &i in shuffle {
        if i >= rows || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "shuffle is not a permutation of 0..{rows}"
            )));
        }
    }
    Ok(())
}

/// Forward state of the JS estimator.
#[derive(Debug, Clone)]
pub struct JsPass {
    pub value: f64,
    /// Critic scores on paired rows.
    pub joint_scores: Matrix,
    /// Critic scores on rows with `z_b` permuted.
    pub product_scores: Matrix,
    joint_tape: MlpTape,
    product_tape: MlpTape,
    shuffle: Vec<usize>,
}

impl JsPass {
    /// Mean critic score on paired rows minus on shuffled rows.
    pub fn score_gap(&self) -> f64 {
        let n = self.joint_scores.rows().max(1) as f64;
        (self.joint_scores.sum() - self.product_scores.sum()) / n
    }
}

pub fn js_forward(critic: &JsCritic, z_a: &Matrix, z_b: &Matrix, shuffle: &[usize]) -> Result<JsPass> {
    z_a.ensure_same_shape(z_b, "js_mi_lower_bound")?;
    check_permutation(shuffle, z_a.rows())?;
    let n = z_a.rows().max(1) as f64;
    let (joint_scores, joint_tape) = critic.net.forward(&Matrix::hcat(z_a, z_b)?)?;
    let z_b_shuffled = z_b.select_rows(shuffle)?;
    let (product_scores, product_tape) = critic.net.forward(&Matrix::hcat(z_a, &z_b_shuffled)?)?;
    let joint: f64 = joint_scores.as_slice().iter().map(|&t| -softplus(-t)).sum();
    let product: f64 = product_scores.as_slice().iter().map(|&t| softplus(t)).sum();
    Ok(JsPass {
        value: (joint - product) / n,
        joint_scores,
        product_scores,
        joint_tape,
        product_tape,
        shuffle: shuffle.to_vec(),
    })
}

/// `E_joint[−sp(−T)] − E_product[sp(T)]` with product samples formed by
/// permuting the rows of `z_b`.
pub fn js_mi_lower_bound(critic: &JsCritic, z_a: &Matrix, z_b: &Matrix, shuffle: &[usize]) -> Result<f64> {
    Ok(js_forward(critic, z_a, z_b, shuffle)?.value)
}

/// Backpropagates `scale · value` into the critic; returns `(∂/∂z_a, ∂/∂z_b)`.
pub fn js_backward(critic: &mut JsCritic, pass: &JsPass, scale: f64) -> Result<(Matrix, Matrix)> {
    let n = pass.joint_scores.rows().max(1) as f64;
    let d = critic.latent_dim();
    let d_joint = pass.joint_scores.map(|t| scale * sigmoid(-t) / n);
    let d_product = pass.product_scores.map(|t| -scale * sigmoid(t) / n);
    let g_joint = critic.net.backward(&pass.joint_tape, &d_joint)?;
    let g_product = critic.net.backward(&pass.product_tape, &d_product)?;
    let (mut dz_a, mut dz_b) = g_joint.split_cols(d)?;
    let (dz_a_prod, dz_b_shuffled) = g_product.split_cols(d)?;
    dz_a.add_assign(&dz_a_prod)?;
    for (row, &src) in pass.shuffle.iter().enumerate() {
        let g = dz_b_shuffled.row(row).to_vec();
        for (acc, v) in dz_b.row_mut(src).iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((dz_a, dz_b))
}

/// Batch mean of `KL[p(z|·) ‖ N(0, I)]`: the private-latent rate.
pub fn private_rate(post_own: &DiagGaussian) -> f64 {
    let kl = kl_to_standard(post_own);
    kl.iter().sum::<f64>() / kl.len().max(1) as f64
}

/// Gradient of `scale · private_rate(post)` w.r.t. mean and logvar.
pub fn private_rate_backward(post: &DiagGaussian, scale: f64) -> (Matrix, Matrix) {
    kl_to_standard_backward(post, scale / post.rows().max(1) as f64)
}

/// Outcome of the encoder-disagreement diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    Value(f64),
    Skipped(String),
}

impl Diagnostic {
    pub fn value(&self) -> Option<f64> {
        match self {
            Diagnostic::Value(v) => Some(*v),
            Diagnostic::Skipped(_) => None,
        }
    }
}

/// Batch mean of `KL[p_x(z|y) ‖ p_y(z|y)]`: both private encoders applied to
/// view `y`. Logged only; it never enters the loss.
pub fn encoder_disagreement_diagnostic(enc_x_p: &GaussianEncoder, enc_y_p: &GaussianEncoder, y: &Matrix) -> Diagnostic {
    if enc_x_p.in_dim() != y.cols() || enc_y_p.in_dim() != y.cols() {
        return Diagnostic::Skipped(format!(
            "view dims differ: x-private encoder takes {}, y-private encoder takes {}, y has {}",
            enc_x_p.in_dim(),
            enc_y_p.in_dim(),
            y.cols()
        ));
    }
    if enc_x_p.latent_dim() != enc_y_p.latent_dim() {
        return Diagnostic::Skipped(format!(
            "private latent dims differ: {} vs {}",
            enc_x_p.latent_dim(),
            enc_y_p.latent_dim()
        ));
    }
    let posts = enc_x_p.posterior(y).and_then(|a| Ok((a, enc_y_p.posterior(y)?)));
    match posts.and_then(|(a, b)| kl_between(&a, &b)) {
        Ok(kl) => Diagnostic::Value(kl.iter().sum::<f64>() / kl.len().max(1) as f64),
        Err(e) => Diagnostic::Skipped(e.to_string()),
    }
}

/// Tied trade-off weights: `lambda` on the shared-latent MI term, `beta` on
/// the private rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl ObjectiveWeights {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) || !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda and beta must be finite and nonnegative, got {lambda} and {beta}"
            )));
        }
        Ok(Self { lambda, beta })
    }
}

/// Unweighted bound terms computed on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub recon_x_s: f64,
    pub recon_x_p: f64,
    pub recon_y_s: f64,
    pub recon_y_p: f64,
    pub mi_shared: f64,
    pub rate_x: f64,
    pub rate_y: f64,
}

/// Every named term of the objective plus the weighted total (to be maximized).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_x_s: f64,
    pub recon_x_p: f64,
    pub recon_y_s: f64,
    pub recon_y_p: f64,
    pub mi_shared: f64,
    pub rate_x: f64,
    pub rate_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn reconstruction(&self) -> f64 {
        self.recon_x_s + self.recon_x_p + self.recon_y_s + self.recon_y_p
    }

    pub fn named_terms(&self) -> [(&'static str, f64); 8] {
        [
            ("total", self.total),
            ("recon_x_s", self.recon_x_s),
            ("recon_x_p", self.recon_x_p),
            ("recon_y_s", self.recon_y_s),
            ("recon_y_p", self.recon_y_p),
            ("mi_shared", self.mi_shared),
            ("rate_x", self.rate_x),
            ("rate_y", self.rate_y),
        ]
    }

    /// Name of the first non-finite component term, checked before the total.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let terms = self.named_terms();
        terms[1..]
            .iter()
            .chain(&terms[..1])
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }

    /// Sample-weighted running mean: folds `other` (computed on `n` rows) into
    /// `self` (accumulated over `seen` rows).
    pub fn accumulate(&mut self, other: &LossBreakdown, seen: usize, n: usize) {
        let w_old = seen as f64 / (seen + n) as f64;
        let w_new = n as f64 / (seen + n) as f64;
        let mix = |a: &mut f64, b: f64| *a = *a * w_old + b * w_new;
        mix(&mut self.recon_x_s, other.recon_x_s);
        mix(&mut self.recon_x_p, other.recon_x_p);
        mix(&mut self.recon_y_s, other.recon_y_s);
        mix(&mut self.recon_y_p, other.recon_y_p);
        mix(&mut self.mi_shared, other.mi_shared);
        mix(&mut self.rate_x, other.rate_x);
        mix(&mut self.rate_y, other.rate_y);
        mix(&mut self.total, other.total);
    }
}

/// `recon_x_s + recon_x_p + recon_y_s + recon_y_p + λ·mi_shared − β·(rate_x + rate_y)`.
pub fn total_objective(terms: ObjectiveTerms, weights: ObjectiveWeights) -> LossBreakdown {
    let ObjectiveTerms {
        recon_x_s,
        recon_x_p,
        recon_y_s,
        recon_y_p,
        mi_shared,
        rate_x,
        rate_y,
    } = terms;
    let total = recon_x_s + recon_x_p + recon_y_s + recon_y_p + weights.lambda * mi_shared
        - weights.beta * (rate_x + rate_y);
    LossBreakdown {
        recon_x_s,
        recon_x_p,
        recon_y_s,
        recon_y_p,
        mi_shared,
        rate_x,
        rate_y,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::ndmath::LinearLayer;

    fn identity_decoder(d: usize) -> Mlp {
        let layer = LinearLayer::from_parts(Matrix::identity(d), vec![0.0; d]).unwrap();
        Mlp::from_layers(vec![layer], Activation::Identity).unwrap()
    }

    fn zero_critic(d: usize) -> JsCritic {
        JsCritic::from_net(Mlp::from_layers(vec![LinearLayer::zeros(2 * d, 1)], Activation::Identity).unwrap()).unwrap()
    }

    #[test]
    fn exact_reconstruction_leaves_normalizer() {
        let z = Matrix::from_rows(&[[0.3], [-1.2], [2.0]]).unwrap();
        let v = recon_loglik(&identity_decoder(1), &z, &z).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
        assert_relative_eq!(v, -0.9189, epsilon = 1e-4);
    }

    #[test]
    fn unit_offset_costs_one_half() {
        let z = Matrix::from_rows(&[[0.3, 1.0, -1.0], [0.5, 0.0, 2.0]]).unwrap();
        let mut target = z.clone();
        for i in 0..2 {
            target.set(i, 0, z.get(i, 0) - 1.0);
        }
        let exact = recon_loglik(&identity_decoder(3), &z, &z).unwrap();
        let off = recon_loglik(&identity_decoder(3), &z, &target).unwrap();
        assert_relative_eq!(off, exact - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn random_reconstruction_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Mlp::new(&[3, 5, 4], Activation::Tanh, &mut rng).unwrap();
        let z = Matrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let target = Matrix::from_fn(6, 4, |i, j| ((i + j) % 3) as f64 - 1.0);
        let got = recon_loglik(&dec, &z, &target).unwrap();

        let layers = dec.layers();
        let mut total = 0.0;
        for i in 0..6 {
            let mut h = [0.0; 5];
            for (k, hk) in h.iter_mut().enumerate() {
                let mut s = layers[0].bias[k];
                for j in 0..3 {
                    s += z.get(i, j) * layers[0].weight.get(j, k);
                }
                *hk = s.tanh();
            }
            for k in 0..4 {
                let mut o = layers[1].bias[k];
                for (j, hj) in h.iter().enumerate() {
                    o += hj * layers[1].weight.get(j, k);
                }
                total += -0.5 * (o - target.get(i, k)).powi(2);
            }
            total -= 2.0 * (2.0 * PI).ln();
        }
        assert_relative_eq!(got, total / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_shape_error() {
        let z = Matrix::zeros(2, 3);
        assert!(matches!(
            recon_loglik(&identity_decoder(3), &z, &Matrix::zeros(2, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn bernoulli_likelihood_matches_cross_entropy() {
        let logits = Matrix::row_vector(&[0.3, -2.0, 1.5]);
        let target = Matrix::row_vector(&[1.0, 0.0, 0.25]);
        let (v, g) = loglik_and_grad(&logits, &target, Likelihood::Bernoulli).unwrap();
        let expected: f64 = logits
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(&o, &t)| t * sigmoid(o).ln() + (1.0 - t) * (1.0 - sigmoid(o)).ln())
            .sum();
        assert_relative_eq!(v, expected, epsilon = 1e-12);
        assert_relative_eq!(g.get(0, 0), 1.0 - sigmoid(0.3), epsilon = 1e-12);
    }

    #[test]
    fn constant_zero_critic_gives_minus_two_log_two() {
        let z = Matrix::from_fn(5, 2, |i, j| (i + j) as f64);
        let v = js_mi_lower_bound(&zero_critic(2), &z, &z, &[4, 3, 2, 1, 0]).unwrap();
        assert_relative_eq!(v, -2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(v, -1.3863, epsilon = 1e-4);
    }

    #[test]
    fn shuffle_must_be_permutation() {
        let z = Matrix::zeros(3, 2);
        let critic = zero_critic(2);
        assert!(js_mi_lower_bound(&critic, &z, &z, &[0, 1]).is_err());
        assert!(js_mi_lower_bound(&critic, &z, &z, &[0, 1, 1]).is_err());
        assert!(js_mi_lower_bound(&critic, &z, &z, &[0, 1, 3]).is_err());
        assert!(js_mi_lower_bound(&critic, &z, &Matrix::zeros(3, 1), &[0, 1, 2]).is_err());
    }

    #[test]
    fn private_rate_examples() {
        assert_eq!(private_rate(&DiagGaussian::standard(4, 3)), 0.0);
        let post = DiagGaussian::new(
            Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap(),
            Matrix::zeros(2, 2),
        )
        .unwrap();
        assert_relative_eq!(private_rate(&post), 0.5);
    }

    #[test]
    fn total_objective_limits() {
        let terms = ObjectiveTerms {
            recon_x_s: -1.0,
            recon_x_p: -2.0,
            recon_y_s: -3.0,
            recon_y_p: -4.0,
            mi_shared: 0.7,
            rate_x: 1.5,
            rate_y: 2.5,
        };
        let pure = total_objective(terms, ObjectiveWeights::new(0.0, 0.0).unwrap());
        assert_eq!(pure.total, -10.0);
        let only = ObjectiveTerms {
            mi_shared: 0.8,
            rate_x: 0.3,
            rate_y: 0.3,
            ..Default::default()
        };
        let b = total_objective(only, ObjectiveWeights::new(2.0, 0.5).unwrap());
        assert_relative_eq!(b.total, 2.0 * 0.8 - 2.0 * 0.5 * 0.3, epsilon = 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(ObjectiveWeights::new(-1.0, 0.0).is_err());
        assert!(ObjectiveWeights::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn first_non_finite_names_component() {
        let mut b = LossBreakdown::default();
        assert_eq!(b.first_non_finite(), None);
        b.rate_y = f64::NAN;
        b.total = f64::NAN;
        assert_eq!(b.first_non_finite(), Some("rate_y"));
    }

    fn terms_strategy() -> impl Strategy<Value = ObjectiveTerms> {
        (
            proptest::array::uniform5(-50.0f64..0.0),
            0.0f64..10.0,
            0.0f64..10.0,
        )
            .prop_map(|(r, rx, ry)| ObjectiveTerms {
                recon_x_s: r[0],
                recon_x_p: r[1],
                recon_y_s: r[2],
                recon_y_p: r[3],
                mi_shared: r[4] / 50.0,
                rate_x: rx,
                rate_y: ry,
            })
    }

    proptest! {
        #[test]
        fn breakdown_resums_to_total(t in terms_strategy(), lambda in 0.0f64..5.0, beta in 0.0f64..5.0) {
            let b = total_objective(t, ObjectiveWeights::new(lambda, beta).unwrap());
            let resum = b.recon_x_s + b.recon_x_p + b.recon_y_s + b.recon_y_p + lambda * b.mi_shared - beta * (b.rate_x + b.rate_y);
            prop_assert!((resum - b.total).abs() <= 1e-9);
        }

        #[test]
        fn total_is_linear_in_each_weight(t in terms_strategy(), w in 0.0f64..2.0) {
            let at = |l: f64, b: f64| total_objective(t, ObjectiveWeights::new(l, b).unwrap()).total;
            // three collinear evaluations along each axis
            let (l0, l1, l2) = (at(0.0, w), at(1.0, w), at(2.0, w));
            prop_assert!(((l2 - l1) - (l1 - l0)).abs() <= 1e-9);
            let (b0, b1, b2) = (at(w, 0.0), at(w, 1.5), at(w, 3.0));
            prop_assert!(((b2 - b1) - (b1 - b0)).abs() <= 1e-9);
        }
    }
}
