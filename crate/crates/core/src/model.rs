//! The DVIB network (four Gaussian encoders, four decoders, one JS critic) and
//! the VAE / VIB baselines built from the same parts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{
    js_backward, js_forward, private_rate, private_rate_backward, recon_backward, recon_forward,
    total_objective, Diagnostic, JsCritic, Likelihood, LossBreakdown, ObjectiveTerms, ObjectiveWeights,
};
use crate::error::{Error, Result};
use crate::gauss::{clamp_logvar, clamp_logvar_backward, reparam_backward, reparam_sample, DiagGaussian};
use crate::ndmath::{join, Activation, LinearLayer, Matrix, Mlp, MlpTape, ParamMut, ParamRef, Parameters};

/// MLP trunk followed by linear mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoder {
    pub trunk: Mlp,
    pub head_mean: LinearLayer,
    pub head_logvar: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    trunk: MlpTape,
    trunk_out: Matrix,
    hidden: Matrix,
    logvar_raw: Matrix,
}

impl GaussianEncoder {
    /// `hidden` must be non-empty; the trunk is `in → hidden[0] → … → hidden[k]`
    /// with the activation also applied to the trunk output.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let Some(&last) = hidden.last() else {
            return Err(Error::InvalidArgument("encoder needs at least one hidden layer".into()));
        };
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent dimension must be at least 1".into()));
        }
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        let trunk = Mlp::new(&dims, activation, rng)?;
        let head_mean = LinearLayer::new(last, latent_dim, rng);
        let head_logvar = LinearLayer::new(last, latent_dim, rng);
        Self::from_parts(trunk, head_mean, head_logvar)
    }

    pub fn from_parts(trunk: Mlp, head_mean: LinearLayer, head_logvar: LinearLayer) -> Result<Self> {
        if head_mean.in_dim() != trunk.out_dim()
            || head_logvar.in_dim() != trunk.out_dim()
            || head_mean.out_dim() != head_logvar.out_dim()
        {
            return Err(Error::InvalidArgument(format!(
                "encoder heads {}->{} / {}->{} do not fit trunk output {}",
                head_mean.in_dim(),
                head_mean.out_dim(),
                head_logvar.in_dim(),
                head_logvar.out_dim(),
                trunk.out_dim()
            )));
        }
        Ok(Self {
            trunk,
            head_mean,
            head_logvar,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.head_mean.out_dim()
    }

    pub fn encode(&self, input: &Matrix) -> Result<(DiagGaussian, EncoderTape)> {
        let (trunk_out, trunk) = self.trunk.forward(input)?;
        let hidden = self.trunk.activation().forward(&trunk_out);
        let mean = self.head_mean.forward(&hidden)?;
        let logvar_raw = self.head_logvar.forward(&hidden)?;
        let post = DiagGaussian::new(mean, clamp_logvar(&logvar_raw))?;
        Ok((
            post,
            EncoderTape {
                trunk,
                trunk_out,
                hidden,
                logvar_raw,
            },
        ))
    }

    pub fn posterior(&self, input: &Matrix) -> Result<DiagGaussian> {
        Ok(self.encode(input)?.0)
    }

    /// Accumulates gradients from `(∂L/∂mean, ∂L/∂logvar)` and returns `∂L/∂input`.
    pub fn backward(&mut self, tape: &EncoderTape, mean_grad: &Matrix, logvar_grad: &Matrix) -> Result<Matrix> {
        let lv_grad = clamp_logvar_backward(&tape.logvar_raw, logvar_grad)?;
        let mut d_hidden = self.head_mean.backward(&tape.hidden, mean_grad)?;
        d_hidden.add_assign(&self.head_logvar.backward(&tape.hidden, &lv_grad)?)?;
        let d_trunk = self.trunk.activation().backward(&tape.trunk_out, &d_hidden)?;
        self.trunk.backward(&tape.trunk, &d_trunk)
    }
}

impl Parameters for GaussianEncoder {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.trunk.params_mut(&join(prefix, "trunk"), out);
        self.head_mean.params_mut(&join(prefix, "head_mean"), out);
        self.head_logvar.params_mut(&join(prefix, "head_logvar"), out);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.trunk.params(&join(prefix, "trunk"), out);
        self.head_mean.params(&join(prefix, "head_mean"), out);
        self.head_logvar.params(&join(prefix, "head_logvar"), out);
    }
}

/// Architecture of a [`DvibModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_y: usize,
    /// Shared latent width.
    pub d_s: usize,
    /// Private latent width.
    pub d_p: usize,
    /// Hidden widths of every encoder trunk and decoder.
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
}

impl ModelDims {
    pub fn new(d_x: usize, d_y: usize) -> Self {
        Self {
            d_x,
            d_y,
            d_s: 32,
            d_p: 16,
            hidden: vec![256, 256],
            critic_hidden: vec![128],
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.d_x, self.d_y, self.d_s, self.d_p];
        if widths.contains(&0) || self.hidden.is_empty() || self.hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid model dims {self:?}")));
        }
        Ok(())
    }
}

fn decoder<R: Rng + ?Sized>(latent: usize, hidden: &[usize], out: usize, activation: Activation, rng: &mut R) -> Result<Mlp> {
    let mut dims = vec![latent];
    dims.extend_from_slice(hidden);
    dims.push(out);
    Mlp::new(&dims, activation, rng)
}

/// Standard-normal noise for the four latents of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub x_s: Matrix,
    pub x_p: Matrix,
    pub y_s: Matrix,
    pub y_p: Matrix,
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

impl LatentNoise {
    /// Draws in the fixed order x_s, x_p, y_s, y_p.
    pub fn sample<R: Rng + ?Sized>(rows: usize, d_s: usize, d_p: usize, rng: &mut R) -> Self {
        let x_s = normal_matrix(rows, d_s, rng);
        let x_p = normal_matrix(rows, d_p, rng);
        let y_s = normal_matrix(rows, d_s, rng);
        let y_p = normal_matrix(rows, d_p, rng);
        Self { x_s, x_p, y_s, y_p }
    }

    pub fn zeros(rows: usize, d_s: usize, d_p: usize) -> Self {
        Self {
            x_s: Matrix::zeros(rows, d_s),
            x_p: Matrix::zeros(rows, d_p),
            y_s: Matrix::zeros(rows, d_s),
            y_p: Matrix::zeros(rows, d_p),
        }
    }
}

/// Random row permutation used for the product-of-marginals critic samples.
pub fn sample_shuffle<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(rng);
    perm
}

/// Posteriors and samples of all four latents for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub z_x_s: Matrix,
    pub z_x_p: Matrix,
    pub z_y_s: Matrix,
    pub z_y_p: Matrix,
    pub post_x_s: DiagGaussian,
    pub post_x_p: DiagGaussian,
    pub post_y_s: DiagGaussian,
    pub post_y_p: DiagGaussian,
}

/// Which objective terms contribute to the gradient. Used by the gradient
/// checker to isolate individual terms; training always uses [`TermMask::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub recon_x_s: bool,
    pub recon_x_p: bool,
    pub recon_y_s: bool,
    pub recon_y_p: bool,
    pub mi_shared: bool,
    pub rate_x: bool,
    pub rate_y: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        recon_x_s: true,
        recon_x_p: true,
        recon_y_s: true,
        recon_y_p: true,
        mi_shared: true,
        rate_x: true,
        rate_y: true,
    };

    pub const NONE: TermMask = TermMask {
        recon_x_s: false,
        recon_x_p: false,
        recon_y_s: false,
        recon_y_p: false,
        mi_shared: false,
        rate_x: false,
        rate_y: false,
    };

    /// Objective restricted to the enabled terms, with the same weights.
    pub fn masked_total(&self, b: &LossBreakdown, w: ObjectiveWeights) -> f64 {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        pick(self.recon_x_s, b.recon_x_s)
            + pick(self.recon_x_p, b.recon_x_p)
            + pick(self.recon_y_s, b.recon_y_s)
            + pick(self.recon_y_p, b.recon_y_p)
            + w.lambda * pick(self.mi_shared, b.mi_shared)
            - w.beta * (pick(self.rate_x, b.rate_x) + pick(self.rate_y, b.rate_y))
    }
}

/// Everything the DVIB backward pass needs from the forward pass.
struct DvibForward {
    tapes: [EncoderTape; 4],
    bundle: LatentBundle,
    recon: [crate::bounds::ReconPass; 4],
    js: crate::bounds::JsPass,
    breakdown: LossBreakdown,
}

/// Four per-view Gaussian encoders, four decoders and the shared-latent critic.
#[derive(Debug, Clone, PartialEq)]
pub struct DvibModel {
    pub dims: ModelDims,
    pub enc_x_s: GaussianEncoder,
    pub enc_x_p: GaussianEncoder,
    pub enc_y_s: GaussianEncoder,
    pub enc_y_p: GaussianEncoder,
    pub dec_x_s: Mlp,
    pub dec_x_p: Mlp,
    pub dec_y_s: Mlp,
    pub dec_y_p: Mlp,
    pub critic: JsCritic,
}

impl DvibModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let h = &dims.hidden;
        let act = dims.activation;
        let enc_x_s = GaussianEncoder::new(dims.d_x, h, dims.d_s, act, rng)?;
        let enc_x_p = GaussianEncoder::new(dims.d_x, h, dims.d_p, act, rng)?;
        let enc_y_s = GaussianEncoder::new(dims.d_y, h, dims.d_s, act, rng)?;
        let enc_y_p = GaussianEncoder::new(dims.d_y, h, dims.d_p, act, rng)?;
        let dec_x_s = decoder(dims.d_s, h, dims.d_x, act, rng)?;
        let dec_x_p = decoder(dims.d_p, h, dims.d_x, act, rng)?;
        let dec_y_s = decoder(dims.d_s, h, dims.d_y, act, rng)?;
        let dec_y_p = decoder(dims.d_p, h, dims.d_y, act, rng)?;
        let critic = JsCritic::new(dims.d_s, &dims.critic_hidden, act, rng)?;
        Ok(Self {
            dims,
            enc_x_s,
            enc_x_p,
            enc_y_s,
            enc_y_p,
            dec_x_s,
            dec_x_p,
            dec_y_s,
            dec_y_p,
            critic,
        })
    }

    fn check_batch(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.cols() != self.dims.d_x {
            return Err(Error::shape("encode_x", x.shape(), (x.rows(), self.dims.d_x)));
        }
        if y.cols() != self.dims.d_y {
            return Err(Error::shape("encode_y", y.shape(), (y.rows(), self.dims.d_y)));
        }
        if x.rows() != y.rows() {
            return Err(Error::shape("paired_batch", x.shape(), y.shape()));
        }
        Ok(())
    }

    fn encode_with_tapes(&self, x: &Matrix, y: &Matrix, noise: &LatentNoise) -> Result<(LatentBundle, [EncoderTape; 4])> {
        self.check_batch(x, y)?;
        let (post_x_s, t0) = self.enc_x_s.encode(x)?;
        let (post_x_p, t1) = self.enc_x_p.encode(x)?;
        let (post_y_s, t2) = self.enc_y_s.encode(y)?;
        let (post_y_p, t3) = self.enc_y_p.encode(y)?;
        let bundle = LatentBundle {
            z_x_s: reparam_sample(&post_x_s, &noise.x_s)?,
            z_x_p: reparam_sample(&post_x_p, &noise.x_p)?,
            z_y_s: reparam_sample(&post_y_s, &noise.y_s)?,
            z_y_p: reparam_sample(&post_y_p, &noise.y_p)?,
            post_x_s,
            post_x_p,
            post_y_s,
            post_y_p,
        };
        Ok((bundle, [t0, t1, t2, t3]))
    }

    /// Posteriors of all four encoders and reparameterized samples under `noise`.
    pub fn encode_all(&self, x: &Matrix, y: &Matrix, noise: &LatentNoise) -> Result<LatentBundle> {
        Ok(self.encode_with_tapes(x, y, noise)?.0)
    }

    fn forward(
        &self,
        x: &Matrix,
        y: &Matrix,
        noise: &LatentNoise,
        shuffle: &[usize],
        weights: ObjectiveWeights,
        likelihood: Likelihood,
    ) -> Result<DvibForward> {
        let (bundle, tapes) = self.encode_with_tapes(x, y, noise)?;
        let recon = [
            recon_forward(&self.dec_x_s, &bundle.z_x_s, x, likelihood)?,
            recon_forward(&self.dec_x_p, &bundle.z_x_p, x, likelihood)?,
            recon_forward(&self.dec_y_s, &bundle.z_y_s, y, likelihood)?,
            recon_forward(&self.dec_y_p, &bundle.z_y_p, y, likelihood)?,
        ];
        let js = js_forward(&self.critic, &bundle.z_x_s, &bundle.z_y_s, shuffle)?;
        let terms = ObjectiveTerms {
            recon_x_s: recon[0].value,
            recon_x_p: recon[1].value,
            recon_y_s: recon[2].value,
            recon_y_p: recon[3].value,
            mi_shared: js.value,
            rate_x: private_rate(&bundle.post_x_p),
            rate_y: private_rate(&bundle.post_y_p),
        };
        let breakdown = total_objective(terms, weights);
        if let Some(term) = breakdown.first_non_finite() {
            return Err(Error::NonFinite { term: term.to_string() });
        }
        Ok(DvibForward {
            tapes,
            bundle,
            recon,
            js,
            breakdown,
        })
    }

    /// Objective value without touching gradient buffers.
    pub fn objective(
        &self,
        x: &Matrix,
        y: &Matrix,
        noise: &LatentNoise,
        shuffle: &[usize],
        weights: ObjectiveWeights,
        likelihood: Likelihood,
    ) -> Result<LossBreakdown> {
        Ok(self.forward(x, y, noise, shuffle, weights, likelihood)?.breakdown)
    }

    /// Full forward and backward pass. Gradients of the loss `−total` are
    /// *added* to every parameter's gradient buffer, critic included.
    pub fn dvib_loss(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        noise: &LatentNoise,
        shuffle: &[usize],
        weights: ObjectiveWeights,
        likelihood: Likelihood,
    ) -> Result<LossBreakdown> {
        self.dvib_loss_masked(x, y, noise, shuffle, weights, likelihood, TermMask::ALL)
    }

    /// [`Self::dvib_loss`] with only the terms in `mask` backpropagated.
    #[allow(clippy::too_many_arguments)]
    pub fn dvib_loss_masked(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        noise: &LatentNoise,
        shuffle: &[usize],
        weights: ObjectiveWeights,
        likelihood: Likelihood,
        mask: TermMask,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward(x, y, noise, shuffle, weights, likelihood)?;
        let DvibForward {
            tapes,
            bundle,
            recon,
            js,
            breakdown,
        } = fwd;
        let on = |b: bool| if b { -1.0 } else { 0.0 };

        let dz_x_s = recon_backward(&mut self.dec_x_s, &recon[0], on(mask.recon_x_s))?;
        let dz_x_p = recon_backward(&mut self.dec_x_p, &recon[1], on(mask.recon_x_p))?;
        let dz_y_s = recon_backward(&mut self.dec_y_s, &recon[2], on(mask.recon_y_s))?;
        let dz_y_p = recon_backward(&mut self.dec_y_p, &recon[3], on(mask.recon_y_p))?;

        let mut dz_x_s = dz_x_s;
        let mut dz_y_s = dz_y_s;
        if mask.mi_shared && weights.lambda != 0.0 {
            let (da, db) = js_backward(&mut self.critic, &js, -weights.lambda)?;
            dz_x_s.add_assign(&da)?;
            dz_y_s.add_assign(&db)?;
        }

        let [t_x_s, t_x_p, t_y_s, t_y_p] = tapes;

        let (dm, dl) = reparam_backward(&bundle.post_x_s, &noise.x_s, &dz_x_s)?;
        self.enc_x_s.backward(&t_x_s, &dm, &dl)?;
        let (dm, dl) = reparam_backward(&bundle.post_y_s, &noise.y_s, &dz_y_s)?;
        self.enc_y_s.backward(&t_y_s, &dm, &dl)?;

        let rate_scale = |b: bool| if b { weights.beta } else { 0.0 };
        let (mut dm, mut dl) = reparam_backward(&bundle.post_x_p, &noise.x_p, &dz_x_p)?;
        let (rm, rl) = private_rate_backward(&bundle.post_x_p, rate_scale(mask.rate_x));
        dm.add_assign(&rm)?;
        dl.add_assign(&rl)?;
        self.enc_x_p.backward(&t_x_p, &dm, &dl)?;

        let (mut dm, mut dl) = reparam_backward(&bundle.post_y_p, &noise.y_p, &dz_y_p)?;
        let (rm, rl) = private_rate_backward(&bundle.post_y_p, rate_scale(mask.rate_y));
        dm.add_assign(&rm)?;
        dl.add_assign(&rl)?;
        self.enc_y_p.backward(&t_y_p, &dm, &dl)?;

        Ok(breakdown)
    }

    pub fn encoder_disagreement(&self, y: &Matrix) -> Diagnostic {
        crate::bounds::encoder_disagreement_diagnostic(&self.enc_x_p, &self.enc_y_p, y)
    }
}

impl Parameters for DvibModel {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.enc_x_s.params_mut(&join(prefix, "enc_x_s"), out);
        self.enc_x_p.params_mut(&join(prefix, "enc_x_p"), out);
        self.enc_y_s.params_mut(&join(prefix, "enc_y_s"), out);
        self.enc_y_p.params_mut(&join(prefix, "enc_y_p"), out);
        self.dec_x_s.params_mut(&join(prefix, "dec_x_s"), out);
        self.dec_x_p.params_mut(&join(prefix, "dec_x_p"), out);
        self.dec_y_s.params_mut(&join(prefix, "dec_y_s"), out);
        self.dec_y_p.params_mut(&join(prefix, "dec_y_p"), out);
        self.critic.params_mut(&join(prefix, "critic"), out);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.enc_x_s.params(&join(prefix, "enc_x_s"), out);
        self.enc_x_p.params(&join(prefix, "enc_x_p"), out);
        self.enc_y_s.params(&join(prefix, "enc_y_s"), out);
        self.enc_y_p.params(&join(prefix, "enc_y_p"), out);
        self.dec_x_s.params(&join(prefix, "dec_x_s"), out);
        self.dec_x_p.params(&join(prefix, "dec_x_p"), out);
        self.dec_y_s.params(&join(prefix, "dec_y_s"), out);
        self.dec_y_p.params(&join(prefix, "dec_y_p"), out);
        self.critic.params(&join(prefix, "critic"), out);
    }
}

/// Architecture of the single-encoder baselines on concatenated views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineDims {
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// One Gaussian encoder on `[x ‖ y]` and one decoder back to `[x ‖ y]`.
/// With `β = 1` its objective is the VAE evidence lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct VibModel {
    pub dims: BaselineDims,
    pub encoder: GaussianEncoder,
    pub decoder: Mlp,
}

impl VibModel {
    pub fn new<R: Rng + ?Sized>(dims: BaselineDims, rng: &mut R) -> Result<Self> {
        if dims.d_x == 0 || dims.d_y == 0 || dims.d_z == 0 || dims.hidden.is_empty() {
            return Err(Error::InvalidArgument(format!("invalid baseline dims {dims:?}")));
        }
        let d_in = dims.d_x + dims.d_y;
        let encoder = GaussianEncoder::new(d_in, &dims.hidden, dims.d_z, dims.activation, rng)?;
        let decoder = decoder(dims.d_z, &dims.hidden, d_in, dims.activation, rng)?;
        Ok(Self { dims, encoder, decoder })
    }

    pub fn posterior(&self, x: &Matrix, y: &Matrix) -> Result<DiagGaussian> {
        self.encoder.posterior(&Matrix::hcat(x, y)?)
    }

    fn check_batch(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.cols() != self.dims.d_x || y.cols() != self.dims.d_y || x.rows() != y.rows() {
            return Err(Error::shape("baseline_batch", x.shape(), y.shape()));
        }
        Ok(())
    }

    /// `recon − β·rate`. The reconstruction of the x block is reported as
    /// `recon_x_s`, that of the y block as `recon_y_s`, the rate as `rate_x`;
    /// every other field is zero. Gradients of `−total` are accumulated.
    pub fn vib_baseline_loss(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        noise: &Matrix,
        beta: f64,
        likelihood: Likelihood,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward(x, y, noise, beta, likelihood)?;
        let dz = self.decoder.backward(&fwd.dec_tape, &fwd.output_grad.scale(-1.0))?;
        let (mut dm, mut dl) = reparam_backward(&fwd.post, noise, &dz)?;
        let (rm, rl) = private_rate_backward(&fwd.post, beta);
        dm.add_assign(&rm)?;
        dl.add_assign(&rl)?;
        self.encoder.backward(&fwd.enc_tape, &dm, &dl)?;
        Ok(fwd.breakdown)
    }

    /// [`Self::vib_baseline_loss`] at `β = 1`.
    pub fn vae_baseline_loss(&mut self, x: &Matrix, y: &Matrix, noise: &Matrix, likelihood: Likelihood) -> Result<LossBreakdown> {
        self.vib_baseline_loss(x, y, noise, 1.0, likelihood)
    }

    /// Objective value without touching gradient buffers.
    pub fn objective(&self, x: &Matrix, y: &Matrix, noise: &Matrix, beta: f64, likelihood: Likelihood) -> Result<LossBreakdown> {
        Ok(self.forward(x, y, noise, beta, likelihood)?.breakdown)
    }

    fn forward(&self, x: &Matrix, y: &Matrix, noise: &Matrix, beta: f64, likelihood: Likelihood) -> Result<BaselineForward> {
        self.check_batch(x, y)?;
        let weights = ObjectiveWeights::new(0.0, beta)?;
        let input = Matrix::hcat(x, y)?;
        let (post, enc_tape) = self.encoder.encode(&input)?;
        let z = reparam_sample(&post, noise)?;
        let (output, dec_tape) = self.decoder.forward(&z)?;
        let (out_x, out_y) = output.split_cols(self.dims.d_x)?;
        let (rx, gx) = crate::bounds::loglik_and_grad(&out_x, x, likelihood)?;
        let (ry, gy) = crate::bounds::loglik_and_grad(&out_y, y, likelihood)?;
        let breakdown = total_objective(
            ObjectiveTerms {
                recon_x_s: rx,
                recon_y_s: ry,
                rate_x: private_rate(&post),
                ..Default::default()
            },
            weights,
        );
        if let Some(term) = breakdown.first_non_finite() {
            return Err(Error::NonFinite { term: term.to_string() });
        }
        Ok(BaselineForward {
            post,
            enc_tape,
            dec_tape,
            output_grad: Matrix::hcat(&gx, &gy)?,
            breakdown,
        })
    }
}

struct BaselineForward {
    post: DiagGaussian,
    enc_tape: EncoderTape,
    dec_tape: MlpTape,
    output_grad: Matrix,
    breakdown: LossBreakdown,
}

impl Parameters for VibModel {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.encoder.params_mut(&join(prefix, "encoder"), out);
        self.decoder.params_mut(&join(prefix, "decoder"), out);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.encoder.params(&join(prefix, "encoder"), out);
        self.decoder.params(&join(prefix, "decoder"), out);
    }
}

/// Named latent representations that can be probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Representation {
    #[serde(rename = "z_x_s")]
    XShared,
    #[serde(rename = "z_x_p")]
    XPrivate,
    #[serde(rename = "z_y_s")]
    YShared,
    #[serde(rename = "z_y_p")]
    YPrivate,
    /// The single latent of a baseline model.
    #[serde(rename = "z_joint")]
    Joint,
}

impl Representation {
    pub const DVIB: [Representation; 4] = [
        Representation::XShared,
        Representation::XPrivate,
        Representation::YShared,
        Representation::YPrivate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Representation::XShared => "z_x_s",
            Representation::XPrivate => "z_x_p",
            Representation::YShared => "z_y_s",
            Representation::YPrivate => "z_y_p",
            Representation::Joint => "z_joint",
        }
    }
}

/// Deterministic (posterior-mean) latent codes for evaluation.
pub trait Representations {
    fn representations(&self, x: &Matrix, y: &Matrix) -> Result<Vec<(Representation, Matrix)>>;
}

impl Representations for DvibModel {
    fn representations(&self, x: &Matrix, y: &Matrix) -> Result<Vec<(Representation, Matrix)>> {
        let noise = LatentNoise::zeros(x.rows(), self.dims.d_s, self.dims.d_p);
        let b = self.encode_all(x, y, &noise)?;
        Ok(vec![
            (Representation::XShared, b.z_x_s),
            (Representation::XPrivate, b.z_x_p),
            (Representation::YShared, b.z_y_s),
            (Representation::YPrivate, b.z_y_p),
        ])
    }
}

impl Representations for VibModel {
    fn representations(&self, x: &Matrix, y: &Matrix) -> Result<Vec<(Representation, Matrix)>> {
        Ok(vec![(Representation::Joint, self.posterior(x, y)?.mean)])
    }
}
