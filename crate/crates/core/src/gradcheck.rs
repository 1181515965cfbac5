//! Central finite-difference verification of every hand-written gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::{
    js_backward, js_forward, private_rate, private_rate_backward, recon_backward, recon_forward, JsCritic, Likelihood,
    ObjectiveWeights,
};
use crate::error::Result;
use crate::gauss::{reparam_backward, reparam_sample, DiagGaussian};
use crate::model::{normal_matrix, sample_shuffle, BaselineDims, DvibModel, LatentNoise, ModelDims, TermMask, VibModel};
use crate::ndmath::{Activation, Matrix, Mlp, Parameters};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)`; zero when both norms vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale < 1e-9 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Compares the accumulated parameter gradients of `model` against central
/// differences of `loss`, tensor by tensor, and returns the worst relative
/// error. `accumulate` must add `∂loss/∂θ` into the zeroed gradient buffers.
pub fn check_parameters<M: Parameters>(
    model: &mut M,
    h: f64,
    mut loss: impl FnMut(&M) -> f64,
    accumulate: impl FnOnce(&mut M) -> Result<()>,
    distort: f64,
) -> Result<f64> {
    model.zero_grad();
    accumulate(model)?;
    let analytic: Vec<Vec<f64>> = {
        let mut views = Vec::new();
        model.params_mut("", &mut views);
        views.iter().map(|v| v.grad.iter().map(|g| g * distort).collect()).collect()
    };
    let mut worst: f64 = 0.0;
    for (t, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = nudge(model, t, i, None);
            nudge(model, t, i, Some(orig + h));
            let up = loss(model);
            nudge(model, t, i, Some(orig - h));
            let down = loss(model);
            nudge(model, t, i, Some(orig));
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(worst)
}

fn nudge<M: Parameters>(model: &mut M, tensor: usize, index: usize, value: Option<f64>) -> f64 {
    let mut views = Vec::new();
    model.params_mut("", &mut views);
    let slot = &mut views[tensor].value[index];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub term: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: scale the analytic gradient of the named term by 1.01.
    pub perturb: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            perturb: None,
        }
    }
}

/// Names of every check [`run_gradcheck`] performs, in order.
pub const TERMS: &[&str] = &[
    "linear_layer",
    "mlp_tanh",
    "mlp_relu",
    "reparam_sample",
    "private_rate",
    "recon_gaussian",
    "recon_bernoulli",
    "js_mi_lower_bound",
    "dvib.recon_x_s",
    "dvib.recon_x_p",
    "dvib.recon_y_s",
    "dvib.recon_y_p",
    "dvib.mi_shared",
    "dvib.rate_x",
    "dvib.rate_y",
    "dvib.total",
    "dvib.total_bernoulli",
    "vib.total",
    "vae.total",
];

/// Runs every gradient check on tiny random problems.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let distort = |name: &str| if opts.perturb.as_deref() == Some(name) { 1.01 } else { 1.0 };
    let mut entries = Vec::new();
    let mut record = |term: &str, err: f64| {
        entries.push(GradcheckEntry {
            term: term.to_string(),
            max_rel_error: err,
            passed: err <= opts.tolerance,
        })
    };

    let batch = 6;
    let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        use rand::Rng;
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    };

    // Plain layers and MLPs against a random linear functional of the output.
    for (term, dims, act) in [
        ("linear_layer", vec![4, 3], Activation::Identity),
        ("mlp_tanh", vec![4, 5, 5, 3], Activation::Tanh),
        ("mlp_relu", vec![4, 5, 5, 3], Activation::Relu),
    ] {
        let mut net = Mlp::new(&dims, act, &mut rng)?;
        for layer in net.layers_mut() {
            for b in layer.bias.iter_mut() {
                *b = rng_sym(&mut rng);
            }
        }
        let input = uniform(batch, dims[0], &mut rng);
        let coef = uniform(batch, dims[dims.len() - 1], &mut rng);
        let functional = |out: &Matrix| out.hadamard(&coef).expect("shapes fixed").sum();
        let mut in_grad = Matrix::zeros(0, 0);
        let param_err = check_parameters(
            &mut net,
            h,
            |n| functional(&n.predict(&input).expect("shapes fixed")),
            |n| {
                let (_, tape) = n.forward(&input)?;
                in_grad = n.backward(&tape, &coef)?;
                Ok(())
            },
            distort(term),
        )?;
        let num = numeric_gradient(&input, h, |x| functional(&net.predict(x).expect("shapes fixed")));
        let input_err = relative_error(&in_grad.scale(distort(term)).into_vec(), num.as_slice());
        record(term, param_err.max(input_err));
    }

    // Reparameterization: gradient of ⟨c, z⟩ w.r.t. mean and logvar.
    {
        let mean = uniform(batch, 3, &mut rng);
        let logvar = uniform(batch, 3, &mut rng);
        let noise = normal_matrix(batch, 3, &mut rng);
        let coef = uniform(batch, 3, &mut rng);
        let post = DiagGaussian::new(mean.clone(), logvar.clone())?;
        let (dm, dl) = reparam_backward(&post, &noise, &coef)?;
        let f = |m: &Matrix, l: &Matrix| {
            let p = DiagGaussian::new(m.clone(), l.clone()).expect("same shapes");
            reparam_sample(&p, &noise).expect("same shapes").hadamard(&coef).expect("same shapes").sum()
        };
        let nm = numeric_gradient(&mean, h, |m| f(m, &logvar));
        let nl = numeric_gradient(&logvar, h, |l| f(&mean, l));
        let d = distort("reparam_sample");
        let err = relative_error(&dm.scale(d).into_vec(), nm.as_slice())
            .max(relative_error(&dl.scale(d).into_vec(), nl.as_slice()));
        record("reparam_sample", err);
    }

    // Private rate w.r.t. posterior parameters.
    {
        let mean = uniform(batch, 3, &mut rng);
        let logvar = uniform(batch, 3, &mut rng);
        let post = DiagGaussian::new(mean.clone(), logvar.clone())?;
        let (dm, dl) = private_rate_backward(&post, 1.0);
        let f = |m: &Matrix, l: &Matrix| private_rate(&DiagGaussian::new(m.clone(), l.clone()).expect("same shapes"));
        let nm = numeric_gradient(&mean, h, |m| f(m, &logvar));
        let nl = numeric_gradient(&logvar, h, |l| f(&mean, l));
        let d = distort("private_rate");
        let err = relative_error(&dm.scale(d).into_vec(), nm.as_slice())
            .max(relative_error(&dl.scale(d).into_vec(), nl.as_slice()));
        record("private_rate", err);
    }

    // Reconstruction log-likelihoods through a decoder.
    for (term, likelihood) in [("recon_gaussian", Likelihood::Gaussian), ("recon_bernoulli", Likelihood::Bernoulli)] {
        let mut dec = Mlp::new(&[3, 5, 4], Activation::Tanh, &mut rng)?;
        let z = uniform(batch, 3, &mut rng);
        let target = match likelihood {
            Likelihood::Gaussian => uniform(batch, 4, &mut rng),
            Likelihood::Bernoulli => uniform(batch, 4, &mut rng).map(|v| 0.5 * (v + 1.0)),
        };
        let value = |d: &Mlp, z: &Matrix| -> f64 {
            recon_forward(d, z, &target, likelihood).expect("shapes fixed").value
        };
        let mut dz = Matrix::zeros(0, 0);
        let err = check_parameters(
            &mut dec,
            h,
            |d| -value(d, &z),
            |d| {
                let pass = recon_forward(d, &z, &target, likelihood)?;
                dz = recon_backward(d, &pass, -1.0)?;
                Ok(())
            },
            distort(term),
        )?;
        let nz = numeric_gradient(&z, h, |zz| -value(&dec, zz));
        record(term, err.max(relative_error(&dz.scale(distort(term)).into_vec(), nz.as_slice())));
    }

    // JS estimator through the critic and both latent inputs.
    {
        let mut critic = JsCritic::new(2, &[5], Activation::Tanh, &mut rng)?;
        let z_a = uniform(batch, 2, &mut rng);
        let z_b = uniform(batch, 2, &mut rng);
        let shuffle = sample_shuffle(batch, &mut rng);
        let mut grads = (Matrix::zeros(0, 0), Matrix::zeros(0, 0));
        let err = check_parameters(
            &mut critic,
            h,
            |c| js_forward(c, &z_a, &z_b, &shuffle).expect("shapes fixed").value,
            |c| {
                let pass = js_forward(c, &z_a, &z_b, &shuffle)?;
                grads = js_backward(c, &pass, 1.0)?;
                Ok(())
            },
            distort("js_mi_lower_bound"),
        )?;
        let d = distort("js_mi_lower_bound");
        let na = numeric_gradient(&z_a, h, |a| js_forward(&critic, a, &z_b, &shuffle).expect("shapes").value);
        let nb = numeric_gradient(&z_b, h, |b| js_forward(&critic, &z_a, b, &shuffle).expect("shapes").value);
        let err = err
            .max(relative_error(&grads.0.scale(d).into_vec(), na.as_slice()))
            .max(relative_error(&grads.1.scale(d).into_vec(), nb.as_slice()));
        record("js_mi_lower_bound", err);
    }

    // Full DVIB model, one term at a time and all together.
    let dims = ModelDims {
        d_x: 4,
        d_y: 3,
        d_s: 2,
        d_p: 2,
        hidden: vec![5],
        critic_hidden: vec![4],
        activation: Activation::Tanh,
    };
    let mut model = DvibModel::new(dims.clone(), &mut rng)?;
    let x = uniform(batch, 4, &mut rng);
    let y = uniform(batch, 3, &mut rng);
    let y01 = y.map(|v| 0.5 * (v + 1.0));
    let x01 = x.map(|v| 0.5 * (v + 1.0));
    let noise = LatentNoise::sample(batch, dims.d_s, dims.d_p, &mut rng);
    let shuffle = sample_shuffle(batch, &mut rng);
    let weights = ObjectiveWeights::new(0.7, 0.3)?;
    let single = |f: fn(&mut TermMask)| {
        let mut m = TermMask::NONE;
        f(&mut m);
        m
    };
    let cases: Vec<(&str, TermMask, Likelihood)> = vec![
        ("dvib.recon_x_s", single(|m| m.recon_x_s = true), Likelihood::Gaussian),
        ("dvib.recon_x_p", single(|m| m.recon_x_p = true), Likelihood::Gaussian),
        ("dvib.recon_y_s", single(|m| m.recon_y_s = true), Likelihood::Gaussian),
        ("dvib.recon_y_p", single(|m| m.recon_y_p = true), Likelihood::Gaussian),
        ("dvib.mi_shared", single(|m| m.mi_shared = true), Likelihood::Gaussian),
        ("dvib.rate_x", single(|m| m.rate_x = true), Likelihood::Gaussian),
        ("dvib.rate_y", single(|m| m.rate_y = true), Likelihood::Gaussian),
        ("dvib.total", TermMask::ALL, Likelihood::Gaussian),
        ("dvib.total_bernoulli", TermMask::ALL, Likelihood::Bernoulli),
    ];
    for (term, mask, likelihood) in cases {
        let (xx, yy) = match likelihood {
            Likelihood::Gaussian => (&x, &y),
            Likelihood::Bernoulli => (&x01, &y01),
        };
        let err = check_parameters(
            &mut model,
            h,
            |m| {
                let b = m.objective(xx, yy, &noise, &shuffle, weights, likelihood).expect("finite");
                -mask.masked_total(&b, weights)
            },
            |m| m.dvib_loss_masked(xx, yy, &noise, &shuffle, weights, likelihood, mask).map(|_| ()),
            distort(term),
        )?;
        record(term, err);
    }

    // Baselines on concatenated views.
    let bdims = BaselineDims {
        d_x: 4,
        d_y: 3,
        d_z: 2,
        hidden: vec![5],
        activation: Activation::Tanh,
    };
    let mut base = VibModel::new(bdims, &mut rng)?;
    let bnoise = normal_matrix(batch, 2, &mut rng);
    for (term, beta) in [("vib.total", 0.3), ("vae.total", 1.0)] {
        let err = check_parameters(
            &mut base,
            h,
            |m| -m.objective(&x, &y, &bnoise, beta, Likelihood::Gaussian).expect("finite").total,
            |m| {
                if term == "vae.total" {
                    m.vae_baseline_loss(&x, &y, &bnoise, Likelihood::Gaussian).map(|_| ())
                } else {
                    m.vib_baseline_loss(&x, &y, &bnoise, beta, Likelihood::Gaussian).map(|_| ())
                }
            },
            distort(term),
        )?;
        record(term, err);
    }

    Ok(GradcheckReport {
        seed: opts.seed,
        step: h,
        tolerance: opts.tolerance,
        entries,
    })
}

fn rng_sym(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    rng.random_range(-0.5..0.5)
}
