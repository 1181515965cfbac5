use std::time::Instant;

use dvib::bounds::Likelihood;
use dvib::data::{gen_factor_dataset, train_test_split, FactorSpec, MultiviewDataset};
use dvib::gauss::{reparam_backward, reparam_sample};
use dvib::model::{GaussianEncoder, LatentNoise};
use dvib::ndmath::{Mlp, ParamMut, Parameters};
use dvib::train::{
    batches, epoch_order, train, training_rng, AnyModel, Checkpoint, ModelKind, TrainConfig,
};
use dvib::Error;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 32,
        d_s: 4,
        d_p: 3,
        hidden: vec![16],
        critic_hidden: vec![12],
        ..TrainConfig::default()
    }
}

fn small_data() -> MultiviewDataset {
    gen_factor_dataset(&FactorSpec {
        n: 200,
        d_x: 16,
        d_y: 16,
        ..FactorSpec::default()
    })
    .unwrap()
}

fn param_values(m: &AnyModel) -> Vec<f64> {
    let mut views = Vec::new();
    m.params("", &mut views);
    views.iter().flat_map(|v| v.value.iter().copied()).collect()
}

#[test]
fn same_seed_is_bit_identical() {
    let data = small_data();
    let cfg = small_cfg();
    let run = || {
        let mut m = AnyModel::new(&cfg, 16, 16).unwrap();
        let log = train(&mut m, &data, &cfg).unwrap();
        (param_values(&m), log.to_csv())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    let mut other = AnyModel::new(&TrainConfig { seed: 1, ..cfg.clone() }, 16, 16).unwrap();
    train(&mut other, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(param_values(&other), a);
}

#[test]
fn objective_improves_over_first_five_epochs_on_default_factor_data() {
    let data = gen_factor_dataset(&FactorSpec::default()).unwrap();
    let split = train_test_split(data.len(), 0);
    let train_set = data.subset(&split.train).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut m = AnyModel::new(&cfg, data.x.cols(), data.y.cols()).unwrap();
    let started = Instant::now();
    let log = train(&mut m, &train_set, &cfg).unwrap();
    eprintln!("5 default epochs took {:.1}s", started.elapsed().as_secs_f64());
    let totals: Vec<f64> = log.epochs.iter().map(|r| r.terms.total).collect();
    assert!(totals.windows(2).all(|w| w[1] > w[0]), "{totals:?}");
    assert!(log.epochs.iter().all(|r| r.terms.rate_x >= 0.0 && r.terms.rate_y >= 0.0));
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_evaluates_identically() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Dvib, ModelKind::Vae, ModelKind::Vib] {
        let cfg = TrainConfig { model: kind, ..small_cfg() };
        let mut m = AnyModel::new(&cfg, 16, 16).unwrap();
        train(&mut m, &data, &cfg).unwrap();
        let path = dir.path().join(format!("{}.dvck", kind.name()));
        let ck = Checkpoint::new(cfg.clone(), m).unwrap();
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, ck.config);
        // gradient buffers are not persisted, values are
        assert_eq!(param_values(&loaded.model), param_values(&ck.model));
        let again = dir.path().join("again.dvck");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

        use dvib::model::Representations;
        let a = ck.model.representations(&data.x, &data.y).unwrap();
        let b = loaded.model.representations(&data.x, &data.y).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn truncated_checkpoint_is_corrupt_payload() {
    let cfg = small_cfg();
    let ck = Checkpoint::new(cfg.clone(), AnyModel::new(&cfg, 16, 16).unwrap()).unwrap();
    let bytes = ck.to_bytes().unwrap();
    for cut in [0, 3, 7, 15, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::CorruptPayload(_)), "cut {cut}: {err:?}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptPayload(_))));
}

#[test]
fn huge_beta_without_mi_pushes_private_rates_to_zero() {
    let data = small_data();
    let cfg = TrainConfig {
        epochs: 80,
        batch_size: 16,
        lambda: 0.0,
        beta: 1e3,
        ..small_cfg()
    };
    let mut m = AnyModel::new(&cfg, 16, 16).unwrap();
    let log = train(&mut m, &data, &cfg).unwrap();
    let last = log.epochs.last().unwrap().terms;
    assert!(last.rate_x < 0.05 && last.rate_y < 0.05, "{last:?}");
    assert!(log.epochs.iter().all(|r| r.terms.rate_x >= 0.0 && r.terms.rate_y >= 0.0));
}

/// Plain Adam with the default hyperparameters, kept separate from the library.
struct RefAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl RefAdam {
    fn step(&mut self, params: &mut [ParamMut<'_>]) {
        self.t += 1;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (k, p) in params.iter_mut().enumerate() {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * g;
                self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * g * g;
                let mh = self.m[k][i] / (1.0 - b1.powi(self.t));
                let vh = self.v[k][i] / (1.0 - b2.powi(self.t));
                p.value[i] -= self.lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Trains one encoder/decoder pair on its own reconstruction and returns the
/// epoch-mean log-likelihood of the final epoch.
fn train_pair(
    mut enc: GaussianEncoder,
    mut dec: Mlp,
    which: usize,
    data: &MultiviewDataset,
    cfg: &TrainConfig,
) -> f64 {
    let mut rng = training_rng(cfg.seed);
    let mut adam = RefAdam { m: vec![], v: vec![], t: 0, lr: cfg.lr };
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let noise = LatentNoise::sample(idx.len(), cfg.d_s, cfg.d_p, &mut rng);
            let _shuffle = dvib::model::sample_shuffle(idx.len(), &mut rng);
            let eps = [&noise.x_s, &noise.x_p, &noise.y_s, &noise.y_p][which];
            let input = if which < 2 { &data.x } else { &data.y };
            let input = input.select_rows(idx).unwrap();
            enc.zero_grad();
            dec.zero_grad();
            let (post, tape) = enc.encode(&input).unwrap();
            let z = reparam_sample(&post, eps).unwrap();
            let (out, dtape) = dec.forward(&z).unwrap();
            let diff = out.sub(&input).unwrap();
            let n = idx.len() as f64;
            let d = input.cols() as f64;
            let value = -0.5 * diff.hadamard(&diff).unwrap().sum() / n
                - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
            // gradient of −value with respect to the decoder output
            let dz = dec.backward(&dtape, &diff.scale(1.0 / n)).unwrap();
            let (dm, dl) = reparam_backward(&post, eps, &dz).unwrap();
            enc.backward(&tape, &dm, &dl).unwrap();
            let mut views = Vec::new();
            enc.params_mut("enc", &mut views);
            dec.params_mut("dec", &mut views);
            adam.step(&mut views);
            sum += value * n;
            count += idx.len();
        }
        last = sum / count as f64;
    }
    last
}

#[test]
fn no_mi_no_rate_equals_four_independent_reconstruction_trainings() {
    let data = small_data();
    let cfg = TrainConfig {
        epochs: 4,
        lambda: 0.0,
        beta: 0.0,
        likelihood: Likelihood::Gaussian,
        ..small_cfg()
    };
    let initial = match AnyModel::new(&cfg, 16, 16).unwrap() {
        AnyModel::Dvib(m) => m,
        _ => unreachable!(),
    };
    let mut joint = AnyModel::Dvib(initial.clone());
    let log = train(&mut joint, &data, &cfg).unwrap();
    let last = log.epochs.last().unwrap().terms;
    let pairs = [
        (initial.enc_x_s.clone(), initial.dec_x_s.clone(), last.recon_x_s),
        (initial.enc_x_p.clone(), initial.dec_x_p.clone(), last.recon_x_p),
        (initial.enc_y_s.clone(), initial.dec_y_s.clone(), last.recon_y_s),
        (initial.enc_y_p.clone(), initial.dec_y_p.clone(), last.recon_y_p),
    ];
    for (which, (enc, dec, joint_value)) in pairs.into_iter().enumerate() {
        let alone = train_pair(enc, dec, which, &data, &cfg);
        assert!((alone - joint_value).abs() <= 1e-6, "pair {which}: {alone} vs {joint_value}");
    }
    let AnyModel::Dvib(trained) = joint else { unreachable!() };
    assert_eq!(trained.critic, initial.critic, "critic must not move without the MI term");
}

#[test]
fn split_is_disjoint_and_exhaustive() {
    let s = train_test_split(5000, 3);
    let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..5000).collect::<Vec<_>>());
    assert_eq!(s.test.len(), 1000);
}
