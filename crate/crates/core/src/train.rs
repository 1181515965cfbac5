//! Minibatch training loop, per-epoch logging and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{js_forward, Diagnostic, Likelihood, LossBreakdown, ObjectiveWeights};
use crate::container::{find, read_arrays, write_arrays, NamedArray, Reader};
use crate::data::{MultiviewDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{disentanglement_grid, ProbeConfig, ProbeReport};
use crate::model::{
    normal_matrix, sample_shuffle, BaselineDims, DvibModel, LatentNoise, ModelDims, Representation, Representations,
    TermMask, VibModel,
};
use crate::ndmath::{Activation, Adam, AdamConfig, Matrix, ParamMut, ParamRef, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Stream ids that keep initialization, batching and monitoring draws apart.
const TRAIN_STREAM: u64 = 1;
const MONITOR_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Dvib,
    Vae,
    Vib,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dvib => "dvib",
            ModelKind::Vae => "vae",
            ModelKind::Vib => "vib",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub d_s: usize,
    pub d_p: usize,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Likelihood,
    pub eval_every: usize,
    /// Stop after this many epochs without a better epoch objective.
    pub patience: Option<usize>,
    pub probe: ProbeConfig,
    /// Fill the `seconds` log column. Off by default so logs are reproducible.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Dvib,
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            lambda: 1.0,
            beta: 1e-3,
            seed: 0,
            d_s: 32,
            d_p: 16,
            hidden: vec![256, 256],
            critic_hidden: vec![128],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
            eval_every: 10,
            patience: None,
            probe: ProbeConfig::default(),
            log_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ObjectiveWeights::new(self.lambda, self.beta)?;
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.d_s == 0 || self.d_p == 0 {
            return bad("latent dims must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden widths must be positive and non-empty");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        if !(self.probe.lr.is_finite() && self.probe.lr > 0.0) {
            return bad("probe lr must be positive");
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<ObjectiveWeights> {
        ObjectiveWeights::new(self.lambda, self.beta)
    }

    pub fn model_dims(&self, d_x: usize, d_y: usize) -> ModelDims {
        ModelDims {
            d_x,
            d_y,
            d_s: self.d_s,
            d_p: self.d_p,
            hidden: self.hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            activation: self.activation,
        }
    }

    /// Baselines get one latent as wide as a single shared representation.
    pub fn baseline_dims(&self, d_x: usize, d_y: usize) -> BaselineDims {
        BaselineDims {
            d_x,
            d_y,
            d_z: self.d_s,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

/// A DVIB model or one of the single-latent baselines.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Dvib(DvibModel),
    Vae(VibModel),
    Vib(VibModel),
}

impl AnyModel {
    /// Freshly initialized model; initialization is a function of `cfg.seed` only.
    pub fn new(cfg: &TrainConfig, d_x: usize, d_y: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(match cfg.model {
            ModelKind::Dvib => AnyModel::Dvib(DvibModel::new(cfg.model_dims(d_x, d_y), &mut rng)?),
            ModelKind::Vae => AnyModel::Vae(VibModel::new(cfg.baseline_dims(d_x, d_y), &mut rng)?),
            ModelKind::Vib => AnyModel::Vib(VibModel::new(cfg.baseline_dims(d_x, d_y), &mut rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Dvib(_) => ModelKind::Dvib,
            AnyModel::Vae(_) => ModelKind::Vae,
            AnyModel::Vib(_) => ModelKind::Vib,
        }
    }

    pub fn view_dims(&self) -> (usize, usize) {
        match self {
            AnyModel::Dvib(m) => (m.dims.d_x, m.dims.d_y),
            AnyModel::Vae(m) | AnyModel::Vib(m) => (m.dims.d_x, m.dims.d_y),
        }
    }

    /// One forward/backward pass on a batch, drawing noise and then the
    /// critic shuffle from `rng`. Gradients are accumulated, not applied.
    pub fn accumulate_gradients(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        cfg: &TrainConfig,
        mask: TermMask,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let rows = x.rows();
        match self {
            AnyModel::Dvib(m) => {
                let noise = LatentNoise::sample(rows, m.dims.d_s, m.dims.d_p, rng);
                let shuffle = sample_shuffle(rows, rng);
                m.dvib_loss_masked(x, y, &noise, &shuffle, cfg.weights()?, cfg.likelihood, mask)
            }
            AnyModel::Vae(m) => {
                let noise = normal_matrix(rows, m.dims.d_z, rng);
                m.vae_baseline_loss(x, y, &noise, cfg.likelihood)
            }
            AnyModel::Vib(m) => {
                let noise = normal_matrix(rows, m.dims.d_z, rng);
                m.vib_baseline_loss(x, y, &noise, cfg.beta, cfg.likelihood)
            }
        }
    }

    pub fn encoder_disagreement(&self, y: &Matrix) -> Diagnostic {
        match self {
            AnyModel::Dvib(m) => m.encoder_disagreement(y),
            _ => Diagnostic::Skipped("baseline has no private encoders".into()),
        }
    }

    /// Mean critic score on paired minus shuffled shared latents, or `None`
    /// for models without a critic.
    pub fn critic_score_gap(&self, x: &Matrix, y: &Matrix, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
        let AnyModel::Dvib(m) = self else {
            return Ok(None);
        };
        let noise = LatentNoise::sample(x.rows(), m.dims.d_s, m.dims.d_p, rng);
        let shuffle = sample_shuffle(x.rows(), rng);
        let bundle = m.encode_all(x, y, &noise)?;
        Ok(Some(js_forward(&m.critic, &bundle.z_x_s, &bundle.z_y_s, &shuffle)?.score_gap()))
    }
}

impl Representations for AnyModel {
    fn representations(&self, x: &Matrix, y: &Matrix) -> Result<Vec<(Representation, Matrix)>> {
        match self {
            AnyModel::Dvib(m) => m.representations(x, y),
            AnyModel::Vae(m) | AnyModel::Vib(m) => m.representations(x, y),
        }
    }
}

impl Parameters for AnyModel {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        match self {
            AnyModel::Dvib(m) => m.params_mut(prefix, out),
            AnyModel::Vae(m) | AnyModel::Vib(m) => m.params_mut(prefix, out),
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        match self {
            AnyModel::Dvib(m) => m.params(prefix, out),
            AnyModel::Vae(m) | AnyModel::Vib(m) => m.params(prefix, out),
        }
    }
}

/// RNG driving epoch order, latent noise and critic shuffles.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Consecutive batches of `order`; the last one may be short.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch terms over the epoch.
    pub terms: LossBreakdown,
    pub enc_disagree: Option<f64>,
    pub seconds: Option<f64>,
    /// Paired minus shuffled critic score on the monitoring set.
    pub heldout_score_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub grids: Vec<(usize, Vec<ProbeReport>)>,
    pub stopped_early: bool,
}

pub const LOG_CSV_HEADER: &str =
    "epoch,total,recon_x_s,recon_x_p,recon_y_s,recon_y_p,mi_shared,rate_x,rate_y,enc_disagree,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let t = &r.terms;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},",
                r.epoch, t.total, t.recon_x_s, t.recon_x_p, t.recon_y_s, t.recon_y_p, t.mi_shared, t.rate_x, t.rate_y
            );
            match r.enc_disagree {
                Some(v) => {
                    let _ = write!(out, "{v},");
                }
                None => out.push_str("NA,"),
            }
            if let Some(s) = r.seconds {
                let _ = write!(out, "{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn final_grid(&self) -> Option<&[ProbeReport]> {
        self.grids.last().map(|(_, g)| g.as_slice())
    }
}

/// Optional extras evaluated during training.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    /// Held-out views on which the critic score gap is measured each epoch.
    pub heldout: Option<(&'a Matrix, &'a Matrix)>,
    /// Full dataset and split for the probe grid every `eval_every` epochs.
    pub grid: Option<(&'a MultiviewDataset, &'a Split)>,
    /// Terms that receive gradients. Anything but `ALL` is for experiments.
    pub mask: TermMask,
}

impl Default for Monitor<'_> {
    fn default() -> Self {
        Self {
            heldout: None,
            grid: None,
            mask: TermMask::ALL,
        }
    }
}

pub fn train(model: &mut AnyModel, data: &MultiviewDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_monitored(model, data, cfg, &Monitor::default())
}

pub fn train_monitored(
    model: &mut AnyModel,
    data: &MultiviewDataset,
    cfg: &TrainConfig,
    monitor: &Monitor<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let (d_x, d_y) = model.view_dims();
    if data.x.cols() != d_x || data.y.cols() != d_y {
        return Err(Error::DimMismatch(format!(
            "dataset views are {}/{} wide, model expects {d_x}/{d_y}",
            data.x.cols(),
            data.y.cols()
        )));
    }
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = training_rng(cfg.seed);
    let mut monitor_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    monitor_rng.set_stream(MONITOR_STREAM);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut log = TrainLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(data.len(), &mut rng);
        let mut terms = LossBreakdown::default();
        let mut seen = 0;
        for idx in batches(&order, cfg.batch_size) {
            step += 1;
            let x = data.x.select_rows(idx)?;
            let y = data.y.select_rows(idx)?;
            model.zero_grad();
            let batch = model
                .accumulate_gradients(&x, &y, cfg, monitor.mask, &mut rng)
                .map_err(|e| match e {
                    Error::NonFinite { term } => Error::NonFiniteStep { term, step },
                    other => other,
                })?;
            if let Some(term) = batch.first_non_finite() {
                return Err(Error::NonFiniteStep { term: term.into(), step });
            }
            let mut views = Vec::new();
            model.params_mut("", &mut views);
            adam.step(&mut views)?;
            terms.accumulate(&batch, seen, idx.len());
            seen += idx.len();
        }
        let heldout_score_gap = match monitor.heldout {
            Some((hx, hy)) => model.critic_score_gap(hx, hy, &mut monitor_rng)?,
            None => None,
        };
        let seconds = cfg.log_wall_clock.then(|| started.elapsed().as_secs_f64());
        log.epochs.push(EpochRecord {
            epoch,
            terms,
            enc_disagree: model.encoder_disagreement(&data.y).value(),
            seconds,
            heldout_score_gap,
        });
        if let Some((full, split)) = monitor.grid {
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                log.grids.push((epoch, disentanglement_grid(model, full, split, &cfg.probe)?));
            }
        }
        if let Some(patience) = cfg.patience {
            if terms.total > best {
                best = terms.total;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// A model together with the configuration it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: AnyModel,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    d_x: usize,
    d_y: usize,
    config: TrainConfig,
}

/// First eight bytes of the SHA-256 of the serialized metadata.
fn meta_hash(meta_json: &str) -> u64 {
    let digest = Sha256::digest(meta_json.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn config_hash(cfg: &TrainConfig, d_x: usize, d_y: usize) -> Result<u64> {
    let meta = CheckpointMeta {
        d_x,
        d_y,
        config: cfg.clone(),
    };
    Ok(meta_hash(&serde_json::to_string(&meta)?))
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: AnyModel) -> Result<Self> {
        if config.model != model.kind() {
            return Err(Error::InvalidArgument(format!(
                "config names model `{}` but got `{}`",
                config.model.name(),
                model.kind().name()
            )));
        }
        Ok(Self { config, model })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (d_x, d_y) = self.model.view_dims();
        let meta = serde_json::to_string(&CheckpointMeta {
            d_x,
            d_y,
            config: self.config.clone(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&meta_hash(&meta).to_le_bytes());
        let mut views = Vec::new();
        self.model.params("", &mut views);
        let mut arrays = vec![NamedArray::text("meta", meta)];
        arrays.extend(
            views
                .into_iter()
                .map(|p| NamedArray::f64(p.name, vec![p.shape.0 as u64, p.shape.1 as u64], p.value.to_vec())),
        );
        write_arrays(&mut buf, &arrays)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptPayload("not a DVCK checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hash = r.u64()?;
        let arrays = read_arrays(&mut r)?;
        let meta_json = find(&arrays, "meta")?.as_text()?;
        if meta_hash(meta_json) != hash {
            return Err(Error::CorruptPayload("config hash does not match metadata".into()));
        }
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| Error::CorruptPayload(format!("meta: {e}")))?;
        let mut model = AnyModel::new(&meta.config, meta.d_x, meta.d_y)
            .map_err(|e| Error::CorruptPayload(format!("stored config: {e}")))?;
        let mut views = Vec::new();
        model.params_mut("", &mut views);
        if views.len() + 1 != arrays.len() {
            return Err(Error::CorruptPayload(format!(
                "expected {} parameter arrays, found {}",
                views.len(),
                arrays.len() - 1
            )));
        }
        for v in views {
            let stored = find(&arrays, &v.name)?.as_f64()?;
            if stored.len() != v.value.len() {
                return Err(Error::CorruptPayload(format!("parameter `{}` has the wrong size", v.name)));
            }
            v.value.copy_from_slice(stored);
        }
        Ok(Self {
            config: meta.config,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails with [`Error::DimMismatch`] unless the model reads views of these widths.
    pub fn ensure_view_dims(&self, d_x: usize, d_y: usize) -> Result<()> {
        let (mx, my) = self.model.view_dims();
        if (mx, my) != (d_x, d_y) {
            return Err(Error::DimMismatch(format!(
                "checkpoint expects views {mx}/{my} wide, data has {d_x}/{d_y}"
            )));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> Result<u64> {
        let (d_x, d_y) = self.model.view_dims();
        config_hash(&self.config, d_x, d_y)
    }
}
