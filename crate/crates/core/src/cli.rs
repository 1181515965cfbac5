//! Command-line front end: `generate`, `train`, `eval` and `gradcheck`.
//!
//! Settings resolve as flags over config-file keys over built-in defaults.
//! Every command writes its resolved settings to a JSON sidecar before doing
//! any work, so a run can be repeated from the sidecar alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::bounds::Likelihood;
use crate::data::{
    corrupt, gen_factor_dataset, gen_twoview_transform, glyph_images, load_idx, train_test_split, CorruptionSpec,
    FactorSpec, MultiviewDataset,
};
use crate::eval::{best_label_sets, disentanglement_grid, grid_to_csv, ProbeReport};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::ndmath::Activation;
use crate::train::{train_monitored, AnyModel, Checkpoint, ModelKind, Monitor, TrainConfig, TrainLog};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const CORRUPT_X_STREAM: u64 = 0xc044_0001;
const CORRUPT_Y_STREAM: u64 = 0xc044_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Latent-factor benchmark with known shared and private labels.
    #[default]
    Factor,
    /// Rotation and flip views of IDX images (`--idx-images`, `--idx-labels`).
    Twoview,
    /// Rotation and flip views of the bundled procedural glyphs.
    Glyph,
}

/// Generator parameters. `n` also sets the glyph count for the glyph preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub n: usize,
    pub k_shared: usize,
    pub k_px: usize,
    pub k_py: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub noise_sd: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        let f = FactorSpec::default();
        Self {
            n: f.n,
            k_shared: f.k_shared,
            k_px: f.k_px,
            k_py: f.k_py,
            d_x: f.d_x,
            d_y: f.d_y,
            noise_sd: f.noise_sd,
        }
    }
}

/// Fully resolved settings of one invocation. Keys in a `--config` file use
/// these field names; training fields sit at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub preset: Preset,
    #[serde(flatten)]
    pub generator: GeneratorParams,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Base name of generated files.
    pub name: String,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Corruption of view x as `kind:level`, e.g. `gaussian_noise:3`.
    pub corrupt_x: Option<String>,
    pub corrupt_y: Option<String>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            preset: Preset::Factor,
            generator: GeneratorParams::default(),
            idx_images: None,
            idx_labels: None,
            name: "dataset".into(),
            data: None,
            checkpoint: None,
            corrupt_x: None,
            corrupt_y: None,
            out: PathBuf::from("."),
        }
    }
}

/// A problem with flags or config values (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "dvib", version, about = "Shared/private two-view representation learning", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a two-view dataset file.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, log and probe grid.
    Train(TrainArgs),
    /// Probe a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct SharedArgs {
    /// JSON file with RunConfig keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k_shared: Option<usize>,
    #[arg(long)]
    pub k_px: Option<usize>,
    #[arg(long)]
    pub k_py: Option<usize>,
    #[arg(long)]
    pub d_x: Option<usize>,
    #[arg(long)]
    pub d_y: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub d_s: Option<usize>,
    #[arg(long)]
    pub d_p: Option<usize>,
    /// Comma-separated hidden widths, e.g. `256,256`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub critic_hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    pub likelihood: Option<LikelihoodArg>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub corrupt_x: Option<String>,
    #[arg(long)]
    pub corrupt_y: Option<String>,
    /// Record per-epoch wall-clock seconds (makes the log non-reproducible).
    #[arg(long)]
    pub log_wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub corrupt_x: Option<String>,
    #[arg(long)]
    pub corrupt_y: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Test hook: distort the analytic gradient of this term.
    #[arg(long, hide = true)]
    pub perturb: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LikelihoodArg {
    Gaussian,
    Bernoulli,
}

/// Defaults, then the config file, with unknown top-level keys rejected.
fn base_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: Value =
        serde_json::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", path.display())))?;
    let Value::Object(file) = file else {
        bail!(config_err(format!("config {} must be a JSON object", path.display())));
    };
    let Value::Object(mut merged) = serde_json::to_value(RunConfig::default())? else {
        unreachable!("RunConfig serializes to an object")
    };
    for (key, value) in file {
        if !merged.contains_key(&key) {
            bail!(config_err(format!("unknown config key `{key}`")));
        }
        merged.insert(key, value);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| config_err(format!("config {}: {e}", path.display())))
}

fn apply_shared(cfg: &mut RunConfig, shared: &SharedArgs) {
    if let Some(seed) = shared.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.out = out.clone();
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn resolve_generate(args: &GenerateArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base_config(args.shared.config.as_deref())?;
    apply_shared(&mut cfg, &args.shared);
    set(&mut cfg.preset, args.preset);
    let g = &mut cfg.generator;
    set(&mut g.n, args.n);
    set(&mut g.k_shared, args.k_shared);
    set(&mut g.k_px, args.k_px);
    set(&mut g.k_py, args.k_py);
    set(&mut g.d_x, args.d_x);
    set(&mut g.d_y, args.d_y);
    set(&mut g.noise_sd, args.noise_sd);
    if args.idx_images.is_some() {
        cfg.idx_images = args.idx_images.clone();
    }
    if args.idx_labels.is_some() {
        cfg.idx_labels = args.idx_labels.clone();
    }
    set(&mut cfg.name, args.name.clone());
    Ok(cfg)
}

pub fn resolve_train(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base_config(args.shared.config.as_deref())?;
    apply_shared(&mut cfg, &args.shared);
    if args.data.is_some() {
        cfg.data = args.data.clone();
    }
    let t = &mut cfg.train;
    set(&mut t.model, args.model);
    set(&mut t.epochs, args.epochs);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.lr, args.lr);
    set(&mut t.lambda, args.lambda);
    set(&mut t.beta, args.beta);
    set(&mut t.d_s, args.d_s);
    set(&mut t.d_p, args.d_p);
    set(&mut t.hidden, args.hidden.clone());
    set(&mut t.critic_hidden, args.critic_hidden.clone());
    set(
        &mut t.activation,
        args.activation.map(|a| match a {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }),
    );
    set(
        &mut t.likelihood,
        args.likelihood.map(|l| match l {
            LikelihoodArg::Gaussian => Likelihood::Gaussian,
            LikelihoodArg::Bernoulli => Likelihood::Bernoulli,
        }),
    );
    set(&mut t.eval_every, args.eval_every);
    if args.patience.is_some() {
        t.patience = args.patience;
    }
    set(&mut t.probe.epochs, args.probe_epochs);
    set(&mut t.probe.lr, args.probe_lr);
    if args.log_wall_clock {
        t.log_wall_clock = true;
    }
    if args.corrupt_x.is_some() {
        cfg.corrupt_x = args.corrupt_x.clone();
    }
    if args.corrupt_y.is_some() {
        cfg.corrupt_y = args.corrupt_y.clone();
    }
    cfg.train.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

pub fn resolve_eval(args: &EvalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base_config(args.shared.config.as_deref())?;
    apply_shared(&mut cfg, &args.shared);
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint.clone();
    }
    if args.data.is_some() {
        cfg.data = args.data.clone();
    }
    if args.corrupt_x.is_some() {
        cfg.corrupt_x = args.corrupt_x.clone();
    }
    if args.corrupt_y.is_some() {
        cfg.corrupt_y = args.corrupt_y.clone();
    }
    Ok(cfg)
}

fn parse_corruption(spec: Option<&str>) -> anyhow::Result<Option<CorruptionSpec>> {
    spec.map(|s| s.parse::<CorruptionSpec>().map_err(|e| config_err(e.to_string())))
        .transpose()
}

fn write_sidecar(dir: &Path, file: &str, command: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let body = json!({ "command": command, "config": cfg });
    let path = dir.join(file);
    fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn corrupt_views(data: &mut MultiviewDataset, cfg: &RunConfig, seed: u64) -> anyhow::Result<()> {
    if let Some(spec) = parse_corruption(cfg.corrupt_x.as_deref())? {
        data.x = corrupt(&data.x, &spec, seed ^ CORRUPT_X_STREAM)?;
        data.meta.insert("corrupt_x".into(), spec.to_string());
    }
    if let Some(spec) = parse_corruption(cfg.corrupt_y.as_deref())? {
        data.y = corrupt(&data.y, &spec, seed ^ CORRUPT_Y_STREAM)?;
        data.meta.insert("corrupt_y".into(), spec.to_string());
    }
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    write_sidecar(&cfg.out, &format!("{}.json", cfg.name), "generate", cfg)?;
    let seed = cfg.train.seed;
    let g = &cfg.generator;
    let dataset = match cfg.preset {
        Preset::Factor => {
            let spec = FactorSpec {
                n: g.n,
                k_shared: g.k_shared,
                k_px: g.k_px,
                k_py: g.k_py,
                d_x: g.d_x,
                d_y: g.d_y,
                noise_sd: g.noise_sd,
                seed,
            };
            spec.validate().map_err(|e| config_err(e.to_string()))?;
            gen_factor_dataset(&spec)?
        }
        Preset::Glyph => {
            let (images, labels) = glyph_images(g.n, seed).map_err(|e| config_err(e.to_string()))?;
            let mut d = gen_twoview_transform(&images, &labels, seed)?;
            d.meta.insert("base".into(), "glyph".into());
            d
        }
        Preset::Twoview => {
            let (Some(images), Some(labels)) = (&cfg.idx_images, &cfg.idx_labels) else {
                bail!(config_err("preset twoview needs --idx-images and --idx-labels"));
            };
            let (base, base_labels) = load_idx(images, labels)?;
            let mut d = gen_twoview_transform(&base, &base_labels, seed)?;
            d.meta.insert("base".into(), format!("idx:{}", images.display()));
            d
        }
    };
    let path = cfg.out.join(format!("{}.dvds", cfg.name));
    dataset.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<MultiviewDataset> {
    let Some(path) = &cfg.data else {
        bail!(config_err("no dataset given (use --data)"));
    };
    MultiviewDataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

/// Paths of everything `train` writes.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub grid: PathBuf,
    pub log_data: TrainLog,
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainOutputs> {
    write_sidecar(&cfg.out, "train_config.json", "train", cfg)?;
    let tc = &cfg.train;
    let mut data = load_dataset(cfg)?;
    corrupt_views(&mut data, cfg, tc.seed)?;
    let split = train_test_split(data.len(), tc.seed);
    let train_set = data.subset(&split.train)?;
    let test_set = data.subset(&split.test)?;
    let mut model = AnyModel::new(tc, data.x.cols(), data.y.cols())?;
    let monitor = Monitor {
        heldout: Some((&test_set.x, &test_set.y)),
        grid: Some((&data, &split)),
        ..Monitor::default()
    };
    let log = train_monitored(&mut model, &train_set, tc, &monitor)?;
    let grid = match log.final_grid() {
        Some(g) => g.to_vec(),
        None => disentanglement_grid(&model, &data, &split, &tc.probe)?,
    };
    let out = TrainOutputs {
        checkpoint: cfg.out.join("model.dvck"),
        log: cfg.out.join("train_log.csv"),
        grid: cfg.out.join("grid.csv"),
        log_data: log,
    };
    Checkpoint::new(tc.clone(), model)?
        .save(&out.checkpoint)
        .with_context(|| format!("writing {}", out.checkpoint.display()))?;
    write_file(&out.log, out.log_data.to_csv())?;
    write_file(&out.grid, grid_to_csv(&grid))?;
    let mut history = String::from("epoch,representation,label_set,accuracy,ari,n_test\n");
    for (epoch, g) in &out.log_data.grids {
        for line in grid_to_csv(g).lines().skip(1) {
            history.push_str(&format!("{epoch},{line}\n"));
        }
    }
    write_file(&cfg.out.join("grid_history.csv"), history)?;
    Ok(out)
}

fn summary_json(model: ModelKind, grid: &[ProbeReport], cfg: &RunConfig, hash: u64) -> Value {
    let mut best = Map::new();
    for (rep, set) in best_label_sets(grid) {
        best.insert(rep.name().into(), Value::from(set.name()));
    }
    json!({
        "model": model.name(),
        "config_hash": format!("{hash:016x}"),
        "corrupt_x": cfg.corrupt_x,
        "corrupt_y": cfg.corrupt_y,
        "best_label_set_by_ari": best,
        "grid": grid,
    })
}

pub fn cmd_eval(cfg: &RunConfig, seed_override: Option<u64>) -> anyhow::Result<Vec<ProbeReport>> {
    write_sidecar(&cfg.out, "eval_config.json", "eval", cfg)?;
    let Some(ck_path) = &cfg.checkpoint else {
        bail!(config_err("no checkpoint given (use --checkpoint)"));
    };
    let ck = Checkpoint::load(ck_path).with_context(|| format!("reading checkpoint {}", ck_path.display()))?;
    let mut data = load_dataset(cfg)?;
    ck.ensure_view_dims(data.x.cols(), data.y.cols())?;
    // the split always follows the training seed so probes see the same rows
    let seed = ck.config.seed;
    corrupt_views(&mut data, cfg, seed_override.unwrap_or(seed))?;
    let split = train_test_split(data.len(), seed);
    let grid = disentanglement_grid(&ck.model, &data, &split, &ck.config.probe)?;
    write_file(&cfg.out.join("eval_grid.csv"), grid_to_csv(&grid))?;
    let summary = summary_json(ck.model.kind(), &grid, cfg, ck.config_hash()?);
    write_file(&cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(grid)
}

/// Returns whether every check passed.
pub fn cmd_gradcheck(cfg: &RunConfig, perturb: Option<String>) -> anyhow::Result<bool> {
    write_sidecar(&cfg.out, "gradcheck_config.json", "gradcheck", cfg)?;
    let opts = GradcheckOptions {
        seed: cfg.train.seed,
        perturb,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    println!("term,max_rel_error,status");
    for e in &report.entries {
        println!("{},{:.3e},{}", e.term, e.max_rel_error, if e.passed { "pass" } else { "FAIL" });
    }
    for e in report.failures() {
        eprintln!(
            "gradcheck failed for `{}`: relative error {:.3e} > {:.0e}",
            e.term, e.max_rel_error, report.tolerance
        );
    }
    Ok(report.passed())
}

/// Exit code for an error chain: numeric problems 3, file problems 2,
/// everything else (bad flags, bad values, dimension mismatches) 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } | Error::NonFiniteStep { .. } => EXIT_NUMERIC,
                Error::Io(_)
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::CountMismatch { .. }
                | Error::VersionMismatch { .. }
                | Error::CorruptPayload(_) => EXIT_IO,
                Error::Json(_)
                | Error::Shape { .. }
                | Error::StaleTape(_)
                | Error::InvalidArgument(_)
                | Error::DimMismatch(_) => EXIT_CONFIG,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = resolve_generate(&args)?;
            let path = cmd_generate(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train(args) => {
            let cfg = resolve_train(&args)?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.log_data.epochs.last() {
                println!("epoch {} total {:.4}", last.epoch, last.terms.total);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Eval(args) => {
            let cfg = resolve_eval(&args)?;
            let grid = cmd_eval(&cfg, args.shared.seed)?;
            print!("{}", grid_to_csv(&grid));
        }
        Command::Gradcheck(args) => {
            let mut cfg = base_config(args.shared.config.as_deref())?;
            apply_shared(&mut cfg, &args.shared);
            if !cmd_gradcheck(&cfg, args.perturb.clone())? {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}
