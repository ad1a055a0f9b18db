use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use deblurpair_core::datagen::{self, DatasetOptions, Split, SynthRanges};
use deblurpair_core::eval::{self, EvalReport};
use deblurpair_core::infer::restore_pair;
use deblurpair_core::io::{read_png, write_png};
use deblurpair_core::train::{self, latest_checkpoint, load_checkpoint, read_kv_file, TrainConfig, TrainState};
use deblurpair_core::Error;

const SEED_ENV: &str = "DEBLURPAIR_SEED";

#[derive(Parser)]
#[command(name = "deblurpair", version, about = "Deblurring from a noisy/blurry burst pair")]
struct Cli {
    /// Flat `key = value` settings file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize noisy/blurry/sharp triples from bursts of sharp frames.
    Synth(SynthArgs),
    /// Train a generator/discriminator pair on a synthesized dataset.
    Train(TrainArgs),
    /// Restore one noisy/blurry pair.
    Infer(InferArgs),
    /// PSNR/SSIM of predictions or of a trained model.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of `<scene>/<frame>.png` bursts.
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to $DEBLURPAIR_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fscale_min: Option<f64>,
    #[arg(long)]
    fscale_max: Option<f64>,
    #[arg(long)]
    sigma_r_min: Option<f64>,
    #[arg(long)]
    sigma_r_max: Option<f64>,
    #[arg(long)]
    shot_threshold: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// rnn or merger.
    #[arg(long)]
    model: Option<String>,
    /// Dataset root holding manifest.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_std: Option<f64>,
    /// toy (small networks, 64x64 crops) or paper.
    #[arg(long)]
    preset: Option<String>,
    /// literal or non-saturating generator objective.
    #[arg(long)]
    adversarial: Option<String>,
    #[arg(long)]
    no_flip: bool,
    #[arg(long)]
    lr_decay: bool,
    /// Use the estimated exposure ratio instead of the recorded f_scale.
    #[arg(long)]
    estimated_exposure: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint file, or a checkpoint directory (uses its latest).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    noisy: Option<PathBuf>,
    #[arg(long)]
    blurry: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run in overlapping tiles of this size.
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted PNGs, matched to --gt by file name.
    #[arg(long, conflicts_with_all = ["ckpt", "data"])]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, requires = "data")]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    data: Option<PathBuf>,
    /// Dataset split evaluated with --ckpt: eval or train.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write model predictions here.
    #[arg(long)]
    save_pred: Option<PathBuf>,
    #[arg(long)]
    tile: Option<usize>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Values from the `--config` file.
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        Ok(Settings(match path {
            Some(p) => read_kv_file(p)?,
            None => BTreeMap::new(),
        }))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| v.parse().map_err(|e| usage(format!("config key {key} = '{v}': {e}"))))
            .transpose()
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Error>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Error>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| usage(format!("--{} is required", key.replace('_', "-"))))
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64, Error> {
        if let Some(s) = self.pick(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| usage(format!("{SEED_ENV}='{v}': {e}"))),
            Err(_) => Ok(0),
        }
    }
}

fn cmd_synth(a: SynthArgs, cfg: &Settings) -> Result<(), Error> {
    let src: PathBuf = cfg.require(a.src, "src")?;
    let out: PathBuf = cfg.require(a.out, "out")?;
    let d = SynthRanges::default();
    let ranges = SynthRanges {
        fscale_min: cfg.pick(a.fscale_min, "fscale_min")?.unwrap_or(d.fscale_min),
        fscale_max: cfg.pick(a.fscale_max, "fscale_max")?.unwrap_or(d.fscale_max),
        sigma_r_min: cfg.pick(a.sigma_r_min, "sigma_r_min")?.unwrap_or(d.sigma_r_min),
        sigma_r_max: cfg.pick(a.sigma_r_max, "sigma_r_max")?.unwrap_or(d.sigma_r_max),
        shot_threshold: cfg
            .pick(a.shot_threshold, "shot_threshold")?
            .unwrap_or(d.shot_threshold),
        ..d
    };
    let opts = DatasetOptions {
        seed: cfg.seed(a.seed)?,
        ranges,
        train_fraction: cfg.pick(a.train_fraction, "train_fraction")?.unwrap_or(0.64),
    };
    if !src.is_dir() {
        return Err(usage(format!("source directory {} does not exist", src.display())));
    }
    let manifest = datagen::build_dataset(&src, &out, &opts)?;
    let train = manifest.split(Split::Train).count();
    let eval = manifest.split(Split::Eval).count();
    println!("train: {train} triples");
    println!("eval: {eval} triples");
    let errors: Vec<_> = manifest.errors().collect();
    if !errors.is_empty() {
        println!("skipped scenes: {}", errors.len());
        for e in errors {
            println!("  {}: {}", e.scene_id, e.error);
        }
    }
    Ok(())
}

fn train_config(a: &TrainArgs, cfg: &Settings) -> Result<TrainConfig, Error> {
    let mut kv = cfg.0.clone();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.to_string(), v);
        }
    };
    flag("preset", a.preset.clone());
    flag("model", a.model.clone());
    flag("data_root", a.data.as_ref().map(|p| p.display().to_string()));
    flag("checkpoint_dir", a.out.as_ref().map(|p| p.display().to_string()));
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("learning_rate", a.lr.map(|v| v.to_string()));
    flag("beta1", a.beta1.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("crop", a.crop.map(|v| v.to_string()));
    flag("init_std", a.init_std.map(|v| v.to_string()));
    flag("adversarial", a.adversarial.clone());
    flag("flip", a.no_flip.then(|| "false".into()));
    flag("lr_decay", a.lr_decay.then(|| "true".into()));
    flag("true_exposure", a.estimated_exposure.then(|| "false".into()));
    // Aliases in the file would otherwise be applied after the flag.
    for (alias, key) in [
        ("lr", "learning_rate"),
        ("data", "data_root"),
        ("out", "checkpoint_dir"),
    ] {
        if kv.contains_key(key) {
            kv.remove(alias);
        }
    }
    kv.remove("seed");
    let mut c = TrainConfig::default();
    c.apply(&kv)?;
    c.seed = cfg.seed(a.seed)?;
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs, cfg: &Settings) -> Result<(), Error> {
    let c = train_config(&a, cfg)?;
    match train::train(&c) {
        Ok(path) => {
            println!("final checkpoint: {}", path.display());
            Ok(())
        }
        Err(e @ Error::DivergedTraining { .. }) => {
            match latest_checkpoint(&c.checkpoint_dir)? {
                Some(p) => eprintln!("last good checkpoint: {}", p.display()),
                None => eprintln!("no checkpoint was written before the divergence"),
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn resolve_checkpoint(path: &Path) -> Result<TrainState, Error> {
    let file = if path.is_dir() {
        latest_checkpoint(path)?.ok_or_else(|| usage(format!("no 'latest' marker in {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    load_checkpoint(&file)
}

fn cmd_infer(a: InferArgs, cfg: &Settings) -> Result<(), Error> {
    let ckpt: PathBuf = cfg.require(a.ckpt, "ckpt")?;
    let noisy_path: PathBuf = cfg.require(a.noisy, "noisy")?;
    let blurry_path: PathBuf = cfg.require(a.blurry, "blurry")?;
    let out: PathBuf = cfg.require(a.out, "out")?;
    let tile = cfg.pick(a.tile, "tile")?;
    let state = resolve_checkpoint(&ckpt)?;
    let nets = state.networks()?;
    let noisy = read_png(&noisy_path)?;
    let blurry = read_png(&blurry_path)?;
    let start = Instant::now();
    let restored = restore_pair(&nets, &state.weights, &noisy, &blurry, tile)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    write_png(&out, &restored)?;
    println!("inference: {ms:.1} ms");
    Ok(())
}

fn cmd_eval(a: EvalArgs, cfg: &Settings) -> Result<(), Error> {
    let report_path = cfg.pick(a.report, "report")?;
    let report: EvalReport = if let Some(pred) = cfg.pick(a.pred, "pred")? {
        let gt: PathBuf = cfg.require(a.gt, "gt")?;
        eval::evaluate_dirs(&pred, &gt)?
    } else {
        let ckpt: PathBuf = cfg.require(a.ckpt, "ckpt")?;
        let data: PathBuf = cfg.require(a.data, "data")?;
        let split = match cfg.pick(a.split, "split")?.as_deref() {
            None | Some("eval") => Split::Eval,
            Some("train") => Split::Train,
            Some(other) => return Err(usage(format!("unknown split '{other}'"))),
        };
        let state = resolve_checkpoint(&ckpt)?;
        let save = cfg.pick(a.save_pred, "save_pred")?;
        eval::evaluate_model(&state, &data, split, cfg.pick(a.tile, "tile")?, save.as_deref())?
    };
    if let Some(p) = report_path {
        report.write(&p)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DivergedTraining { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = Settings::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Infer(a) => cmd_infer(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
