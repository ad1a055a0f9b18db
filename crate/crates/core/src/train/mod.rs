//! Optimizer, the three-phase training step, the epoch loop and checkpoints.

mod adam;
mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, ImageTriple, Split};
use crate::error::{ensure, invalid, Error, Result};
use crate::imgproc::{scale_exposure, Image};
use crate::losses::{self, LossBreakdown};
use crate::nets::{Generator, LstmState, Networks, Session, WeightStore, DISC, RNN_DENOISE};
use crate::tensor::Tensor;

pub use adam::{adam_update, AdamParams};
pub use checkpoint::{
    checkpoint_bytes, epoch_checkpoint_path, latest_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint,
    CHECKPOINT_MAGIC, LATEST_MARKER,
};
pub use config::{parse_kv, read_kv_file, TrainConfig};

pub const LOSS_LOG: &str = "loss_log.jsonl";

/// Weights plus everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub weights: WeightStore,
    pub first_moments: BTreeMap<String, Tensor>,
    pub second_moments: BTreeMap<String, Tensor>,
    /// Completed training steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    /// Fresh weights for `config`; moments start at zero.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(config.model, config.net.clone())?;
        let weights = nets.init_weights(config.init_std as f32, config.seed)?;
        let zeros: BTreeMap<String, Tensor> = weights
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(TrainState {
            config,
            weights,
            first_moments: zeros.clone(),
            second_moments: zeros,
            step: 0,
            epoch: 0,
        })
    }

    pub fn networks(&self) -> Result<Networks> {
        Networks::new(self.config.model, self.config.net.clone())
    }
}

/// The three update phases of a training step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Denoise,
    Discriminator,
    Generator,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Denoise => 1,
            Phase::Discriminator => 2,
            Phase::Generator => 3,
        }
    }
}

/// Reported after every parameter write.
pub struct UpdateEvent<'a> {
    pub phase: Phase,
    pub param: &'a str,
    pub weights: &'a WeightStore,
}

/// Per-step losses, also the schema of one loss-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    #[serde(rename = "L_denoise")]
    pub denoise: Option<f64>,
    #[serde(rename = "L_D")]
    pub discriminator: f64,
    #[serde(rename = "L_G_adv")]
    pub adv: f64,
    #[serde(rename = "L_content")]
    pub content: f64,
    #[serde(rename = "L_grad")]
    pub grad: f64,
    #[serde(rename = "L_dc")]
    pub dark_channel: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl StepLosses {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            adv: self.adv,
            content: self.content,
            grad: self.grad,
            dark_channel: self.dark_channel,
            total: self.total,
        }
    }
}

/// A mini-batch whose noisy images are already exposure-compensated.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub noisy: Tensor,
    pub blurry: Tensor,
    pub sharp: Tensor,
    pub targets: Vec<Image>,
}

impl TrainBatch {
    pub fn new(triples: &[ImageTriple]) -> Result<Self> {
        ensure!(!triples.is_empty(), "empty batch");
        let noisy: Vec<&Image> = triples.iter().map(|t| &t.noisy).collect();
        let blurry: Vec<&Image> = triples.iter().map(|t| &t.blurry).collect();
        let sharp: Vec<&Image> = triples.iter().map(|t| &t.sharp).collect();
        Ok(TrainBatch {
            noisy: Tensor::from_images(&noisy)?,
            blurry: Tensor::from_images(&blurry)?,
            sharp: Tensor::from_images(&sharp)?,
            targets: triples.iter().map(|t| t.sharp.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Brings the noisy capture of a triple to the blurry capture's exposure,
/// by the recorded synthesis factor or by the estimated ratio.
pub fn compensate_triple(triple: &ImageTriple, true_exposure: bool) -> Result<ImageTriple> {
    let factor = if true_exposure {
        1.0 / triple.params.f_scale
    } else {
        datagen::estimate_exposure_ratio(&triple.noisy, &triple.blurry)?
    };
    Ok(ImageTriple {
        noisy: scale_exposure(&triple.noisy, factor)?,
        ..triple.clone()
    })
}

fn phase_seed(seed: u64, step: u64, phase: Phase) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(phase.tag()));
    rng.gen()
}

fn diverged(step: u64, what: impl Into<String>, last: Option<LossBreakdown>) -> Error {
    Error::DivergedTraining {
        step,
        what: what.into(),
        last,
    }
}

fn check_finite(v: f64, step: u64, what: &str, last: Option<LossBreakdown>) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(diverged(step, what, last))
    }
}

/// The learning rate at 0-based `step` out of `total` steps.
pub fn learning_rate_at(config: &TrainConfig, step: u64, total: u64) -> f64 {
    if !config.lr_decay || total == 0 {
        return config.learning_rate;
    }
    let frac = step as f64 / total as f64;
    config.learning_rate * (2.0 * (1.0 - frac)).clamp(0.0, 1.0)
}

struct Optimizer<'a> {
    first: &'a mut BTreeMap<String, Tensor>,
    second: &'a mut BTreeMap<String, Tensor>,
    hp: AdamParams<f32>,
    t: u64,
    step: u64,
}

impl Optimizer<'_> {
    /// Applies every gradient, checking all of them before writing anything.
    fn apply(
        &mut self,
        phase: Phase,
        weights: &mut WeightStore,
        grads: &BTreeMap<String, Tensor>,
        last: Option<LossBreakdown>,
        observer: &mut dyn FnMut(UpdateEvent),
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(diverged(self.step, format!("gradient of {name}"), last));
            }
        }
        for (name, g) in grads {
            let p = weights
                .params
                .get_mut(name)
                .ok_or_else(|| invalid!("gradient for unknown parameter {name}"))?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            ensure!(
                p.shape() == g.shape() && m.shape() == g.shape() && v.shape() == g.shape(),
                "shape mismatch updating {name}"
            );
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, &self.hp)
                .map_err(|_| diverged(self.step, format!("gradient of {name}"), last))?;
            observer(UpdateEvent {
                phase,
                param: name,
                weights,
            });
        }
        Ok(())
    }
}

/// One training step: denoising net (DeblurRNN only), then discriminator,
/// then generator, each with one Adam update.
pub fn train_step(state: &mut TrainState, nets: &Networks, batch: &TrainBatch, lr: f64) -> Result<StepLosses> {
    train_step_observed(state, nets, batch, lr, &mut |_| {})
}

/// [`train_step`] reporting every parameter write to `observer`.
pub fn train_step_observed(
    state: &mut TrainState,
    nets: &Networks,
    batch: &TrainBatch,
    lr: f64,
    observer: &mut dyn FnMut(UpdateEvent),
) -> Result<StepLosses> {
    let TrainState {
        config,
        weights,
        first_moments,
        second_moments,
        step,
        ..
    } = state;
    let cfg = &*config;
    ensure!(
        nets.kind == cfg.model && nets.config == cfg.net,
        "networks do not match the training configuration"
    );
    let (_, _, h, w) = batch.noisy.dims4();
    ensure!(
        h == cfg.crop && w == cfg.crop,
        "batch is {h}x{w}, crop size is {}",
        cfg.crop
    );
    let n = batch.len();
    let weights_cfg = &cfg.loss_weights;
    let mut opt = Optimizer {
        first: first_moments,
        second: second_moments,
        hp: AdamParams::new(lr as f32, cfg.beta1 as f32),
        t: *step + 1,
        step: *step,
    };
    let cur = *step;

    // Denoising net against the content loss.
    let mut denoised = None;
    let mut denoise_loss = None;
    if let Generator::Rnn(rnn) = &nets.generator {
        let mut s = Session::training(weights, &[RNN_DENOISE], phase_seed(cfg.seed, cur, Phase::Denoise));
        let noisy = s.input(batch.noisy.clone());
        let (out, st) = rnn.run_denoise(&mut s, noisy)?;
        let (loss, value) = losses::content_loss_node(s.graph(), out, &batch.targets)?;
        let scaled = weights_cfg.lambda_c1 * value;
        check_finite(scaled, cur, "denoise loss", None)?;
        let root = s.graph().weighted_sum(vec![(loss, weights_cfg.lambda_c1 as f32)]);
        s.backward(root);
        let grads = s.gradients();
        denoised = Some((
            s.value(out).clone(),
            s.value(st.hidden).clone(),
            s.value(st.cell).clone(),
        ));
        drop(s);
        opt.apply(Phase::Denoise, weights, &grads, None, observer)?;
        denoise_loss = Some(scaled);
    }

    let gen_prefix = nets.generator_prefix();
    let mut g = Session::training(weights, &[gen_prefix], phase_seed(cfg.seed, cur, Phase::Generator));
    let noisy = g.input(batch.noisy.clone());
    let blurry = g.input(batch.blurry.clone());
    let fake = match (&nets.generator, denoised) {
        (Generator::Rnn(rnn), Some((out, hidden, cell))) => {
            let out = g.input(out);
            let state = LstmState {
                hidden: g.input(hidden),
                cell: g.input(cell),
            };
            rnn.run_deblur(&mut g, out, blurry, Some(state))?
        }
        (Generator::Merger(m), _) => m.forward(&mut g, noisy, blurry)?,
        (Generator::Rnn(_), None) => unreachable!("denoise phase ran"),
    };

    // Discriminator on [real; fake] with the fake detached.
    let fake_value = g.value(fake).clone();
    let disc_loss = {
        let d_seed = phase_seed(cfg.seed, cur, Phase::Discriminator);
        let mut d = Session::training(g.store_mut(), &[DISC], d_seed);
        let candidates = stack_batches(&batch.sharp, &fake_value)?;
        let conditions = stack_batches(&batch.blurry, &batch.blurry)?;
        let c = d.input(candidates);
        let y = d.input(conditions);
        let scores = nets.discriminator.forward(&mut d, c, y)?;
        let (loss, value) = losses::discriminator_stacked_node(d.graph(), scores)?;
        check_finite(value, cur, "discriminator loss", None)?;
        d.backward(loss);
        let grads = d.gradients();
        drop(d);
        opt.apply(Phase::Discriminator, g.store_mut(), &grads, None, observer)?;
        value
    };

    // Generator against the updated, frozen discriminator.
    let d_fake = nets.discriminator.forward(&mut g, fake, blurry)?;
    let (adv, adv_v) = losses::generator_adversarial_node(g.graph(), d_fake, cfg.adversarial);
    let (content, content_v) = losses::content_loss_node(g.graph(), fake, &batch.targets)?;
    let (grad, grad_v) = losses::gradient_loss_node(g.graph(), fake, &batch.targets)?;
    let (dc, dc_v) = losses::dark_channel_loss_node(g.graph(), fake, &batch.targets, cfg.dark_patch)?;
    let breakdown = losses::combine(adv_v, content_v, grad_v, dc_v, weights_cfg);
    check_finite(breakdown.total, cur, "generator loss", Some(breakdown))?;
    let root = g.graph().weighted_sum(vec![
        (adv, 1.0),
        (content, weights_cfg.lambda_c2 as f32),
        (grad, weights_cfg.lambda_grad as f32),
        (dc, weights_cfg.lambda_dc as f32),
    ]);
    g.backward(root);
    let grads = g.gradients();
    opt.apply(Phase::Generator, g.store_mut(), &grads, Some(breakdown), observer)?;
    drop(g);

    debug_assert_eq!(n, batch.targets.len());
    *step += 1;
    Ok(StepLosses {
        step: cur,
        denoise: denoise_loss,
        discriminator: disc_loss,
        adv: breakdown.adv,
        content: breakdown.content,
        grad: breakdown.grad,
        dark_channel: breakdown.dark_channel,
        total: breakdown.total,
    })
}

fn stack_batches(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(
        a.shape()[1..] == b.shape()[1..],
        "cannot stack {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

/// Loads, exposure-compensates and returns the training split.
pub fn load_training_set(config: &TrainConfig) -> Result<Vec<ImageTriple>> {
    let path = config.data_root.join(datagen::MANIFEST_FILE);
    if !path.is_file() {
        return Err(invalid!("no manifest at {}", path.display()));
    }
    let manifest = datagen::read_manifest(&path)?;
    manifest
        .split(Split::Train)
        .map(|r| compensate_triple(&datagen::load_triple(&config.data_root, r)?, config.true_exposure))
        .collect()
}

/// Order of the training triples in `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    idx.shuffle(&mut rng);
    idx
}

/// Random crop and optional flip for the `k`-th sample of `step`.
fn augment(triple: &ImageTriple, config: &TrainConfig, step: u64, k: usize) -> Result<ImageTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    rng.set_stream(step);
    rng.set_word_pos(k as u128 * 64);
    let mut t = datagen::random_crop_triple(triple, config.crop, &mut rng)?;
    if config.flip && rng.gen_bool(0.5) {
        t.noisy = t.noisy.flip_horizontal();
        t.blurry = t.blurry.flip_horizontal();
        t.sharp = t.sharp.flip_horizontal();
    }
    Ok(t)
}

fn steps_per_epoch(len: usize, batch: usize) -> usize {
    len.div_ceil(batch)
}

/// Keeps the log lines written before `step` and drops the rest.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepLosses = serde_json::from_str(line)?;
        if rec.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
}

/// Runs (or resumes) training on `triples`, which must already be
/// exposure-compensated. Writes `epoch_<k>.ckpt`, the `latest` marker and
/// the loss log under `config.checkpoint_dir`.
pub fn train_on(config: &TrainConfig, triples: &[ImageTriple]) -> Result<TrainOutcome> {
    train_on_with(config, triples, &mut |_| {})
}

/// [`train_on`] with a callback after every step.
pub fn train_on_with(
    config: &TrainConfig,
    triples: &[ImageTriple],
    on_step: &mut dyn FnMut(&StepLosses),
) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(!triples.is_empty(), "no training triples");
    let dir = &config.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOSS_LOG);

    let mut state = match latest_checkpoint(dir)? {
        Some(path) => {
            let mut s = load_checkpoint(&path)?;
            ensure!(
                s.config.model == config.model && s.config.net == config.net && s.config.seed == config.seed,
                "checkpoint {} was trained with a different model, network or seed",
                path.display()
            );
            log::info!("resuming from {} (epoch {}, step {})", path.display(), s.epoch, s.step);
            s.config = config.clone();
            truncate_log(&log_path, s.step)?;
            s
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            TrainState::new(config.clone())?
        }
    };
    let nets = state.networks()?;
    let per_epoch = steps_per_epoch(triples.len(), config.batch_size);
    let total = (per_epoch * config.epochs) as u64;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut last_ckpt = latest_checkpoint(dir)?;
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let order = epoch_order(config.seed, epoch, triples.len());
        for chunk in order.chunks(config.batch_size) {
            let step = state.step;
            let crops = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| augment(&triples[i], config, step, k))
                .collect::<Result<Vec<_>>>()?;
            let batch = TrainBatch::new(&crops)?;
            let lr = learning_rate_at(config, step, total);
            let losses = match train_step(&mut state, &nets, &batch, lr) {
                Ok(l) => l,
                Err(e @ Error::DivergedTraining { .. }) => {
                    match &last_ckpt {
                        Some(p) => log::error!("{e}; last good checkpoint: {}", p.display()),
                        None => log::error!("{e}; no checkpoint was written"),
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let line = serde_json::to_string(&losses)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            on_step(&losses);
        }
        state.epoch += 1;
        let path = epoch_checkpoint_path(dir, state.epoch);
        save_checkpoint(&state, &path)?;
        checkpoint::write_latest(dir, &path)?;
        log::info!("epoch {} done at step {}: {}", state.epoch, state.step, path.display());
        last_ckpt = Some(path);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = last_ckpt.ok_or_else(|| invalid!("training produced no checkpoint"))?;
    Ok(TrainOutcome {
        final_checkpoint,
        state,
    })
}

/// Trains on the manifest under `config.data_root`.
pub fn train(config: &TrainConfig) -> Result<PathBuf> {
    let triples = load_training_set(config)?;
    ensure!(
        !triples.is_empty(),
        "manifest under {} has no training triples",
        config.data_root.display()
    );
    Ok(train_on(config, &triples)?.final_checkpoint)
}

/// Reads a loss log.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLosses>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
