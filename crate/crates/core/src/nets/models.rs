use crate::autograd::Var;
use crate::error::{ensure, Result};
use crate::imgproc::Image;
use crate::tensor::{ConvGeom, Tensor};

use super::layers::{BlockMode, ConvBlock, ConvLstm, Decoder, Encoder, LstmState};
use super::{ModelKind, NetConfig, ParamKind, ParamSpec, Session, WeightStore};

pub const RNN_DENOISE: &str = "rnn.denoise.";
pub const RNN_DEBLUR: &str = "rnn.deblur.";
pub const MERGER: &str = "merger.";
pub const DISC: &str = "disc.";

/// Recurrent state as plain tensors, for use outside a session.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

/// Encoder, ConvLSTM bottleneck and decoder with skip connections.
#[derive(Debug, Clone)]
pub struct RecurrentUnet {
    pub encoder: Encoder,
    pub lstm: ConvLstm,
    pub decoder: Decoder,
}

impl RecurrentUnet {
    fn new(prefix: &str, cfg: &NetConfig, in_channels: usize) -> Self {
        RecurrentUnet {
            encoder: Encoder::new(prefix, cfg, in_channels),
            lstm: ConvLstm::new(
                format!("{prefix}.lstm"),
                cfg.bottleneck_channels(),
                cfg.lstm_channels,
                cfg.lstm_kernel,
            ),
            decoder: Decoder::new(prefix, cfg, cfg.lstm_channels),
        }
    }

    fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.encoder.params();
        p.extend(self.lstm.params());
        p.extend(self.decoder.params());
        p
    }

    fn forward(&self, s: &mut Session, x: Var, state: Option<LstmState>) -> Result<(Var, LstmState)> {
        let (bottleneck, skips) = self.encoder.encode(s, x)?;
        let (features, state) = self.lstm.step(s, bottleneck, state)?;
        let out = self.decoder.decode(s, features, &skips)?;
        Ok((out, state))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RnnOutput {
    pub denoised: Var,
    pub sharp: Var,
    pub state: LstmState,
}

/// Denoising net followed by a deblurring net; the ConvLSTM state of the
/// first seeds the second.
#[derive(Debug, Clone)]
pub struct DeblurRnn {
    pub denoise: RecurrentUnet,
    pub deblur: RecurrentUnet,
}

impl DeblurRnn {
    pub fn new(cfg: &NetConfig) -> Self {
        DeblurRnn {
            denoise: RecurrentUnet::new("rnn.denoise", cfg, 3),
            deblur: RecurrentUnet::new("rnn.deblur", cfg, 6),
        }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.denoise.params();
        p.extend(self.deblur.params());
        p
    }

    /// Denoising net from a zero recurrent state.
    pub fn run_denoise(&self, s: &mut Session, noisy: Var) -> Result<(Var, LstmState)> {
        self.denoise.forward(s, noisy, None)
    }

    /// Deblurring net on `[denoised, blurry]`, continuing from `state`.
    pub fn run_deblur(&self, s: &mut Session, denoised: Var, blurry: Var, state: Option<LstmState>) -> Result<Var> {
        let x = s.graph().concat_channels(denoised, blurry)?;
        Ok(self.deblur.forward(s, x, state)?.0)
    }

    pub fn forward(&self, s: &mut Session, noisy: Var, blurry: Var) -> Result<RnnOutput> {
        let (denoised, state) = self.run_denoise(s, noisy)?;
        let sharp = self.run_deblur(s, denoised, blurry, Some(state))?;
        Ok(RnnOutput { denoised, sharp, state })
    }
}

/// Two encoders whose bottlenecks are concatenated, reduced by a 1×1
/// convolution and decoded with skips from the blurry branch.
#[derive(Debug, Clone)]
pub struct DeblurMerger {
    pub noisy_encoder: Encoder,
    pub blurry_encoder: Encoder,
    pub decoder: Decoder,
    reduce_in: usize,
    reduce_out: usize,
    spectral: bool,
}

pub struct MergerOutput {
    pub merged: Var,
    pub sharp: Var,
}

impl DeblurMerger {
    pub fn new(cfg: &NetConfig) -> Self {
        DeblurMerger {
            noisy_encoder: Encoder::new("merger.noisy", cfg, 3),
            blurry_encoder: Encoder::new("merger.blurry", cfg, 3),
            decoder: Decoder::new("merger.dec", cfg, cfg.lstm_channels),
            reduce_in: 2 * cfg.bottleneck_channels(),
            reduce_out: cfg.lstm_channels,
            spectral: cfg.use_spectral_norm,
        }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = self.noisy_encoder.params();
        p.extend(self.blurry_encoder.params());
        p.push(ParamSpec::new(
            "merger.reduce.w".into(),
            &[self.reduce_out, self.reduce_in, 1, 1],
            ParamKind::Weight {
                spectral: self.spectral,
            },
        ));
        p.push(ParamSpec::new(
            "merger.reduce.b".into(),
            &[self.reduce_out],
            ParamKind::Bias,
        ));
        p.extend(self.decoder.params());
        p
    }

    pub fn forward_detailed(&self, s: &mut Session, noisy: Var, blurry: Var) -> Result<MergerOutput> {
        let (noisy_b, _) = self.noisy_encoder.encode(s, noisy)?;
        let (blurry_b, skips) = self.blurry_encoder.encode(s, blurry)?;
        let merged = s.graph().concat_channels(noisy_b, blurry_b)?;
        let w = s.weight("merger.reduce.w", self.spectral)?;
        let b = s.param("merger.reduce.b")?;
        let geom = ConvGeom {
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let reduced = s.graph().conv2d(merged, w, Some(b), geom)?;
        let sharp = self.decoder.decode(s, reduced, &skips)?;
        Ok(MergerOutput { merged, sharp })
    }

    pub fn forward(&self, s: &mut Session, noisy: Var, blurry: Var) -> Result<Var> {
        Ok(self.forward_detailed(s, noisy, blurry)?.sharp)
    }
}

/// Conditional discriminator over `[candidate, blurry]`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub blocks: Vec<ConvBlock>,
    input_size: usize,
    fc_in: usize,
    spectral: bool,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut blocks = Vec::with_capacity(cfg.disc_schedule.len());
        let mut c_in = 6;
        for (i, &c_out) in cfg.disc_schedule.iter().enumerate() {
            blocks.push(ConvBlock::new(
                format!("disc.block{i}"),
                cfg,
                BlockMode::Encode,
                c_in,
                c_out,
                i > 0,
            ));
            c_in = c_out;
        }
        let side = cfg.disc_input_size / cfg.stride.pow(blocks.len() as u32);
        Discriminator {
            blocks,
            input_size: cfg.disc_input_size,
            fc_in: c_in * side * side,
            spectral: cfg.use_spectral_norm,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p: Vec<ParamSpec> = self.blocks.iter().flat_map(ConvBlock::params).collect();
        p.push(ParamSpec::new(
            "disc.fc.w".into(),
            &[1, self.fc_in],
            ParamKind::Weight {
                spectral: self.spectral,
            },
        ));
        p.push(ParamSpec::new("disc.fc.b".into(), &[1], ParamKind::Bias));
        p
    }

    /// Feature map right before flattening.
    pub fn features(&self, s: &mut Session, candidate: Var, condition: Var) -> Result<Var> {
        let (cs, ys) = (s.value(candidate).shape().to_vec(), s.value(condition).shape().to_vec());
        ensure!(cs == ys, "candidate {cs:?} and condition {ys:?} differ in shape");
        ensure!(
            cs[2] == self.input_size && cs[3] == self.input_size,
            "discriminator is sized for {0}x{0} inputs, got {1}x{2}",
            self.input_size,
            cs[2],
            cs[3]
        );
        let mut x = s.graph().concat_channels(candidate, condition)?;
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }

    /// Probability `[n, 1]` that `candidate` is a real sharp image.
    pub fn forward(&self, s: &mut Session, candidate: Var, condition: Var) -> Result<Var> {
        let x = self.features(s, candidate, condition)?;
        let w = s.weight("disc.fc.w", self.spectral)?;
        let b = s.param("disc.fc.b")?;
        let logit = s.graph().linear(x, w, b)?;
        Ok(s.graph().sigmoid(logit))
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Rnn(DeblurRnn),
    Merger(DeblurMerger),
}

/// A generator/discriminator pair built from one configuration.
#[derive(Debug, Clone)]
pub struct Networks {
    pub kind: ModelKind,
    pub config: NetConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Networks {
    pub fn new(kind: ModelKind, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let generator = match kind {
            ModelKind::Rnn => Generator::Rnn(DeblurRnn::new(&config)),
            ModelKind::Merger => Generator::Merger(DeblurMerger::new(&config)),
        };
        let discriminator = Discriminator::new(&config);
        Ok(Networks {
            kind,
            config,
            generator,
            discriminator,
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let mut p = match &self.generator {
            Generator::Rnn(g) => g.params(),
            Generator::Merger(g) => g.params(),
        };
        p.extend(self.discriminator.params());
        p
    }

    /// Path prefix of the parameters updated by the generator step.
    pub fn generator_prefix(&self) -> &'static str {
        match self.kind {
            ModelKind::Rnn => RNN_DEBLUR,
            ModelKind::Merger => MERGER,
        }
    }

    /// Every conv and affine weight `N(0, init_std²)`, biases zero,
    /// batch-norm scale 1 / shift 0, spectral vectors random unit.
    pub fn init_weights(&self, init_std: f32, seed: u64) -> Result<WeightStore> {
        WeightStore::init(&self.params(), init_std, seed)
    }

    fn check_pair(&self, noisy: &Tensor, blurry: &Tensor) -> Result<()> {
        ensure!(
            noisy.shape() == blurry.shape(),
            "noisy {:?} and blurry {:?} differ in shape",
            noisy.shape(),
            blurry.shape()
        );
        let (_, c, h, w) = noisy.dims4();
        ensure!(c == 3, "generators take 3-channel images, got {c}");
        self.config.check_input(h, w)
    }

    /// Generator output(s) recorded in `s`.
    pub fn generate(&self, s: &mut Session, noisy: Var, blurry: Var) -> Result<(Option<Var>, Var)> {
        self.check_pair(s.value(noisy), s.value(blurry))?;
        match &self.generator {
            Generator::Rnn(g) => {
                let out = g.forward(s, noisy, blurry)?;
                Ok((Some(out.denoised), out.sharp))
            }
            Generator::Merger(g) => Ok((None, g.forward(s, noisy, blurry)?)),
        }
    }

    /// Inference-mode generator on a batch; returns the sharp estimate.
    pub fn infer_batch(&self, store: &WeightStore, noisy: &Tensor, blurry: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(store);
        let n = s.input(noisy.clone());
        let b = s.input(blurry.clone());
        let (_, sharp) = self.generate(&mut s, n, b)?;
        Ok(s.value(sharp).clone())
    }

    /// Inference on one pair. `noisy` must already be exposure-compensated.
    pub fn infer(&self, store: &WeightStore, noisy: &Image, blurry: &Image) -> Result<Image> {
        let out = self.infer_batch(store, &Tensor::from_images(&[noisy])?, &Tensor::from_images(&[blurry])?)?;
        Ok(out.to_image(0)?.clamped())
    }

    /// Inference-mode discriminator probability for one pair.
    pub fn discriminate(&self, store: &WeightStore, candidate: &Image, condition: &Image) -> Result<f64> {
        let mut s = Session::inference(store);
        let c = s.input(Tensor::from_images(&[candidate])?);
        let y = s.input(Tensor::from_images(&[condition])?);
        let p = self.discriminator.forward(&mut s, c, y)?;
        Ok(s.value(p).data()[0] as f64)
    }
}

/// One inference-mode ConvLSTM update on plain tensors.
pub fn conv_lstm_step(
    store: &WeightStore,
    lstm: &ConvLstm,
    features: &Tensor,
    state: Option<&RecurrentState>,
) -> Result<(Tensor, RecurrentState)> {
    let mut s = Session::inference(store);
    let x = s.input(features.clone());
    let st = state.map(|st| LstmState {
        hidden: s.input(st.hidden.clone()),
        cell: s.input(st.cell.clone()),
    });
    let (h, next) = lstm.step(&mut s, x, st)?;
    Ok((
        s.value(h).clone(),
        RecurrentState {
            hidden: s.value(next.hidden).clone(),
            cell: s.value(next.cell).clone(),
        },
    ))
}
