use crate::autograd::Var;
use crate::error::{ensure, Result};
use crate::tensor::{ConvGeom, Tensor};

use super::{NetConfig, ParamKind, ParamSpec, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Strided convolution: halves the spatial size.
    Encode,
    /// Transposed convolution: doubles the spatial size.
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Activation {
    Leaky(f32),
    Sigmoid,
}

/// Convolution (or transposed convolution), optional batch normalization,
/// activation, optional dropout.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub prefix: String,
    pub mode: BlockMode,
    pub in_channels: usize,
    pub out_channels: usize,
    pub normalize: bool,
    pub dropout: f32,
    pub(crate) activation: Activation,
    geom: ConvGeom,
    spectral: bool,
    momentum: f32,
}

impl ConvBlock {
    pub(crate) fn new(
        prefix: String,
        cfg: &NetConfig,
        mode: BlockMode,
        in_channels: usize,
        out_channels: usize,
        normalize: bool,
    ) -> Self {
        ConvBlock {
            prefix,
            mode,
            in_channels,
            out_channels,
            normalize,
            dropout: 0.0,
            activation: Activation::Leaky(cfg.leaky_slope),
            geom: ConvGeom {
                kernel: cfg.kernel_size,
                stride: cfg.stride,
                pad: cfg.kernel_size / 2,
            },
            spectral: cfg.use_spectral_norm,
            momentum: cfg.bn_momentum,
        }
    }

    pub(crate) fn with_dropout(mut self, rate: f32) -> Self {
        self.dropout = rate;
        self
    }

    pub(crate) fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    fn weight_shape(&self) -> [usize; 4] {
        let k = self.geom.kernel;
        match self.mode {
            BlockMode::Encode => [self.out_channels, self.in_channels, k, k],
            BlockMode::Decode => [self.in_channels, self.out_channels, k, k],
        }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let p = &self.prefix;
        let mut out = vec![
            ParamSpec::new(
                format!("{p}.w"),
                &self.weight_shape(),
                ParamKind::Weight {
                    spectral: self.spectral,
                },
            ),
            ParamSpec::new(format!("{p}.b"), &[self.out_channels], ParamKind::Bias),
        ];
        if self.normalize {
            out.push(ParamSpec::new(
                format!("{p}.bn.gamma"),
                &[self.out_channels],
                ParamKind::BnScale,
            ));
            out.push(ParamSpec::new(
                format!("{p}.bn.beta"),
                &[self.out_channels],
                ParamKind::BnShift,
            ));
        }
        out
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (_, c, h, w) = s.value(x).dims4();
        ensure!(
            c == self.in_channels,
            "{} expects {} channels, got {c}",
            self.prefix,
            self.in_channels
        );
        let weight = s.weight(&format!("{}.w", self.prefix), self.spectral)?;
        let bias = s.param(&format!("{}.b", self.prefix))?;
        let mut y = match self.mode {
            BlockMode::Encode => {
                ensure!(
                    h % self.geom.stride == 0 && w % self.geom.stride == 0,
                    "{}: {h}x{w} is not divisible by stride {}",
                    self.prefix,
                    self.geom.stride
                );
                s.graph().conv2d(x, weight, Some(bias), self.geom)?
            }
            BlockMode::Decode => s.graph().conv_transpose2d(x, weight, Some(bias), self.geom)?,
        };
        if self.normalize {
            y = s.batch_norm(&format!("{}.bn", self.prefix), y, self.momentum)?;
        }
        y = match self.activation {
            Activation::Leaky(slope) => s.graph().leaky_relu(y, slope),
            Activation::Sigmoid => s.graph().sigmoid(y),
        };
        if self.dropout > 0.0 {
            y = s.dropout(y, self.dropout);
        }
        Ok(y)
    }
}

/// Applies one block; see [`ConvBlock`].
pub fn conv_block(s: &mut Session, block: &ConvBlock, x: Var) -> Result<Var> {
    block.forward(s, x)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: &NetConfig, in_channels: usize) -> Self {
        let mut blocks = Vec::with_capacity(cfg.encoder_depth);
        let mut c_in = in_channels;
        for (i, &c_out) in cfg.channel_schedule.iter().enumerate() {
            blocks.push(ConvBlock::new(
                format!("{prefix}.enc{i}"),
                cfg,
                BlockMode::Encode,
                c_in,
                c_out,
                i > 0,
            ));
            c_in = c_out;
        }
        Encoder { blocks }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        self.blocks.iter().flat_map(ConvBlock::params).collect()
    }

    /// Returns the bottleneck and every block's activation (the last one is
    /// the bottleneck itself).
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(s, h)?;
            skips.push(h);
        }
        Ok((h, skips))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<ConvBlock>,
    pub output: ConvBlock,
}

impl Decoder {
    pub fn new(prefix: &str, cfg: &NetConfig, in_channels: usize) -> Self {
        let depth = cfg.encoder_depth;
        let mut blocks = Vec::with_capacity(depth.saturating_sub(1));
        let mut c_in = in_channels;
        for i in 0..depth - 1 {
            let c_out = cfg.channel_schedule[depth - 2 - i];
            let rate = if i < cfg.dropout_layers { cfg.dropout_rate } else { 0.0 };
            blocks.push(
                ConvBlock::new(format!("{prefix}.dec{i}"), cfg, BlockMode::Decode, c_in, c_out, true)
                    .with_dropout(rate),
            );
            c_in = 2 * c_out;
        }
        let output = ConvBlock::new(format!("{prefix}.out"), cfg, BlockMode::Decode, c_in, 3, false)
            .with_activation(Activation::Sigmoid);
        Decoder { blocks, output }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.output))
            .flat_map(ConvBlock::params)
            .collect()
    }

    /// Mirrors the encoder; after each block the matching encoder activation
    /// is concatenated channel-wise. Output is a 3-channel image in `[0, 1]`.
    pub fn decode(&self, s: &mut Session, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        let depth = self.blocks.len() + 1;
        ensure!(
            skips.len() == depth,
            "decoder expects {depth} skip tensors, got {}",
            skips.len()
        );
        let mut x = bottleneck;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(s, x)?;
            let skip = skips[depth - 2 - i];
            let (xs, ss) = (s.value(x).shape().to_vec(), s.value(skip).shape().to_vec());
            ensure!(
                xs[0] == ss[0] && xs[2..] == ss[2..] && ss[1] == b.out_channels,
                "skip {} has shape {ss:?}, decoder produced {xs:?}",
                depth - 2 - i
            );
            x = s.graph().concat_channels(x, skip)?;
        }
        self.output.forward(s, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Convolutional LSTM cell with gates computed by one convolution over
/// `[input, hidden]`. Gate channel order: input, forget, output, candidate.
#[derive(Debug, Clone)]
pub struct ConvLstm {
    pub prefix: String,
    pub in_channels: usize,
    pub hidden_channels: usize,
    geom: ConvGeom,
}

impl ConvLstm {
    pub fn new(prefix: String, in_channels: usize, hidden_channels: usize, kernel: usize) -> Self {
        ConvLstm {
            prefix,
            in_channels,
            hidden_channels,
            geom: ConvGeom {
                kernel,
                stride: 1,
                pad: kernel / 2,
            },
        }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let (p, k, hc) = (&self.prefix, self.geom.kernel, self.hidden_channels);
        vec![
            ParamSpec::new(
                format!("{p}.w"),
                &[4 * hc, self.in_channels + hc, k, k],
                ParamKind::Weight { spectral: false },
            ),
            ParamSpec::new(format!("{p}.b"), &[4 * hc], ParamKind::Bias),
        ]
    }

    /// One update. `state = None` starts from zeros. Returns the new hidden
    /// map (the features passed onward) and the new state.
    pub fn step(&self, s: &mut Session, x: Var, state: Option<LstmState>) -> Result<(Var, LstmState)> {
        let (n, c, h, w) = s.value(x).dims4();
        ensure!(
            c == self.in_channels,
            "{} expects {} channels, got {c}",
            self.prefix,
            self.in_channels
        );
        let hc = self.hidden_channels;
        let state = match state {
            Some(st) => {
                for v in [st.hidden, st.cell] {
                    ensure!(
                        s.value(v).shape() == [n, hc, h, w],
                        "recurrent state {:?} does not match features [{n}, {hc}, {h}, {w}]",
                        s.value(v).shape()
                    );
                }
                st
            }
            None => LstmState {
                hidden: s.input(Tensor::zeros(&[n, hc, h, w])),
                cell: s.input(Tensor::zeros(&[n, hc, h, w])),
            },
        };
        let wt = s.param(&format!("{}.w", self.prefix))?;
        let bias = s.param(&format!("{}.b", self.prefix))?;
        let g = s.graph();
        let xh = g.concat_channels(x, state.hidden)?;
        let gates = g.conv2d(xh, wt, Some(bias), self.geom)?;
        let i = g.slice_channels(gates, 0, hc);
        let f = g.slice_channels(gates, hc, hc);
        let o = g.slice_channels(gates, 2 * hc, hc);
        let cand = g.slice_channels(gates, 3 * hc, hc);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let keep = g.mul(f, state.cell)?;
        let write = g.mul(i, cand)?;
        let cell = g.add(keep, write)?;
        let squashed = g.tanh(cell);
        let hidden = g.mul(o, squashed)?;
        Ok((hidden, LstmState { hidden, cell }))
    }
}
