//! Network definitions: encoder/decoder blocks, the ConvLSTM bottleneck,
//! both fusion generators and the conditional discriminator.
//!
//! Networks are stateless descriptions; all trainable state lives in a
//! [`WeightStore`] keyed by parameter path. A [`Session`] records one forward
//! pass on an autograd tape.

mod layers;
mod models;
pub mod spectral;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, invalid, Result};
use crate::tensor::Tensor;

pub use layers::{conv_block, BlockMode, ConvBlock, ConvLstm, Decoder, Encoder, LstmState};
pub use models::{
    conv_lstm_step, DeblurMerger, DeblurRnn, Discriminator, Generator, MergerOutput, Networks, RecurrentState,
    RecurrentUnet, RnnOutput, DISC, MERGER, RNN_DEBLUR, RNN_DENOISE,
};

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rnn,
    Merger,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(ModelKind::Rnn),
            "merger" => Ok(ModelKind::Merger),
            other => Err(invalid!("unknown model '{other}', expected rnn or merger")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Merger => "merger",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder_depth: usize,
    /// Output channels of each encoder block; `channel_schedule[0]` is the
    /// base width.
    pub channel_schedule: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub leaky_slope: f32,
    pub dropout_rate: f32,
    /// Number of leading decoder blocks that apply dropout while training.
    pub dropout_layers: usize,
    pub lstm_channels: usize,
    pub lstm_kernel: usize,
    pub use_spectral_norm: bool,
    pub disc_schedule: Vec<usize>,
    /// Side length the discriminator's final affine layer is sized for.
    pub disc_input_size: usize,
    pub bn_momentum: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            encoder_depth: 6,
            channel_schedule: vec![64, 128, 256, 512, 512, 512],
            kernel_size: 5,
            stride: 2,
            leaky_slope: 0.2,
            dropout_rate: 0.5,
            dropout_layers: 3,
            lstm_channels: 512,
            lstm_kernel: 3,
            use_spectral_norm: true,
            disc_schedule: vec![64, 128, 256, 512, 512],
            disc_input_size: 256,
            bn_momentum: 0.99,
        }
    }
}

impl NetConfig {
    /// A narrow, shallow configuration for desk-scale experiments on small
    /// crops.
    pub fn toy(input_size: usize) -> Self {
        NetConfig {
            encoder_depth: 4,
            channel_schedule: vec![16, 32, 48, 64],
            lstm_channels: 64,
            dropout_layers: 1,
            disc_schedule: vec![16, 32, 64],
            disc_input_size: input_size,
            ..NetConfig::default()
        }
    }

    pub fn base_channels(&self) -> usize {
        self.channel_schedule[0]
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channel_schedule.last().expect("validated non-empty")
    }

    /// Input side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.stride.pow(self.encoder_depth as u32)
    }

    pub fn is_canonical(&self) -> bool {
        self.kernel_size == 5 && self.stride == 2
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.encoder_depth >= 1, "encoder_depth must be at least 1");
        ensure!(
            self.channel_schedule.len() == self.encoder_depth,
            "channel_schedule has {} entries for depth {}",
            self.channel_schedule.len(),
            self.encoder_depth
        );
        ensure!(
            self.kernel_size % 2 == 1 && self.kernel_size > self.stride && self.stride >= 1,
            "kernel_size must be odd and exceed the stride"
        );
        ensure!(self.lstm_kernel % 2 == 1, "lstm_kernel must be odd");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must lie in [0, 1)"
        );
        ensure!(!self.disc_schedule.is_empty(), "discriminator needs at least one block");
        ensure!(
            self.channel_schedule.iter().chain(&self.disc_schedule).all(|&c| c > 0) && self.lstm_channels > 0,
            "channel widths must be positive"
        );
        let disc_multiple = self.stride.pow(self.disc_schedule.len() as u32);
        ensure!(
            self.disc_input_size.is_multiple_of(disc_multiple),
            "disc_input_size {} is not divisible by {disc_multiple}",
            self.disc_input_size
        );
        if !self.is_canonical() {
            log::warn!(
                "non-canonical convolution geometry: kernel {} stride {}",
                self.kernel_size,
                self.stride
            );
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        ensure!(
            height.is_multiple_of(m) && width.is_multiple_of(m) && height > 0 && width > 0,
            "input {height}x{width} is not divisible by {m} (depth {})",
            self.encoder_depth
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or affine weight drawn from `N(0, std²)`.
    Weight {
        spectral: bool,
    },
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub(crate) fn new(name: String, shape: &[usize], kind: ParamKind) -> Self {
        ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
        }
    }
}

/// All trainable arrays plus the non-trainable state that travels with
/// them: persistent power-iteration vectors and batch-norm running
/// statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    pub params: BTreeMap<String, Tensor>,
    /// Keyed by the path of the spectrally normalized weight.
    pub spectral_u: BTreeMap<String, Vec<f32>>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl WeightStore {
    /// Allocates and initializes every parameter in `specs`.
    pub fn init(specs: &[ParamSpec], init_std: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, init_std).map_err(|e| invalid!("init std: {e}"))?;
        let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut store = WeightStore::default();
        for spec in specs {
            ensure!(
                !store.params.contains_key(&spec.name),
                "duplicate parameter path {}",
                spec.name
            );
            let n: usize = spec.shape.iter().product();
            let tensor = match spec.kind {
                ParamKind::Weight { spectral } => {
                    let t = Tensor::from_vec(&spec.shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?;
                    if spectral {
                        let rows = spec.shape[0];
                        let mut u: Vec<f32> = (0..rows).map(|_| unit.sample(&mut rng)).collect();
                        let norm = u.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                        u.iter_mut().for_each(|x| *x /= norm);
                        store.spectral_u.insert(spec.name.clone(), u);
                    }
                    t
                }
                ParamKind::Bias | ParamKind::BnShift => Tensor::zeros(&spec.shape),
                ParamKind::BnScale => {
                    let prefix = spec.name.trim_end_matches(".gamma");
                    store
                        .buffers
                        .insert(format!("{prefix}.running_mean"), Tensor::zeros(&spec.shape));
                    store
                        .buffers
                        .insert(format!("{prefix}.running_var"), Tensor::full(&spec.shape, 1.0));
                    Tensor::full(&spec.shape, 1.0)
                }
            };
            store.params.insert(spec.name.clone(), tensor);
        }
        Ok(store)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| k.starts_with(prefix))
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| invalid!("missing parameter {name}"))
    }
}

enum StoreAccess<'a> {
    Read(&'a WeightStore),
    Write(&'a mut WeightStore),
}

impl StoreAccess<'_> {
    fn get(&self) -> &WeightStore {
        match self {
            StoreAccess::Read(s) => s,
            StoreAccess::Write(s) => s,
        }
    }
}

/// One recorded forward pass.
///
/// In training mode batch normalization uses batch statistics, dropout is
/// active, and the modules being trained update their running averages and
/// advance each spectral power iteration once. Frozen modules in a training
/// session still see batch statistics but write nothing back. Inference mode
/// reads the store only.
pub struct Session<'a> {
    graph: Graph,
    store: StoreAccess<'a>,
    training: bool,
    trainable: Vec<String>,
    params: HashMap<String, Var>,
    normalized: HashMap<String, Var>,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    /// Training session; parameters whose path starts with one of
    /// `trainable` receive gradients.
    pub fn training(store: &'a mut WeightStore, trainable: &[&str], seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            store: StoreAccess::Write(store),
            training: true,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            params: HashMap::new(),
            normalized: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn inference(store: &'a WeightStore) -> Self {
        Session {
            graph: Graph::new(),
            store: StoreAccess::Read(store),
            training: false,
            trainable: Vec::new(),
            params: HashMap::new(),
            normalized: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn graph(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn store(&self) -> &WeightStore {
        self.store.get()
    }

    /// Mutable access to the underlying store, e.g. to apply an optimizer
    /// update between two phases recorded in the same session.
    pub fn store_mut(&mut self) -> &mut WeightStore {
        match &mut self.store {
            StoreAccess::Write(s) => s,
            StoreAccess::Read(_) => panic!("inference sessions cannot mutate weights"),
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.leaf(value, false)
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.training && self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = self.store.get().get(name)?.clone();
        let needs = self.is_trainable(name);
        let v = self.graph.leaf(value, needs);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// A weight, spectrally normalized when requested. The power iteration
    /// runs at most once per weight per session.
    pub fn weight(&mut self, name: &str, spectral: bool) -> Result<Var> {
        let w = self.param(name)?;
        if !spectral {
            return Ok(w);
        }
        if let Some(v) = self.normalized.get(name) {
            return Ok(*v);
        }
        let u = self
            .store
            .get()
            .spectral_u
            .get(name)
            .ok_or_else(|| invalid!("missing spectral vector for {name}"))?
            .clone();
        let wt = self.graph.value(w);
        let est = if self.is_trainable(name) {
            let (rows, cols) = spectral::matrix_dims(wt);
            let est = spectral::power_iteration(wt.data(), rows, cols, &u, 1);
            self.store_mut().spectral_u.insert(name.to_string(), est.u.clone());
            est
        } else {
            spectral::frozen_estimate(wt, &u)
        };
        let out = self.graph.spectral_norm(w, est.u, est.v, est.sigma);
        self.normalized.insert(name.to_string(), out);
        Ok(out)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var, momentum: f32) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        if self.training {
            let (n, _, h, w) = self.graph.value(x).dims4();
            let count = (n * h * w) as f32;
            let (out, stats) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
            if !self.is_trainable(&format!("{prefix}.gamma")) {
                return Ok(out);
            }
            let store = self.store_mut();
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            if let Some(rm) = store.buffers.get_mut(&mean_key) {
                for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = momentum * *r + (1.0 - momentum) * m;
                }
            }
            if let Some(rv) = store.buffers.get_mut(&var_key) {
                for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = momentum * *r + (1.0 - momentum) * v * unbias;
                }
            }
            Ok(out)
        } else {
            let store = self.store.get();
            let mean = store
                .buffers
                .get(&mean_key)
                .ok_or_else(|| invalid!("missing {mean_key}"))?
                .data()
                .to_vec();
            let var = store
                .buffers
                .get(&var_key)
                .ok_or_else(|| invalid!("missing {var_key}"))?
                .data()
                .to_vec();
            self.graph.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f32) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.graph.mask_mul(x, mask)
    }

    pub fn backward(&mut self, root: Var) {
        self.graph.backward(root);
    }

    /// Gradients of every trainable parameter touched by this session;
    /// parameters that did not influence the loss get zeros.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(name, _)| self.is_trainable(name))
            .map(|(name, var)| {
                let g = self
                    .graph
                    .grad(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(*var).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
