//! Training objectives for the denoising net, the discriminator and the
//! deblurring generator.
//!
//! Every image loss has a `*_with_grad` form returning the value and its
//! gradient with respect to the output image, computed in `f64`. The
//! `*_node` adapters lift those onto the autograd tape for a whole batch
//! (mean over samples).

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::imgproc::{self, Image};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c1: f64,
    pub lambda_c2: f64,
    pub lambda_grad: f64,
    pub lambda_dc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c1: 50.0,
            lambda_c2: 50.0,
            lambda_grad: 50.0,
            lambda_dc: 250.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c1, self.lambda_c2, self.lambda_grad, self.lambda_dc];
        ensure!(
            all.iter().all(|w| *w >= 0.0 && w.is_finite()),
            "loss weights must be nonnegative: {self:?}"
        );
        Ok(())
    }
}

/// Generator adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// Minimize `log(1 - D(G))`.
    #[default]
    Literal,
    /// Minimize `-log D(G)`.
    NonSaturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub content: f64,
    pub grad: f64,
    pub dark_channel: f64,
    pub total: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-[log D(real) + log(1 - D(fake))]`.
pub fn adversarial_loss_discriminator(d_real: f64, d_fake: f64) -> f64 {
    -(clamp_prob(d_real).ln() + (1.0 - clamp_prob(d_fake)).ln())
}

/// `log(1 - D(fake))`, the second term of the adversarial objective.
pub fn adversarial_loss_generator(d_fake: f64) -> f64 {
    (1.0 - clamp_prob(d_fake)).ln()
}

pub fn adversarial_loss_generator_with(form: AdversarialForm, d_fake: f64) -> f64 {
    match form {
        AdversarialForm::Literal => adversarial_loss_generator(d_fake),
        AdversarialForm::NonSaturating => -clamp_prob(d_fake).ln(),
    }
}

fn check_pair(output: &Image, target: &Image) -> Result<()> {
    ensure!(
        output.dim() == target.dim(),
        "loss inputs differ in shape: {:?} vs {:?}",
        output.dim(),
        target.dim()
    );
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn content_loss(output: &Image, target: &Image) -> Result<f64> {
    Ok(content_loss_with_grad(output, target)?.0)
}

pub fn content_loss_with_grad(output: &Image, target: &Image) -> Result<(f64, Array3<f64>)> {
    check_pair(output, target)?;
    let n = output.data().len() as f64;
    let mut sum = 0.0;
    let mut grad = Array3::<f64>::zeros(output.dim());
    Zip::from(&mut grad)
        .and(output.data())
        .and(target.data())
        .for_each(|g, o, t| {
            let d = o - t;
            sum += d.abs();
            *g = sign(d) / n;
        });
    Ok((sum / n, grad))
}

/// Mean absolute difference of Sobel responses, horizontal plus vertical.
pub fn gradient_loss(output: &Image, target: &Image) -> Result<f64> {
    Ok(gradient_loss_with_grad(output, target)?.0)
}

pub fn gradient_loss_with_grad(output: &Image, target: &Image) -> Result<(f64, Array3<f64>)> {
    check_pair(output, target)?;
    let go = imgproc::sobel_gradients(output)?;
    let gt = imgproc::sobel_gradients(target)?;
    let n = output.data().len() as f64;
    let dh = &go.horizontal - &gt.horizontal;
    let dv = &go.vertical - &gt.vertical;
    let value = dh.iter().map(|d| d.abs()).sum::<f64>() / n + dv.iter().map(|d| d.abs()).sum::<f64>() / n;
    let sh = dh.mapv(|d| sign(d) / n);
    let sv = dv.mapv(|d| sign(d) / n);
    Ok((value, imgproc::sobel_adjoint(sh.view(), sv.view())))
}

/// Root-mean-square difference between the dark channels of target and
/// output.
pub fn dark_channel_loss(output: &Image, target: &Image, patch: usize) -> Result<f64> {
    Ok(dark_channel_loss_with_grad(output, target, patch)?.0)
}

/// The gradient flows only into the pixel each output dark-channel value
/// was taken from.
pub fn dark_channel_loss_with_grad(output: &Image, target: &Image, patch: usize) -> Result<(f64, Array3<f64>)> {
    check_pair(output, target)?;
    let dco = imgproc::dark_channel_with_argmin(output, patch)?;
    let dct = imgproc::dark_channel(target, patch)?;
    let n = dct.len() as f64;
    let diff = &dco.map - &dct;
    let value = (diff.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let mut grad = Array3::<f64>::zeros(output.dim());
    if value > 0.0 {
        for (d, src) in diff.iter().zip(dco.argmin.iter()) {
            grad[[src.0, src.1, src.2]] += d / (n * value);
        }
    }
    Ok((value, grad))
}

/// `log(1 - D) + λc2·content + λgrad·grad + λdc·dark_channel`.
pub fn total_deblur_loss(
    d_fake: f64,
    output: &Image,
    target: &Image,
    weights: &LossWeights,
    patch: usize,
) -> Result<LossBreakdown> {
    let adv = adversarial_loss_generator(d_fake);
    let content = content_loss(output, target)?;
    let grad = gradient_loss(output, target)?;
    let dark_channel = dark_channel_loss(output, target, patch)?;
    Ok(combine(adv, content, grad, dark_channel, weights))
}

pub(crate) fn combine(adv: f64, content: f64, grad: f64, dark_channel: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        adv,
        content,
        grad,
        dark_channel,
        total: adv + w.lambda_c2 * content + w.lambda_grad * grad + w.lambda_dc * dark_channel,
    }
}

/// `λc1 · mean |denoised − target|`.
pub fn denoise_loss(denoised: &Image, target: &Image, lambda_c1: f64) -> Result<f64> {
    Ok(lambda_c1 * content_loss(denoised, target)?)
}

// ---------------------------------------------------------------------------
// Tape adapters

type ImageLoss = fn(&Image, &Image) -> Result<(f64, Array3<f64>)>;

fn grads_to_tensor(grads: &[Array3<f64>], scale: f64) -> Tensor {
    let (h, w, c) = grads[0].dim();
    let plane = h * w;
    let mut out = Tensor::zeros(&[grads.len(), c, h, w]);
    for (n, g) in grads.iter().enumerate() {
        let base = n * c * plane;
        for ((y, x, ch), v) in g.indexed_iter() {
            out.data_mut()[base + ch * plane + y * w + x] = (v * scale) as f32;
        }
    }
    out
}

fn batch_image_loss(
    graph: &mut Graph,
    output: Var,
    targets: &[Image],
    f: impl Fn(&Image, &Image) -> Result<(f64, Array3<f64>)>,
) -> Result<(Var, f64)> {
    let out = graph.value(output);
    let n = out.dims4().0;
    ensure!(
        n == targets.len(),
        "batch of {n} outputs against {} targets",
        targets.len()
    );
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (i, target) in targets.iter().enumerate() {
        let (v, g) = f(&out.to_image(i)?, target)?;
        total += v;
        grads.push(g);
    }
    let mean = total / n as f64;
    let local = grads_to_tensor(&grads, 1.0 / n as f64);
    Ok((graph.scalar(mean as f32, vec![(output, local)]), mean))
}

pub fn content_loss_node(graph: &mut Graph, output: Var, targets: &[Image]) -> Result<(Var, f64)> {
    batch_image_loss(graph, output, targets, content_loss_with_grad as ImageLoss)
}

pub fn gradient_loss_node(graph: &mut Graph, output: Var, targets: &[Image]) -> Result<(Var, f64)> {
    batch_image_loss(graph, output, targets, gradient_loss_with_grad as ImageLoss)
}

pub fn dark_channel_loss_node(graph: &mut Graph, output: Var, targets: &[Image], patch: usize) -> Result<(Var, f64)> {
    batch_image_loss(graph, output, targets, |o, t| dark_channel_loss_with_grad(o, t, patch))
}

/// Batch mean of the generator adversarial term over `d_fake [n, 1]`.
pub fn generator_adversarial_node(graph: &mut Graph, d_fake: Var, form: AdversarialForm) -> (Var, f64) {
    let probs = graph.value(d_fake).clone();
    let n = probs.len() as f64;
    let mut total = 0.0;
    let local = probs.map(|p| {
        let pc = clamp_prob(p as f64);
        let d = match form {
            AdversarialForm::Literal => -1.0 / (1.0 - pc),
            AdversarialForm::NonSaturating => -1.0 / pc,
        };
        (d / n) as f32
    });
    for p in probs.data() {
        total += adversarial_loss_generator_with(form, *p as f64);
    }
    let mean = total / n;
    (graph.scalar(mean as f32, vec![(d_fake, local)]), mean)
}

/// Batch mean of the discriminator objective over paired real/fake scores.
pub fn discriminator_node(graph: &mut Graph, d_real: Var, d_fake: Var) -> Result<(Var, f64)> {
    let real = graph.value(d_real).clone();
    let fake = graph.value(d_fake).clone();
    ensure!(real.len() == fake.len(), "real and fake batches differ in size");
    let n = real.len() as f64;
    let total: f64 = real
        .data()
        .iter()
        .zip(fake.data())
        .map(|(r, f)| adversarial_loss_discriminator(*r as f64, *f as f64))
        .sum();
    let g_real = real.map(|p| (-1.0 / clamp_prob(p as f64) / n) as f32);
    let g_fake = fake.map(|p| (1.0 / (1.0 - clamp_prob(p as f64)) / n) as f32);
    let mean = total / n;
    Ok((
        graph.scalar(mean as f32, vec![(d_real, g_real), (d_fake, g_fake)]),
        mean,
    ))
}

/// Discriminator objective over one stacked batch `[real; fake]` of
/// scores, averaged over pairs.
pub fn discriminator_stacked_node(graph: &mut Graph, scores: Var) -> Result<(Var, f64)> {
    let s = graph.value(scores).clone();
    ensure!(
        s.len().is_multiple_of(2) && !s.is_empty(),
        "stacked scores need an even, non-zero length, got {}",
        s.len()
    );
    let n = s.len() / 2;
    let (real, fake) = s.data().split_at(n);
    let total: f64 = real
        .iter()
        .zip(fake)
        .map(|(r, f)| adversarial_loss_discriminator(*r as f64, *f as f64))
        .sum();
    let nf = n as f64;
    let local = s.data().iter().enumerate().map(|(i, &p)| {
        let p = clamp_prob(p as f64);
        (if i < n { -1.0 / p } else { 1.0 / (1.0 - p) } / nf) as f32
    });
    let local = Tensor::from_vec(s.shape(), local.collect())?;
    let mean = total / nf;
    Ok((graph.scalar(mean as f32, vec![(scores, local)]), mean))
}
