//! A minimal reverse-mode tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Gradients are only computed for nodes
//! that (transitively) depend on a leaf created with `needs_grad = true`.

use crate::error::{ensure, Result};
use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    MaskMul {
        x: Var,
        mask: Vec<f32>,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f32,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// A scalar whose partial derivatives w.r.t. its inputs were computed
    /// when the value was.
    Scalar {
        inputs: Vec<(Var, Tensor)>,
    },
    WeightedSum {
        terms: Vec<(Var, f32)>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-channel statistics of a training-mode batch normalization.
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// A copy of `x` with no gradient connection.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let ng = self.any_grad(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(value, ng, Op::Conv { x, w, b, geom }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let value = tensor::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
            geom.stride - 1,
        )?;
        let ng = self.any_grad(&[x, w]) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(value, ng, Op::ConvT { x, w, b, geom }))
    }

    /// Batch normalization with statistics over `(n, h, w)` of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        ensure!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            "batch norm parameters do not match {c} channels"
        );
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                let start = (i * c + ch) * plane;
                s += xt.data()[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0.0f64;
            for i in 0..n {
                let start = (i * c + ch) * plane;
                ss += xt.data()[start..start + plane]
                    .iter()
                    .map(|&v| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = m as f32;
            var[ch] = (ss / count) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let ng = self.any_grad(&[x, gamma, beta]);
        let out = self.push(
            value,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let c = self.value(x).dims4().1;
        ensure!(
            mean.len() == c && var.len() == c,
            "running statistics do not match {c} channels"
        );
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.affine_normalize(x, gamma, beta, mean, &inv_std);
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            ng,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn affine_normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f32], inv_std: &[f32]) -> (Tensor, Tensor) {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let plane = h * w;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(xt.shape());
        let mut out = Tensor::zeros(xt.shape());
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                let src = &xt.data()[start..start + plane];
                let xh = &mut xhat.data_mut()[start..start + plane];
                for (d, s) in xh.iter_mut().zip(src) {
                    *d = (s - mean[ch]) * inv_std[ch];
                }
                let o = &mut out.data_mut()[start..start + plane];
                for (d, s) in o.iter_mut().zip(xhat.data()[start..start + plane].iter()) {
                    *d = g[ch] * s + b[ch];
                }
            }
        }
        (out, xhat)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::tanh);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Tanh { x })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape() == tb.shape(),
            "mul shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, ng, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape() == tb.shape(),
            "add shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, ng, Op::Add { a, b }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::concat_channels(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, ng, Op::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_channels(start, len);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::SliceChannels { x, start })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f32>) -> Var {
        assert_eq!(mask.len(), self.value(x).len());
        let xt = self.value(x);
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(xt.shape(), data).expect("mask length checked");
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::MaskMul { x, mask })
    }

    /// `w / sigma` where `sigma = uᵀ W v` is treated as a function of `W`
    /// only; `u` and `v` are constants.
    pub fn spectral_norm(&mut self, w: Var, u: Vec<f32>, v: Vec<f32>, sigma: f32) -> Var {
        let value = self.value(w).map(|x| x / sigma);
        let ng = self.needs_grad(w);
        self.push(value, ng, Op::SpectralNorm { w, u, v, sigma })
    }

    /// `y = x wᵀ + b` with `x` flattened to `[n, features]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.shape()[0];
        let f = xt.len() / n;
        let wt = self.value(w);
        ensure!(
            wt.shape().len() == 2 && wt.shape()[1] == f,
            "linear weight {:?} does not accept {f} features",
            wt.shape()
        );
        let o = wt.shape()[0];
        let mut wtrans = vec![0.0; f * o];
        for r in 0..o {
            for c in 0..f {
                wtrans[c * o + r] = wt.data()[r * f + c];
            }
        }
        let mut y = tensor::matmul(n, f, o, xt.data(), &wtrans);
        let bt = self.value(b).data();
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(bt).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_vec(&[n, o], y)?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(value, ng, Op::Linear { x, w, b }))
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn scalar(&mut self, value: f32, inputs: Vec<(Var, Tensor)>) -> Var {
        let ng = inputs.iter().any(|(v, _)| self.needs_grad(*v));
        self.push(Tensor::scalar(value), ng, Op::Scalar { inputs })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f32)>) -> Var {
        let value: f32 = terms.iter().map(|(v, k)| k * self.value(*v).data()[0]).sum();
        let ng = terms.iter().any(|(v, _)| self.needs_grad(*v));
        self.push(Tensor::scalar(value), ng, Op::WeightedSum { terms })
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from the scalar `root`. Consumes the recorded
    /// operations; leaf gradients stay readable through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        if !self.needs_grad(root) {
            return;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, op, dy);
        }
    }

    fn backward_op(&mut self, idx: usize, op: Op, dy: Tensor) {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let g = tensor::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    &dy,
                    geom,
                    self.needs_grad(x),
                    self.needs_grad(w),
                    b.is_some_and(|b| self.needs_grad(b)),
                );
                self.accumulate_conv(x, w, b, g);
            }
            Op::ConvT { x, w, b, geom } => {
                let g = tensor::conv_transpose2d_backward(
                    self.value(x),
                    self.value(w),
                    &dy,
                    geom,
                    self.needs_grad(x),
                    self.needs_grad(w),
                    b.is_some_and(|b| self.needs_grad(b)),
                );
                self.accumulate_conv(x, w, b, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.dims4();
                let plane = h * w;
                let count = (n * plane) as f32;
                let g = self.value(gamma).data().to_vec();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let (mut sg, mut sb) = (0.0f64, 0.0f64);
                    for i in 0..n {
                        let start = (i * c + ch) * plane;
                        for (d, xh) in dy.data()[start..start + plane]
                            .iter()
                            .zip(&xhat.data()[start..start + plane])
                        {
                            sg += (d * xh) as f64;
                            sb += *d as f64;
                        }
                    }
                    dgamma.data_mut()[ch] = sg as f32;
                    dbeta.data_mut()[ch] = sb as f32;
                }
                if self.needs_grad(x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for ch in 0..c {
                        let k = g[ch] * inv_std[ch] / count;
                        let (sb, sg) = (dbeta.data()[ch], dgamma.data()[ch]);
                        for i in 0..n {
                            let start = (i * c + ch) * plane;
                            for j in start..start + plane {
                                dx.data_mut()[j] = k * (count * dy.data()[j] - sb - xhat.data()[j] * sg);
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.dims4();
                let plane = h * w;
                let g = self.value(gamma).data().to_vec();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(xhat.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let start = (i * c + ch) * plane;
                        for j in start..start + plane {
                            let d = dy.data()[j];
                            dgamma.data_mut()[ch] += d * xhat.data()[j];
                            dbeta.data_mut()[ch] += d;
                            dx.data_mut()[j] = d * g[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let data = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(d, v)| if *v >= 0.0 { *d } else { slope * d })
                    .collect();
                let g = Tensor::from_vec(dy.shape(), data).expect("same shape");
                self.accumulate(x, g);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let data = dy.data().iter().zip(y.data()).map(|(d, s)| d * s * (1.0 - s)).collect();
                let g = Tensor::from_vec(dy.shape(), data).expect("same shape");
                self.accumulate(x, g);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[idx].value;
                let data = dy.data().iter().zip(y.data()).map(|(d, t)| d * (1.0 - t * t)).collect();
                let g = Tensor::from_vec(dy.shape(), data).expect("same shape");
                self.accumulate(x, g);
            }
            Op::Mul { a, b } => {
                if self.needs_grad(a) {
                    let data = dy.data().iter().zip(self.value(b).data()).map(|(d, v)| d * v).collect();
                    let g = Tensor::from_vec(dy.shape(), data).expect("same shape");
                    self.accumulate(a, g);
                }
                if self.needs_grad(b) {
                    let data = dy.data().iter().zip(self.value(a).data()).map(|(d, v)| d * v).collect();
                    let g = Tensor::from_vec(dy.shape(), data).expect("same shape");
                    self.accumulate(b, g);
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad(a) {
                    self.accumulate(a, dy.clone());
                }
                self.accumulate(b, dy);
            }
            Op::Concat { a, b } => {
                let ca = self.value(a).dims4().1;
                let cb = self.value(b).dims4().1;
                if self.needs_grad(a) {
                    self.accumulate(a, dy.slice_channels(0, ca));
                }
                if self.needs_grad(b) {
                    self.accumulate(b, dy.slice_channels(ca, cb));
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(x).dims4();
                let len = dy.dims4().1;
                let plane = h * w;
                let mut g = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let dst = &mut g.data_mut()[(i * c + start) * plane..(i * c + start + len) * plane];
                    dst.copy_from_slice(&dy.data()[i * len * plane..(i + 1) * len * plane]);
                }
                self.accumulate(x, g);
            }
            Op::MaskMul { x, mask } => {
                let data = dy.data().iter().zip(&mask).map(|(d, m)| d * m).collect();
                let g = Tensor::from_vec(dy.shape(), data).expect("same shape");
                self.accumulate(x, g);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/σ)/dW applied to G: G/σ - <G, W>/σ² · u vᵀ
                let wt = self.value(w);
                let inner: f64 = dy
                    .data()
                    .iter()
                    .zip(wt.data())
                    .map(|(a, b)| (*a as f64) * (*b as f64))
                    .sum();
                let k = (inner / (sigma as f64 * sigma as f64)) as f32;
                let cols = v.len();
                let mut g = dy.map(|d| d / sigma);
                for (r, ur) in u.iter().enumerate() {
                    let row = &mut g.data_mut()[r * cols..(r + 1) * cols];
                    row.iter_mut().zip(&v).for_each(|(x, vc)| *x -= k * ur * vc);
                }
                self.accumulate(w, g);
            }
            Op::Linear { x, w, b } => {
                let (n, o) = (dy.shape()[0], dy.shape()[1]);
                let xt = self.value(x);
                let f = xt.len() / n;
                if self.needs_grad(x) {
                    let dx = tensor::matmul(n, o, f, dy.data(), self.value(w).data());
                    let g = Tensor::from_vec(xt.shape(), dx).expect("same shape");
                    self.accumulate(x, g);
                }
                if self.needs_grad(w) {
                    let mut dyt = vec![0.0; o * n];
                    for i in 0..n {
                        for j in 0..o {
                            dyt[j * n + i] = dy.data()[i * o + j];
                        }
                    }
                    let dw = tensor::matmul(o, n, f, &dyt, self.value(x).data());
                    let g = Tensor::from_vec(&[o, f], dw).expect("same shape");
                    self.accumulate(w, g);
                }
                let mut db = Tensor::zeros(&[o]);
                for row in dy.data().chunks(o) {
                    db.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate(b, db);
            }
            Op::Scalar { inputs } => {
                let d = dy.data()[0];
                for (v, local) in inputs {
                    self.accumulate(v, local.map(|x| x * d));
                }
            }
            Op::WeightedSum { terms } => {
                let d = dy.data()[0];
                for (v, k) in terms {
                    self.accumulate(v, Tensor::scalar(k * d));
                }
            }
        }
    }

    fn accumulate_conv(&mut self, x: Var, w: Var, b: Option<Var>, g: tensor::ConvGrads) {
        if let Some(dx) = g.input {
            self.accumulate(x, dx);
        }
        if let Some(dw) = g.weight {
            self.accumulate(w, dw);
        }
        if let (Some(b), Some(db)) = (b, g.bias) {
            self.accumulate(b, db);
        }
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
