//! Dense `f32` tensors in NCHW layout and the convolution kernels the
//! networks are built from.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imgproc::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "shape {shape:?} does not hold {} values",
            data.len()
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks images into an `N × C × H × W` batch.
    pub fn from_images(images: &[&Image]) -> Result<Tensor> {
        ensure!(!images.is_empty(), "cannot batch zero images");
        let (h, w, c) = images[0].dim();
        ensure!(
            images.iter().all(|i| i.dim() == (h, w, c)),
            "batched images must share one shape"
        );
        let mut out = Tensor::zeros(&[images.len(), c, h, w]);
        let plane = h * w;
        for (n, img) in images.iter().enumerate() {
            let base = n * c * plane;
            for ((y, x, ch), v) in img.data().indexed_iter() {
                out.data[base + ch * plane + y * w + x] = *v as f32;
            }
        }
        Ok(out)
    }

    /// Extracts sample `n` of an NCHW batch as an image (no clamping).
    pub fn to_image(&self, n: usize) -> Result<Image> {
        let (_, c, h, w) = self.dims4();
        let plane = h * w;
        let base = n * c * plane;
        Image::new(ndarray::Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            self.data[base + ch * plane + y * w + x] as f64
        }))
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        ensure!(
            (n, h, w) == (nb, hb, wb),
            "cannot concatenate {:?} with {:?}",
            a.shape,
            b.shape
        );
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        for i in 0..n {
            let dst = &mut out.data[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            dst[ca * plane..].copy_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(out)
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c);
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for i in 0..n {
            let src = &self.data[(i * c + start) * plane..(i * c + start + len) * plane];
            out.data[i * len * plane..(i + 1) * len * plane].copy_from_slice(src);
        }
        out
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output side length of the transposed convolution.
    pub fn transposed_size(&self, size: usize, out_pad: usize) -> usize {
        (size - 1) * self.stride + self.kernel + out_pad - 2 * self.pad
    }
}

/// Unfolds one `c × h × w` image into a `(c·k·k) × (oh·ow)` column matrix.
fn im2col(src: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [f32]) {
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let cols = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto the image.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, dst: &mut [f32]) {
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let cols = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha · op(a) · op(b) + beta · c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_trans: bool, b: &[f32], b_trans: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the buffers hold at least m·k, k·n and m·n elements with the
    // strides computed above, as asserted.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product `a (m×k) · b (k×n)`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, 0.0, &mut c);
    c
}

fn check_weight(w: &Tensor, rows: usize, cols: usize, k: usize) -> Result<()> {
    ensure!(
        w.shape() == [rows, cols, k, k],
        "weight shape {:?} does not match [{rows}, {cols}, {k}, {k}]",
        w.shape()
    );
    Ok(())
}

/// Cross-correlation of `x [n, ci, h, w]` with `w [co, ci, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4();
    let co = w.shape()[0];
    check_weight(w, co, ci, g.kernel)?;
    ensure!(
        h + 2 * g.pad >= g.kernel && wd + 2 * g.pad >= g.kernel,
        "input {h}x{wd} smaller than kernel"
    );
    let (oh, ow) = (g.out_size(h), g.out_size(wd));
    let kk = ci * g.kernel * g.kernel;
    let mut col = vec![0.0; kk * oh * ow];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for i in 0..n {
        im2col(&x.data[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, g, &mut col);
        let dst = &mut out.data[i * co * oh * ow..(i + 1) * co * oh * ow];
        gemm(co, kk, oh * ow, &w.data, false, &col, false, 0.0, dst);
        if let Some(b) = bias {
            for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += b.data[c]);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, oh, ow) = dy.dims4();
    let kk = ci * g.kernel * g.kernel;
    let cols = oh * ow;
    let mut col = vec![0.0; kk * cols];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(w.shape()));
    let db = need_bias.then(|| {
        let mut b = Tensor::zeros(&[co]);
        for i in 0..n {
            for c in 0..co {
                let start = (i * co + c) * cols;
                b.data[c] += dy.data[start..start + cols].iter().sum::<f32>();
            }
        }
        b
    });
    for i in 0..n {
        let dyi = &dy.data[i * co * cols..(i + 1) * co * cols];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, g, &mut col);
            gemm(co, cols, kk, dyi, false, &col, true, 1.0, &mut dw.data);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, co, cols, &w.data, true, dyi, false, 0.0, &mut col);
            col2im(&col, ci, h, wd, g, &mut dx.data[i * ci * h * wd..(i + 1) * ci * h * wd]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Transposed convolution of `x [n, ci, h, w]` with `w [ci, co, k, k]`;
/// the exact adjoint of [`conv2d`] on the output geometry.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom, out_pad: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4();
    let co = w.shape()[1];
    check_weight(w, ci, co, g.kernel)?;
    let (oh, ow) = (g.transposed_size(h, out_pad), g.transposed_size(wd, out_pad));
    ensure!(
        g.out_size(oh) == h && g.out_size(ow) == wd,
        "inconsistent transposed geometry for {h}x{wd}"
    );
    let kk = co * g.kernel * g.kernel;
    let mut col = vec![0.0; kk * h * wd];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for i in 0..n {
        let xi = &x.data[i * ci * h * wd..(i + 1) * ci * h * wd];
        gemm(kk, ci, h * wd, &w.data, true, xi, false, 0.0, &mut col);
        let dst = &mut out.data[i * co * oh * ow..(i + 1) * co * oh * ow];
        col2im(&col, co, oh, ow, g, dst);
        if let Some(b) = bias {
            for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += b.data[c]);
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, oh, ow) = dy.dims4();
    let kk = co * g.kernel * g.kernel;
    let cols = h * wd;
    let mut col = vec![0.0; kk * cols];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(w.shape()));
    let db = need_bias.then(|| {
        let mut b = Tensor::zeros(&[co]);
        let plane = oh * ow;
        for i in 0..n {
            for c in 0..co {
                let start = (i * co + c) * plane;
                b.data[c] += dy.data[start..start + plane].iter().sum::<f32>();
            }
        }
        b
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads {
            input: None,
            weight: None,
            bias: db,
        };
    }
    for i in 0..n {
        im2col(
            &dy.data[i * co * oh * ow..(i + 1) * co * oh * ow],
            co,
            oh,
            ow,
            g,
            &mut col,
        );
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data[i * ci * cols..(i + 1) * ci * cols];
            gemm(ci, kk, cols, &w.data, false, &col, false, 0.0, dst);
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x.data[i * ci * cols..(i + 1) * ci * cols];
            gemm(ci, cols, kk, xi, false, &col, true, 1.0, &mut dw.data);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let (n, ci, h, wd) = x.dims4();
        let co = w.shape()[0];
        let (oh, ow) = (g.out_size(h), g.out_size(wd));
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for i in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for c in 0..ci {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data[((i * ci + c) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data[((o * ci + c) * g.kernel + ky) * g.kernel + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data[((i * co + o) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    const G: ConvGeom = ConvGeom {
        kernel: 5,
        stride: 2,
        pad: 2,
    };

    #[test]
    fn conv_matches_naive_loop() {
        let x = random(&[2, 3, 8, 8], 1);
        let w = random(&[4, 3, 5, 5], 2);
        let y = conv2d(&x, &w, None, G).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        let r = naive_conv(&x, &w, G);
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let x = random(&[2, 3, 8, 8], 3);
        let w = random(&[4, 3, 5, 5], 4);
        let dy = random(&[2, 4, 4, 4], 5);
        let grads = conv2d_backward(&x, &w, &dy, G, true, true, false);
        let y = conv2d(&x, &w, None, G).unwrap();
        // <conv(x), dy> is bilinear: equals <x, dx> and <w, dw>.
        let lhs = dot(&y, &dy);
        assert!((lhs - dot(&x, grads.input.as_ref().unwrap())).abs() < 1e-3);
        assert!((lhs - dot(&w, grads.weight.as_ref().unwrap())).abs() < 1e-3);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let x = random(&[2, 4, 4, 4], 6);
        let w = random(&[4, 3, 5, 5], 7);
        let z = random(&[2, 3, 8, 8], 8);
        let up = conv_transpose2d(&x, &w, None, G, 1).unwrap();
        assert_eq!(up.shape(), &[2, 3, 8, 8]);
        let down = conv2d(&z, &w, None, G).unwrap();
        assert!((dot(&up, &z) - dot(&x, &down)).abs() < 1e-3);

        let grads = conv_transpose2d_backward(&x, &w, &z, G, true, true, false);
        let lhs = dot(&up, &z);
        assert!((lhs - dot(&x, grads.input.as_ref().unwrap())).abs() < 1e-3);
        assert!((lhs - dot(&w, grads.weight.as_ref().unwrap())).abs() < 1e-3);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = random(&[2, 3, 2, 2], 9);
        let b = random(&[2, 5, 2, 2], 10);
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.slice_channels(0, 3), a);
        assert_eq!(c.slice_channels(3, 5), b);
    }
}
