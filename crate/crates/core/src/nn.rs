//! Small encoder–decoder convolutional network with hand-written backprop.
//!
//! Activations are kept channel-major as `(channels, height * width)`
//! matrices so every convolution is one im2col followed by a GEMM. The
//! network is generic over the float type: training runs in `f32`, the
//! gradient checks run the identical code path in `f64`.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView3, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

#[inline]
fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("float conversion")
}

/// Shape-defining description of a network. Embedded in every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    /// Widths of the encoder stages. Stage 0 keeps full resolution, every
    /// later stage halves it.
    pub encoder_widths: Vec<usize>,
    /// Widths of the 3x3 convolutions run at feature resolution before the
    /// 1x1 classifier.
    pub decoder_widths: Vec<usize>,
    pub num_classes: usize,
    pub feature_stride: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            in_channels: 3,
            encoder_widths: vec![16, 32, 64],
            decoder_widths: vec![32],
            num_classes: 5,
            feature_stride: 4,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::invalid("encoder needs at least one stage"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.in_channels == 0
            || self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0)
        {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let implied = 1usize << (self.encoder_widths.len() - 1);
        if implied != self.feature_stride {
            return Err(Error::invalid(format!(
                "feature stride {} does not match {} encoder stages (stride {implied})",
                self.feature_stride,
                self.encoder_widths.len()
            )));
        }
        Ok(())
    }

    /// Channel count D of the encoder feature map.
    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.encoder_widths.iter().enumerate() {
            specs.push(LayerSpec {
                in_channels: cin,
                out_channels: w,
                kernel: 3,
                stride: if i == 0 { 1 } else { 2 },
                relu: true,
            });
            cin = w;
        }
        for &w in &self.decoder_widths {
            specs.push(LayerSpec {
                in_channels: cin,
                out_channels: w,
                kernel: 3,
                stride: 1,
                relu: true,
            });
            cin = w;
        }
        specs.push(LayerSpec {
            in_channels: cin,
            out_channels: self.num_classes,
            kernel: 1,
            stride: 1,
            relu: false,
        });
        specs
    }

    /// Index of the last encoder layer, whose output is the feature map.
    pub fn feature_layer(&self) -> usize {
        self.encoder_widths.len() - 1
    }

    pub fn check_image(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::invalid(format!(
                "image has {channels} channels, network expects {}",
                self.in_channels
            )));
        }
        if height == 0
            || width == 0
            || height % self.feature_stride != 0
            || width % self.feature_stride != 0
        {
            return Err(Error::invalid(format!(
                "image {height}x{width} is not divisible by feature stride {}",
                self.feature_stride
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl LayerSpec {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }
}

/// Weight matrix `(out, in * k * k)` and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn zeros(spec: &LayerSpec) -> Self {
        LayerParams {
            weight: Array2::zeros((
                spec.out_channels,
                spec.in_channels * spec.kernel * spec.kernel,
            )),
            bias: Array1::zeros(spec.out_channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    arch: ArchDescriptor,
    specs: Vec<LayerSpec>,
    pub layers: Vec<LayerParams<F>>,
}

/// Per-layer gradients, same layout as [`Network::layers`].
pub type Gradients<F> = Vec<LayerParams<F>>;

struct LayerCache<F> {
    cols: Array2<F>,
    in_hw: (usize, usize),
    pre: Array2<F>,
}

pub struct ForwardPass<F> {
    /// Full-resolution logits, `(classes, H * W)`.
    pub logits: Array2<F>,
    /// Encoder feature map, `(D, h * w)`.
    pub features: Array2<F>,
    pub height: usize,
    pub width: usize,
    caches: Vec<LayerCache<F>>,
    low_hw: (usize, usize),
}

impl<F: Scalar> ForwardPass<F> {
    pub fn feature_hw(&self) -> (usize, usize) {
        self.low_hw
    }

    /// Per-pixel softmax over the class axis, `(classes, H * W)`.
    pub fn probabilities(&self) -> Array2<F> {
        softmax_columns(&self.logits)
    }
}

impl<F: Scalar> Network<F> {
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layer_specs();
        let layers = specs.iter().map(LayerParams::zeros).collect();
        Ok(Network {
            arch,
            specs,
            layers,
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: ArchDescriptor, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let last = net.specs.len() - 1;
        for (i, (spec, layer)) in net.specs.iter().zip(net.layers.iter_mut()).enumerate() {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if i == last {
                std *= 0.5;
            }
            layer.weight.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(rng);
                cast(z * std)
            });
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Zero the classifier so every pixel predicts the uniform distribution.
    pub fn zero_classifier(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(F::zero());
        last.bias.fill(F::zero());
    }

    /// Visits every parameter tensor as a flat slice in declaration order
    /// (layer by layer, weight before bias).
    pub fn param_slices(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Gradients<F> {
        self.specs.iter().map(LayerParams::zeros).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            arch: self.arch.clone(),
            specs: self.specs.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.mapv(|v| cast(v.to_f64().unwrap_or(0.0))),
                    bias: l.bias.mapv(|v| cast(v.to_f64().unwrap_or(0.0))),
                })
                .collect(),
        }
    }

    /// Runs the network on an `H x W x C` image with values in `[0, 1]`.
    pub fn forward(&self, image: ArrayView3<'_, f32>) -> Result<ForwardPass<F>> {
        let (h, w, c) = image.dim();
        self.arch.check_image(h, w, c)?;
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        let mut x = Array2::<F>::zeros((c, h * w));
        for ((y, xx, ch), &v) in image.indexed_iter() {
            x[[ch, y * w + xx]] = cast(v as f64 - 0.5);
        }
        let mut hw = (h, w);
        let mut caches = Vec::with_capacity(self.specs.len());
        let mut features = None;
        let mut low_hw = hw;
        for (i, (spec, params)) in self.specs.iter().zip(&self.layers).enumerate() {
            let (oh, ow) = spec.out_size(hw.0, hw.1);
            let cols = im2col(&x, hw.0, hw.1, spec.kernel, spec.stride, spec.pad());
            let mut pre = params.weight.dot(&cols);
            for (mut row, &b) in pre.axis_iter_mut(Axis(0)).zip(params.bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            let out = if spec.relu {
                pre.mapv(|v| if v > F::zero() { v } else { F::zero() })
            } else {
                pre.clone()
            };
            caches.push(LayerCache {
                cols,
                in_hw: hw,
                pre,
            });
            hw = (oh, ow);
            if i == self.arch.feature_layer() {
                features = Some(out.clone());
                low_hw = hw;
            }
            x = out;
        }
        let logits = upsample_bilinear(&x, hw.0, hw.1, h, w);
        Ok(ForwardPass {
            logits,
            features: features.expect("feature layer visited"),
            height: h,
            width: w,
            caches,
            low_hw,
        })
    }

    /// Backpropagates `d_logits` (same shape as `pass.logits`) and adds the
    /// parameter gradients into `grads`.
    pub fn backward(&self, pass: &ForwardPass<F>, d_logits: &Array2<F>, grads: &mut Gradients<F>) {
        let last = pass.caches.last().expect("non-empty");
        let (lh, lw) = self.specs.last().expect("non-empty").out_size(last.in_hw.0, last.in_hw.1);
        let mut d_out = upsample_bilinear_backward(d_logits, lh, lw, pass.height, pass.width);
        for i in (0..self.specs.len()).rev() {
            let spec = &self.specs[i];
            let cache = &pass.caches[i];
            if spec.relu {
                ndarray::Zip::from(&mut d_out)
                    .and(&cache.pre)
                    .for_each(|d, &z| {
                        if z <= F::zero() {
                            *d = F::zero();
                        }
                    });
            }
            let g = &mut grads[i];
            g.weight = &g.weight + &d_out.dot(&cache.cols.t());
            g.bias = &g.bias + &d_out.sum_axis(Axis(1));
            if i > 0 {
                let d_cols = self.layers[i].weight.t().dot(&d_out);
                d_out = col2im(
                    &d_cols,
                    spec.in_channels,
                    cache.in_hw.0,
                    cache.in_hw.1,
                    spec.kernel,
                    spec.stride,
                    spec.pad(),
                );
            }
        }
    }
}

/// Target of the per-pixel cross-entropy.
pub enum PixelTarget<'a, F> {
    /// Class id per pixel.
    Hard(&'a [u8]),
    /// Distribution per pixel, `(classes, pixels)`, columns summing to 1.
    Soft(&'a Array2<F>),
}

/// `(1/N) * sum_i w_i * CE_i` over the `N` pixels of `logits`, plus its
/// gradient with respect to the logits.
pub fn pixel_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    target: PixelTarget<'_, F>,
    weights: Option<&[f32]>,
) -> (F, Array2<F>) {
    let (classes, n) = logits.dim();
    let probs = softmax_columns(logits);
    let mut grad = probs.clone();
    let inv_n = F::one() / cast(n as f64);
    let mut loss = F::zero();
    for i in 0..n {
        let w: F = weights.map_or(F::one(), |ws| cast(ws[i] as f64));
        // log-softmax directly from the logits: no clamping, so overflowed
        // parameters surface as a non-finite loss
        let col = logits.column(i);
        let m = col.iter().fold(F::neg_infinity(), |a, &b| if b > a || b.is_nan() { b } else { a });
        let lse = m + col.iter().fold(F::zero(), |a, &b| a + (b - m).exp()).ln();
        let mut ce = F::zero();
        match &target {
            PixelTarget::Hard(labels) => {
                let t = labels[i] as usize;
                ce = lse - logits[[t, i]];
                grad[[t, i]] = grad[[t, i]] - F::one();
            }
            PixelTarget::Soft(dist) => {
                for c in 0..classes {
                    let t = dist[[c, i]];
                    if t != F::zero() {
                        ce = ce + t * (lse - logits[[c, i]]);
                    }
                    grad[[c, i]] = grad[[c, i]] - t;
                }
            }
        }
        loss = loss + w * ce;
        let scale = w * inv_n;
        for c in 0..classes {
            grad[[c, i]] = grad[[c, i]] * scale;
        }
    }
    (loss * inv_n, grad)
}

pub fn softmax_columns<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let m = col.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for v in col.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in col.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

fn im2col<F: Scalar>(
    x: &Array2<F>,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let c = x.nrows();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let src = x.as_slice().expect("standard layout");
    let mut cols = vec![F::zero(); c * k * k * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, oh * ow), cols).expect("im2col shape")
}

fn col2im<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let s = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let p = &mut plane[iy as usize * w + ix as usize];
                            *p = *p + s[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c, h * w), out).expect("col2im shape")
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear
/// resize: `(lower index, upper index, weight of upper)`.
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_bilinear<F: Scalar>(x: &Array2<F>, h: usize, w: usize, oh: usize, ow: usize) -> Array2<F> {
    let c = x.nrows();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = Array2::<F>::zeros((c, oh * ow));
    for ch in 0..c {
        let src = x.row(ch);
        let mut dst = out.row_mut(ch);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly: F = cast(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx: F = cast(lx);
                let top = src[y0 * w + x0] * (F::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (F::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (F::one() - ly) + bot * ly;
            }
        }
    }
    out
}

fn upsample_bilinear_backward<F: Scalar>(
    d: &Array2<F>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let c = d.nrows();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = Array2::<F>::zeros((c, h * w));
    for ch in 0..c {
        let src = d.row(ch);
        let mut dst = out.row_mut(ch);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly: F = cast(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx: F = cast(lx);
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + g * (F::one() - ly) * (F::one() - lx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + g * (F::one() - ly) * lx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + g * ly * (F::one() - lx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + g * ly * lx;
            }
        }
    }
    out
}
