//! Weather composition replay.
//!
//! Every target domain leaves behind the mean Fourier amplitude of its
//! training images (its "weather vector"). Later steps paste the phase of
//! the current image recombined with a scaled stored amplitude into a random
//! rectangle of that image.

use std::cell::RefCell;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::container::{self, Block, Container};
use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unnormalised 2-D FFT of a row-major `h x w` plane.
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        };
        row_fft.process(buf);
        let mut col = vec![Complex::default(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    });
}

/// Per-channel amplitude and phase (`C x H x W`, DC at `[c, 0, 0]`) of an
/// `H x W x C` image.
pub fn amplitude_of(image: ArrayView3<'_, f32>) -> Result<(Array3<f64>, Array3<f64>)> {
    let (h, w, c) = image.dim();
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite values"));
    }
    let mut amp = Array3::<f64>::zeros((c, h, w));
    let mut phase = Array3::<f64>::zeros((c, h, w));
    let mut buf = vec![Complex::default(); h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = Complex::new(image[[y, x, ch]] as f64, 0.0);
            }
        }
        fft2(&mut buf, h, w, false);
        for y in 0..h {
            for x in 0..w {
                let z = buf[y * w + x];
                amp[[ch, y, x]] = z.norm();
                phase[[ch, y, x]] = z.arg();
            }
        }
    }
    Ok((amp, phase))
}

/// Real part of the inverse transform of `amplitude * exp(i * phase)`, as an
/// unclipped `H x W x C` image.
pub fn inverse_of(amplitude: ArrayView3<'_, f64>, phase: ArrayView3<'_, f64>) -> Result<Array3<f32>> {
    if amplitude.dim() != phase.dim() {
        return Err(Error::shape(format!("amplitude {:?} vs phase {:?}", amplitude.dim(), phase.dim())));
    }
    let (c, h, w) = amplitude.dim();
    let mut out = Array3::<f32>::zeros((h, w, c));
    let mut buf = vec![Complex::default(); h * w];
    let norm = 1.0 / (h * w) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = Complex::from_polar(amplitude[[ch, y, x]], phase[[ch, y, x]]);
            }
        }
        fft2(&mut buf, h, w, true);
        for y in 0..h {
            for x in 0..w {
                out[[y, x, ch]] = (buf[y * w + x].re * norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of an `H x W x C` image.
pub fn resize_image(image: ArrayView3<'_, f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (h, w, c) = image.dim();
    if (h, w) == (oh, ow) {
        return image.to_owned();
    }
    let ty = centred_taps(oh, h);
    let tx = centred_taps(ow, w);
    Array3::from_shape_fn((oh, ow, c), |(y, x, ch)| {
        let (y0, y1, ly) = ty[y];
        let (x0, x1, lx) = tx[x];
        let v = |yy: usize, xx: usize| image[[yy, xx, ch]] as f64;
        let top = v(y0, x0) * (1.0 - lx) + v(y0, x1) * lx;
        let bot = v(y1, x0) * (1.0 - lx) + v(y1, x1) * lx;
        (top * (1.0 - ly) + bot * ly) as f32
    })
}

/// Resizes an unshifted spectrum magnitude to `oh x ow`.
///
/// The resize runs on the centred layout so low frequencies stay low, and
/// magnitudes are scaled by the pixel-count ratio so the DC term keeps
/// meaning "sum of pixel values".
pub fn resize_amplitude(amp: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = amp.dim();
    if (h, w) == (oh, ow) {
        return amp.to_owned();
    }
    let shift = |a: usize, n: usize| (a + n / 2) % n;
    let unshift = |a: usize, n: usize| (a + n - n / 2) % n;
    let ty = centred_taps(oh, h);
    let tx = centred_taps(ow, w);
    let scale = (oh * ow) as f64 / (h * w) as f64;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        // centred[y][x] = amp[unshift(y)][unshift(x)]
        let centred = |y: usize, x: usize| amp[[ch, unshift(y, h), unshift(x, w)]];
        for y in 0..oh {
            let (y0, y1, ly) = ty[y];
            for x in 0..ow {
                let (x0, x1, lx) = tx[x];
                let top = centred(y0, x0) * (1.0 - lx) + centred(y0, x1) * lx;
                let bot = centred(y1, x0) * (1.0 - lx) + centred(y1, x1) * lx;
                let v = (top * (1.0 - ly) + bot * ly) * scale;
                out[[ch, shift(y, oh), shift(x, ow)]] = v;
            }
        }
    }
    out
}

/// Linear taps that map the zero frequency of the centred layout onto itself.
fn centred_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    let (oc, ic) = ((out_len / 2) as f64, (in_len / 2) as f64);
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 - oc) * ratio + ic).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Running mean of the amplitude spectra of one domain's images.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherVector {
    amplitude: Array3<f64>,
    n_samples: usize,
    pub domain_tag: String,
    canonical_size: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct WeatherMeta {
    domain_tag: String,
    n_samples: usize,
    shape: Vec<usize>,
    canonical_size: (usize, usize),
}

impl WeatherVector {
    pub fn empty(domain_tag: impl Into<String>, canonical_size: (usize, usize), channels: usize) -> Self {
        WeatherVector {
            amplitude: Array3::zeros((channels, canonical_size.0, canonical_size.1)),
            n_samples: 0,
            domain_tag: domain_tag.into(),
            canonical_size,
        }
    }

    pub fn amplitude(&self) -> &Array3<f64> {
        &self.amplitude
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn canonical_size(&self) -> (usize, usize) {
        self.canonical_size
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }

    /// Adds one image (resized to the canonical size first) to the mean.
    pub fn accumulate(&mut self, image: ArrayView3<'_, f32>) -> Result<()> {
        let (ch, ch_h, ch_w) = self.amplitude.dim();
        let resized = resize_image(image, ch_h, ch_w);
        let (amp, _) = amplitude_of(resized.view())?;
        if amp.dim() != (ch, ch_h, ch_w) {
            return Err(Error::shape(format!(
                "resized amplitude {:?} does not match accumulator {:?}",
                amp.dim(),
                self.amplitude.dim()
            )));
        }
        self.n_samples += 1;
        let inv = 1.0 / self.n_samples as f64;
        ndarray::Zip::from(&mut self.amplitude)
            .and(&amp)
            .for_each(|m, &a| *m += (a - *m) * inv);
        Ok(())
    }

    /// Rounds the mean to the precision it is stored with.
    pub fn round_to_f32(&mut self) {
        self.amplitude.mapv_inplace(|v| v as f32 as f64);
    }

    pub fn amplitude_for(&self, h: usize, w: usize) -> Array3<f64> {
        resize_amplitude(self.amplitude.view(), h, w)
    }

    pub fn to_container(&self) -> Result<Container> {
        if self.is_empty() {
            return Err(Error::invalid(format!("weather vector {} holds no samples", self.domain_tag)));
        }
        let meta = WeatherMeta {
            domain_tag: self.domain_tag.clone(),
            n_samples: self.n_samples,
            shape: self.amplitude.shape().to_vec(),
            canonical_size: self.canonical_size,
        };
        Ok(Container {
            kind: "weather".into(),
            meta: serde_json::to_value(meta)?,
            blocks: vec![Block {
                name: "amplitude".into(),
                shape: self.amplitude.shape().to_vec(),
                data: self.amplitude.iter().map(|&v| v as f32).collect(),
            }],
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "weather" {
            return Err(Error::Corrupt(format!("expected a weather vector, found {:?}", c.kind)));
        }
        let meta: WeatherMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Corrupt(format!("bad weather header: {e}")))?;
        let b = c.block("amplitude")?;
        if b.shape != meta.shape || b.shape.len() != 3 || meta.n_samples == 0 {
            return Err(Error::Corrupt("inconsistent weather vector header".into()));
        }
        let amplitude = Array3::from_shape_vec((b.shape[0], b.shape[1], b.shape[2]), b.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(WeatherVector {
            amplitude,
            n_samples: meta.n_samples,
            domain_tag: meta.domain_tag,
            canonical_size: meta.canonical_size,
        })
    }

    /// Stored as `f32`, so a reload matches to single precision.
    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.to_container()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&container::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposeParams {
    pub sigma_range: (f32, f32),
    /// Fraction of the image area replaced by one rectangle.
    pub area_range: (f32, f32),
    /// Width-to-height ratio of the rectangle before clipping.
    pub aspect_range: (f32, f32),
}

impl Default for ComposeParams {
    fn default() -> Self {
        ComposeParams {
            sigma_range: (0.2, 1.2),
            area_range: (1.0 / 3.0, 0.5),
            aspect_range: (0.5, 2.0),
        }
    }
}

impl ComposeParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f32, f32)| a > 0.0 && a <= b && b.is_finite();
        if !ordered(self.sigma_range) || !ordered(self.area_range) || !ordered(self.aspect_range) {
            return Err(Error::invalid(format!("compose ranges must be positive and ordered: {self:?}")));
        }
        if self.area_range.1 > 1.0 {
            return Err(Error::invalid("area fraction above 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug)]
pub struct Composed {
    pub image: Array3<f32>,
    /// 1 where the input pixel is kept, 0 inside the replaced rectangle.
    pub region_mask: Array2<u8>,
    pub sigma: f32,
    pub rect: Rect,
}

/// One draw of the random composition parameters. Order of draws: sigma,
/// area, aspect, top, left.
pub fn draw_region<R: Rng + ?Sized>(h: usize, w: usize, params: &ComposeParams, rng: &mut R) -> (f32, Rect) {
    let sigma = rng.random_range(params.sigma_range.0..=params.sigma_range.1);
    let area = rng.random_range(params.area_range.0..=params.area_range.1) as f64 * (h * w) as f64;
    let aspect = rng.random_range(params.aspect_range.0..=params.aspect_range.1) as f64;
    let height = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let width = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    (
        sigma,
        Rect {
            top,
            left,
            height,
            width,
        },
    )
}

/// Image carrying `phase` with the stored amplitude scaled by `sigma`,
/// clipped to `[0, 1]`.
pub fn stylize(phase: ArrayView3<'_, f64>, amplitude: ArrayView3<'_, f64>, sigma: f32) -> Result<Array3<f32>> {
    let scaled = amplitude.mapv(|a| a * sigma as f64);
    let mut img = inverse_of(scaled.view(), phase)?;
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(img)
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than {MIN_SIDE} px per side")));
    }
    Ok(())
}

fn paste(dst: &mut Array3<f32>, src: &Array3<f32>, rect: Rect) {
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            for c in 0..dst.dim().2 {
                dst[[y, x, c]] = src[[y, x, c]];
            }
        }
    }
}

pub fn compose<R: Rng + ?Sized>(
    image: ArrayView3<'_, f32>,
    vec: &WeatherVector,
    params: &ComposeParams,
    rng: &mut R,
) -> Result<Composed> {
    let (h, w, _) = image.dim();
    check_size(h, w)?;
    if vec.is_empty() {
        return Err(Error::invalid(format!("weather vector {} holds no samples", vec.domain_tag)));
    }
    let (_, phase) = amplitude_of(image)?;
    let (sigma, rect) = draw_region(h, w, params, rng);
    let stylized = stylize(phase.view(), vec.amplitude_for(h, w).view(), sigma)?;
    let mut out = image.to_owned();
    paste(&mut out, &stylized, rect);
    let region_mask = Array2::from_shape_fn((h, w), |(y, x)| u8::from(!rect.contains(y, x)));
    Ok(Composed {
        image: out,
        region_mask,
        sigma,
        rect,
    })
}

/// Composes every stored vector into `image`, one rectangle each, in order.
/// All stylised regions share the phase of the input image; later
/// rectangles overwrite earlier ones.
pub fn replay_all<R: Rng + ?Sized>(
    image: ArrayView3<'_, f32>,
    vectors: &[WeatherVector],
    params: &ComposeParams,
    rng: &mut R,
) -> Result<Array3<f32>> {
    if vectors.is_empty() {
        return Ok(image.to_owned());
    }
    let (h, w, _) = image.dim();
    check_size(h, w)?;
    let (_, phase) = amplitude_of(image)?;
    let mut out = image.to_owned();
    for v in vectors {
        if v.is_empty() {
            return Err(Error::invalid(format!("weather vector {} holds no samples", v.domain_tag)));
        }
        let (sigma, rect) = draw_region(h, w, params, rng);
        let stylized = stylize(phase.view(), v.amplitude_for(h, w).view(), sigma)?;
        paste(&mut out, &stylized, rect);
    }
    Ok(out)
}

/// Mean over channels of the spectrum, handy for summaries.
pub fn mean_amplitude(amp: &Array3<f64>) -> Array2<f64> {
    amp.mean_axis(Axis(0)).expect("non-empty")
}
