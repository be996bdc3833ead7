//! Segmentation model contract: probabilities, confidence, feature maps and
//! the student / teacher / previous-teacher roles.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::nn::{ArchDescriptor, ForwardPass, Network};

pub type SegmentationModel = Network<f32>;

pub const DEFAULT_EMA_DECAY: f32 = 0.99;

/// Teacher-side view of one image: class probabilities at full resolution
/// and the encoder feature map.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `H x W x C`, each pixel sums to one.
    pub probs: Array3<f32>,
    /// `h x w x D` at `1 / feature_stride` resolution.
    pub features: Array3<f32>,
}

impl Inference {
    pub fn confidence(&self) -> Array2<f32> {
        confidence_of(self.probs.view())
    }

    pub fn argmax(&self) -> Array2<u8> {
        argmax_of(self.probs.view())
    }
}

/// Reshapes `(channels, h * w)` into `h x w x channels`.
pub(crate) fn channels_last(m: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = m.nrows();
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ch in 0..c {
        let row = m.row(ch);
        for y in 0..h {
            for x in 0..w {
                out[[y, x, ch]] = row[y * w + x];
            }
        }
    }
    out
}

pub fn infer(model: &SegmentationModel, image: ArrayView3<'_, f32>) -> Result<Inference> {
    let pass = model.forward(image)?;
    Ok(inference_from_pass(&pass))
}

pub(crate) fn inference_from_pass(pass: &ForwardPass<f32>) -> Inference {
    let (fh, fw) = pass.feature_hw();
    Inference {
        probs: channels_last(&pass.probabilities(), pass.height, pass.width),
        features: channels_last(&pass.features, fh, fw),
    }
}

/// Per-pixel class probabilities, `H x W x C`.
pub fn forward_probs(model: &SegmentationModel, image: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    let pass = model.forward(image)?;
    Ok(channels_last(&pass.probabilities(), pass.height, pass.width))
}

/// Encoder feature map, `h x w x D`.
pub fn features(model: &SegmentationModel, image: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    let pass = model.forward(image)?;
    let (fh, fw) = pass.feature_hw();
    Ok(channels_last(&pass.features, fh, fw))
}

/// Maximum class probability per pixel.
pub fn confidence(model: &SegmentationModel, image: ArrayView3<'_, f32>) -> Result<Array2<f32>> {
    Ok(confidence_of(forward_probs(model, image)?.view()))
}

pub fn confidence_of(probs: ArrayView3<'_, f32>) -> Array2<f32> {
    probs.map_axis(Axis(2), |p| p.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

/// Arg-max class per pixel; ties resolve to the lowest class index.
pub fn argmax_of(probs: ArrayView3<'_, f32>) -> Array2<u8> {
    probs.map_axis(Axis(2), |p| {
        let mut best = 0usize;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        best as u8
    })
}

pub fn predict(model: &SegmentationModel, image: ArrayView3<'_, f32>) -> Result<Array2<u8>> {
    Ok(argmax_of(forward_probs(model, image)?.view()))
}

/// Nearest-neighbour downsampling of a class map by an integer factor.
pub fn downsample_labels(labels: ArrayView2<'_, u8>, stride: usize) -> Array2<u8> {
    let (h, w) = labels.dim();
    let (oh, ow) = (h / stride, w / stride);
    let off = stride / 2;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        labels[[(y * stride + off).min(h - 1), (x * stride + off).min(w - 1)]]
    })
}

/// Student, EMA teacher and the frozen teacher of the preceding step.
#[derive(Clone, Debug)]
pub struct TeacherEnsemble {
    pub student: SegmentationModel,
    pub teacher: SegmentationModel,
    previous_teacher: Option<SegmentationModel>,
    pub ema_decay: f32,
}

impl TeacherEnsemble {
    /// Step-1 ensemble: teacher starts as a copy of the student and there is
    /// no previous teacher.
    pub fn new(student: SegmentationModel, ema_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::invalid(format!("ema decay {ema_decay} outside [0, 1)")));
        }
        Ok(TeacherEnsemble {
            teacher: student.clone(),
            student,
            previous_teacher: None,
            ema_decay,
        })
    }

    pub fn with_previous(
        student: SegmentationModel,
        teacher: SegmentationModel,
        previous_teacher: Option<SegmentationModel>,
        ema_decay: f32,
    ) -> Result<Self> {
        let mut e = Self::new(student, ema_decay)?;
        check_compatible(e.student.arch(), teacher.arch())?;
        if let Some(p) = &previous_teacher {
            check_compatible(e.student.arch(), p.arch())?;
        }
        e.teacher = teacher;
        e.previous_teacher = previous_teacher;
        Ok(e)
    }

    pub fn previous_teacher(&self) -> Option<&SegmentationModel> {
        self.previous_teacher.as_ref()
    }

    /// Freezes the current teacher as the previous teacher of the next step.
    pub fn hand_off(&mut self) {
        self.previous_teacher = Some(self.teacher.clone());
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

fn check_compatible(a: &ArchDescriptor, b: &ArchDescriptor) -> Result<()> {
    if a != b {
        return Err(Error::DescriptorMismatch {
            expected: format!("{a:?}"),
            found: format!("{b:?}"),
        });
    }
    Ok(())
}

/// `teacher <- d * teacher + (1 - d) * student`, element-wise.
pub fn ema_update(teacher: &mut SegmentationModel, student: &SegmentationModel, decay: f32) -> Result<()> {
    let src = student.param_slices();
    let mut dst = teacher.param_slices_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.len() != d.len()) {
        return Err(Error::Corrupt("EMA update between incompatible parameter sets".into()));
    }
    if decay == 0.0 {
        dst.iter_mut().zip(src).for_each(|(d, s)| d.copy_from_slice(s));
        return Ok(());
    }
    let keep = 1.0 - decay;
    for (d, s) in dst.iter_mut().zip(src) {
        for (t, &v) in d.iter_mut().zip(s) {
            // written as a step towards the student so equal weights stay put
            *t += keep * (v - *t);
        }
    }
    Ok(())
}
