//! Source pre-training and one step of continual target adaptation.
//!
//! Per adaptation iteration: teachers label the clean target batch, the
//! student sees the replay-composed batch, and every target pixel's
//! cross-entropy is weighted by the product of the model-level and
//! feature-level acquisition masks.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blending::{blend_pseudo_label, blended_distribution, BlendInputs};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::masks::{
    feature_level_mask, model_level_mask, target_representation, AlphaSchedule, ClassPrototypes, Denominator,
};
use crate::metrics::{iou_scores, ConfusionMatrix, IouScores};
use crate::model::{argmax_of, downsample_labels, infer, inference_from_pass, Inference, SegmentationModel, TeacherEnsemble};
use crate::nn::{pixel_cross_entropy, Gradients, Network, PixelTarget, Scalar};
use crate::replay::{replay_all, ComposeParams, WeatherVector};
use crate::seed::stream;

/// Mechanism switches. All on is the full method; all off with source is
/// plain EMA self-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub use_model_mask: bool,
    pub use_feature_mask: bool,
    pub use_blending: bool,
    pub use_replay: bool,
    pub with_source: bool,
}

impl Flags {
    pub const fn full() -> Self {
        Flags {
            use_model_mask: true,
            use_feature_mask: true,
            use_blending: true,
            use_replay: true,
            with_source: true,
        }
    }

    pub const fn baseline() -> Self {
        Flags {
            use_model_mask: false,
            use_feature_mask: false,
            use_blending: false,
            use_replay: false,
            with_source: true,
        }
    }

    pub fn without_source(mut self) -> Self {
        self.with_source = false;
        self
    }
}

impl Default for Flags {
    fn default() -> Self {
        Flags::full()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    #[default]
    Hard,
    Soft,
}

/// Momentum SGD, `v <- mu * v + g; p <- p - lr * v`.
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Gradients<f32>,
}

impl Sgd {
    pub fn new(model: &SegmentationModel, learning_rate: f32, momentum: f32) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: model.zero_grads(),
        }
    }

    pub fn step(&mut self, model: &mut SegmentationModel, grads: &Gradients<f32>) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, v), g) in model.layers.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            ndarray::Zip::from(&mut layer.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, v, &g| {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, v, &g| {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                });
        }
    }
}

/// What the student is asked to predict on one composed target image.
#[derive(Clone, Debug)]
pub enum PseudoTarget {
    Hard(Array2<u8>),
    /// `H x W x C` distribution.
    Soft(Array3<f32>),
}

#[derive(Clone, Debug)]
pub struct TargetSample {
    pub input: Array3<f32>,
    pub target: PseudoTarget,
    /// Per-pixel loss weight in `[0, 1]`.
    pub weights: Array2<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<F> {
    pub source: F,
    pub target: F,
}

impl<F: Scalar> LossTerms<F> {
    pub fn total(&self) -> F {
        self.source + self.target
    }
}

fn flat_labels(l: &Array2<u8>) -> Vec<u8> {
    l.iter().copied().collect()
}

/// Mean source cross-entropy plus mean weighted target cross-entropy, and
/// the gradient of their sum with respect to the student's parameters.
pub fn weighted_loss<F: Scalar>(
    student: &Network<F>,
    source: &[(&Array3<f32>, &Array2<u8>)],
    target: &[TargetSample],
) -> Result<(LossTerms<F>, Gradients<F>)> {
    let mut grads = student.zero_grads();
    let mut terms = LossTerms {
        source: F::zero(),
        target: F::zero(),
    };
    let inv = |n: usize| F::one() / F::from_usize(n).expect("batch size");
    for (img, lbl) in source {
        let pass = student.forward(img.view())?;
        if lbl.dim() != (pass.height, pass.width) {
            return Err(Error::shape("source label does not match image"));
        }
        let labels = flat_labels(lbl);
        let (loss, mut d) = pixel_cross_entropy(&pass.logits, PixelTarget::Hard(&labels), None);
        let s = inv(source.len());
        d.mapv_inplace(|v| v * s);
        terms.source = terms.source + loss * s;
        student.backward(&pass, &d, &mut grads);
    }
    for t in target {
        let pass = student.forward(t.input.view())?;
        let (h, w) = (pass.height, pass.width);
        if t.weights.dim() != (h, w) {
            return Err(Error::shape("weight map does not match image"));
        }
        let weights: Vec<f32> = t.weights.iter().copied().collect();
        let (loss, mut d) = match &t.target {
            PseudoTarget::Hard(l) => {
                if l.dim() != (h, w) {
                    return Err(Error::shape("pseudo-label does not match image"));
                }
                let labels = flat_labels(l);
                pixel_cross_entropy(&pass.logits, PixelTarget::Hard(&labels), Some(&weights))
            }
            PseudoTarget::Soft(p) => {
                let c = p.dim().2;
                let mut dist = Array2::<F>::zeros((c, h * w));
                for ((y, x, k), &v) in p.indexed_iter() {
                    dist[[k, y * w + x]] = F::from_f32(v).expect("cast");
                }
                pixel_cross_entropy(&pass.logits, PixelTarget::Soft(&dist), Some(&weights))
            }
        };
        let s = inv(target.len());
        d.mapv_inplace(|v| v * s);
        terms.target = terms.target + loss * s;
        student.backward(&pass, &d, &mut grads);
    }
    Ok((terms, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceTrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            iters: 600,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Supervised cross-entropy training on labelled source images. Returns the
/// per-iteration losses.
pub fn train_source(
    model: &mut SegmentationModel,
    source: &[LabeledImage],
    cfg: &SourceTrainConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    if source.is_empty() {
        return Err(Error::EmptyDataset("source training set".into()));
    }
    if source.iter().any(|s| s.label.is_none()) {
        return Err(Error::invalid("source images must be labelled"));
    }
    let mut rng = stream(seed, &[0, 0xB47C]);
    let mut opt = Sgd::new(model, cfg.learning_rate, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let idx = sample_batch(&mut rng, source.len(), cfg.batch_size);
        let batch: Vec<_> = idx
            .iter()
            .map(|&i| (&source[i].image, source[i].label.as_ref().expect("checked")))
            .collect();
        let (terms, grads) = weighted_loss(model, &batch, &[])?;
        if !terms.total().is_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                iter,
                detail: format!("source loss {}", terms.total()),
            });
        }
        opt.step(model, &grads);
        losses.push(terms.total());
    }
    Ok(losses)
}

/// Settings of one adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    /// 1-based.
    pub step_index: usize,
    pub domain: String,
    pub iters: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub alpha_schedule: AlphaSchedule,
    pub compose_params: ComposeParams,
    pub flags: Flags,
    pub denominator: Denominator,
    pub pseudo_label: PseudoLabelMode,
    pub seed: u64,
    pub log_every: usize,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_index == 0 {
            return Err(Error::invalid("step index is 1-based"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.alpha_schedule.validate()?;
        self.compose_params.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub step: usize,
    pub iter: usize,
    pub loss: f32,
    pub loss_source: f32,
    pub loss_target: f32,
    pub alpha: f32,
    pub mean_model_mask: f32,
    pub mean_feature_mask: f32,
    pub mean_weight: f32,
    pub blended_fraction: f32,
}

/// Everything a step leaves behind.
#[derive(Clone, Debug)]
pub struct StepArtifacts {
    pub student: SegmentationModel,
    pub teacher: SegmentationModel,
    pub weather: WeatherVector,
    pub prototypes: ClassPrototypes,
    pub log: Vec<IterLog>,
}

/// Teacher-side products for one clean target image.
pub struct TargetLabels {
    pub target: PseudoTarget,
    pub weights: Array2<f32>,
    pub model_mask: Option<Array2<f32>>,
    pub feature_mask: Option<Array2<f32>>,
    pub gate: Option<Array2<f32>>,
}

fn ones(h: usize, w: usize) -> Array2<f32> {
    Array2::from_elem((h, w), 1.0)
}

/// Runs the teachers on a clean target image and derives the pseudo-label
/// and per-pixel loss weight.
pub fn label_target(
    image: &Array3<f32>,
    teacher: &SegmentationModel,
    previous: Option<&SegmentationModel>,
    protos: &ClassPrototypes,
    alpha: f32,
    cfg: &StepConfig,
) -> Result<TargetLabels> {
    let flags = cfg.flags;
    let (h, w, _) = image.dim();
    let stride = teacher.arch().feature_stride;
    let classes = teacher.arch().num_classes;
    let cur: Inference = infer(teacher, image.view())?;
    let q_cur = cur.confidence();
    let pre = match previous {
        Some(p) if flags.use_model_mask || flags.use_blending => Some(infer(p, image.view())?),
        _ => None,
    };

    let (label, gate) = match (&pre, flags.use_blending) {
        (Some(pre), true) => {
            let pred_pre = pre.argmax();
            let feat_pre = if flags.with_source {
                let tr = target_representation(pre.features.view(), downsample_labels(pred_pre.view(), stride).view(), classes)?;
                feature_level_mask(&tr, protos, pred_pre.view(), cfg.denominator)?
            } else {
                ones(h, w)
            };
            let q_pre = pre.confidence();
            let out = blend_pseudo_label(&BlendInputs {
                probs_cur: cur.probs.view(),
                probs_pre: pre.probs.view(),
                q_cur: q_cur.view(),
                q_pre: q_pre.view(),
                feat_weight_pre: feat_pre.view(),
            })?;
            (out.label, Some(out.gate))
        }
        _ => (cur.argmax(), None),
    };

    let model_mask = if flags.use_model_mask {
        Some(match &pre {
            Some(pre) => model_level_mask(q_cur.view(), pre.confidence().view(), alpha)?,
            // no previous teacher in the first step
            None => q_cur.clone(),
        })
    } else {
        None
    };
    let feature_mask = if flags.use_feature_mask && flags.with_source {
        let tr = target_representation(cur.features.view(), downsample_labels(label.view(), stride).view(), classes)?;
        Some(feature_level_mask(&tr, protos, label.view(), cfg.denominator)?)
    } else {
        None
    };
    let mut weights = ones(h, w);
    for m in model_mask.iter().chain(feature_mask.iter()) {
        weights *= m;
    }
    let target = match cfg.pseudo_label {
        PseudoLabelMode::Hard => PseudoTarget::Hard(label),
        PseudoLabelMode::Soft => match (&pre, &gate) {
            (Some(pre), Some(g)) => PseudoTarget::Soft(blended_distribution(cur.probs.view(), pre.probs.view(), g.view())),
            _ => PseudoTarget::Soft(cur.probs.clone()),
        },
    };
    Ok(TargetLabels {
        target,
        weights,
        model_mask,
        feature_mask,
        gate,
    })
}

fn mean(a: &Array2<f32>) -> f32 {
    a.mean().unwrap_or(0.0)
}

/// One adaptation step on `target`. The ensemble is updated in place; the
/// previous teacher is only read.
pub fn adapt_step(
    ensemble: &mut TeacherEnsemble,
    target: &[LabeledImage],
    source: Option<&[LabeledImage]>,
    stored_vectors: &[WeatherVector],
    protos: &mut ClassPrototypes,
    cfg: &StepConfig,
) -> Result<StepArtifacts> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyDataset(format!("target {} training set", cfg.domain)));
    }
    let flags = cfg.flags;
    if cfg.step_index >= 2 {
        if ensemble.previous_teacher().is_none() {
            return Err(Error::MissingArtifact(format!("previous teacher for step {}", cfg.step_index)));
        }
        if flags.use_replay && stored_vectors.len() < cfg.step_index - 1 {
            return Err(Error::MissingArtifact(format!(
                "weather vectors of steps 1..{} (have {})",
                cfg.step_index - 1,
                stored_vectors.len()
            )));
        }
    }
    let source = if flags.with_source {
        let s = source.ok_or_else(|| Error::MissingArtifact("source data".into()))?;
        if s.is_empty() {
            return Err(Error::EmptyDataset("source training set".into()));
        }
        Some(s)
    } else {
        None
    };
    let (h, w, c) = target[0].image.dim();
    let mut weather = WeatherVector::empty(cfg.domain.clone(), (h, w), c);
    let stride = ensemble.student.arch().feature_stride;

    // independent streams so that toggling a mechanism never shifts the
    // batches drawn by another
    let mut batch_rng = stream(cfg.seed, &[cfg.step_index as u64, 1]);
    let mut replay_rng = stream(cfg.seed, &[cfg.step_index as u64, 2]);
    let mut opt = Sgd::new(&ensemble.student, cfg.learning_rate, cfg.momentum);
    let mut log = Vec::new();

    for iter in 0..cfg.iters {
        let alpha = cfg.alpha_schedule.alpha_at(iter);
        let t_idx = sample_batch(&mut batch_rng, target.len(), cfg.batch_size);
        let s_idx = source.map(|s| sample_batch(&mut batch_rng, s.len(), cfg.batch_size));

        let mut samples = Vec::with_capacity(t_idx.len());
        let (mut mm, mut fm, mut wm, mut gm) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        for &i in &t_idx {
            let clean = &target[i].image;
            let labels = label_target(clean, &ensemble.teacher, ensemble.previous_teacher(), protos, alpha, cfg)?;
            mm += labels.model_mask.as_ref().map_or(1.0, mean);
            fm += labels.feature_mask.as_ref().map_or(1.0, mean);
            gm += labels.gate.as_ref().map_or(0.0, |g| g.iter().filter(|&&v| v > 0.0).count() as f32 / g.len() as f32);
            wm += mean(&labels.weights);
            let input = if flags.use_replay && cfg.step_index >= 2 {
                replay_all(clean.view(), stored_vectors, &cfg.compose_params, &mut replay_rng)?
            } else {
                clean.clone()
            };
            weather.accumulate(clean.view())?;
            samples.push(TargetSample {
                input,
                target: labels.target,
                weights: labels.weights,
            });
        }
        let src_batch: Vec<_> = match (source, &s_idx) {
            (Some(s), Some(idx)) => idx
                .iter()
                .map(|&i| {
                    let it = &s[i];
                    it.label
                        .as_ref()
                        .map(|l| (&it.image, l))
                        .ok_or_else(|| Error::invalid("source images must be labelled"))
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };

        let (terms, grads) = weighted_loss(&ensemble.student, &src_batch, &samples)?;
        if !terms.total().is_finite() {
            return Err(Error::NonFiniteLoss {
                step: cfg.step_index,
                iter,
                detail: format!("source {} target {}", terms.source, terms.target),
            });
        }
        opt.step(&mut ensemble.student, &grads);
        ensemble.ema_update()?;

        for (img, lbl) in &src_batch {
            let pass = ensemble.teacher.forward(img.view())?;
            let feats = inference_from_pass(&pass).features;
            protos.update(feats.view(), downsample_labels(lbl.view(), stride).view())?;
        }

        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.iters) {
            let n = t_idx.len() as f32;
            log.push(IterLog {
                step: cfg.step_index,
                iter,
                loss: terms.total(),
                loss_source: terms.source,
                loss_target: terms.target,
                alpha,
                mean_model_mask: mm / n,
                mean_feature_mask: fm / n,
                mean_weight: wm / n,
                blended_fraction: gm / n,
            });
        }
    }
    Ok(StepArtifacts {
        student: ensemble.student.clone(),
        teacher: ensemble.teacher.clone(),
        weather,
        prototypes: protos.clone(),
        log,
    })
}

/// Confusion-matrix evaluation of `model` on labelled images.
pub fn evaluate(model: &SegmentationModel, images: &[LabeledImage]) -> Result<IouScores> {
    let mut cm = ConfusionMatrix::new(model.arch().num_classes);
    for item in images {
        let gt = item
            .label
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluation images must be labelled"))?;
        let pass = model.forward(item.image.view())?;
        let probs = crate::model::channels_last(&pass.probabilities(), pass.height, pass.width);
        cm.accumulate(gt.view(), argmax_of(probs.view()).view())?;
    }
    iou_scores(&cm)
}
