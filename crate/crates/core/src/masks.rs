//! Adaptive knowledge acquisition: the model-level confidence mask and the
//! feature-level mask driven by class prototypes.

use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::container::{self, Block, Container};
use crate::error::{Error, Result};

pub const DEFAULT_PROTO_DECAY: f32 = 0.99;
/// Below this denominator the feature-level weight of a class is 1.
pub const DENOMINATOR_EPS: f64 = 1e-8;

/// Linear ramp of the mixing weight between previous- and current-teacher
/// confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_start: f32,
    pub alpha_end: f32,
    pub total_iters: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha_start: 0.8,
            alpha_end: 0.2,
            total_iters: 1,
        }
    }
}

impl AlphaSchedule {
    pub fn new(alpha_start: f32, alpha_end: f32, total_iters: usize) -> Result<Self> {
        let s = AlphaSchedule {
            alpha_start,
            alpha_end,
            total_iters,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_end && self.alpha_end <= self.alpha_start && self.alpha_start <= 1.0) {
            return Err(Error::invalid(format!(
                "alpha schedule needs 0 <= end <= start <= 1, got {} -> {}",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::invalid("alpha schedule needs total_iters > 0"));
        }
        Ok(())
    }

    pub fn alpha_at(&self, iter: usize) -> f32 {
        if iter >= self.total_iters {
            return self.alpha_end;
        }
        let t = iter as f64 / self.total_iters as f64;
        (self.alpha_start as f64 + (self.alpha_end as f64 - self.alpha_start as f64) * t) as f32
    }
}

/// `(1 - alpha) * q_cur + alpha * q_pre`, per pixel.
pub fn model_level_mask(q_cur: ArrayView2<'_, f32>, q_pre: ArrayView2<'_, f32>, alpha: f32) -> Result<Array2<f32>> {
    if q_cur.dim() != q_pre.dim() {
        return Err(Error::shape(format!(
            "confidence maps {:?} and {:?} differ",
            q_cur.dim(),
            q_pre.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(Zip::from(&q_cur)
        .and(&q_pre)
        .map_collect(|&c, &p| (1.0 - alpha) * c + alpha * p))
}

/// EMA source prototypes, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    sr: Array2<f32>,
    count: Vec<u64>,
    pub ema_decay: f32,
}

impl ClassPrototypes {
    pub fn new(num_classes: usize, dim: usize, ema_decay: f32) -> Self {
        ClassPrototypes {
            sr: Array2::zeros((num_classes, dim)),
            count: vec![0; num_classes],
            ema_decay,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.sr.nrows()
    }

    pub fn dim(&self) -> usize {
        self.sr.ncols()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.count[class]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.count[class] > 0
    }

    /// Prototype of `class`, or `None` while it has never been updated.
    pub fn get(&self, class: usize) -> Option<ndarray::ArrayView1<'_, f32>> {
        self.is_initialized(class).then(|| self.sr.row(class))
    }

    /// Folds the per-class mean of `features` (`h x w x D`) under `labels`
    /// (`h x w`) into the running prototypes. Classes absent from `labels`
    /// are left untouched.
    pub fn update(&mut self, features: ArrayView3<'_, f32>, labels: ArrayView2<'_, u8>) -> Result<()> {
        let (h, w, d) = features.dim();
        if labels.dim() != (h, w) {
            return Err(Error::shape(format!(
                "features are {h}x{w} but labels are {:?}",
                labels.dim()
            )));
        }
        if d != self.dim() {
            return Err(Error::shape(format!("feature dim {d} != prototype dim {}", self.dim())));
        }
        let (sums, counts) = class_sums(features, labels, self.num_classes())?;
        for c in 0..self.num_classes() {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            let first = self.count[c] == 0;
            let decay = self.ema_decay as f64;
            for k in 0..d {
                let mean = sums[[c, k]] / n;
                let cur = self.sr[[c, k]] as f64;
                self.sr[[c, k]] = if first { mean } else { decay * cur + (1.0 - decay) * mean } as f32;
            }
            self.count[c] += 1;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: "prototypes".into(),
            meta: serde_json::json!({ "counts": self.count, "ema_decay": self.ema_decay }),
            blocks: vec![Block {
                name: "sr".into(),
                shape: vec![self.num_classes(), self.dim()],
                data: self.sr.iter().copied().collect(),
            }],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "prototypes" {
            return Err(Error::Corrupt(format!("expected prototypes, found {:?}", c.kind)));
        }
        let b = c.block("sr")?;
        if b.shape.len() != 2 {
            return Err(Error::Corrupt("prototype block must be 2-D".into()));
        }
        let count: Vec<u64> = serde_json::from_value(c.meta["counts"].clone())
            .map_err(|e| Error::Corrupt(format!("bad prototype counts: {e}")))?;
        let ema_decay = c.meta["ema_decay"]
            .as_f64()
            .ok_or_else(|| Error::Corrupt("missing ema_decay".into()))? as f32;
        if count.len() != b.shape[0] {
            return Err(Error::Corrupt("count length does not match class count".into()));
        }
        let sr = Array2::from_shape_vec((b.shape[0], b.shape[1]), b.data.clone())
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(ClassPrototypes { sr, count, ema_decay })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&container::read(path)?)
    }
}

fn class_sums(
    features: ArrayView3<'_, f32>,
    labels: ArrayView2<'_, u8>,
    num_classes: usize,
) -> Result<(Array2<f64>, Vec<u64>)> {
    let (h, w, d) = features.dim();
    let mut sums = Array2::<f64>::zeros((num_classes, d));
    let mut counts = vec![0u64; num_classes];
    for y in 0..h {
        for x in 0..w {
            let c = labels[[y, x]] as usize;
            if c >= num_classes {
                return Err(Error::invalid(format!("class id {c} >= {num_classes}")));
            }
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            for k in 0..d {
                row[k] += features[[y, x, k]] as f64;
            }
        }
    }
    Ok((sums, counts))
}

/// Per-image class-mean target features.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetRepresentation {
    pub tr: Array2<f32>,
    pub present: Vec<bool>,
}

impl TargetRepresentation {
    pub fn get(&self, class: usize) -> Option<ndarray::ArrayView1<'_, f32>> {
        self.present[class].then(|| self.tr.row(class))
    }
}

pub fn target_representation(
    features: ArrayView3<'_, f32>,
    pseudo_label: ArrayView2<'_, u8>,
    num_classes: usize,
) -> Result<TargetRepresentation> {
    let (h, w, d) = features.dim();
    if pseudo_label.dim() != (h, w) {
        return Err(Error::shape(format!(
            "features are {h}x{w} but pseudo-label is {:?}",
            pseudo_label.dim()
        )));
    }
    let (sums, counts) = class_sums(features, pseudo_label, num_classes)?;
    let mut tr = Array2::<f32>::zeros((num_classes, d));
    for c in 0..num_classes {
        if counts[c] > 0 {
            for k in 0..d {
                tr[[c, k]] = (sums[[c, k]] / counts[c] as f64) as f32;
            }
        }
    }
    Ok(TargetRepresentation {
        tr,
        present: counts.iter().map(|&n| n > 0).collect(),
    })
}

/// Which source prototype each denominator term is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every term uses the predicted class's prototype: `sum_c |TR_c - SR_c1|^2`.
    #[default]
    PredictedPrototype,
    /// Each term uses its own class's prototype: `sum_c |TR_c - SR_c|^2`.
    OwnPrototype,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f32>, b: ndarray::ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Feature-level weight `m(c)` for every class.
pub fn class_weights(tr: &TargetRepresentation, sr: &ClassPrototypes, mode: Denominator) -> Vec<f32> {
    let n = sr.num_classes();
    (0..n)
        .map(|c1| {
            let (Some(t1), Some(s1)) = (tr.get(c1), sr.get(c1)) else {
                return 1.0;
            };
            let num = sq_dist(t1, s1);
            let mut den = 0.0;
            for c in 0..n {
                let (Some(tc), Some(sc)) = (tr.get(c), sr.get(c)) else {
                    continue;
                };
                den += match mode {
                    Denominator::PredictedPrototype => sq_dist(tc, s1),
                    Denominator::OwnPrototype => sq_dist(tc, sc),
                };
            }
            if den < DENOMINATOR_EPS {
                return 1.0;
            }
            (1.0 - num / den).max(0.0) as f32
        })
        .collect()
}

/// Broadcasts the per-class weights over the predicted class map.
pub fn feature_level_mask(
    tr: &TargetRepresentation,
    sr: &ClassPrototypes,
    pred_class_map: ArrayView2<'_, u8>,
    mode: Denominator,
) -> Result<Array2<f32>> {
    if tr.tr.dim() != (sr.num_classes(), sr.dim()) {
        return Err(Error::shape(format!(
            "target representation {:?} vs prototypes {:?}",
            tr.tr.dim(),
            (sr.num_classes(), sr.dim())
        )));
    }
    let m = class_weights(tr, sr, mode);
    let mut out = Array2::<f32>::zeros(pred_class_map.dim());
    for (o, &c) in out.iter_mut().zip(pred_class_map.iter()) {
        *o = *m
            .get(c as usize)
            .ok_or_else(|| Error::invalid(format!("class id {c} out of range")))?;
    }
    Ok(out)
}
