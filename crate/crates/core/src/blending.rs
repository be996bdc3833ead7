//! Pseudo-label blending of current- and previous-teacher predictions.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

use crate::error::{Error, Result};

/// Spatially aligned teacher outputs for one target image.
pub struct BlendInputs<'a> {
    pub probs_cur: ArrayView3<'a, f32>,
    pub probs_pre: ArrayView3<'a, f32>,
    pub q_cur: ArrayView2<'a, f32>,
    pub q_pre: ArrayView2<'a, f32>,
    pub feat_weight_pre: ArrayView2<'a, f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendOutput {
    pub label: Array2<u8>,
    /// Maximal combined score per pixel.
    pub score: Array2<f32>,
    /// Previous-teacher gate `M_con * M_feat_pre` per pixel.
    pub gate: Array2<f32>,
}

/// 1 where the previous teacher is strictly more confident.
pub fn confidence_mask(q_pre: ArrayView2<'_, f32>, q_cur: ArrayView2<'_, f32>) -> Result<Array2<u8>> {
    if q_pre.dim() != q_cur.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", q_pre.dim(), q_cur.dim())));
    }
    Ok(Zip::from(&q_pre).and(&q_cur).map_collect(|&p, &c| u8::from(p > c)))
}

pub fn blend_pseudo_label(inputs: &BlendInputs<'_>) -> Result<BlendOutput> {
    let (h, w, c) = inputs.probs_cur.dim();
    if inputs.probs_pre.dim() != (h, w, c)
        || inputs.q_cur.dim() != (h, w)
        || inputs.q_pre.dim() != (h, w)
        || inputs.feat_weight_pre.dim() != (h, w)
    {
        return Err(Error::shape("blend inputs are not spatially aligned"));
    }
    let con = confidence_mask(inputs.q_pre, inputs.q_cur)?;
    let gate = Zip::from(&con)
        .and(&inputs.feat_weight_pre)
        .map_collect(|&m, &f| m as f32 * f);
    let mut label = Array2::<u8>::zeros((h, w));
    let mut score = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let g = gate[[y, x]];
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for k in 0..c {
                let v = inputs.probs_cur[[y, x, k]] + g * inputs.probs_pre[[y, x, k]];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            label[[y, x]] = best as u8;
            score[[y, x]] = best_v;
        }
    }
    Ok(BlendOutput { label, score, gate })
}

/// Per-pixel soft target `(probs_cur + gate * probs_pre) / (1 + gate)`.
pub fn blended_distribution(probs_cur: ArrayView3<'_, f32>, probs_pre: ArrayView3<'_, f32>, gate: ArrayView2<'_, f32>) -> Array3<f32> {
    let (h, w, c) = probs_cur.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        let g = gate[[y, x]];
        (probs_cur[[y, x, k]] + g * probs_pre[[y, x, k]]) / (1.0 + g)
    })
}
