use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqweather::blending::{blend_pseudo_label, confidence_mask, BlendInputs};
use seqweather::masks::{class_weights, model_level_mask, ClassPrototypes, Denominator, TargetRepresentation};
use seqweather::metrics::ConfusionMatrix;
use seqweather::model::argmax_of;
use seqweather::replay::{compose, replay_all, ComposeParams, WeatherVector};

fn unit() -> impl Strategy<Value = f32> {
    0.0f32..=1.0
}

fn prob_map(h: usize, w: usize, c: usize) -> impl Strategy<Value = Array3<f32>> {
    proptest::collection::vec(0.01f32..1.0, h * w * c).prop_map(move |v| {
        let mut a = Array3::from_shape_vec((h, w, c), v).unwrap();
        for mut px in a.rows_mut() {
            let s: f32 = px.sum();
            px.mapv_inplace(|x| x / s);
        }
        a
    })
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Array3<f32>> {
    proptest::collection::vec(unit(), h * w * 3).prop_map(move |v| Array3::from_shape_vec((h, w, 3), v).unwrap())
}

proptest! {
    #[test]
    fn model_mask_bounded_and_limits(q_cur in proptest::collection::vec(unit(), 12),
                                     q_pre in proptest::collection::vec(unit(), 12),
                                     alpha in unit()) {
        let c = Array2::from_shape_vec((3, 4), q_cur).unwrap();
        let p = Array2::from_shape_vec((3, 4), q_pre).unwrap();
        let m = model_level_mask(c.view(), p.view(), alpha).unwrap();
        prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(model_level_mask(c.view(), p.view(), 0.0).unwrap(), c.clone());
        prop_assert_eq!(model_level_mask(c.view(), p.view(), 1.0).unwrap(), p.clone());
    }

    #[test]
    fn model_mask_monotone(a in unit(), b in unit(), bump in 0.0f32..0.5, alpha in unit()) {
        let base = model_level_mask(Array2::from_elem((1, 1), a).view(), Array2::from_elem((1, 1), b).view(), alpha).unwrap();
        let up_cur = model_level_mask(Array2::from_elem((1, 1), (a + bump).min(1.0)).view(), Array2::from_elem((1, 1), b).view(), alpha).unwrap();
        let up_pre = model_level_mask(Array2::from_elem((1, 1), a).view(), Array2::from_elem((1, 1), (b + bump).min(1.0)).view(), alpha).unwrap();
        prop_assert!(up_cur[[0, 0]] >= base[[0, 0]]);
        prop_assert!(up_pre[[0, 0]] >= base[[0, 0]]);
    }

    #[test]
    fn feature_weights_in_unit_interval(tr in proptest::collection::vec(-3.0f32..3.0, 4 * 3),
                                        sr in proptest::collection::vec(-3.0f32..3.0, 4 * 3),
                                        present in proptest::collection::vec(any::<bool>(), 4),
                                        seen in proptest::collection::vec(any::<bool>(), 4)) {
        let mut protos = ClassPrototypes::new(4, 3, 0.9);
        let ids: Vec<usize> = (0..4).filter(|&c| seen[c]).collect();
        if !ids.is_empty() {
            let labels = Array2::from_shape_fn((1, ids.len()), |(_, i)| ids[i] as u8);
            let feats = Array3::from_shape_fn((1, ids.len(), 3), |(_, i, k)| sr[ids[i] * 3 + k]);
            protos.update(feats.view(), labels.view()).unwrap();
        }
        let t = TargetRepresentation { tr: Array2::from_shape_vec((4, 3), tr).unwrap(), present };
        for mode in [Denominator::PredictedPrototype, Denominator::OwnPrototype] {
            let m = class_weights(&t, &protos, mode);
            prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)), "{:?}", m);
        }
    }

    #[test]
    fn confidence_mask_antisymmetric(a in proptest::collection::vec(unit(), 9), b in proptest::collection::vec(unit(), 9)) {
        let a = Array2::from_shape_vec((3, 3), a).unwrap();
        let b = Array2::from_shape_vec((3, 3), b).unwrap();
        let ab = confidence_mask(a.view(), b.view()).unwrap();
        let ba = confidence_mask(b.view(), a.view()).unwrap();
        prop_assert!(ab.iter().zip(ba.iter()).all(|(&x, &y)| x & y == 0));
    }

    #[test]
    fn blending_degenerates_without_gate(cur in prob_map(3, 3, 4), pre in prob_map(3, 3, 4), zero_conf in any::<bool>()) {
        let q_cur = cur.map_axis(ndarray::Axis(2), |p| p.fold(0.0f32, |a, &b| a.max(b)));
        let q_pre = pre.map_axis(ndarray::Axis(2), |p| p.fold(0.0f32, |a, &b| a.max(b)));
        // either the confidence gate or the feature gate is closed everywhere
        let (q_pre, feat) = if zero_conf {
            (q_cur.mapv(|v| v * 0.5), Array2::ones((3, 3)))
        } else {
            (q_pre, Array2::zeros((3, 3)))
        };
        let out = blend_pseudo_label(&BlendInputs {
            probs_cur: cur.view(),
            probs_pre: pre.view(),
            q_cur: q_cur.view(),
            q_pre: q_pre.view(),
            feat_weight_pre: feat.view(),
        }).unwrap();
        prop_assert_eq!(out.label, argmax_of(cur.view()));
    }

    #[test]
    fn replay_stays_in_range_and_is_deterministic(img in image(12, 10), other in image(12, 10), seed in any::<u64>()) {
        let mut wv = WeatherVector::empty("w", (12, 10), 3);
        wv.accumulate(other.view()).unwrap();
        let p = ComposeParams::default();
        let a = replay_all(img.view(), &[wv.clone(), wv.clone()], &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = replay_all(img.view(), &[wv.clone(), wv.clone()], &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(&a, &b);
        let single = compose(img.view(), &wv, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for ((y, x, k), &v) in single.image.indexed_iter() {
            if single.region_mask[[y, x]] == 1 {
                prop_assert_eq!(v.to_bits(), img[[y, x, k]].to_bits());
            }
        }
    }

    #[test]
    fn amplitude_mean_order_independent(imgs in proptest::collection::vec(image(8, 8), 2..6), rot in 0usize..6) {
        let mut fwd = WeatherVector::empty("w", (8, 8), 3);
        for i in &imgs {
            fwd.accumulate(i.view()).unwrap();
        }
        let mut perm = imgs.clone();
        let n = perm.len();
        perm.rotate_left(rot % n);
        perm.reverse();
        let mut back = WeatherVector::empty("w", (8, 8), 3);
        for i in &perm {
            back.accumulate(i.view()).unwrap();
        }
        for (a, b) in fwd.amplitude().iter().zip(back.amplitude()) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn confusion_order_independent(pairs in proptest::collection::vec((proptest::collection::vec(0u8..4, 16), proptest::collection::vec(0u8..4, 16)), 1..5)) {
        let mut a = ConfusionMatrix::new(4);
        let mut b = ConfusionMatrix::new(4);
        for (g, p) in &pairs {
            a.accumulate(Array2::from_shape_vec((4, 4), g.clone()).unwrap().view(), Array2::from_shape_vec((4, 4), p.clone()).unwrap().view()).unwrap();
        }
        for (g, p) in pairs.iter().rev() {
            b.accumulate(Array2::from_shape_vec((4, 4), g.clone()).unwrap().view(), Array2::from_shape_vec((4, 4), p.clone()).unwrap().view()).unwrap();
        }
        prop_assert_eq!(a.counts(), b.counts());
        prop_assert_eq!(a.total(), 16 * pairs.len() as u64);
    }
}
