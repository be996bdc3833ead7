#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqweather::data::{SceneSpec, WeatherKind};
use seqweather::dataset::{generate_benchmark, Benchmark, BenchmarkSizes, BenchmarkSpec};
use seqweather::nn::{ArchDescriptor, Network};
use seqweather::config::RunConfig;
use seqweather::model::SegmentationModel;
use seqweather::trainer::{weighted_loss, PseudoTarget, TargetSample};
use sha2::{Digest, Sha256};

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
}

/// Central finite differences of the full weighted loss (source term, hard
/// and soft weighted target terms) on an 8x8, 2-class network in f64.
pub fn gradient_check(seed: u64, n_params: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchDescriptor {
        in_channels: 3,
        encoder_widths: vec![4, 6],
        decoder_widths: vec![4],
        num_classes: 2,
        feature_stride: 2,
    };
    let mut net = Network::<f64>::init(arch, &mut rng).unwrap();
    for l in net.layers.iter_mut() {
        l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let (h, w) = (8, 8);
    let src_img = random_image(&mut rng, h, w);
    let src_lbl = Array2::from_shape_fn((h, w), |_| rng.random_range(0..2u8));
    let hard = TargetSample {
        input: random_image(&mut rng, h, w),
        target: PseudoTarget::Hard(Array2::from_shape_fn((h, w), |_| rng.random_range(0..2u8))),
        weights: Array2::from_shape_fn((h, w), |_| rng.random::<f32>()),
    };
    let soft = TargetSample {
        input: random_image(&mut rng, h, w),
        target: PseudoTarget::Soft(Array3::from_shape_fn((h, w, 2), |(y, x, k)| {
            let p = ((y * 7 + x * 3) % 10) as f32 / 10.0;
            if k == 0 {
                p
            } else {
                1.0 - p
            }
        })),
        weights: Array2::from_shape_fn((h, w), |_| rng.random::<f32>()),
    };
    let targets = [hard, soft];
    let source = [(&src_img, &src_lbl)];
    let loss = |n: &Network<f64>| weighted_loss(n, &source, &targets).unwrap().0.total();
    let (_, grads) = weighted_loss(&net, &source, &targets).unwrap();
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied().collect::<Vec<_>>())
        .collect();
    let total = analytic.len();
    let eps = 1e-5;
    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut tried = 0;
    while checked < n_params && tried < total * 4 {
        tried += 1;
        let idx = rng.random_range(0..total);
        if analytic[idx].abs() < 1e-6 {
            continue;
        }
        let mut pos = net.clone();
        let mut neg = net.clone();
        set_param(&mut pos, idx, eps);
        set_param(&mut neg, idx, -eps);
        let numeric = (loss(&pos) - loss(&neg)) / (2.0 * eps);
        let rel = (numeric - analytic[idx]).abs() / numeric.abs().max(analytic[idx].abs());
        max_rel_err = max_rel_err.max(rel);
        checked += 1;
    }
    GradCheck { checked, max_rel_err }
}

fn set_param(net: &mut Network<f64>, mut idx: usize, delta: f64) {
    for s in net.param_slices_mut() {
        if idx < s.len() {
            s[idx] += delta;
            return;
        }
        idx -= s.len();
    }
    panic!("parameter index out of range");
}

/// A small deterministic benchmark for end-to-end runs.
pub fn tiny_benchmark(seed: u64, size: usize) -> Benchmark {
    generate_benchmark(&BenchmarkSpec {
        seed,
        scene: SceneSpec {
            height: size,
            width: size,
            ..SceneSpec::default()
        },
        sizes: BenchmarkSizes {
            source_train: 12,
            source_val: 4,
            target_train: 6,
            target_val: 4,
        },
        domains: WeatherKind::ALL.to_vec(),
        ..BenchmarkSpec::default()
    })
    .unwrap()
}

pub fn small_arch() -> ArchDescriptor {
    ArchDescriptor {
        in_channels: 3,
        encoder_widths: vec![8, 16],
        decoder_widths: vec![16],
        num_classes: 5,
        feature_stride: 2,
    }
}

/// Fast settings for end-to-end runs on `tiny_benchmark`.
pub fn small_config(iters: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.arch = small_arch();
    cfg.source.iters = 30;
    cfg.adapt.iters = iters;
    cfg.adapt.batch_size = 2;
    cfg.adapt.log_every = 1;
    cfg
}

/// Digest of every parameter bit of a model.
pub fn param_hash(model: &SegmentationModel) -> String {
    let mut h = Sha256::new();
    for s in model.param_slices() {
        for v in s {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
