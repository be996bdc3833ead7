//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::{array, Array2, Array3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqweather::blending::{blend_pseudo_label, confidence_mask, BlendInputs};
use seqweather::config::{ablation_flags, RunConfig};
use seqweather::data::SceneSpec;
use seqweather::dataset::{generate_benchmark, BenchmarkSpec};
use seqweather::masks::{
    class_weights, model_level_mask, AlphaSchedule, ClassPrototypes, Denominator, TargetRepresentation,
};
use seqweather::metrics::{accumulated_forgetting, forgetting_from_drops, miou_average, MetricMatrix};
use seqweather::model::{argmax_of, confidence_of, TeacherEnsemble};
use seqweather::replay::{amplitude_of, compose, inverse_of, stylize, ComposeParams, WeatherVector};
use seqweather::sequence::{pretrain_source, run_sequence, RunOptions};
use seqweather::trainer::adapt_step;

/// Side length of the synthetic images used by the end-to-end experiments.
const EXPERIMENT_SIZE: usize = 64;
const SEEDS: [u64; 3] = [0, 1, 2];
const LADDER: [&str; 4] = ["baseline", "model", "model+feature", "model+feature+replay"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1 -------------------------------------------------------------------------

fn table_row(initial: [f64; 3], final_: [f64; 3], last: f64) -> MetricMatrix {
    let names = ["night", "rain", "fog", "snow"].map(String::from).to_vec();
    MetricMatrix::from_rows(
        names,
        &[
            vec![initial[0], initial[0], initial[0], final_[0]],
            vec![initial[1], initial[1], final_[1]],
            vec![initial[2], final_[2]],
            vec![last],
        ],
    )
    .unwrap()
}

fn metric_fidelity() -> Outcome {
    // final scores and drops of two rows of the main results table
    let mic = table_row([34.7 + 7.2, 65.8 + 2.8, 78.4 + 1.3], [34.7, 65.8, 78.4], 65.2);
    let ours = table_row([24.0 + 1.9, 42.0 + 1.3, 50.8 + 1.1], [24.0, 42.0, 50.8], 44.0);
    let a = accumulated_forgetting(&mic).unwrap();
    let b = accumulated_forgetting(&ours).unwrap();
    let c = forgetting_from_drops(&[7.2, 2.8, 1.3]);
    let d = forgetting_from_drops(&[1.9, 1.3, 1.1]);
    let pass = close(a, 11.3, 1e-9) && close(b, 4.3, 1e-9) && close(c, 11.3, 1e-9) && close(d, 4.3, 1e-9);
    outcome(pass, format!("MIC {a:.12}, ours {b:.12}"))
}

// 2 -------------------------------------------------------------------------

fn example_tables() -> Vec<String> {
    let mut bad = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            bad.push(what.to_string());
        }
    };
    // confidence
    let uniform = Array3::from_elem((2, 2, 5), 0.2f32);
    check(confidence_of(uniform.view()).iter().all(|&q| close(q as f64, 0.2, 1e-7)), "uniform confidence");
    let p = Array3::from_shape_vec((1, 1, 3), vec![0.7f32, 0.2, 0.1]).unwrap();
    check(close(confidence_of(p.view())[[0, 0]] as f64, 0.7, 1e-7), "confidence 0.7");
    let one_hot = Array3::from_shape_vec((1, 1, 3), vec![0.0f32, 1.0, 0.0]).unwrap();
    check(confidence_of(one_hot.view())[[0, 0]] == 1.0, "one-hot confidence");
    // model-level mask and its ramp
    let m = model_level_mask(array![[0.9f32]].view(), array![[0.5f32]].view(), 0.8).unwrap();
    check(close(m[[0, 0]] as f64, 0.58, 1e-6), "model mask 0.58");
    let qc = array![[0.3f32, 0.9]];
    let qp = array![[0.7f32, 0.1]];
    check(model_level_mask(qc.view(), qp.view(), 0.0).unwrap() == qc, "alpha 0");
    check(model_level_mask(qc.view(), qp.view(), 1.0).unwrap() == qp, "alpha 1");
    let sched = AlphaSchedule::new(0.8, 0.2, 100).unwrap();
    check(close(sched.alpha_at(0) as f64, 0.8, 1e-6), "alpha start");
    check(close(sched.alpha_at(100) as f64, 0.2, 1e-6), "alpha end");
    check(close(sched.alpha_at(50) as f64, 0.5, 1e-6), "alpha midpoint");
    // feature-level mask
    let mut protos = ClassPrototypes::new(2, 1, 0.9);
    protos
        .update(Array3::from_shape_vec((1, 2, 1), vec![0.0, 5.0]).unwrap().view(), array![[0u8, 1]].view())
        .unwrap();
    let tr = |a: f32, b: f32, present: [bool; 2]| TargetRepresentation {
        tr: Array2::from_shape_vec((2, 1), vec![a, b]).unwrap(),
        present: present.to_vec(),
    };
    let w = class_weights(&tr(0.0, 3.0, [true, true]), &protos, Denominator::PredictedPrototype);
    check(w[0] == 1.0, "equal prototypes give weight 1");
    let w = class_weights(&tr(1.0, 3.0, [true, false]), &protos, Denominator::PredictedPrototype);
    check(w[0] == 0.0, "single class gives weight 0");
    // |TR_0 - SR_0|^2 = 1 and |TR_1 - SR_0|^2 = 3
    let w = class_weights(&tr(1.0, 3f32.sqrt(), [true, true]), &protos, Denominator::PredictedPrototype);
    check(close(w[0] as f64, 0.75, 1e-6), "feature weight 0.75");
    // confidence comparison and blending
    let q = array![[0.5f32, 0.3]];
    check(confidence_mask(q.view(), q.view()).unwrap().iter().all(|&v| v == 0), "equal confidences");
    check(confidence_mask(array![[0.9f32]].view(), array![[0.4f32]].view()).unwrap()[[0, 0]] == 1, "mask 1");
    let cur = Array3::from_shape_vec((1, 1, 2), vec![0.4f32, 0.6]).unwrap();
    let pre = Array3::from_shape_vec((1, 1, 2), vec![0.9f32, 0.1]).unwrap();
    let out = blend_pseudo_label(&BlendInputs {
        probs_cur: cur.view(),
        probs_pre: pre.view(),
        q_cur: array![[0.6f32]].view(),
        q_pre: array![[0.9f32]].view(),
        feat_weight_pre: array![[1.0f32]].view(),
    })
    .unwrap();
    check(out.label[[0, 0]] == 0, "blended class 0");
    bad
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

fn max_over_classes(p: &Array3<f32>) -> Array2<f32> {
    p.map_axis(ndarray::Axis(2), |v| v.fold(0.0f32, |a, &b| a.max(b)))
}

fn randomized_properties(cases: u32) -> std::result::Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        prob_map(3, 4, 4),
        prob_map(3, 4, 4),
        0.0f32..=1.0,
        proptest::collection::vec(-2.0f32..2.0, 4 * 3),
        proptest::collection::vec(-2.0f32..2.0, 4 * 3),
        proptest::collection::vec(any::<bool>(), 4),
        any::<bool>(),
    );
    runner
        .run(&strategy, |(cur, pre, alpha, tr, sr, present, zero_conf)| {
            let q_cur = max_over_classes(&cur);
            let q_pre = max_over_classes(&pre);
            // mask bounds and limiting cases
            let m = model_level_mask(q_cur.view(), q_pre.view(), alpha).unwrap();
            prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(model_level_mask(q_cur.view(), q_pre.view(), 0.0).unwrap(), q_cur.clone());
            prop_assert_eq!(model_level_mask(q_cur.view(), q_pre.view(), 1.0).unwrap(), q_pre.clone());
            // feature ratio stays in [0, 1] without the clamp doing any work
            let mut protos = ClassPrototypes::new(4, 3, 0.9);
            let labels = array![[0u8, 1, 2, 3]];
            let feats = Array3::from_shape_vec((1, 4, 3), sr).unwrap();
            protos.update(feats.view(), labels.view()).unwrap();
            let t = TargetRepresentation {
                tr: Array2::from_shape_vec((4, 3), tr).unwrap(),
                present,
            };
            for mode in [Denominator::PredictedPrototype, Denominator::OwnPrototype] {
                let w = class_weights(&t, &protos, mode);
                prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)), "{:?}", w);
            }
            // blending falls back to the current teacher when either gate is closed
            let (q_pre, feat) = if zero_conf {
                (q_cur.mapv(|v| v * 0.5), Array2::ones(q_cur.dim()))
            } else {
                (q_pre, Array2::zeros(q_cur.dim()))
            };
            let out = blend_pseudo_label(&BlendInputs {
                probs_cur: cur.view(),
                probs_pre: pre.view(),
                q_cur: q_cur.view(),
                q_pre: q_pre.view(),
                feat_weight_pre: feat.view(),
            })
            .unwrap();
            prop_assert_eq!(out.label, argmax_of(cur.view()));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn equation_units() -> Outcome {
    let bad = example_tables();
    let props = randomized_properties(1000);
    let pass = bad.is_empty() && props.is_ok();
    let mut detail = format!("example tables: {} failing", bad.len());
    if !bad.is_empty() {
        detail += &format!(" ({})", bad.join(", "));
    }
    match props {
        Ok(()) => detail += "; 1000 randomized cases passed",
        Err(e) => detail += &format!("; property failure: {e}"),
    }
    outcome(pass, detail)
}

// 3 -------------------------------------------------------------------------

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
}

fn spectral_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut roundtrip, mut identity, mut parseval, mut order) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (h, w) in [(8, 8), (16, 12), (32, 32), (64, 48)] {
        let img = random_image(&mut rng, h, w);
        let (amp, phase) = amplitude_of(img.view()).unwrap();
        let back = inverse_of(amp.view(), phase.view()).unwrap();
        roundtrip = roundtrip.max(back.iter().zip(img.iter()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max));

        let stylized = stylize(phase.view(), amp.view(), 1.0).unwrap();
        let mut own = WeatherVector::empty("self", (h, w), 3);
        own.accumulate(img.view()).unwrap();
        let params = ComposeParams {
            sigma_range: (1.0, 1.0),
            ..ComposeParams::default()
        };
        let composed = compose(img.view(), &own, &params, &mut rng).unwrap();
        for (s, c) in [&stylized, &composed.image].into_iter().map(|a| (a, &img)) {
            identity = identity.max(s.iter().zip(c.iter()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max));
        }

        let energy: f64 = img.iter().map(|&v| (v as f64).powi(2)).sum();
        let spectral: f64 = amp.iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        parseval = parseval.max((energy - spectral).abs() / energy);

        let imgs: Vec<_> = (0..5).map(|_| random_image(&mut rng, h, w)).collect();
        let mut fwd = WeatherVector::empty("a", (h, w), 3);
        let mut rev = WeatherVector::empty("b", (h, w), 3);
        for i in &imgs {
            fwd.accumulate(i.view()).unwrap();
        }
        for i in imgs.iter().rev() {
            rev.accumulate(i.view()).unwrap();
        }
        for (a, b) in fwd.amplitude().iter().zip(rev.amplitude()) {
            order = order.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    let pass = roundtrip < 1e-4 && identity < 1e-4 && parseval < 1e-3 && order < 1e-6;
    outcome(
        pass,
        format!("roundtrip {roundtrip:.2e}, self-compose {identity:.2e}, Parseval {parseval:.2e}, order {order:.2e}"),
    )
}

// 4 -------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for seed in [1, 2, 3] {
        let r = common::gradient_check(seed, 24);
        checked += r.checked;
        worst = worst.max(r.max_rel_err);
    }
    outcome(checked >= 20 && worst < 1e-3, format!("{checked} parameters, max relative error {worst:.2e}"))
}

// 5 -------------------------------------------------------------------------

fn frozen_previous_teacher() -> Outcome {
    let bench = common::tiny_benchmark(5, 16);
    let cfg = common::small_config(4);
    let source = pretrain_source(&cfg, &bench).unwrap();
    let mut ens = TeacherEnsemble::new(source, cfg.adapt.ema_decay).unwrap();
    let mut protos = ClassPrototypes::new(cfg.arch.num_classes, cfg.arch.feature_dim(), cfg.adapt.proto_decay);
    let mut weather = Vec::new();
    let mut checked = 0;
    for k in 1..=cfg.domains.len() {
        if k >= 2 {
            ens.hand_off();
        }
        let before = ens.previous_teacher().map(common::param_hash);
        let step = cfg.step_config(k).unwrap();
        let art = adapt_step(
            &mut ens,
            &bench.target(&step.domain).unwrap().train,
            Some(&bench.source.train),
            &weather,
            &mut protos,
            &step,
        )
        .unwrap();
        weather.push(art.weather);
        if let Some(h) = before {
            if ens.previous_teacher().map(common::param_hash) != Some(h) {
                return outcome(false, format!("previous teacher changed during step {k}"));
            }
            checked += 1;
        }
    }
    outcome(checked == 3, format!("hash unchanged across steps 2..=4 ({checked} checked)"))
}

// 6, 7, 8 -------------------------------------------------------------------

struct SeedRuns {
    af: BTreeMap<String, f64>,
    avg: BTreeMap<String, f64>,
}

fn experiment_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

fn run_seed(seed: u64) -> SeedRuns {
    let spec = BenchmarkSpec {
        seed,
        scene: SceneSpec {
            height: EXPERIMENT_SIZE,
            width: EXPERIMENT_SIZE,
            ..SceneSpec::default()
        },
        ..BenchmarkSpec::default()
    };
    let bench = generate_benchmark(&spec).unwrap();
    let base = experiment_config(seed);
    let source = pretrain_source(&base, &bench).unwrap();
    let mut runs = SeedRuns {
        af: BTreeMap::new(),
        avg: BTreeMap::new(),
    };
    let names: Vec<String> = LADDER
        .iter()
        .map(|s| s.to_string())
        .chain(["full".into(), "w/o source baseline".into(), "w/o source full".into()])
        .collect();
    for name in names {
        let t = Instant::now();
        let mut cfg = base.clone();
        cfg.flags = ablation_flags(name.trim_start_matches("w/o source ")).unwrap();
        cfg.flags.with_source = !name.starts_with("w/o");
        let out = run_sequence(
            &cfg,
            &bench,
            RunOptions {
                initial: Some(source.clone()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let af = accumulated_forgetting(&out.metrics).unwrap();
        let avg = miou_average(&out.metrics).unwrap();
        println!(
            "    seed {seed} {name:<22} A.F. {af:7.2}  mIoU Avg. {avg:5.1}  ({:.0}s)",
            t.elapsed().as_secs_f64()
        );
        runs.af.insert(name.clone(), af);
        runs.avg.insert(name, avg);
    }
    runs
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn med(runs: &[SeedRuns], pick: impl Fn(&SeedRuns) -> f64) -> f64 {
    median(runs.iter().map(pick).collect())
}

fn ladder_monotone(runs: &[SeedRuns]) -> Outcome {
    let first = &runs[0];
    let rungs: Vec<f64> = LADDER.iter().map(|n| first.af[*n]).collect();
    let strong = rungs.windows(2).all(|p| p[0] - p[1] >= 0.05 * p[0].abs() && p[1] < p[0]);
    let medians: Vec<f64> = LADDER.iter().map(|n| med(runs, |r| r.af[*n])).collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" > ");
    if strong {
        return outcome(true, format!("seed {}: {}", SEEDS[0], fmt(&rungs)));
    }
    let monotone = medians.windows(2).all(|p| p[1] < p[0]);
    outcome(
        monotone,
        format!(
            "seed-sensitivity warning: seed {} ladder {} lacks a 5% step; 3-seed medians {}",
            SEEDS[0],
            fmt(&rungs),
            fmt(&medians)
        ),
    )
}

fn headline(runs: &[SeedRuns]) -> Outcome {
    let af_full = med(runs, |r| r.af["full"]);
    let af_base = med(runs, |r| r.af["baseline"]);
    let avg_full = med(runs, |r| r.avg["full"]);
    let avg_base = med(runs, |r| r.avg["baseline"]);
    outcome(
        af_full <= 0.7 * af_base && avg_full >= avg_base,
        format!(
            "median A.F. full {af_full:.2} vs baseline {af_base:.2}; mIoU Avg. full {avg_full:.1} vs baseline {avg_base:.1}"
        ),
    )
}

fn without_source(runs: &[SeedRuns]) -> Outcome {
    let d_base = med(runs, |r| r.af["w/o source baseline"]) - med(runs, |r| r.af["baseline"]);
    let d_full = med(runs, |r| r.af["w/o source full"]) - med(runs, |r| r.af["full"]);
    outcome(
        d_base > 0.0 && d_full > 0.0 && d_full < d_base,
        format!("median A.F. increase without source: full {d_full:+.2}, baseline {d_base:+.2}"),
    )
}

// 9 -------------------------------------------------------------------------

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seqweather"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    let sizes = ["--size", "32", "--source-train", "24", "--source-val", "8", "--target-train", "12", "--target-val", "8"];
    let mut gen = vec!["generate-data", "--out", d, "--seed", "9"];
    gen.extend_from_slice(&sizes);
    if let Err(e) = cli(&gen) {
        return outcome(false, format!("generate-data failed: {e}"));
    }
    let manifest = data.join("manifest.csv");
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let args = [
            "run",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
            "--set",
            "source.iters=60",
            "--set",
            "adapt.iters=15",
            "--quiet",
        ];
        if let Err(e) = cli(&args) {
            return outcome(false, format!("run failed: {e}"));
        }
        bytes.push(std::fs::read(out.join("metrics.json")).unwrap());
    }
    outcome(bytes[0] == bytes[1], format!("metrics.json of two runs: {} bytes, identical: {}", bytes[0].len(), bytes[0] == bytes[1]))
}

// ---------------------------------------------------------------------------

fn report(n: usize, name: &str, started: Instant, o: Outcome) -> bool {
    println!(
        "criterion {n} ({name}): {}  [{:.1}s] {}",
        if o.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        o.detail
    );
    o.pass
}

fn main() -> ExitCode {
    // libtest-style arguments (filters, --nocapture, ...) are accepted and ignored
    let total = Instant::now();
    let mut all = true;
    let quick: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "metric fidelity", metric_fidelity),
        (2, "equation units", equation_units),
        (3, "spectral identities", spectral_identities),
        (4, "gradient correctness", gradient_correctness),
        (5, "frozen previous teacher", frozen_previous_teacher),
    ];
    for (n, name, f) in quick {
        let t = Instant::now();
        all &= report(n, name, t, f());
    }

    let t = Instant::now();
    println!("running the synthetic sequence for seeds {SEEDS:?} ({EXPERIMENT_SIZE}px images)");
    let runs: Vec<SeedRuns> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    all &= report(6, "ablation ladder", t, ladder_monotone(&runs));
    all &= report(7, "full vs baseline", t, headline(&runs));
    all &= report(8, "without source", t, without_source(&runs));

    let t = Instant::now();
    all &= report(9, "determinism", t, determinism());

    println!("acceptance finished in {:.0}s", total.elapsed().as_secs_f64());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
