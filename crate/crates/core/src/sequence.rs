//! Drives a full domain sequence: source pre-training, one adaptation step
//! per target domain, evaluation after every step, and an on-disk run
//! directory that a later invocation can resume from.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json            snapshot and hash
//! metrics.json           mIoU matrix so far
//! step_0/source.ckpt
//! step_k/{student.ckpt, teacher.ckpt, weather.wv, protos.pt0, log.jsonl, eval.json}
//! ```
//!
//! `eval.json` is written last, so a step directory without it is redone.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{EvalModel, RunConfig};
use crate::container::{load_checkpoint, save_checkpoint};
use crate::dataset::Benchmark;
use crate::error::{Error, Result};
use crate::masks::ClassPrototypes;
use crate::metrics::MetricMatrix;
use crate::model::{SegmentationModel, TeacherEnsemble};
use crate::replay::WeatherVector;
use crate::seed::stream;
use crate::trainer::{adapt_step, evaluate, train_source, IterLog};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub hash: String,
    pub data_id: String,
    pub config: RunConfig,
}

impl RunSnapshot {
    pub fn new(config: &RunConfig, data_id: &str) -> Result<Self> {
        let mut h = config.canonical_json()?;
        h.push('\n');
        h.push_str(data_id);
        let hash = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(h.as_bytes()));
        Ok(RunSnapshot {
            hash,
            data_id: data_id.to_string(),
            config: config.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub target: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: usize,
    pub domain: String,
    pub scores: Vec<TargetScore>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: MetricMatrix,
    pub student: SegmentationModel,
    pub teacher: SegmentationModel,
    pub weather: Vec<WeatherVector>,
    pub log: Vec<IterLog>,
    pub evals: Vec<StepEval>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub out_dir: Option<PathBuf>,
    /// Starting weights. Without it the source model is trained (or taken
    /// from `init_checkpoint`).
    pub initial: Option<SegmentationModel>,
    /// Identifies the data; part of the run hash.
    pub data_id: String,
    pub progress: Option<&'a mut dyn FnMut(&str)>,
}

fn step_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("step_{k}"))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer_pretty(&mut tmp, value)?;
    tmp.write_all(b"\n")?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Reads the snapshot stored in a run directory.
pub fn read_snapshot(dir: &Path) -> Result<RunSnapshot> {
    read_json(&dir.join(CONFIG_FILE))
}

/// Runs (or resumes) the whole sequence described by `cfg`.
pub fn run_sequence(cfg: &RunConfig, bench: &Benchmark, mut opts: RunOptions<'_>) -> Result<RunOutcome> {
    cfg.validate()?;
    for d in &cfg.domains {
        let t = bench.target(d)?;
        if t.val.is_empty() {
            return Err(Error::EmptyDataset(format!("validation images of {d}")));
        }
    }
    let mut say = |msg: &str| {
        if let Some(p) = opts.progress.as_mut() {
            p(msg);
        }
    };
    let snapshot = RunSnapshot::new(cfg, &opts.data_id)?;
    let out = opts.out_dir.clone();
    if let Some(dir) = &out {
        let cfg_path = dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            let stored = read_snapshot(dir)?;
            if stored.hash != snapshot.hash {
                return Err(Error::ResumeMismatch {
                    stored: stored.hash,
                    requested: snapshot.hash,
                });
            }
        } else {
            std::fs::create_dir_all(dir)?;
            write_json_atomic(&cfg_path, &snapshot)?;
        }
    }

    // resume point: highest k whose step directories 1..=k are all complete
    let mut evals: Vec<StepEval> = Vec::new();
    if let Some(dir) = &out {
        for k in 1..=cfg.domains.len() {
            match read_json::<StepEval>(&step_dir(dir, k).join("eval.json")) {
                Ok(e) => evals.push(e),
                Err(Error::MissingFile(_)) => break,
                Err(e) => return Err(e),
            }
        }
    }
    let done = evals.len();

    let arch = cfg.arch.clone();
    let classes = arch.num_classes;
    let mut weather: Vec<WeatherVector> = Vec::new();
    let (mut ensemble, mut protos) = if done > 0 {
        let dir = out.as_ref().expect("resumed runs have a directory");
        say(&format!("resuming after step {done}"));
        for k in 1..=done {
            let mut wv = WeatherVector::load(&step_dir(dir, k).join("weather.wv"))?;
            wv.round_to_f32();
            weather.push(wv);
        }
        let last = step_dir(dir, done);
        let student = load_checkpoint(&last.join("student.ckpt"), Some(&arch))?;
        let teacher = load_checkpoint(&last.join("teacher.ckpt"), Some(&arch))?;
        let protos = ClassPrototypes::load(&last.join("protos.pt0"))?;
        (
            TeacherEnsemble::with_previous(student, teacher, None, cfg.adapt.ema_decay)?,
            protos,
        )
    } else {
        let model = initial_model(cfg, bench, out.as_deref(), opts.initial.take(), &mut say)?;
        let protos = ClassPrototypes::new(classes, arch.feature_dim(), cfg.adapt.proto_decay);
        (TeacherEnsemble::new(model, cfg.adapt.ema_decay)?, protos)
    };

    let mut log = Vec::new();
    for k in done + 1..=cfg.domains.len() {
        let step = cfg.step_config(k)?;
        if k >= 2 {
            ensemble.hand_off();
        }
        say(&format!("step {k}: adapting to {} for {} iterations", step.domain, step.iters));
        let domain = bench.target(&step.domain)?;
        let source = cfg.flags.with_source.then_some(bench.source.train.as_slice());
        let mut art = adapt_step(&mut ensemble, &domain.train, source, &weather, &mut protos, &step)?;
        art.weather.round_to_f32();

        let mut scores = Vec::with_capacity(k);
        for t in &cfg.domains[..k] {
            let model = match cfg.evaluate {
                EvalModel::Student => &ensemble.student,
                EvalModel::Teacher => &ensemble.teacher,
            };
            let s = evaluate(model, &bench.target(t)?.val)?;
            scores.push(TargetScore {
                target: t.clone(),
                miou: s.miou,
                per_class: s.per_class,
            });
        }
        let eval = StepEval {
            step: k,
            domain: step.domain.clone(),
            scores,
        };
        say(&format!(
            "step {k}: mIoU {}",
            eval.scores
                .iter()
                .map(|s| format!("{} {:.1}", s.target, s.miou))
                .collect::<Vec<_>>()
                .join(", ")
        ));

        if let Some(dir) = &out {
            let sd = step_dir(dir, k);
            std::fs::create_dir_all(&sd)?;
            save_checkpoint(&sd.join("student.ckpt"), &art.student)?;
            save_checkpoint(&sd.join("teacher.ckpt"), &art.teacher)?;
            art.weather.save(&sd.join("weather.wv"))?;
            art.prototypes.save(&sd.join("protos.pt0"))?;
            let mut lines = String::new();
            for l in &art.log {
                lines.push_str(&serde_json::to_string(l)?);
                lines.push('\n');
            }
            std::fs::write(sd.join("log.jsonl"), lines)?;
            write_json_atomic(&sd.join("eval.json"), &eval)?;
        }
        weather.push(art.weather);
        log.extend(art.log);
        evals.push(eval);
        let metrics = matrix_from(cfg, &evals)?;
        if let Some(dir) = &out {
            metrics.save(&dir.join(METRICS_FILE))?;
        }
    }

    let metrics = matrix_from(cfg, &evals)?;
    if let Some(dir) = &out {
        metrics.save(&dir.join(METRICS_FILE))?;
    }
    Ok(RunOutcome {
        metrics,
        student: ensemble.student,
        teacher: ensemble.teacher,
        weather,
        log,
        evals,
    })
}

fn matrix_from(cfg: &RunConfig, evals: &[StepEval]) -> Result<MetricMatrix> {
    let mut m = MetricMatrix::new(cfg.domains.clone());
    for e in evals {
        for (t, s) in e.scores.iter().enumerate() {
            if cfg.domains.get(t) != Some(&s.target) {
                return Err(Error::Corrupt(format!("step {} evaluation lists unexpected target {}", e.step, s.target)));
            }
            m.set(t, e.step - 1, s.miou, Some(s.per_class.clone()))?;
        }
    }
    Ok(m)
}

fn initial_model(
    cfg: &RunConfig,
    bench: &Benchmark,
    out: Option<&Path>,
    given: Option<SegmentationModel>,
    say: &mut dyn FnMut(&str),
) -> Result<SegmentationModel> {
    if let Some(m) = given {
        if m.arch() != &cfg.arch {
            return Err(Error::DescriptorMismatch {
                expected: format!("{:?}", cfg.arch),
                found: format!("{:?}", m.arch()),
            });
        }
        return Ok(m);
    }
    if let Some(p) = &cfg.init_checkpoint {
        return load_checkpoint(p, Some(&cfg.arch));
    }
    if !cfg.flags.with_source {
        return Err(Error::Config(
            "running without source data needs starting weights (init_checkpoint)".into(),
        ));
    }
    let cached = out.map(|d| step_dir(d, 0).join("source.ckpt"));
    if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
        say("loading source model");
        return load_checkpoint(p, Some(&cfg.arch));
    }
    say(&format!("training source model for {} iterations", cfg.source.iters));
    let model = pretrain_source(cfg, bench)?;
    if let Some(p) = cached {
        std::fs::create_dir_all(p.parent().expect("step dir"))?;
        save_checkpoint(&p, &model)?;
    }
    Ok(model)
}

/// Initialises and trains the source model exactly as a run would.
pub fn pretrain_source(cfg: &RunConfig, bench: &Benchmark) -> Result<SegmentationModel> {
    let mut model = SegmentationModel::init(cfg.arch.clone(), &mut stream(cfg.seed, &[0, 0x1417]))?;
    train_source(&mut model, &bench.source.train, &cfg.source, cfg.seed)?;
    Ok(model)
}
