use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqweather::config::{ablation_flags, flags_name, run_dir, RunConfig};
use seqweather::data::{SceneSpec, WeatherKind};
use seqweather::dataset::{
    build_benchmark, load_benchmark_for, load_split, manifest_digest, save_rgb, BenchmarkSizes, BenchmarkSpec, Split,
};
use seqweather::metrics::MetricMatrix;
use seqweather::replay::{replay_all, ComposeParams, WeatherVector};
use seqweather::report::{render_comparison, render_report, render_table, COMPARE_FILE};
use seqweather::seed::stream;
use seqweather::sequence::{read_snapshot, run_sequence, RunOptions, CONFIG_FILE, METRICS_FILE};
use seqweather::{Error, Result};

/// Continual adaptation of a segmentation model across adverse-weather domains.
#[derive(Parser)]
#[command(name = "seqweather", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark (clear source plus weather targets).
    GenerateData(GenerateArgs),
    /// Train the source model and adapt it to every target in turn.
    Run(RunArgs),
    /// Render tables, CSV and forgetting curves of finished runs.
    Report(ReportArgs),
    /// Write a side-by-side preview of weather composition replay.
    ComposePreview(PreviewArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing directory.
    #[arg(long)]
    force: bool,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = BenchmarkSizes::default().source_train)]
    source_train: usize,
    #[arg(long, default_value_t = BenchmarkSizes::default().source_val)]
    source_val: usize,
    #[arg(long, default_value_t = BenchmarkSizes::default().target_train)]
    target_train: usize,
    #[arg(long, default_value_t = BenchmarkSizes::default().target_val)]
    target_val: usize,
    /// Comma-separated weather kinds, in order.
    #[arg(long, value_delimiter = ',', default_value = "night,rain,fog,snow")]
    domains: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest (defaults to the one named in the config file).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flat-key override such as `adapt.iters=200`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// none|full, baseline, model, model+feature, model+feature+replay, blending.
    #[arg(long)]
    ablation: Option<String>,
    /// Adapt without source images; needs --init-checkpoint.
    #[arg(long)]
    without_source: bool,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: $SEQW_RUN_ROOT or ./runs, plus the config hash).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Require an existing run directory and continue it.
    #[arg(long)]
    resume: bool,
    /// Delete an existing run directory first.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to report on; the reference in comparisons.
    #[arg(long)]
    run: PathBuf,
    /// Further runs to compare against the first; repeatable.
    #[arg(long)]
    compare: Vec<PathBuf>,
    /// Output directory (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Domain of the image to compose onto.
    #[arg(long)]
    domain: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Stored weather vector file; repeatable.
    #[arg(long)]
    weather: Vec<PathBuf>,
    /// Build a weather vector from this domain's training images; repeatable.
    #[arg(long)]
    from_domain: Vec<String>,
    /// Images averaged per --from-domain vector.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "compose_preview.png")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::ComposePreview(a) => preview(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let domains = a
        .domains
        .iter()
        .map(|d| WeatherKind::from_tag(d))
        .collect::<Result<Vec<_>>>()?;
    let spec = BenchmarkSpec {
        seed: a.seed,
        scene: SceneSpec {
            height: a.size,
            width: a.size,
            ..SceneSpec::default()
        },
        sizes: BenchmarkSizes {
            source_train: a.source_train,
            source_val: a.source_val,
            target_train: a.target_train,
            target_val: a.target_val,
        },
        domains,
        ..BenchmarkSpec::default()
    };
    let manifest = build_benchmark(&a.out, &spec, a.force)?;
    println!(
        "wrote {} images for {} domains to {}",
        manifest.rows.len(),
        manifest.domains().len(),
        a.out.display()
    );
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(name) = &a.ablation {
        let with_source = cfg.flags.with_source;
        cfg.flags = ablation_flags(name)?;
        cfg.flags.with_source = with_source;
    }
    if a.without_source {
        cfg.flags.with_source = false;
    }
    if let Some(p) = &a.init_checkpoint {
        cfg.init_checkpoint = Some(p.clone());
    }
    if let Some(p) = &a.manifest {
        cfg.manifest = Some(p.clone());
    }
    cfg.with_overrides(&a.sets)
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no dataset manifest given (--manifest)".into()))?;
    let data_id = manifest_digest(&manifest)?;
    if !cfg.flags.with_source && cfg.init_checkpoint.is_none() {
        return Err(Error::Config("--without-source needs --init-checkpoint".into()));
    }
    let hash = seqweather::sequence::RunSnapshot::new(&cfg, &data_id)?.hash;
    let dir = run_dir(a.out.as_deref(), &hash);
    if a.resume && !dir.join(CONFIG_FILE).exists() {
        return Err(Error::MissingFile(dir.join(CONFIG_FILE)));
    }
    if a.force && dir.exists() {
        if !dir.join(CONFIG_FILE).exists() && dir.read_dir()?.next().is_some() {
            return Err(Error::invalid(format!(
                "refusing to delete {}: not a run directory",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    let bench = load_benchmark_for(&manifest, Some(&cfg.domains))?;
    let quiet = a.quiet;
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    let outcome = run_sequence(
        &cfg,
        &bench,
        RunOptions {
            out_dir: Some(dir.clone()),
            initial: None,
            data_id,
            progress: Some(&mut progress),
        },
    )?;
    print!("{}", render_table(&[(flags_name(&cfg.flags), &outcome.metrics)])?);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn load_run(dir: &Path) -> Result<(String, MetricMatrix)> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("no run directory at {}", dir.display())));
    }
    let snap = read_snapshot(dir)?;
    let m = MetricMatrix::load(&dir.join(METRICS_FILE))?;
    Ok((flags_name(&snap.config.flags), m))
}

fn report(a: ReportArgs) -> Result<()> {
    let (name, m) = load_run(&a.run)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let files = render_report(&m, &name, &out)?;
    if a.compare.is_empty() {
        print!("{}", std::fs::read_to_string(&files.table)?);
    } else {
        let mut runs = vec![(name, m)];
        for d in &a.compare {
            runs.push(load_run(d)?);
        }
        let named: Vec<(String, &MetricMatrix)> = runs.iter().map(|(n, m)| (n.clone(), m)).collect();
        let text = render_comparison(&named)?;
        std::fs::write(out.join(COMPARE_FILE), &text)?;
        print!("{text}");
    }
    Ok(())
}

fn preview(a: PreviewArgs) -> Result<()> {
    if a.weather.is_empty() && a.from_domain.is_empty() {
        return Err(Error::invalid("give at least one --weather file or --from-domain"));
    }
    let images = load_split(&a.manifest, &a.domain, Split::Train)?;
    let image = &images
        .get(a.index)
        .ok_or_else(|| Error::invalid(format!("{} has {} training images", a.domain, images.len())))?
        .image;
    let (h, w, c) = image.dim();
    let mut vectors = Vec::new();
    for p in &a.weather {
        vectors.push(WeatherVector::load(p)?);
    }
    for d in &a.from_domain {
        let mut wv = WeatherVector::empty(d.clone(), (h, w), c);
        for item in load_split(&a.manifest, d, Split::Train)?.iter().take(a.samples.max(1)) {
            wv.accumulate(item.image.view())?;
        }
        vectors.push(wv);
    }
    let mut rng = stream(a.seed, &[a.index as u64]);
    let composed = replay_all(image.view(), &vectors, &ComposeParams::default(), &mut rng)?;
    let mut side = ndarray::Array3::<f32>::ones((h, 2 * w + 4, c));
    side.slice_mut(ndarray::s![.., ..w, ..]).assign(image);
    side.slice_mut(ndarray::s![.., w + 4.., ..]).assign(&composed);
    save_rgb(&a.out, &side)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
