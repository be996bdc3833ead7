//! Synthetic benchmark: labelled clear source scenes plus one unlabelled
//! training split and one labelled validation split per weather domain.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::Rng;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

use crate::data::{apply_weather, generate_scene, quantize, LabeledImage, SceneSpec, WeatherKind, WeatherSpec};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream, tag_id};

pub const SOURCE_TAG: &str = "source";
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes {
            source_train: 400,
            source_val: 100,
            target_train: 200,
            target_val: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub scene: SceneSpec,
    pub sizes: BenchmarkSizes,
    pub domains: Vec<WeatherKind>,
    /// Per-image severity is drawn uniformly from this range.
    pub severity_range: (f32, f32),
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 0,
            scene: SceneSpec::default(),
            sizes: BenchmarkSizes::default(),
            domains: WeatherKind::ALL.to_vec(),
            severity_range: (0.4, 0.8),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub tag: String,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source: DomainData,
    pub targets: Vec<DomainData>,
}

impl Benchmark {
    pub fn target(&self, tag: &str) -> Result<&DomainData> {
        self.targets
            .iter()
            .find(|d| d.tag == tag)
            .ok_or_else(|| Error::invalid(format!("benchmark has no target domain {tag:?}")))
    }

    pub fn image_size(&self) -> (usize, usize) {
        let img = &self.source.train.first().or(self.source.val.first()).expect("non-empty").image;
        (img.dim().0, img.dim().1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Seed of one generated image.
pub fn image_seed(base: u64, domain: &str, split: Split, index: usize) -> u64 {
    derive_seed(base, &[tag_id(domain), split.id(), index as u64])
}

fn make_image(spec: &BenchmarkSpec, domain: Option<WeatherKind>, seed: u64, keep_label: bool) -> Result<LabeledImage> {
    let mut rng = stream(seed, &[]);
    let mut scene = generate_scene(&spec.scene, &mut rng)?;
    if let Some(kind) = domain {
        let (lo, hi) = spec.severity_range;
        let severity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        scene.image = apply_weather(scene.image.view(), &WeatherSpec::new(kind, severity), &mut rng)?;
    }
    quantize(&mut scene.image);
    if !keep_label {
        scene.label = None;
    }
    Ok(scene)
}

fn make_split(spec: &BenchmarkSpec, domain: Option<WeatherKind>, split: Split, n: usize) -> Result<Vec<(u64, LabeledImage)>> {
    let tag = domain.map_or(SOURCE_TAG, |k| k.tag());
    let keep_label = domain.is_none() || split == Split::Val;
    (0..n)
        .map(|i| {
            let seed = image_seed(spec.seed, tag, split, i);
            Ok((seed, make_image(spec, domain, seed, keep_label)?))
        })
        .collect()
}

struct Generated {
    tag: String,
    domain: Option<WeatherKind>,
    train: Vec<(u64, LabeledImage)>,
    val: Vec<(u64, LabeledImage)>,
}

fn generate_all(spec: &BenchmarkSpec) -> Result<Vec<Generated>> {
    let mut out = Vec::new();
    let s = spec.sizes;
    if s.source_train == 0 || s.target_train == 0 || s.source_val == 0 || s.target_val == 0 {
        return Err(Error::invalid("every benchmark split needs at least one image"));
    }
    let mut seen = std::collections::BTreeSet::new();
    if !spec.domains.iter().all(|d| seen.insert(*d)) {
        return Err(Error::invalid("duplicate target domain"));
    }
    out.push(Generated {
        tag: SOURCE_TAG.into(),
        domain: None,
        train: make_split(spec, None, Split::Train, s.source_train)?,
        val: make_split(spec, None, Split::Val, s.source_val)?,
    });
    for &k in &spec.domains {
        out.push(Generated {
            tag: k.tag().into(),
            domain: Some(k),
            train: make_split(spec, Some(k), Split::Train, s.target_train)?,
            val: make_split(spec, Some(k), Split::Val, s.target_val)?,
        });
    }
    Ok(out)
}

/// Generates the benchmark in memory; identical pixels to what
/// [`build_benchmark`] writes to disk.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let mut all = generate_all(spec)?.into_iter().map(|g| DomainData {
        tag: g.tag,
        train: g.train.into_iter().map(|(_, i)| i).collect(),
        val: g.val.into_iter().map(|(_, i)| i).collect(),
    });
    let source = all.next().expect("source generated");
    Ok(Benchmark {
        source,
        targets: all.collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label_path: String,
    pub split: Split,
    pub domain: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Manifest { rows })
    }

    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.domain) {
                out.push(r.domain.clone());
            }
        }
        out
    }
}

fn to_rgb(img: &Array3<f32>) -> RgbImage {
    let (h, w, _) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k| (img[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    to_rgb(img).save(path)?;
    Ok(())
}

pub fn save_labels(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([labels[[y as usize, x as usize]]])).save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| {
        img.get_pixel(x as u32, y as u32)[k] as f32 / 255.0
    }))
}

pub fn load_labels(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

/// Writes the benchmark under `out_dir`. Generation happens in a temporary
/// sibling directory that is renamed into place only once complete.
pub fn build_benchmark(out_dir: &Path, spec: &BenchmarkSpec, force: bool) -> Result<Manifest> {
    if out_dir.exists() && !force {
        return Err(Error::invalid(format!(
            "{} already exists (pass --force to overwrite)",
            out_dir.display()
        )));
    }
    let parent = out_dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new().prefix(".seqweather-data-").tempdir_in(parent)?;
    let mut rows = Vec::new();
    for g in generate_all(spec)? {
        let _ = g.domain;
        for (split, items) in [(Split::Train, &g.train), (Split::Val, &g.val)] {
            let rel_dir = PathBuf::from(&g.tag).join(split.name());
            fs::create_dir_all(staging.path().join(&rel_dir))?;
            for (i, (seed, item)) in items.iter().enumerate() {
                let rel = rel_dir.join(format!("{i:04}.png"));
                save_rgb(&staging.path().join(&rel), &item.image)?;
                let label_path = match &item.label {
                    Some(l) => {
                        let rel_l = rel_dir.join(format!("{i:04}_label.png"));
                        save_labels(&staging.path().join(&rel_l), l)?;
                        rel_l.to_string_lossy().into_owned()
                    }
                    None => String::new(),
                };
                rows.push(ManifestRow {
                    path: rel.to_string_lossy().into_owned(),
                    label_path,
                    split,
                    domain: g.tag.clone(),
                    seed: *seed,
                });
            }
        }
    }
    let manifest = Manifest { rows };
    manifest.write(&staging.path().join(MANIFEST_NAME))?;
    fs::write(staging.path().join("benchmark.json"), serde_json::to_string_pretty(spec)?)?;
    if out_dir.exists() {
        fs::remove_dir_all(out_dir)?;
    }
    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, out_dir) {
        let _ = fs::remove_dir_all(&staged);
        return Err(e.into());
    }
    Ok(manifest)
}

/// Loads every split listed in a manifest. Domains keep manifest order.
pub fn load_benchmark(manifest_path: &Path) -> Result<Benchmark> {
    load_benchmark_for(manifest_path, None)
}

/// Loads the source domain plus the listed targets (all when `None`).
pub fn load_benchmark_for(manifest_path: &Path, targets: Option<&[String]>) -> Result<Benchmark> {
    let manifest = Manifest::read(manifest_path)?;
    let wanted = |tag: &str| tag == SOURCE_TAG || targets.is_none_or(|t| t.iter().any(|x| x == tag));
    if let Some(t) = targets {
        let listed = manifest.domains();
        if let Some(missing) = t.iter().find(|d| !listed.contains(d)) {
            return Err(Error::invalid(format!("manifest has no domain '{missing}'")));
        }
    }
    let mut domains: Vec<DomainData> = manifest
        .domains()
        .into_iter()
        .filter(|tag| wanted(tag))
        .map(|tag| DomainData {
            tag,
            train: Vec::new(),
            val: Vec::new(),
        })
        .collect();
    for r in manifest.rows.iter().filter(|r| wanted(&r.domain)) {
        let item = load_row(manifest_path, r)?;
        let d = domains.iter_mut().find(|d| d.tag == r.domain).expect("domain listed");
        match r.split {
            Split::Train => d.train.push(item),
            Split::Val => d.val.push(item),
        }
    }
    let pos = domains
        .iter()
        .position(|d| d.tag == SOURCE_TAG)
        .ok_or_else(|| Error::invalid("manifest lists no source domain"))?;
    let source = domains.remove(pos);
    Ok(Benchmark {
        source,
        targets: domains,
    })
}

fn load_row(manifest_path: &Path, r: &ManifestRow) -> Result<LabeledImage> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let image = load_rgb(&root.join(&r.path))?;
    let label = if r.label_path.is_empty() {
        None
    } else {
        Some(load_labels(&root.join(&r.label_path))?)
    };
    Ok(LabeledImage { image, label })
}

/// Images of one domain and split, in manifest order.
pub fn load_split(manifest_path: &Path, domain: &str, split: Split) -> Result<Vec<LabeledImage>> {
    let manifest = Manifest::read(manifest_path)?;
    let rows: Vec<&ManifestRow> = manifest.rows.iter().filter(|r| r.domain == domain && r.split == split).collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{domain} {split:?} split")));
    }
    rows.into_iter().map(|r| load_row(manifest_path, r)).collect()
}

/// SHA-256 of the manifest bytes; names the data a run was trained on.
pub fn manifest_digest(manifest_path: &Path) -> Result<String> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(std::fs::read(manifest_path)?)))
}
