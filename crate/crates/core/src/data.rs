//! Procedural street scenes and weather degradations.
//!
//! Scenes are layered geometric shapes with an exact label map. Weather
//! operators only touch pixel colours, never labels.

use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "road", "building", "vehicle", "vegetation"];

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const BUILDING: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const VEGETATION: u8 = 4;

/// An `H x W x 3` image in `[0, 1]` with an optional class map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Array3<f32>,
    pub label: Option<Array2<u8>>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub texture_noise: f32,
    /// Whole-image gain is drawn from `1 +- illumination_jitter`, with a
    /// third of that per channel.
    pub illumination_jitter: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            texture_noise: 0.04,
            illumination_jitter: 0.15,
        }
    }
}

type Rgb = [f32; 3];

fn jitter<R: Rng + ?Sized>(rng: &mut R, c: Rgb, amount: f32) -> Rgb {
    let mut out = c;
    for v in &mut out {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    out
}

struct Canvas {
    image: Array3<f32>,
    label: Array2<u8>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, class: u8, c: Rgb) {
        self.label[[y, x]] = class;
        for k in 0..3 {
            self.image[[y, x, k]] = c[k];
        }
    }
}

/// Draws one clear-weather scene.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<LabeledImage> {
    let (h, w) = (spec.height, spec.width);
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("scene {h}x{w} too small")));
    }
    let hf = h as f32;
    let wf = w as f32;
    let mut cv = Canvas {
        image: Array3::zeros((h, w, 3)),
        label: Array2::zeros((h, w)),
    };

    let horizon = (hf * rng.random_range(0.35..0.5)) as usize;
    let vanish_x = wf * rng.random_range(0.35..0.65);
    let road_half_bottom = wf * rng.random_range(0.3..0.45);

    // sky with vertical gradient
    let sky_top = jitter(rng, [0.35, 0.55, 0.9], 0.05);
    let sky_bot = jitter(rng, [0.7, 0.8, 0.95], 0.04);
    // grass verge below the horizon
    let grass = jitter(rng, [0.25, 0.5, 0.18], 0.05);
    let road = jitter(rng, [0.38, 0.38, 0.4], 0.04);
    for y in 0..h {
        let t = y as f32 / horizon.max(1) as f32;
        for x in 0..w {
            if y < horizon {
                let c = [0, 1, 2].map(|k| sky_top[k] * (1.0 - t) + sky_bot[k] * t);
                cv.put(y, x, SKY, c);
            } else {
                let depth = (y - horizon) as f32 / (hf - horizon as f32).max(1.0);
                let half = 1.0 + depth * road_half_bottom;
                if (x as f32 + 0.5 - vanish_x).abs() < half {
                    cv.put(y, x, ROAD, road);
                } else {
                    cv.put(y, x, VEGETATION, grass);
                }
            }
        }
    }
    // dashed centre line, still road
    for y in horizon..h {
        let depth = (y - horizon) as f32 / (hf - horizon as f32).max(1.0);
        if ((y as f32 * 0.25) as usize) % 2 == 0 && depth > 0.15 {
            let x = vanish_x as usize;
            if x < w {
                cv.put(y, x, ROAD, [0.85, 0.85, 0.8]);
            }
        }
    }

    // buildings standing on the horizon
    let n_buildings = rng.random_range(2..=4);
    for _ in 0..n_buildings {
        let bw = (wf * rng.random_range(0.12..0.28)).max(3.0) as usize;
        let left = rng.random_range(0..w.saturating_sub(bw).max(1));
        let top = (hf * rng.random_range(0.06..0.25)) as usize;
        let bottom = (horizon + (hf * 0.04) as usize).min(h);
        let base = if rng.random_bool(0.5) {
            jitter(rng, [0.6, 0.42, 0.32], 0.06)
        } else {
            jitter(rng, [0.52, 0.5, 0.5], 0.05)
        };
        let window = [base[0] * 0.45, base[1] * 0.45, base[2] * 0.5];
        let pitch = (wf / 21.0).max(3.0) as usize;
        for y in top..bottom {
            for x in left..(left + bw).min(w) {
                // keep the road surface visible in front of buildings
                if cv.label[[y, x]] == ROAD {
                    continue;
                }
                let wy = (y - top) % pitch;
                let wx = (x - left) % pitch;
                let c = if wy > 0 && wx > 0 && wy < pitch - 1 && wx < pitch - 1 && y + pitch < horizon {
                    window
                } else {
                    base
                };
                cv.put(y, x, BUILDING, c);
            }
        }
    }

    // tree crowns
    let n_trees = rng.random_range(2..=5);
    for _ in 0..n_trees {
        let r = hf * rng.random_range(0.05..0.11);
        let cx = if rng.random_bool(0.5) {
            rng.random_range(0.0..wf * 0.3)
        } else {
            rng.random_range(wf * 0.7..wf)
        };
        let cy = horizon as f32 - r * rng.random_range(0.2..0.9);
        let leaf = jitter(rng, [0.16, 0.42, 0.12], 0.05);
        let y0 = (cy - r).max(0.0) as usize;
        let y1 = ((cy + r) as usize + 1).min(h);
        let x0 = (cx - r).max(0.0) as usize;
        let x1 = ((cx + r) as usize + 1).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2)).sqrt();
                if d < r && cv.label[[y, x]] != ROAD {
                    cv.put(y, x, VEGETATION, leaf);
                }
            }
        }
    }

    // vehicles on the road, larger when nearer
    let n_vehicles = rng.random_range(1..=3);
    let palette: [Rgb; 4] = [[0.8, 0.12, 0.1], [0.12, 0.2, 0.75], [0.9, 0.75, 0.1], [0.15, 0.15, 0.15]];
    for _ in 0..n_vehicles {
        let depth = rng.random_range(0.3f32..0.9);
        let y_bottom = (horizon as f32 + depth * (hf - horizon as f32)) as usize;
        let half = 1.0 + depth * road_half_bottom;
        let vw = (half * rng.random_range(0.45..0.7)).max(2.0);
        let vh = (vw * rng.random_range(0.55..0.8)).max(2.0);
        let cx = vanish_x + rng.random_range(-0.5f32..0.5) * half;
        let base = palette[rng.random_range(0..palette.len())];
        let body = jitter(rng, base, 0.05);
        let glass = [0.2, 0.25, 0.3];
        let y0 = (y_bottom as f32 - vh).max(0.0) as usize;
        let x0 = (cx - vw / 2.0).max(0.0) as usize;
        let x1 = ((cx + vw / 2.0) as usize).min(w);
        for y in y0..y_bottom.min(h) {
            for x in x0..x1 {
                let rel = (y - y0) as f32 / vh;
                let c = if rel < 0.35 && x > x0 && x + 1 < x1 { glass } else { body };
                cv.put(y, x, VEHICLE, c);
            }
        }
    }

    let j = spec.illumination_jitter;
    if j > 0.0 {
        let gain = rng.random_range(1.0 - j..=1.0 + j);
        let tint: Vec<f32> = (0..3).map(|_| gain * rng.random_range(1.0 - j / 3.0..=1.0 + j / 3.0)).collect();
        for ((_, _, k), v) in cv.image.indexed_iter_mut() {
            *v = (*v * tint[k]).clamp(0.0, 1.0);
        }
    }

    // per-pixel texture noise
    if spec.texture_noise > 0.0 {
        let noise = Normal::new(0.0f32, spec.texture_noise).expect("valid std");
        for v in cv.image.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(LabeledImage {
        image: cv.image,
        label: Some(cv.label),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Night,
    Rain,
    Fog,
    Snow,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 4] = [WeatherKind::Night, WeatherKind::Rain, WeatherKind::Fog, WeatherKind::Snow];

    pub fn tag(&self) -> &'static str {
        match self {
            WeatherKind::Night => "night",
            WeatherKind::Rain => "rain",
            WeatherKind::Fog => "fog",
            WeatherKind::Snow => "snow",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        WeatherKind::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown weather kind {tag:?}")))
    }
}

/// Degradation parameters. Fog and rain share the airlight colour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherSpec {
    pub kind: WeatherKind,
    pub severity: f32,
    pub airlight: [f32; 3],
    /// Fog: optical depth at the far end of the depth proxy.
    pub fog_density: f32,
    pub night_gamma: f32,
    pub night_gain: f32,
    pub night_noise: f32,
    pub rain_streaks_per_kpx: f32,
    pub rain_angle: f32,
    pub rain_veil: f32,
    pub snow_flakes_per_kpx: f32,
    pub snow_desaturation: f32,
}

impl WeatherSpec {
    pub fn new(kind: WeatherKind, severity: f32) -> Self {
        WeatherSpec {
            kind,
            severity,
            airlight: [0.78, 0.8, 0.82],
            fog_density: 1.4,
            night_gamma: 1.3,
            night_gain: 0.6,
            night_noise: 0.02,
            rain_streaks_per_kpx: 6.0,
            rain_angle: 0.25,
            rain_veil: 0.5,
            snow_flakes_per_kpx: 30.0,
            snow_desaturation: 0.7,
        }
    }
}

fn luminance(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Blends every pixel toward the airlight with per-row transmission `t(y)`.
fn airlight_blend(img: &mut Array3<f32>, airlight: [f32; 3], transmission: impl Fn(usize) -> f32) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        let t = transmission(y);
        for x in 0..w {
            for k in 0..3 {
                let v = &mut img[[y, x, k]];
                *v = *v * t + airlight[k] * (1.0 - t);
            }
        }
    }
}

pub fn apply_weather<R: Rng + ?Sized>(image: ArrayView3<'_, f32>, spec: &WeatherSpec, rng: &mut R) -> Result<Array3<f32>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::invalid("weather expects an RGB image"));
    }
    if !(0.0..=1.0).contains(&spec.severity) {
        return Err(Error::invalid(format!("severity {} outside [0, 1]", spec.severity)));
    }
    let mut img = image.to_owned();
    let s = spec.severity;
    if s == 0.0 {
        return Ok(img);
    }
    match spec.kind {
        WeatherKind::Fog => {
            // depth proxy: 1 at the top row (far), 0 at the bottom (near)
            airlight_blend(&mut img, spec.airlight, |y| {
                let depth = 1.0 - y as f32 / (h - 1).max(1) as f32;
                (-s * spec.fog_density * (0.3 + 0.7 * depth)).exp()
            });
        }
        WeatherKind::Rain => {
            airlight_blend(&mut img, spec.airlight, |_| 1.0 - spec.rain_veil * s);
            for v in img.iter_mut() {
                *v *= 1.0 - 0.25 * s;
            }
            let n = (spec.rain_streaks_per_kpx * s * (h * w) as f32 / 1000.0).round() as usize;
            let len = (h as f32 * 0.12).max(3.0);
            for _ in 0..n {
                let y0 = rng.random_range(0.0..h as f32);
                let x0 = rng.random_range(0.0..w as f32);
                let steps = len as usize;
                for i in 0..steps {
                    let y = y0 + i as f32;
                    let x = x0 + i as f32 * spec.rain_angle;
                    if y < 0.0 || x < 0.0 || y >= h as f32 || x >= w as f32 {
                        break;
                    }
                    let (yy, xx) = (y as usize, x as usize);
                    for k in 0..3 {
                        let v = &mut img[[yy, xx, k]];
                        *v = *v * 0.5 + 0.45 * [0.85, 0.87, 0.92][k];
                    }
                }
            }
        }
        WeatherKind::Night => {
            let gamma = 1.0 + (spec.night_gamma - 1.0) * s;
            let gain = 1.0 - spec.night_gain * s;
            let noise = Normal::new(0.0f32, spec.night_noise * s).expect("valid std");
            for y in 0..h {
                for x in 0..w {
                    for k in 0..3 {
                        let tint = [0.85, 0.9, 1.1][k];
                        let v = &mut img[[y, x, k]];
                        *v = (v.powf(gamma) * gain * (1.0 - s + s * tint) + noise.sample(rng)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        WeatherKind::Snow => {
            let d = spec.snow_desaturation * s;
            for y in 0..h {
                for x in 0..w {
                    let p = [img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]];
                    let l = luminance(p);
                    for k in 0..3 {
                        let v = p[k] * (1.0 - d) + l * d;
                        img[[y, x, k]] = v * (1.0 - 0.3 * s) + 0.3 * s * 0.95;
                    }
                }
            }
            let n = (spec.snow_flakes_per_kpx * s * (h * w) as f32 / 1000.0).round() as usize;
            for _ in 0..n {
                let y = rng.random_range(0..h);
                let x = rng.random_range(0..w);
                let big = rng.random_bool(0.3);
                for (dy, dx) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
                    if !big && (dy, dx) != (0, 0) {
                        continue;
                    }
                    if y + dy < h && x + dx < w {
                        for k in 0..3 {
                            img[[y + dy, x + dx, k]] = 0.97;
                        }
                    }
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(img)
}

/// Rounds to the nearest 8-bit level so in-memory and on-disk images agree.
pub fn quantize(img: &mut Array3<f32>) {
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

pub fn mean_luminance(img: ArrayView3<'_, f32>) -> f64 {
    let (h, w, _) = img.dim();
    let mut s = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            s += luminance([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]) as f64;
        }
    }
    s / (h * w) as f64
}

pub fn pixel_std(img: ArrayView3<'_, f32>) -> f64 {
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    (img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64) -> LabeledImage {
        generate_scene(&SceneSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(scene(3), scene(3));
        assert_ne!(scene(3).image, scene(4).image);
    }

    #[test]
    fn labels_in_range_and_images_bounded() {
        for s in 0..10 {
            let sc = scene(s);
            assert!(sc.label.unwrap().iter().all(|&c| (c as usize) < NUM_CLASSES));
            assert!(sc.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_coverage_over_many_scenes() {
        let n = 100usize;
        let mut appear = [0usize; NUM_CLASSES];
        let mut distinct_total = 0usize;
        for s in 0..n as u64 {
            let l = scene(s).label.unwrap();
            let mut seen = [false; NUM_CLASSES];
            l.iter().for_each(|&c| seen[c as usize] = true);
            for c in 0..NUM_CLASSES {
                appear[c] += seen[c] as usize;
            }
            distinct_total += seen.iter().filter(|&&b| b).count();
        }
        for (c, &a) in appear.iter().enumerate() {
            assert!(a * 10 >= n * 6, "class {} appears in {a}/{n} scenes", CLASS_NAMES[c]);
        }
        assert!(distinct_total as f64 / n as f64 >= 3.0);
    }

    #[test]
    fn zero_severity_is_identity() {
        let sc = scene(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in WeatherKind::ALL {
            let out = apply_weather(sc.image.view(), &WeatherSpec::new(k, 0.0), &mut rng).unwrap();
            assert_eq!(out, sc.image);
        }
    }

    #[test]
    fn fog_pulls_toward_airlight_and_flattens_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sc = scene(2);
        let spec = |s| WeatherSpec::new(WeatherKind::Fog, s);
        let imgs: Vec<_> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&s| apply_weather(sc.image.view(), &spec(s), &mut rng).unwrap())
            .collect();
        let stds: Vec<f64> = imgs.iter().map(|i| pixel_std(i.view())).collect();
        assert!(stds[0] > stds[1] && stds[1] > stds[2], "{stds:?}");
        let air = spec(1.0).airlight;
        let dist = |i: &Array3<f32>| {
            (0..3)
                .map(|k| {
                    let m = i.index_axis(ndarray::Axis(2), k).mean().unwrap() as f64;
                    (m - air[k] as f64).abs()
                })
                .sum::<f64>()
        };
        assert!(dist(&imgs[2]) < dist(&imgs[1]) && dist(&imgs[1]) < dist(&imgs[0]));
    }

    #[test]
    fn night_darkens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..100 {
            let sc = scene(s);
            let night = apply_weather(sc.image.view(), &WeatherSpec::new(WeatherKind::Night, 1.0), &mut rng).unwrap();
            assert!(mean_luminance(night.view()) < 0.5 * mean_luminance(sc.image.view()));
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(WeatherKind::from_tag("hail").is_err());
        assert_eq!(WeatherKind::from_tag("fog").unwrap(), WeatherKind::Fog);
    }
}
