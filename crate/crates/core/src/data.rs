//! Synthetic colored-shapes dataset, ragged batching and on-disk layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json             {"format_version": 1, "num_samples", "height", "width",
//!                            "num_classes", "stems": [...], "config": {...} | null}
//! <stem>_image.png          8-bit RGB; value = byte / 127.5 − 1
//! <stem>_mask.png           16-bit gray semantic labels 1..L^m
//! <stem>_inst.png           16-bit gray instance labels 1..L^p
//! <stem>_labels.json        label record (dims, counts, instance→class table)
//! <stem>_style.json         {"format_version": 1, "hues": [...]} one hue per instance
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inade::{sample_noise_bank, NoiseBank};
use crate::label_maps::{
    image_err, load_label_pair, save_label_pair, validate_pair, InstanceMap, LabelGrid, LabelPair,
    SemanticMask,
};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Hue law and fixed saturation/value of one class. Hues live in [0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub hue_mean: f64,
    /// Hues are uniform on `hue_mean ± hue_spread`.
    pub hue_spread: f64,
    pub saturation: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub height: usize,
    pub width: usize,
    /// Background plus shape kinds (disk, square, triangle, cycling).
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    /// Smallest visible area a shape may keep after occlusion.
    pub min_visible: usize,
    /// One entry per class, background first.
    pub styles: Vec<ClassStyle>,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        let style = |hue_mean, saturation, value| ClassStyle {
            hue_mean,
            hue_spread: 0.08,
            saturation,
            value,
        };
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 8,
            max_radius: 16,
            min_visible: 16,
            styles: vec![
                style(0.60, 0.25, 0.35),
                style(0.00, 0.85, 0.90),
                style(0.33, 0.85, 0.90),
                style(0.15, 0.85, 0.90),
            ],
            num_samples: 2000,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.num_classes < 2 {
            return bad("need a background class and at least one shape class");
        }
        if self.styles.len() != self.num_classes {
            return bad("one style per class is required");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad("shape count range must satisfy 1 ≤ min ≤ max");
        }
        if self.min_radius == 0 || self.min_radius > self.max_radius {
            return bad("radius range must satisfy 1 ≤ min ≤ max");
        }
        if 2 * self.max_radius >= self.height.min(self.width) {
            return bad("shapes must fit inside the image");
        }
        if self.num_samples == 0 {
            return bad("num_samples must be positive");
        }
        for s in &self.styles {
            let ok = |v: f64| (0.0..=1.0).contains(&v);
            if !ok(s.saturation) || !ok(s.value) || !(0.0..0.5).contains(&s.hue_spread) {
                return bad("style saturation/value must lie in [0, 1] and spread in [0, 0.5)");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W in [−1, 1], quantized to the 8-bit grid.
    pub image: Tensor,
    pub pair: LabelPair,
    /// Hue of every instance (background first).
    pub hues: Vec<f64>,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rounds a [−1, 1] value to the nearest 8-bit code.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Disk,
    Square,
    Triangle,
}

fn covers(kind: Kind, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    match kind {
        Kind::Disk => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        Kind::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
        Kind::Triangle => {
            let top = cy - r;
            if y < top || y > cy + r {
                return false;
            }
            (x - cx).abs() <= (y - top) / 2.0
        }
    }
}

fn draw_hue<R: Rng + ?Sized>(s: &ClassStyle, rng: &mut R) -> f64 {
    (s.hue_mean + rng.random_range(-1.0..=1.0) * s.hue_spread).rem_euclid(1.0)
}

fn generate_one(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    for _ in 0..1000 {
        let k = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        let mut inst = vec![1u32; h * w];
        let mut classes = vec![1u32];
        for label in 2..=(k as u32 + 1) {
            let class = rng.random_range(2..=cfg.num_classes as u32);
            let kind = [Kind::Disk, Kind::Square, Kind::Triangle][(class as usize - 2) % 3];
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius) as f64;
            let cx = rng.random_range(r..=w as f64 - r);
            let cy = rng.random_range(r..=h as f64 - r);
            for y in 0..h {
                for x in 0..w {
                    if covers(kind, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                        inst[y * w + x] = label;
                    }
                }
            }
            classes.push(class);
        }
        let mut area = vec![0usize; k + 1];
        for &l in &inst {
            area[l as usize - 1] += 1;
        }
        if area.iter().any(|&a| a < cfg.min_visible) {
            continue;
        }
        let hues: Vec<f64> = classes
            .iter()
            .map(|&c| draw_hue(&cfg.styles[c as usize - 1], rng))
            .collect();
        let colors: Vec<[f64; 3]> = classes
            .iter()
            .zip(&hues)
            .map(|(&c, &hue)| {
                let s = &cfg.styles[c as usize - 1];
                hsv_to_rgb(hue, s.saturation, s.value).map(|v| from_byte(to_byte(2.0 * v - 1.0)))
            })
            .collect();
        let image = Tensor::from_fn(&[3, h, w], |i| colors[inst[i % (h * w)] as usize - 1][i / (h * w)]);
        let mask: Vec<u32> = inst.iter().map(|&l| classes[l as usize - 1]).collect();
        let pair = validate_pair(
            SemanticMask::new(LabelGrid::new(h, w, mask)?, cfg.num_classes as u32)?,
            InstanceMap::new(LabelGrid::new(h, w, inst)?, k as u32 + 1)?,
        )?;
        return Ok(Sample { image, pair, hues });
    }
    Err(Error::config(
        "could not place non-degenerate shapes; lower min_visible or the radius range",
    ))
}

/// Sample `i` uses ChaCha8 stream `i` of the configured seed, so samples
/// can be produced independently and in any order.
pub fn generate_sample(cfg: &ShapesConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    generate_one(cfg, &mut rng)
}

pub fn generate_shapes(cfg: &ShapesConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.num_samples as u64).map(|i| generate_sample(cfg, i)).collect()
}

/// Stacked images with per-element label pairs (instance counts may
/// differ across the batch).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub pairs: Vec<LabelPair>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One fresh bank per element, drawn in batch order.
    pub fn sample_banks<R: Rng + ?Sized>(&self, noise_channels: usize, rng: &mut R) -> Result<Vec<NoiseBank>> {
        self.pairs
            .iter()
            .map(|p| sample_noise_bank(p.num_instances() as usize, noise_channels, rng))
            .collect()
    }
}

pub fn collate(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
    let dims = first.pair.dims();
    if let Some(s) = samples.iter().find(|s| s.pair.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: s.pair.dims(),
        });
    }
    let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    Ok(Batch {
        images,
        pairs: samples.iter().map(|s| s.pair.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub stems: Vec<String>,
    pub config: Option<ShapesConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleRecord {
    format_version: u32,
    hues: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

pub fn stem(i: usize) -> String {
    format!("{i:06}")
}

fn image_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}_image.png"))
}

fn style_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}_style.json"))
}

/// Writes an image in [−1, 1] as 8-bit RGB PNG.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("expected a 3×H×W image"));
    }
    let (_, h, w) = image.dims3();
    let hw = h * w;
    let mut raw = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            raw.push(to_byte(image.data()[c * hw + p]));
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageRgb8(b) => b,
        other => {
            return Err(Error::schema(
                path,
                format!("expected 8-bit RGB, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let hw = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| from_byte(raw[(i % hw) * 3 + i / hw])))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable record");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
}

pub fn save_dataset(dir: &Path, samples: &[Sample], config: Option<&ShapesConfig>) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::config("cannot save an empty dataset"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (height, width) = first.pair.dims();
    let mut stems = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let st = stem(i);
        save_image(&s.image, &image_path(dir, &st))?;
        save_label_pair(&s.pair, dir, &st)?;
        write_json(
            &style_path(dir, &st),
            &StyleRecord {
                format_version: DATASET_FORMAT_VERSION,
                hues: s.hues.clone(),
            },
        )?;
        stems.push(st);
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        num_samples: samples.len(),
        height,
        width,
        num_classes: first.pair.num_classes() as usize,
        stems,
        config: config.cloned(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    // check the version before the full schema so a bump reads as such
    let raw: serde_json::Value = read_json(&path)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(DATASET_FORMAT_VERSION as u64) {
        return Err(Error::schema(
            &path,
            format!("format_version {version:?} (expected {DATASET_FORMAT_VERSION})"),
        ));
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::schema(&path, e.to_string()))?;
    if m.stems.len() != m.num_samples {
        return Err(Error::schema(&path, "stem list length differs from num_samples"));
    }
    Ok(m)
}

pub fn load_sample(dir: &Path, manifest: &Manifest, stem: &str) -> Result<Sample> {
    let image = load_image(&image_path(dir, stem))?;
    let pair = load_label_pair(dir, stem)?;
    let sp = style_path(dir, stem);
    let style: StyleRecord = read_json(&sp)?;
    if style.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::schema(&sp, "style record version"));
    }
    if pair.dims() != (manifest.height, manifest.width) || image.shape()[1..] != [manifest.height, manifest.width] {
        return Err(Error::schema(dir.join(MANIFEST), format!("sample {stem} has the wrong size")));
    }
    if pair.num_classes() as usize != manifest.num_classes {
        return Err(Error::schema(dir.join(MANIFEST), format!("sample {stem} has the wrong class count")));
    }
    if style.hues.len() != pair.num_instances() as usize {
        return Err(Error::schema(&sp, "one hue per instance expected"));
    }
    Ok(Sample {
        image,
        pair,
        hues: style.hues,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let samples = manifest
        .stems
        .iter()
        .map(|s| load_sample(dir, &manifest, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}
