//! Synthetic document pages: textured rectangles standing in for text
//! blocks, titles, tables, figures and lists, each with an exact mask.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: &str = "docseg-synth/1";
pub const DEFAULT_CLASSES: [&str; 5] = ["text", "title", "table", "figure", "list"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square page side in pixels; a multiple of 32.
    pub image_size: usize,
    pub num_classes: usize,
    pub max_instances: usize,
    /// Largest IoU allowed between two placed instances.
    pub max_overlap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            num_classes: 5,
            max_instances: 6,
            max_overlap: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of 32",
                self.image_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.max_instances == 0 {
            return Err(Error::Config("max_instances must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(Error::Config("max_overlap must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| match DEFAULT_CLASSES.get(c) {
                Some(n) => n.to_string(),
                None => format!("class{c}"),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Solid,
    /// Horizontal "text lines".
    Striped,
    /// Table ruling.
    Grid,
}

impl Style {
    pub fn for_class(class_id: usize) -> Style {
        match class_id % 5 {
            0 | 4 => Style::Striped,
            2 => Style::Grid,
            _ => Style::Solid,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub bbox: BBox,
    /// `[H, W]`, true inside the instance.
    pub mask: Array2<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSample {
    /// `[3, H, W]` in `[0, 1]`, quantized to multiples of 1/255.
    pub image: Array3<f32>,
    pub instances: Vec<Instance>,
    pub sample_id: u64,
}

impl LayoutSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Pixel span `[lo, hi)` covered by the normalized interval `[a, b]`.
fn pixel_span(a: f64, b: f64, n: usize) -> (usize, usize) {
    let lo = (a * n as f64).round().clamp(0.0, n as f64) as usize;
    let hi = (b * n as f64).round().clamp(0.0, n as f64) as usize;
    (lo, hi)
}

/// Binary mask of `bbox` on an `(h, w)` grid.
///
/// Every style covers the whole rectangle: stripes and ruling are textures
/// painted inside the region, not holes in it.
pub fn rasterize_instance(bbox: &BBox, image_size: (usize, usize), _style: Style) -> Result<Array2<bool>> {
    let (h, w) = image_size;
    let [x0, y0, x1, y1] = bbox.xyxy();
    let inside = |v: f64| (-1e-9..=1.0 + 1e-9).contains(&v);
    if ![bbox.cx, bbox.cy, bbox.w, bbox.h].into_iter().all(inside) || !inside(x0) || !inside(x1) || !inside(y0) || !inside(y1) {
        return Err(Error::Input(format!("box {bbox:?} leaves the unit square")));
    }
    if bbox.w * (w as f64) < 2.0 || bbox.h * (h as f64) < 2.0 {
        return Err(Error::Input(format!("box {bbox:?} is below two pixels on {h}x{w}")));
    }
    let (c0, c1) = pixel_span(x0, x1, w);
    let (r0, r1) = pixel_span(y0, y1, h);
    let mut mask = Array2::from_elem((h, w), false);
    mask.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(true);
    Ok(mask)
}

struct Placement {
    class_id: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Placement {
    fn bbox(&self, n: usize) -> BBox {
        let n = n as f64;
        BBox::from_xyxy(
            self.x0 as f64 / n,
            self.y0 as f64 / n,
            self.x1 as f64 / n,
            self.y1 as f64 / n,
        )
    }
}

/// Height range as a fraction of the page, by class role.
fn height_range(class_id: usize) -> (f64, f64) {
    match class_id % 5 {
        1 => (0.06, 0.12),
        2 | 3 => (0.18, 0.4),
        _ => (0.12, 0.3),
    }
}

fn class_colour(class_id: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 5] = [
        [70, 70, 70],
        [30, 40, 140],
        [20, 20, 20],
        [40, 140, 90],
        [120, 50, 40],
    ];
    let c = BASE[class_id % 5];
    // classes past the first five get shifted hues
    let k = (class_id / 5) as u8;
    [c[0].wrapping_add(k * 53), c[1].wrapping_add(k * 97), c[2].wrapping_add(k * 31)]
}

fn fill_colour(class_id: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 5] = [
        [225, 225, 215],
        [200, 210, 240],
        [245, 235, 180],
        [170, 215, 190],
        [235, 215, 205],
    ];
    let c = BASE[class_id % 5];
    let k = (class_id / 5) as u8;
    [c[0].wrapping_sub(k * 17), c[1].wrapping_sub(k * 29), c[2].wrapping_sub(k * 11)]
}

fn paint(img: &mut Array3<u8>, p: &Placement, rng: &mut ChaCha8Rng) {
    let ink = class_colour(p.class_id);
    let fill = fill_colour(p.class_id);
    let style = Style::for_class(p.class_id);
    let bullet = p.class_id % 5 == 4;
    for y in p.y0..p.y1 {
        for x in p.x0..p.x1 {
            let (dy, dx) = (y - p.y0, x - p.x0);
            let on = match style {
                Style::Solid => {
                    if p.class_id % 5 == 3 {
                        // figures get a soft diagonal gradient
                        (dx + dy) % 16 < 12
                    } else {
                        true
                    }
                }
                Style::Striped => {
                    let line = dy % 6 < 3;
                    if bullet {
                        line && !(4..8).contains(&dx)
                    } else {
                        line
                    }
                }
                Style::Grid => dy % 8 == 0 || dx % 8 == 0 || dy + 1 == p.y1 - p.y0 || dx + 1 == p.x1 - p.x0,
            };
            let c = if on { ink } else { fill };
            let jitter: i16 = rng.random_range(-6..=6);
            for ch in 0..3 {
                img[[ch, y, x]] = (c[ch] as i16 + jitter).clamp(0, 255) as u8;
            }
        }
    }
}

/// Deterministic page for `(seed, cfg)`.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<LayoutSample> {
    cfg.validate()?;
    let n = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=cfg.max_instances);
    let offset = rng.random_range(0..cfg.num_classes);
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    for k in 0..count {
        let class_id = (offset + k) % cfg.num_classes;
        let (hlo, hhi) = height_range(class_id);
        for _ in 0..64 {
            let wp = ((rng.random_range(0.2..0.6) * n as f64) as usize).max(8);
            let hp = ((rng.random_range(hlo..hhi) * n as f64) as usize).max(8);
            let x0 = rng.random_range(0..=n - wp);
            let y0 = rng.random_range(0..=n - hp);
            let cand = Placement {
                class_id,
                x0,
                y0,
                x1: x0 + wp,
                y1: y0 + hp,
            };
            let b = cand.bbox(n);
            if placed.iter().all(|p| p.bbox(n).iou(&b) <= cfg.max_overlap) {
                placed.push(cand);
                break;
            }
        }
    }

    let mut img = Array3::<u8>::zeros((3, n, n));
    for ((_, y, x), v) in img.indexed_iter_mut() {
        // paper-white background with faint horizontal fibres
        *v = if (y * 7 + x / 13) % 29 == 0 { 236 } else { 246 };
    }
    for p in &placed {
        paint(&mut img, p, &mut rng);
    }
    let instances = placed
        .iter()
        .map(|p| {
            let bbox = p.bbox(n);
            let mut mask = Array2::from_elem((n, n), false);
            mask.slice_mut(ndarray::s![p.y0..p.y1, p.x0..p.x1]).fill(true);
            Instance {
                class_id: p.class_id,
                bbox,
                mask,
            }
        })
        .collect();
    Ok(LayoutSample {
        image: img.mapv(|v| v as f32 / 255.0),
        instances,
        sample_id: seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    /// `[cx, cy, w, h]`, normalized.
    pub bbox: [f64; 4],
    pub mask_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: u64,
    pub image_path: String,
    pub height: usize,
    pub width: usize,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub categories: Vec<Category>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    fn validate(&self, path: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("manifest version `{}`, expected `{MANIFEST_VERSION}`", self.version),
            ));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::format(path, format!("category ids are not dense from 0 (found {} at {i})", c.id)));
            }
        }
        for s in &self.samples {
            for a in &s.annotations {
                if a.class_id >= self.categories.len() {
                    return Err(Error::format(
                        path,
                        format!("sample {} references unknown category {}", s.sample_id, a.class_id),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

fn image_to_png(image: &Array3<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn png_to_image(png: &RgbImage) -> Array3<f32> {
    let (w, h) = png.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        png.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

pub fn save_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    image_to_png(image)
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    Ok(png_to_image(&img.to_rgb8()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `images/*.png` and `masks/<sample>_<k>.png`.
pub fn write_dataset(samples: &[LayoutSample], class_names: &[String], dir: &Path) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::Input("refusing to write an empty dataset".into()));
    }
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_path = format!("images/{:06}.png", s.sample_id);
        save_rgb(&dir.join(&image_path), &s.image)?;
        let mut annotations = Vec::with_capacity(s.instances.len());
        for (k, inst) in s.instances.iter().enumerate() {
            if inst.class_id >= class_names.len() {
                return Err(Error::Input(format!("class {} has no category name", inst.class_id)));
            }
            let mask_path = format!("masks/{:06}_{k}.png", s.sample_id);
            let (h, w) = inst.mask.dim();
            let png = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([if inst.mask[[y as usize, x as usize]] { 255 } else { 0 }])
            });
            let p = dir.join(&mask_path);
            png.save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
            annotations.push(Annotation {
                class_id: inst.class_id,
                bbox: inst.bbox.to_array(),
                mask_path,
            });
        }
        entries.push(SampleEntry {
            sample_id: s.sample_id,
            image_path,
            height: s.height(),
            width: s.width(),
            annotations,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        categories: class_names
            .iter()
            .enumerate()
            .map(|(id, name)| Category { id, name: name.clone() })
            .collect(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate(&path)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LayoutSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = load_rgb(&dir.join(&entry.image_path))?;
        if image.shape()[1..] != [entry.height, entry.width] {
            return Err(Error::format(
                dir.join(&entry.image_path),
                format!("image is {:?}, manifest says {}x{}", &image.shape()[1..], entry.height, entry.width),
            ));
        }
        let mut instances = Vec::with_capacity(entry.annotations.len());
        for a in &entry.annotations {
            let p: PathBuf = dir.join(&a.mask_path);
            let png = image::open(&p)
                .map_err(|e| Error::format(&p, e.to_string()))?
                .to_luma8();
            if png.dimensions() != (entry.width as u32, entry.height as u32) {
                return Err(Error::format(&p, "mask size differs from its image"));
            }
            let mask = Array2::from_shape_fn((entry.height, entry.width), |(y, x)| {
                png.get_pixel(x as u32, y as u32).0[0] > 127
            });
            instances.push(Instance {
                class_id: a.class_id,
                bbox: BBox::from_slice(&a.bbox),
                mask,
            });
        }
        samples.push(LayoutSample {
            image,
            instances,
            sample_id: entry.sample_id,
        });
    }
    Ok((manifest, samples))
}

/// Generates `n` pages with seeds `seed, seed + 1, ...`.
pub fn generate_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<LayoutSample>> {
    (0..n as u64).map(|i| generate_sample(seed + i, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::tight_box;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(7, &cfg).unwrap(), generate_sample(7, &cfg).unwrap());
        assert_ne!(generate_sample(7, &cfg).unwrap(), generate_sample(8, &cfg).unwrap());
    }

    #[test]
    fn single_instance_mask_matches_box() {
        let cfg = SynthConfig {
            max_instances: 1,
            ..Default::default()
        };
        for seed in 0..10 {
            let s = generate_sample(seed, &cfg).unwrap();
            assert_eq!(s.instances.len(), 1);
            let inst = &s.instances[0];
            assert_eq!(tight_box(inst.mask.view(), |v| v), Some(inst.bbox));
        }
    }

    #[test]
    fn samples_respect_their_invariants() {
        let cfg = SynthConfig::default();
        for seed in 0..30 {
            let s = generate_sample(seed, &cfg).unwrap();
            assert!((1..=cfg.max_instances).contains(&s.instances.len()));
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (i, a) in s.instances.iter().enumerate() {
                assert!(a.mask.iter().any(|&m| m));
                let t = tight_box(a.mask.view(), |v| v).unwrap();
                assert!(t.max_edge_error_px(&a.bbox, 256, 256) <= 1.0);
                assert!(a.bbox.w > 0.0 && a.bbox.w <= 1.0 && a.bbox.h > 0.0 && a.bbox.h <= 1.0);
                for b in &s.instances[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= cfg.max_overlap);
                }
            }
        }
    }

    #[test]
    fn class_histogram_is_near_uniform() {
        let cfg = SynthConfig::default();
        let mut counts = [0usize; 5];
        for seed in 0..100 {
            for inst in generate_sample(seed, &cfg).unwrap().instances {
                counts[inst.class_id] += 1;
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / 5.0;
        for c in counts {
            assert!((c as f64 - mean).abs() <= 0.2 * mean, "{counts:?}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { image_size: 100, ..Default::default() },
            SynthConfig { num_classes: 0, ..Default::default() },
            SynthConfig { max_instances: 0, ..Default::default() },
        ] {
            assert!(matches!(generate_sample(0, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn rasterize_full_and_centred_boxes() {
        let full = rasterize_instance(&BBox::FULL, (32, 32), Style::Solid).unwrap();
        assert!(full.iter().all(|&v| v));
        let m = rasterize_instance(&BBox::new(0.5, 0.5, 0.5, 0.5), (64, 64), Style::Solid).unwrap();
        let mut expected = Array2::from_elem((64, 64), false);
        expected.slice_mut(ndarray::s![16..48, 16..48]).fill(true);
        assert_eq!(m, expected);
        assert!(rasterize_instance(&BBox::new(0.5, 0.5, 0.01, 0.5), (64, 64), Style::Grid).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let cfg = SynthConfig { image_size: 64, ..Default::default() };
        let samples = generate_dataset(10, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = write_dataset(&samples, &cfg.class_names(), dir.path()).unwrap();
        let (manifest, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back, samples);
    }

    #[test]
    fn unknown_category_and_empty_writes_are_rejected() {
        let cfg = SynthConfig { image_size: 64, ..Default::default() };
        let samples = generate_dataset(2, 0, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &cfg.class_names(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.samples[0].annotations[0].class_id = 42;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
        assert!(write_dataset(&[], &cfg.class_names(), dir.path()).is_err());
    }
}
