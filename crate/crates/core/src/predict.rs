//! Inference on single pages: scored instances as JSON with RLE masks and a
//! colour overlay.

use std::fs;
use std::path::{Path, PathBuf};

use docseg_autograd::{Graph, ParamStore, Real};
use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, MASK_STRIDE};
use crate::queryselect::PrototypeBank;
use crate::rle::{self, Rle};
use crate::segbranch::{filter_instances, Detection};
use crate::synthdoc::load_rgb;

/// Backbone stride every input side must divide.
pub const INPUT_MULTIPLE: usize = 32;

/// Everything inference needs besides the image.
#[derive(Clone, Copy)]
pub struct Weights<'a, T: Real> {
    pub model: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
    pub bank: &'a PrototypeBank,
    pub tau: f64,
}

/// Instances kept for one image at the resolution the model ran on.
pub fn detect<T: Real>(w: Weights<'_, T>, image: &Array3<f32>, score_threshold: f64) -> Result<Vec<Detection>> {
    let g = Graph::inference(w.params);
    let out = forward(&g, w.model, image, w.bank, w.tau, None)?;
    Ok(filter_instances(out.final_prediction(), w.model.segmentation.mask_threshold, score_threshold, MASK_STRIDE))
}

/// Pads bottom and right with white up to a multiple of [`INPUT_MULTIPLE`].
pub fn pad_image(image: &Array3<f32>) -> Array3<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let up = |n: usize| n.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
    let mut out = Array3::from_elem((3, up(h), up(w)), 1.0f32);
    out.slice_mut(s![.., ..h, ..w]).assign(image);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedInstance {
    pub class_id: usize,
    pub class_name: String,
    pub score: f64,
    /// `[x0, y0, x1, y1]` in pixels of the original image.
    pub bbox: [f64; 4],
    pub segmentation: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub image: String,
    pub height: usize,
    pub width: usize,
    /// Size the model ran on after padding.
    pub padded_height: usize,
    pub padded_width: usize,
    pub instances: Vec<PredictedInstance>,
}

impl PredictionFile {
    /// Decoded masks in instance order.
    pub fn masks(&self) -> Result<Vec<Array2<bool>>> {
        self.instances.iter().map(|i| rle::decode(&i.segmentation)).collect()
    }
}

fn crop_detection(d: &Detection, h: usize, w: usize, class_names: &[String]) -> PredictedInstance {
    let (ph, pw) = d.mask.dim();
    let [x0, y0, x1, y1] = d.bbox.xyxy();
    let clampx = |v: f64| (v * pw as f64).clamp(0.0, w as f64);
    let clampy = |v: f64| (v * ph as f64).clamp(0.0, h as f64);
    let mask = d.mask.slice(s![..h, ..w]).to_owned();
    PredictedInstance {
        class_id: d.class_id,
        class_name: class_names.get(d.class_id).cloned().unwrap_or_else(|| format!("class{}", d.class_id)),
        score: d.score,
        bbox: [clampx(x0), clampy(y0), clampx(x1), clampy(y1)],
        segmentation: rle::encode(&mask),
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
];

/// Page with half-transparent class-coloured masks and box outlines.
pub fn render_overlay(image: &Array3<f32>, file: &PredictionFile) -> Result<RgbImage> {
    let (h, w) = (file.height, file.width);
    let mut out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    for (inst, mask) in file.instances.iter().zip(file.masks()?) {
        let colour = PALETTE[inst.class_id % PALETTE.len()];
        for ((y, x), &on) in mask.indexed_iter() {
            if on {
                let p = out.get_pixel_mut(x as u32, y as u32);
                for c in 0..3 {
                    p.0[c] = ((p.0[c] as u16 + colour[c] as u16) / 2) as u8;
                }
            }
        }
        let [x0, y0, x1, y1] = inst.bbox;
        let (x0, y0) = (x0.floor() as usize, y0.floor() as usize);
        let (x1, y1) = ((x1.ceil() as usize).min(w).max(x0 + 1) - 1, (y1.ceil() as usize).min(h).max(y0 + 1) - 1);
        if x0 >= w || y0 >= h {
            continue;
        }
        for x in x0..=x1 {
            out.put_pixel(x as u32, y0 as u32, Rgb(colour));
            out.put_pixel(x as u32, y1 as u32, Rgb(colour));
        }
        for y in y0..=y1 {
            out.put_pixel(x0 as u32, y as u32, Rgb(colour));
            out.put_pixel(x1 as u32, y as u32, Rgb(colour));
        }
    }
    Ok(out)
}

/// Scored instances of one page, cropped back to its original size.
pub fn predict_image<T: Real>(
    weights: Weights<'_, T>,
    image: &Array3<f32>,
    image_name: &str,
    class_names: &[String],
    score_threshold: f64,
) -> Result<PredictionFile> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let padded = pad_image(image);
    let dets = detect(weights, &padded, score_threshold)?;
    Ok(PredictionFile {
        image: image_name.to_string(),
        height: h,
        width: w,
        padded_height: padded.shape()[1],
        padded_width: padded.shape()[2],
        instances: dets.iter().map(|d| crop_detection(d, h, w, class_names)).collect(),
    })
}

/// Paths written by [`predict`].
#[derive(Clone, Debug)]
pub struct PredictOutput {
    pub json: PathBuf,
    pub overlay: PathBuf,
    pub file: PredictionFile,
}

/// Loads a checkpoint and an image, writes `<stem>.json` and `<stem>_overlay.png` into `out_dir`.
pub fn predict(ckpt: &Path, image_path: &Path, out_dir: &Path, score_threshold: f64) -> Result<PredictOutput> {
    let ck = Checkpoint::<f64>::load(ckpt)?;
    let image = load_rgb(image_path)?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let model = ck.config.model();
    let weights = Weights { model: &model, params: &ck.params, bank: &ck.bank, tau: ck.config.tau() };
    let file = predict_image(
        weights,
        &image,
        &image_path.to_string_lossy(),
        &ck.config.synth.class_names(),
        score_threshold,
    )?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&file).expect("prediction serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let overlay = out_dir.join(format!("{stem}_overlay.png"));
    render_overlay(&image, &file)?
        .save(&overlay)
        .map_err(|e| Error::format(&overlay, e.to_string()))?;
    Ok(PredictOutput { json, overlay, file })
}

/// Reads a prediction file written by [`predict`].
pub fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
