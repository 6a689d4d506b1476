//! PNG and prompt-file I/O, directory evaluation, and the point-count sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::backbone::{BoxPrompt, Point, PointLabel, PromptSet};
use crate::error::{shape_err, Error, Result};
use crate::heads::Task;
use crate::metrics::report::{score_pair, MetricReport};
use crate::metrics::{miou, Plane};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::{generate_sample, sample_prompts, PromptMode};
use crate::tensor::ops::bilinear_resize;
use crate::tensor::Tensor;

/// RGB image as `[3×H×W]` in [0, 1].
pub fn read_rgb<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::lit(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Grayscale image as `[1×H×W]` in [0, 1].
pub fn read_gray<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(vec![1, h, w], img.into_raw().into_iter().map(|v| T::lit(v as f64 / 255.0)).collect())
}

/// 8-bit grayscale PNG with value round(255·v), clamped to [0, 255].
pub fn write_gray<T: Scalar>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    let p = Plane::from_tensor(map)?;
    let bytes = p.data.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(p.w as u32, p.h as u32, bytes).expect("buffer matches dims");
    Ok(img.save_with_format(path, image::ImageFormat::Png)?)
}

pub fn write_rgb<T: Scalar>(path: impl AsRef<Path>, rgb: &Tensor<T>) -> Result<()> {
    let (c, h, w) = match rgb.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err!("expected [3,H,W], got {s:?}")),
    };
    if c != 3 {
        return Err(shape_err!("expected 3 channels, got {c}"));
    }
    let d = rgb.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| (255.0 * d[(ch * h + y as usize) * w + x as usize].as_f64()).round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    Ok(img.save_with_format(path, image::ImageFormat::Png)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    #[serde(default)]
    points: Vec<(f64, f64, String)>,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    coarse_mask: Option<PathBuf>,
}

/// Parses a prompt file:
/// `{"points": [[x, y, "fg"|"bg"], ...], "box": [x0, y0, x1, y1], "coarse_mask": "mask.png"}`.
/// All keys are optional but at least one prompt must be present. A relative
/// mask path is resolved against the prompt file's directory.
pub fn read_prompts<T: Scalar>(path: impl AsRef<Path>, height: usize, width: usize) -> Result<PromptSet<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_prompts(&text, base, height, width)
}

pub fn parse_prompts<T: Scalar>(text: &str, base: &Path, height: usize, width: usize) -> Result<PromptSet<T>> {
    let file: PromptFile = serde_json::from_str(text).map_err(|e| Error::Prompt(e.to_string()))?;
    let points = file
        .points
        .into_iter()
        .map(|(x, y, label)| {
            let label = match label.as_str() {
                "fg" => PointLabel::Fg,
                "bg" => PointLabel::Bg,
                other => return Err(Error::Prompt(format!("point label `{other}` is not \"fg\" or \"bg\""))),
            };
            Ok(Point { x, y, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let bbox = file.bbox.map(|[x0, y0, x1, y1]| BoxPrompt { x0, y0, x1, y1 });
    let coarse_mask = match file.coarse_mask {
        Some(p) => {
            let m = read_gray(base.join(p))?;
            if m.shape() != [1, height, width] {
                return Err(Error::Prompt(format!("coarse mask is {:?}, image is {height}x{width}", &m.shape()[1..])));
            }
            Some(m)
        }
        None => None,
    };
    let set = PromptSet { points, bbox, coarse_mask };
    set.validate(height, width).map_err(|e| Error::Prompt(e.to_string()))?;
    Ok(set)
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_owned(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Scores every PNG in `pred_dir` against the same-named PNG in `gt_dir`.
/// Unpaired names on either side are skipped with a warning.
pub fn evaluate_dirs(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>, task: Task) -> Result<MetricReport> {
    let preds = png_names(pred_dir.as_ref())?;
    let gts = png_names(gt_dir.as_ref())?;
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (name, p) in &preds {
        match gts.get(name) {
            Some(g) => {
                let pred = Plane::from_tensor(&read_gray::<f64>(p)?)?;
                let gt = Plane::from_tensor(&read_gray::<f64>(g)?)?;
                scores.push(score_pair(task, name, &pred, &gt)?);
            }
            None => {
                log::warn!("prediction `{name}` has no ground truth; skipped");
                skipped.push(name.clone());
            }
        }
    }
    for name in gts.keys().filter(|n| !preds.contains_key(*n)) {
        log::warn!("ground truth `{name}` has no prediction; skipped");
        skipped.push(name.clone());
    }
    MetricReport::new(task, scores, skipped)
}

/// Mean segmentation mIoU over `n_images` synthetic samples for each point
/// count in `ks`. Samples use seeds `seed..seed + n_images`.
pub fn sweep_points<T: Scalar>(model: &Model<T>, ks: &[usize], n_images: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    if n_images == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let s = model.config.image_size;
    let samples = (0..n_images as u64).map(|i| generate_sample::<T>(seed + i, s)).collect::<Result<Vec<_>>>()?;
    let encoded = samples
        .iter()
        .map(|x| model.encode(&x.image.reshape(&[1, 3, s, s])?))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(Error::Config("point counts must be at least 1".into()));
        }
        let mut total = 0.0;
        for (i, (sample, enc)) in samples.iter().zip(&encoded).enumerate() {
            let prompts = sample_prompts(&sample.mask, seed.wrapping_add(1000 + i as u64), PromptMode::Points { k })?;
            let mut cx = crate::params::Ctx::inference(&model.store);
            let out = model.forward(&mut cx, enc, &[prompts], &[Task::Seg], true)?;
            let seg = cx.g.value(out.seg.expect("requested")).reshape(&[1, model.config.head.target_resolution, model.config.head.target_resolution])?;
            let seg = if seg.shape()[1] == s { seg } else { bilinear_resize(&seg, s, s)? };
            total += miou(&Plane::from_tensor(&seg)?, &Plane::from_tensor(&sample.mask)?, 0.5)?;
        }
        rows.push((k, total / n_images as f64));
    }
    Ok(rows)
}
