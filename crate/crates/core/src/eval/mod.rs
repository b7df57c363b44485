//! Heatmap decoding, normalized mean error and annotation ingestion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelParams};
use crate::tensor::Scalar;
use crate::train::{AffineDraw, Dataset, HeatmapBatch, Image, LandmarkSet};

mod annotations;

pub use annotations::{load_annotations, AnnotationFormat, AnnotationRecord, ATTRIBUTES};

/// Decoded landmarks of one heatmap stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub landmarks: LandmarkSet,
    /// Set where the heatmap was constant and the centre cell was returned.
    pub low_confidence: Vec<bool>,
}

/// Argmax per map (first maximum in row-major order), a quarter-cell shift
/// toward the larger neighbour on each axis, then scaling by the stride.
pub fn decode<T: Scalar>(batch: &HeatmapBatch<T>) -> Result<Vec<Decoded>> {
    let t = &batch.heatmaps;
    let [n, l, h, w] = t.shape();
    if !t.is_finite() {
        return Err(Error::Eval("heatmaps contain NaN or infinity".into()));
    }
    let stride = batch.stride as f64;
    let hw = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut points = Vec::with_capacity(l);
        let mut flags = Vec::with_capacity(l);
        for k in 0..l {
            let map = &t.data()[(b * l + k) * hw..][..hw];
            let mut best = 0;
            for (i, &v) in map.iter().enumerate() {
                if v > map[best] {
                    best = i;
                }
            }
            let flat = map.iter().all(|&v| v == map[0]);
            let (y, x) = if flat {
                ((h - 1) / 2, (w - 1) / 2)
            } else {
                (best / w, best % w)
            };
            let mut px = x as f64;
            let mut py = y as f64;
            if !flat {
                if x > 0 && x + 1 < w {
                    let (l, r) = (map[y * w + x - 1], map[y * w + x + 1]);
                    if r > l {
                        px += 0.25;
                    } else if l > r {
                        px -= 0.25;
                    }
                }
                if y > 0 && y + 1 < h {
                    let (u, d) = (map[(y - 1) * w + x], map[(y + 1) * w + x]);
                    if d > u {
                        py += 0.25;
                    } else if u > d {
                        py -= 0.25;
                    }
                }
            }
            points.push([px * stride, py * stride]);
            flags.push(flat);
        }
        out.push(Decoded {
            landmarks: LandmarkSet::new(points),
            low_confidence: flags,
        });
    }
    Ok(out)
}

/// Mean Euclidean error over landmarks divided by `‖truth[i] − truth[j]‖`.
pub fn nme(pred: &LandmarkSet, truth: &LandmarkSet, norm: (usize, usize)) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::Eval(format!(
            "prediction has {} landmarks, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let (i, j) = norm;
    if i >= truth.len() || j >= truth.len() {
        return Err(Error::Eval(format!(
            "normalization indices ({i}, {j}) out of range for {} landmarks",
            truth.len()
        )));
    }
    let (a, b) = (truth.points[i], truth.points[j]);
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    if !(d > 0.0) {
        return Err(Error::Eval("reference distance is zero".into()));
    }
    let err: f64 = pred
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .sum();
    Ok(err / truth.len() as f64 / d)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetNme {
    pub nme: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NmeResult {
    /// Mean over all evaluated samples.
    pub overall: f64,
    pub count: usize,
    /// Per-attribute subsets; a sample may belong to several.
    pub subsets: BTreeMap<String, SubsetNme>,
    /// Samples whose image could not be read or whose NME was undefined.
    pub skipped: usize,
    pub per_sample: Vec<f64>,
}

impl NmeResult {
    /// Aggregates per-sample values; `flags[k]` lists sample `k`'s attributes.
    pub fn from_samples(values: &[Option<f64>], flags: &[Vec<bool>], names: &[&str]) -> Self {
        let mut r = NmeResult::default();
        let mut sums = vec![0.0; names.len()];
        let mut counts = vec![0usize; names.len()];
        let mut total = 0.0;
        for (k, v) in values.iter().enumerate() {
            let Some(v) = v else {
                r.skipped += 1;
                continue;
            };
            total += v;
            r.count += 1;
            r.per_sample.push(*v);
            if let Some(f) = flags.get(k) {
                for (a, &on) in f.iter().enumerate().take(names.len()) {
                    if on {
                        sums[a] += v;
                        counts[a] += 1;
                    }
                }
            }
        }
        r.overall = if r.count > 0 { total / r.count as f64 } else { f64::NAN };
        for (a, name) in names.iter().enumerate() {
            if counts[a] > 0 {
                r.subsets.insert(
                    name.to_string(),
                    SubsetNme {
                        nme: sums[a] / counts[a] as f64,
                        count: counts[a],
                    },
                );
            }
        }
        r
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}  {:>9}  {:>7}", "subset", "NME", "count");
        let _ = writeln!(s, "{:<14}  {:>9.5}  {:>7}", "all", self.overall, self.count);
        for (k, v) in &self.subsets {
            let _ = writeln!(s, "{:<14}  {:>9.5}  {:>7}", k, v.nme, v.count);
        }
        if self.skipped > 0 {
            let _ = writeln!(s, "skipped: {}", self.skipped);
        }
        s
    }
}

/// Brings an image and its landmarks to `size`×`size` by direct resize.
pub fn resize_sample(image: &Image, lm: &LandmarkSet, size: usize) -> (Image, LandmarkSet) {
    if image.height == size && image.width == size {
        return (image.clone(), lm.clone());
    }
    AffineDraw::IDENTITY
        .apply(image, lm, size, None)
        .expect("identity transform never flips")
}

/// Predicted landmarks for each image, in the coordinates of `images`.
pub fn predict<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    images: &[&Image],
) -> Result<Vec<LandmarkSet>> {
    let size = model.config().input_size;
    const CHUNK: usize = 16;
    let chunks: Vec<Result<Vec<LandmarkSet>>> = images
        .par_chunks(CHUNK)
        .map(|chunk| {
            let resized: Vec<(Image, f64, f64)> = chunk
                .iter()
                .map(|img| {
                    let empty = LandmarkSet::new(vec![]);
                    let (r, _) = resize_sample(img, &empty, size);
                    (r, img.width as f64 / size as f64, img.height as f64 / size as f64)
                })
                .collect();
            let refs: Vec<&Image> = resized.iter().map(|r| &r.0).collect();
            let x = Image::batch::<T>(&refs)?;
            let hm = model.infer(params, &x)?;
            Ok(decode(&hm)?
                .into_iter()
                .zip(&resized)
                .map(|(d, (_, kx, ky))| {
                    d.landmarks
                        .map(|[x, y]| [(x + 0.5) * kx - 0.5, (y + 0.5) * ky - 0.5])
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// NME of `model` over an in-memory dataset, inter-ocular indices `norm`.
pub fn evaluate_dataset<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    data: &Dataset,
    norm: (usize, usize),
) -> Result<NmeResult> {
    let images: Vec<&Image> = data.samples.iter().map(|s| &s.image).collect();
    let preds = predict(model, params, &images)?;
    let values: Vec<Option<f64>> = preds
        .iter()
        .zip(&data.samples)
        .map(|(p, s)| nme(p, &s.landmarks, norm).ok())
        .collect();
    Ok(NmeResult::from_samples(&values, &[], &[]))
}

/// NME over annotation records whose images are read from disk. Unreadable
/// images are counted in `skipped`.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    records: &[AnnotationRecord],
    norm: (usize, usize),
    crop_to_bbox: bool,
) -> Result<NmeResult> {
    let landmarks = model.config().landmarks;
    if let Some(r) = records.iter().find(|r| r.landmarks.len() != landmarks) {
        return Err(Error::config(format!(
            "annotation for {} has {} landmarks but the model predicts {landmarks}",
            r.image.display(),
            r.landmarks.len()
        )));
    }
    let loaded: Vec<Option<(Image, LandmarkSet)>> = records
        .par_iter()
        .map(|r| match Image::load(&r.image) {
            Ok(img) => Some(match (crop_to_bbox, r.bbox) {
                (true, Some(b)) => crop(&img, &r.landmarks, b),
                _ => (img, r.landmarks.clone()),
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.image.display());
                None
            }
        })
        .collect();
    let ok: Vec<usize> = (0..loaded.len()).filter(|&i| loaded[i].is_some()).collect();
    let images: Vec<&Image> = ok.iter().map(|&i| &loaded[i].as_ref().unwrap().0).collect();
    let preds = predict(model, params, &images)?;
    let mut values = vec![None; records.len()];
    for (&i, p) in ok.iter().zip(&preds) {
        values[i] = nme(p, &loaded[i].as_ref().unwrap().1, norm).ok();
    }
    let flags: Vec<Vec<bool>> = records
        .iter()
        .map(|r| r.attributes.clone().unwrap_or_default())
        .collect();
    Ok(NmeResult::from_samples(&values, &flags, &ATTRIBUTES))
}

fn crop(img: &Image, lm: &LandmarkSet, bbox: [i64; 4]) -> (Image, LandmarkSet) {
    let x0 = bbox[0].clamp(0, img.width as i64 - 1) as usize;
    let y0 = bbox[1].clamp(0, img.height as i64 - 1) as usize;
    let x1 = (bbox[2].max(bbox[0] + 1) as usize).clamp(x0 + 1, img.width);
    let y1 = (bbox[3].max(bbox[1] + 1) as usize).clamp(y0 + 1, img.height);
    let (h, w) = (y1 - y0, x1 - x0);
    let mut out = Image::zeros(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = img.at(c, y0 + y, x0 + x);
            }
        }
    }
    (out, lm.map(|[x, y]| [x - x0 as f64, y - y0 as f64]))
}

/// Resolves an annotation image path relative to the annotation file.
pub(crate) fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
